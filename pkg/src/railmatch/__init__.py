"""Rail cross-section profile matching: synthetic data, classical and neural
translation estimators, wear measurement and evaluation."""

from .classical import IcpConfig, MatchResult, RansacConfig, icp_translate, ransac_translate
from .geometry import Displacement, Profile, ProfileKind, WearReport, compute_wear, read_profile, write_profile
from .synthetic import GenConfig, generate_dataset, load_manifest

__all__ = [
    "Displacement",
    "GenConfig",
    "IcpConfig",
    "MatchResult",
    "Profile",
    "ProfileKind",
    "RansacConfig",
    "WearReport",
    "compute_wear",
    "generate_dataset",
    "icp_translate",
    "load_manifest",
    "ransac_translate",
    "read_profile",
    "write_profile",
]
__version__ = "0.1.0"
