"""Convolutional translation regressors.

``SingleBranch`` sees one combined image; ``DualBranch`` sees the designed and
measured images separately, runs a backbone on each, and merges the
concatenated features with one fully connected layer. Both end in two
linear outputs with no activation: the normalised (dx, dy).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

# standardisation applied after scaling pixels to [0, 1]
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)

PRESETS = ("tiny", "small", "resnet18-like")


@dataclass
class ModelConfig:
    architecture: str = "single"
    backbone_preset: str = "small"
    input_px: int = 224
    input_channels: int = 3
    init: str = "random"
    seed: int = 0
    branch_weight_sharing: bool = False
    # append normalised x/y coordinate planes to the input of the backbone
    coord_channels: bool = True
    input_mean: tuple[float, float, float] = DEFAULT_MEAN
    input_std: tuple[float, float, float] = DEFAULT_STD

    def __post_init__(self) -> None:
        aliases = {"singlebranch": "single", "dualbranch": "dual", "single_branch": "single", "dual_branch": "dual"}
        self.architecture = aliases.get(self.architecture.lower(), self.architecture.lower())
        if self.architecture not in ("single", "dual"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.backbone_preset not in PRESETS:
            raise ValueError(f"unknown backbone preset {self.backbone_preset!r}; choose from {PRESETS}")
        if self.input_channels != 3:
            raise ValueError("input_channels must be 3 (RGB)")
        if not (self.init == "random" or self.init.startswith("pretrained:")):
            raise ValueError("init must be 'random' or 'pretrained:<checkpoint path>'")
        self.input_mean = tuple(float(v) for v in self.input_mean)
        self.input_std = tuple(float(v) for v in self.input_std)

    @property
    def render_mode(self) -> str:
        return "single" if self.architecture == "single" else "separate"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_mean"] = list(self.input_mean)
        d["input_std"] = list(self.input_std)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        return cls(**data)


class AddCoords(nn.Module):
    """Concatenate x and y coordinate planes in [-1, 1]."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device)
        xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype, device=x.device)
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        coords = torch.stack([xx, yy]).expand(n, 2, h, w)
        return torch.cat([x, coords], dim=1)


def conv_bn(cin: int, cout: int, stride: int = 1, k: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """Stride-2 conv stages followed by global average pooling."""

    def __init__(self, preset: str, coord_channels: bool = True):
        super().__init__()
        cin = 3 + (2 if coord_channels else 0)
        layers: list[nn.Module] = [AddCoords()] if coord_channels else []
        if preset == "tiny":
            widths = (8, 16, 32, 32)
            for w in widths:
                layers.append(conv_bn(cin, w, stride=2))
                cin = w
        elif preset == "small":
            widths = (16, 32, 48, 64, 96, 128)
            for i, w in enumerate(widths):
                layers.append(conv_bn(cin, w, stride=2))
                if i >= 2:
                    layers.append(conv_bn(w, w))
                cin = w
        elif preset == "resnet18-like":
            layers += [conv_bn(cin, 64, stride=2, k=7), nn.MaxPool2d(3, 2, 1)]
            cin = 64
            for i, w in enumerate((64, 128, 256, 512)):
                layers += [BasicBlock(cin, w, stride=1 if i == 0 else 2), BasicBlock(w, w)]
                cin = w
        else:
            raise ValueError(f"unknown backbone preset {preset!r}")
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_features = cin

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.features(x)), 1)


class SingleBranch(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.backbone = Backbone(config.backbone_preset, config.coord_channels)
        self.head = nn.Linear(self.backbone.out_features, 2)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(image))


class DualBranch(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.designed_branch = Backbone(config.backbone_preset, config.coord_channels)
        if config.branch_weight_sharing:
            self.measured_branch = self.designed_branch
        else:
            self.measured_branch = Backbone(config.backbone_preset, config.coord_channels)
        self.merge = nn.Linear(2 * self.designed_branch.out_features, 2)

    def forward(self, designed: torch.Tensor, measured: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([self.designed_branch(designed), self.measured_branch(measured)], dim=1)
        return self.merge(feats)


def output_layer(model: nn.Module) -> nn.Linear:
    return model.head if isinstance(model, SingleBranch) else model.merge


def build_model(config: ModelConfig) -> nn.Module:
    """Build and initialise a regressor.

    ``init='random'`` seeds torch with ``config.seed``. ``init='pretrained:<path>'``
    loads matching backbone tensors from a saved checkpoint; tensors whose
    name or shape differ keep their random values.
    """
    torch.manual_seed(config.seed)
    model: nn.Module = SingleBranch(config) if config.architecture == "single" else DualBranch(config)
    if config.init.startswith("pretrained:"):
        load_pretrained_backbone(model, config.init.split(":", 1)[1])
    return model


def load_pretrained_backbone(model: nn.Module, source: str | Path) -> int:
    """Copy backbone weights from a checkpoint file; returns the number of tensors copied."""
    source = Path(source)
    if not source.exists():
        raise FileNotFoundError(f"pretrained weight source not found: {source}")
    state = torch.load(source, map_location="cpu", weights_only=True)
    backbone_state = {}
    for key, value in state.items():
        for prefix in ("backbone.", "designed_branch.", "measured_branch."):
            if key.startswith(prefix):
                backbone_state.setdefault(key[len(prefix):], value)
    own = model.state_dict()
    copied = 0
    for key in own:
        for prefix in ("backbone.", "designed_branch.", "measured_branch."):
            if key.startswith(prefix):
                src = backbone_state.get(key[len(prefix):])
                if src is not None and src.shape == own[key].shape:
                    own[key] = src.clone()
                    copied += 1
    model.load_state_dict(own)
    return copied


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def preprocess(images: np.ndarray | Sequence[np.ndarray], config: ModelConfig) -> torch.Tensor:
    """uint8 ``(..., H, W, 3)`` -> standardised float ``(N, 3, H, W)`` tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got shape {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float().div_(255.0)
    mean = torch.tensor(config.input_mean).view(1, 3, 1, 1)
    std = torch.tensor(config.input_std).view(1, 3, 1, 1)
    return (x - mean) / std


def model_inputs(images: Sequence[np.ndarray], config: ModelConfig) -> tuple[torch.Tensor, ...]:
    """Turn a tuple of image batches (one per branch) into model arguments."""
    expected = 1 if config.architecture == "single" else 2
    if len(images) != expected:
        raise ValueError(f"{config.architecture} model needs {expected} image(s), got {len(images)}")
    tensors = tuple(preprocess(im, config) for im in images)
    for t in tensors:
        if t.shape[-1] != config.input_px or t.shape[-2] != config.input_px:
            raise ValueError(f"image size {tuple(t.shape[-2:])} does not match input_px={config.input_px}")
    return tensors


@torch.no_grad()
def forward(model: nn.Module, config: ModelConfig, images: Sequence[np.ndarray]) -> np.ndarray:
    """Inference on one sample (images of shape (H, W, 3)) or a batch (N, H, W, 3).

    Returns an ``(N, 2)`` array of normalised predictions.
    """
    model.eval()
    return model(*model_inputs(images, config)).numpy().astype(np.float64)
