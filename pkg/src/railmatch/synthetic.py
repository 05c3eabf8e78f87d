"""Synthetic (designed, measured, displacement) samples with exact labels.

A designed rail outline is built from arcs and segments in a canonical frame
(foot at y=0, symmetry axis at x=0, working edge on the left). The measured
profile is a degraded copy (wear, waist truncation, sensor noise) placed
elsewhere on the canvas; the label is the translation that brings it back,
tracked by construction.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.typing import NDArray

from .geometry import (
    Displacement,
    Profile,
    ProfileKind,
    centroid,
    crown_apex,
    is_simple,
    resample,
    translate,
    write_profile,
)

log = logging.getLogger(__name__)

KINDS = (ProfileKind.TYPICAL, ProfileKind.SWITCH, ProfileKind.FROG, ProfileKind.COMBINED)
SPLITS = ("train", "val", "test")

ARC_STEP_MM = 1.0
MEASURE_SPACING_MM = 0.5


@dataclass(frozen=True)
class RailShape:
    """Outline parameters in mm.

    Documented ranges (what :func:`random_shape` draws from):
    head_width 64-74, head_height 36-46, total_height 82-94,
    web_thickness 14-20, foot_width 80-104, foot_thickness 9-13,
    crown_radius 200-400, corner_radius 9-14.
    """

    head_width: float = 70.0
    head_height: float = 42.0
    total_height: float = 90.0
    web_thickness: float = 16.0
    foot_width: float = 96.0
    foot_thickness: float = 11.0
    crown_radius: float = 300.0
    corner_radius: float = 12.0

    def validate(self) -> None:
        if min(asdict(self).values()) <= 0:
            raise ValueError(f"shape parameters must be positive: {self}")
        if self.web_thickness >= self.head_width or self.web_thickness >= self.foot_width:
            raise ValueError("web must be narrower than head and foot")
        if self.corner_radius * 2 >= self.head_width / 2:
            raise ValueError("corner radius too large for head width")
        if self.head_height + self.foot_thickness + 8.0 >= self.total_height:
            raise ValueError("head and foot leave no room for the web")
        if self.crown_radius <= self.head_width / 2:
            raise ValueError("crown radius must exceed the head half-width")
        if self.foot_width / 2 > self.head_width:
            raise ValueError("foot half-width must not exceed head_width")


SHAPE_RANGES = {
    "head_width": (64.0, 74.0),
    "head_height": (36.0, 46.0),
    "total_height": (82.0, 94.0),
    "web_thickness": (14.0, 20.0),
    "foot_width": (80.0, 104.0),
    "foot_thickness": (9.0, 13.0),
    "crown_radius": (200.0, 400.0),
    "corner_radius": (9.0, 14.0),
}


def random_shape(rng: np.random.Generator) -> RailShape:
    return RailShape(**{name: float(rng.uniform(lo, hi)) for name, (lo, hi) in SHAPE_RANGES.items()})


def _arc(cx: float, cy: float, r: float, a0: float, a1: float) -> NDArray[np.float64]:
    n = max(2, int(math.ceil(abs(a1 - a0) * r / ARC_STEP_MM)) + 1)
    t = np.linspace(a0, a1, n)
    return np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])


def _half_outline(
    top: float,
    half_head: float,
    head_height: float,
    crown_radius: float,
    corner_radius: float,
    web_half: float,
    foot_half: float,
    foot_thickness: float,
) -> NDArray[np.float64]:
    """Right half from the crown centre (x=0) down to the foot centre (0, 0)."""
    xa = half_head - corner_radius
    crown_cy = top - crown_radius
    crown = _arc(0.0, crown_cy, crown_radius, math.pi / 2, math.acos(xa / crown_radius))
    y_corner = crown[-1, 1] - corner_radius
    corner = _arc(xa, y_corner, corner_radius, math.pi / 2, 0.0)[1:]
    y_head_bottom = top - head_height
    neck_y = y_head_bottom - 0.25 * (half_head - web_half)
    foot_top = foot_thickness + 0.2 * (foot_half - web_half)
    pts = [
        crown,
        corner,
        [[half_head, y_head_bottom]],
        [[web_half, neck_y]],
        [[web_half, foot_top]],
        [[foot_half, foot_thickness]],
        [[foot_half, 0.0]],
        [[0.0, 0.0]],
    ]
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in pts])


def _mirror_left(right: NDArray[np.float64]) -> NDArray[np.float64]:
    left = right[::-1].copy()
    left[:, 0] *= -1.0
    return left


def make_design_profile(
    kind: ProfileKind | str, shape: RailShape | None = None, seed: int | None = None
) -> Profile:
    """Closed designed outline for ``kind``.

    With ``shape=None`` and a ``seed`` the parameters are drawn from
    :data:`SHAPE_RANGES`; with neither, the default :class:`RailShape` is
    used. When ``shape`` is given, ``seed`` is unused.
    """
    kind = ProfileKind(kind)
    if shape is None:
        shape = RailShape() if seed is None else random_shape(np.random.default_rng(seed))
    shape.validate()
    s = shape
    half_head = s.head_width / 2
    web_half = s.web_thickness / 2
    foot_half = s.foot_width / 2
    H = s.total_height

    common = dict(
        web_half=web_half,
        foot_half=foot_half,
        foot_thickness=s.foot_thickness,
        crown_radius=s.crown_radius,
    )
    right_kw = dict(top=H, half_head=half_head, head_height=s.head_height,
                    corner_radius=s.corner_radius, **common)
    left_kw = dict(right_kw)
    if kind is ProfileKind.SWITCH:
        # planed gauge side: narrower, blunter left half of the head
        left_kw.update(half_head=0.62 * half_head, corner_radius=0.8 * s.corner_radius)
    elif kind is ProfileKind.FROG:
        narrow = 0.72 * half_head
        radius = min(s.corner_radius, 0.4 * narrow)
        right_kw.update(half_head=narrow, corner_radius=radius, head_height=0.8 * s.head_height)
        left_kw = dict(right_kw)
    elif kind is ProfileKind.COMBINED:
        # stepped head: the right (field) half sits lower than the gauge half
        right_kw.update(top=H - 6.0, head_height=s.head_height - 6.0)

    right = _half_outline(**right_kw)
    left = _mirror_left(_half_outline(**left_kw))
    if kind is ProfileKind.COMBINED:
        right = np.vstack([[[0.0, H]], right[right[:, 0] >= 6.0]])
    points = np.vstack([right[:-1], left[:-1]])
    # drop any repeated vertices produced where pieces meet
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(points[1:] != points[:-1], axis=1)
    points = points[keep]
    if np.all(points[-1] == points[0]):
        points = points[:-1]
    profile = Profile(kind, points, closed=True, working_edge="left")
    if not is_simple(profile):
        raise ValueError(f"shape parameters produce a self-intersecting {kind.value} outline: {shape}")
    return profile


def _bump(u: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.exp(-0.5 * u * u)


def _smoothstep(u: NDArray[np.float64]) -> NDArray[np.float64]:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def apply_wear(profile: Profile, vertical: float, side: float, seed: int | None = None) -> Profile:
    """Lower the crown by ``vertical`` and recess the working edge by ``side``.

    Both deformations are Gaussian bumps. The crown bump peaks on the apex
    line and the side bump on the line 16 mm below the apex, so the wear
    measurement recovers the requested values. ``seed`` jitters the bump
    widths by up to 10 %.
    """
    if vertical < 0 or side < 0:
        raise ValueError("wear amounts must be non-negative")
    if vertical == 0 and side == 0:
        return profile
    pts = profile.points
    x0, y0, x1, y1 = profile.bounds()
    apex = crown_apex(profile)
    head_span = x1 - x0
    # head extent estimated from the highest 45 % of the height
    head_bottom = apex[1] - 0.45 * (y1 - y0)
    head_pts = pts[pts[:, 1] >= head_bottom]
    head_half = 0.5 * (head_pts[:, 0].max() - head_pts[:, 0].min())
    if vertical >= 0.3 * (apex[1] - head_bottom):
        raise ValueError(f"vertical wear {vertical} mm exceeds the head height")
    if side >= 0.3 * head_half:
        raise ValueError(f"side wear {side} mm exceeds the head width")

    rng = np.random.default_rng(seed)
    jitter = rng.uniform(0.9, 1.1, size=2)
    sigma_x = 0.3 * head_half * jitter[0]
    sigma_y = 6.0 * jitter[1]

    out = pts.copy()
    x, y = pts[:, 0], pts[:, 1]
    in_head = _smoothstep((y - head_bottom) / 4.0)
    if vertical > 0:
        upper = _smoothstep((y - (apex[1] - 0.5 * (apex[1] - head_bottom))) / 6.0)
        out[:, 1] -= vertical * _bump((x - apex[0]) / sigma_x) * upper
    if side > 0:
        side_y = apex[1] - 16.0
        if profile.working_edge == "left":
            edge_side = _smoothstep((apex[0] - 0.25 * head_half - x) / (0.25 * head_half))
            sign = 1.0
        else:
            edge_side = _smoothstep((x - apex[0] - 0.25 * head_half) / (0.25 * head_half))
            sign = -1.0
        out[:, 0] += sign * side * _bump((y - side_y) / sigma_y) * edge_side * in_head
    worn = profile.with_points(out)
    if head_span <= 0 or not is_simple(worn):
        raise ValueError("wear made the profile self-intersecting")
    return worn


def truncate_below_waist(profile: Profile, waist_y: float) -> Profile:
    """Keep only the points at or above ``waist_y`` as one open polyline."""
    pts = profile.points
    keep = pts[:, 1] >= waist_y
    if keep.sum() < 2:
        raise ValueError(f"truncation at y={waist_y} leaves fewer than 2 points")
    if keep.all():
        return profile.with_points(pts, closed=False)
    if profile.closed:
        # rotate so the kept run starts right after a removed point
        first_removed = int(np.argmin(keep))
        order = np.roll(np.arange(len(pts)), -first_removed)
        pts, keep = pts[order], keep[order]
    return profile.with_points(pts[keep], closed=False)


def add_sensor_noise(
    profile: Profile,
    sigma: float,
    outlier_prob: float = 0.0,
    outlier_magnitude: float = 0.0,
    seed: int | None = None,
) -> Profile:
    """Gaussian jitter per coordinate plus sparse gross outliers."""
    if sigma < 0 or not 0.0 <= outlier_prob <= 1.0 or outlier_magnitude < 0:
        raise ValueError("need sigma >= 0, outlier_prob in [0, 1], outlier_magnitude >= 0")
    if sigma == 0 and (outlier_prob == 0 or outlier_magnitude == 0):
        return profile
    rng = np.random.default_rng(seed)
    n = len(profile.points)
    noise = rng.normal(0.0, sigma, size=(n, 2)) if sigma > 0 else np.zeros((n, 2))
    hit = rng.random(n) < outlier_prob
    angle = rng.uniform(0.0, 2 * math.pi, size=n)
    radius = rng.uniform(0.0, outlier_magnitude, size=n)
    noise[hit] += np.column_stack([np.cos(angle), np.sin(angle)])[hit] * radius[hit, None]
    pts = profile.points + noise
    # noise can, very rarely, make two neighbours coincide
    keep = np.ones(n, dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    return profile.with_points(pts[keep])


def placement_label(
    designed_target: NDArray[np.float64],
    measured_target: NDArray[np.float64],
    designed_centroid: NDArray[np.float64],
    degraded_centroid: NDArray[np.float64],
) -> Displacement:
    """Translation taking the placed measured profile back to its designed-frame pose.

    The designed outline is shifted by ``designed_target - designed_centroid``
    and the degraded copy by ``measured_target - degraded_centroid``; the label
    is the difference of those two shifts.
    """
    d = (np.asarray(designed_target) - designed_centroid) - (np.asarray(measured_target) - degraded_centroid)
    return Displacement(float(d[0]), float(d[1]))


def sample_placement(
    rng: np.random.Generator,
    designed_centroid: NDArray[np.float64] | None = None,
    degraded_centroid: NDArray[np.float64] | None = None,
    side: float = 40.0,
) -> tuple[NDArray[np.float64], NDArray[np.float64], Displacement]:
    """Draw both centroid targets uniformly in the centred square of side ``side``."""
    half = side / 2
    targets = rng.uniform(-half, half, size=(2, 2))
    zero = np.zeros(2)
    dc = zero if designed_centroid is None else np.asarray(designed_centroid)
    mc = dc if degraded_centroid is None else np.asarray(degraded_centroid)
    return targets[0], targets[1], placement_label(targets[0], targets[1], dc, mc)


@dataclass
class GenConfig:
    master_seed: int = 0
    n_samples: int = 1000
    kind_mix: dict[str, float] = field(
        default_factory=lambda: {"typical": 0.4, "switch": 0.3, "frog": 0.3, "combined": 0.0}
    )
    placement_side: float = 40.0
    wear_vertical_range: tuple[float, float] = (0.0, 3.0)
    wear_side_range: tuple[float, float] = (0.0, 3.0)
    noise_sigma: float = 0.05
    outlier_prob: float = 0.02
    outlier_magnitude: float = 2.0
    truncation_prob: float = 0.3
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    canvas_mm: float = 153.6
    canvas_margin_mm: float = 3.0

    def __post_init__(self) -> None:
        self.kind_mix = {ProfileKind(k).value: float(v) for k, v in self.kind_mix.items()}
        self.wear_vertical_range = tuple(float(v) for v in self.wear_vertical_range)
        self.wear_side_range = tuple(float(v) for v in self.wear_side_range)
        self.split_fractions = tuple(float(v) for v in self.split_fractions)
        self.validate()

    def validate(self) -> None:
        for name, fracs in (("kind_mix", list(self.kind_mix.values())), ("split_fractions", self.split_fractions)):
            if any(not 0.0 <= f <= 1.0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be fractions in [0, 1] summing to 1, got {fracs}")
        if len(self.split_fractions) != 3:
            raise ValueError("split_fractions needs (train, val, test)")
        for name in ("wear_vertical_range", "wear_side_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative interval, got {(lo, hi)}")
        if self.placement_side <= 0:
            raise ValueError("placement_side must be positive")
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")
        if self.noise_sigma < 0 or self.outlier_magnitude < 0:
            raise ValueError("noise parameters must be non-negative")
        for name in ("outlier_prob", "truncation_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> GenConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class PlannedSample:
    index: int
    id: str
    kind: ProfileKind
    split: str


@dataclass(frozen=True)
class Sample:
    id: str
    kind: ProfileKind
    designed: Profile
    measured: Profile
    label: Displacement
    split: str
    # degraded profile at its designed-frame pose (what translate(measured, label) must reproduce)
    reference: Profile | None = None


def sample_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Per-sample seed; depends only on (master_seed, index)."""
    return np.random.SeedSequence([int(master_seed) & (2**64 - 1), int(index)])


def _apportion(total: int, fractions: list[float]) -> list[int]:
    """Largest-remainder rounding of ``total * fractions``."""
    quotas = [total * f for f in fractions]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _stratified_counts(kind_counts: list[int], fractions: list[float]) -> list[list[int]]:
    """Per-kind split counts whose row sums are the kind counts and whose column
    sums equal the largest-remainder split of the grand total."""
    targets = _apportion(sum(kind_counts), fractions)
    table = [[int(math.floor(n * f)) for f in fractions] for n in kind_counts]
    deficit = [t - sum(row[j] for row in table) for j, t in enumerate(targets)]
    for i, n in enumerate(kind_counts):
        need = n - sum(table[i])
        remainders = sorted(range(len(fractions)), key=lambda j: (-(n * fractions[j] - table[i][j]), j))
        while need > 0:
            open_cols = [j for j in remainders if deficit[j] > 0] or remainders
            j = open_cols[0]
            table[i][j] += 1
            deficit[j] -= 1
            need -= 1
            remainders = remainders[1:] + remainders[:1]
    return table


def plan_dataset(config: GenConfig) -> list[PlannedSample]:
    """Kind and split for every sample index; cheap and fully deterministic.

    Kinds are apportioned by ``kind_mix`` and shuffled; splits are apportioned
    within each kind so every kind is spread over every split.
    """
    n = config.n_samples
    kinds = [ProfileKind(k) for k in config.kind_mix]
    fracs = [config.kind_mix[k.value] for k in kinds]
    kind_counts = _apportion(n, fracs)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.master_seed) & (2**64 - 1), 2**32]))
    kind_of = np.repeat(np.arange(len(kinds)), kind_counts)
    rng.shuffle(kind_of)

    split_table = _stratified_counts(kind_counts, list(config.split_fractions))
    split_of = np.empty(n, dtype=np.int64)
    for k in range(len(kinds)):
        members = np.flatnonzero(kind_of == k)
        labels = np.repeat(np.arange(3), split_table[k])
        rng.shuffle(labels)
        split_of[members] = labels

    width = max(6, len(str(max(n - 1, 0))))
    return [
        PlannedSample(i, f"s{i:0{width}d}", kinds[kind_of[i]], SPLITS[split_of[i]])
        for i in range(n)
    ]


def _fits(profile: Profile, half: float) -> bool:
    return bool(np.all(np.abs(profile.points) <= half))


def generate_sample(config: GenConfig, planned: PlannedSample, max_tries: int = 1000) -> Sample:
    """Build one sample; depends only on ``config`` and ``planned.index``."""
    ss = sample_seed(config.master_seed, planned.index)
    shape_ss, wear_ss, noise_ss, place_ss = ss.spawn(4)
    rng = np.random.default_rng(shape_ss)

    designed0 = make_design_profile(planned.kind, random_shape(rng))
    vertical = float(rng.uniform(*config.wear_vertical_range))
    side = float(rng.uniform(*config.wear_side_range))
    degraded = resample(designed0, MEASURE_SPACING_MM)
    degraded = apply_wear(degraded, vertical, side, seed=np.random.default_rng(wear_ss).integers(2**63))
    if rng.random() < config.truncation_prob:
        # waist somewhere along the web
        _, y0, _, y1 = designed0.bounds()
        waist = float(rng.uniform(y0 + 0.2 * (y1 - y0), y0 + 0.45 * (y1 - y0)))
        degraded = truncate_below_waist(degraded, waist)
    degraded = add_sensor_noise(
        degraded,
        config.noise_sigma,
        config.outlier_prob,
        config.outlier_magnitude,
        seed=np.random.default_rng(noise_ss).integers(2**63),
    )

    c_design = centroid(designed0)
    c_degraded = centroid(degraded)
    place_rng = np.random.default_rng(place_ss)
    half_canvas = config.canvas_mm / 2 - config.canvas_margin_mm
    for _ in range(max_tries):
        t_design, t_measured, label = sample_placement(place_rng, c_design, c_degraded, config.placement_side)
        if abs(label.dx) >= config.placement_side or abs(label.dy) >= config.placement_side:
            continue
        designed = translate(designed0, t_design - c_design)
        measured = translate(degraded, t_measured - c_degraded)
        if _fits(designed, half_canvas) and _fits(measured, half_canvas):
            reference = translate(degraded, t_design - c_design)
            return Sample(planned.id, planned.kind, designed, measured, label, planned.split, reference)
    raise RuntimeError(f"sample {planned.id}: no admissible placement in {max_tries} draws")


def iter_samples(config: GenConfig) -> Iterator[Sample]:
    for planned in plan_dataset(config):
        yield generate_sample(config, planned)


@dataclass
class ManifestRecord:
    id: str
    kind: str
    designed_path: str
    measured_path: str
    dx_mm: float
    dy_mm: float
    split: str

    @property
    def label(self) -> Displacement:
        return Displacement(self.dx_mm, self.dy_mm)


@dataclass
class DatasetManifest:
    config: GenConfig
    records: list[ManifestRecord]
    root: Path
    l_norm_mm: float = 40.0

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def path(self, relative: str) -> Path:
        return self.root / relative

    def counts(self) -> dict[str, int]:
        return {s: sum(r.split == s for r in self.records) for s in SPLITS}


MANIFEST_NAME = "manifest.jsonl"


def generate_dataset(config: GenConfig, out_dir: str | Path) -> DatasetManifest:
    """Write every sample's profiles plus ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    sample_dir = out_dir / "samples"
    try:
        sample_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {sample_dir}: {exc}") from exc

    records = []
    for planned in plan_dataset(config):
        sample = generate_sample(config, planned)
        d_rel = f"samples/{sample.id}_designed.csv"
        m_rel = f"samples/{sample.id}_measured.csv"
        for rel, prof in ((d_rel, sample.designed), (m_rel, sample.measured)):
            try:
                write_profile(prof, out_dir / rel)
            except OSError as exc:
                raise OSError(f"failed writing {out_dir / rel}: {exc}") from exc
        records.append(
            ManifestRecord(sample.id, sample.kind.value, d_rel, m_rel, sample.label.dx, sample.label.dy, sample.split)
        )
        if (planned.index + 1) % 1000 == 0:
            log.info("generated %d/%d samples", planned.index + 1, config.n_samples)

    manifest = DatasetManifest(config, records, out_dir, l_norm_mm=config.placement_side)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    lines = [
        json.dumps(
            {"record": "header", "config": manifest.config.to_dict(), "l_norm_mm": manifest.l_norm_mm},
            sort_keys=True,
        )
    ]
    lines.extend(json.dumps(asdict(r), sort_keys=True) for r in manifest.records)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing manifest {path}: {exc}") from exc
    return path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path, encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("record") != "header":
        raise ValueError(f"{path}: first line must be the header record")
    header = lines[0]
    config = GenConfig.from_dict(header["config"])
    records = [ManifestRecord(**rec) for rec in lines[1:]]
    return DatasetManifest(config, records, path.parent, l_norm_mm=float(header.get("l_norm_mm", 40.0)))
