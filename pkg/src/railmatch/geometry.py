"""Planar geometry of rail cross-section profiles.

Profiles are polylines in millimetres with y pointing up. Everything here is a
pure function over immutable inputs.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

SIDE_WEAR_DEPTH_MM = 16.0


class ProfileKind(str, enum.Enum):
    TYPICAL = "typical"
    SWITCH = "switch"
    FROG = "frog"
    COMBINED = "combined"


@dataclass(frozen=True)
class Displacement:
    dx: float
    dy: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise ValueError(f"displacement must be finite, got ({self.dx}, {self.dy})")

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.dx, self.dy], dtype=np.float64)

    def __neg__(self) -> Displacement:
        return Displacement(-self.dx, -self.dy)


@dataclass(frozen=True, eq=False)
class Profile:
    """Ordered polyline; ``points`` is an (N, 2) read-only float64 array.

    ``working_edge`` names the gauge side ("left" = smaller x) used by the
    wear measurement.
    """

    kind: ProfileKind
    points: NDArray[np.float64]
    closed: bool = False
    working_edge: str = "left"

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must have shape (N, 2), got {pts.shape}")
        if len(pts) < 2:
            raise ValueError("a profile needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("profile points must be finite")
        if np.any(np.all(pts[1:] == pts[:-1], axis=1)):
            raise ValueError("consecutive profile points must differ")
        if self.working_edge not in ("left", "right"):
            raise ValueError(f"working_edge must be 'left' or 'right', got {self.working_edge!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "kind", ProfileKind(self.kind))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Profile):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.closed == other.closed
            and self.working_edge == other.working_edge
            and self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
        )

    def with_points(self, points: NDArray[np.float64], closed: bool | None = None) -> Profile:
        return Profile(
            self.kind,
            points,
            self.closed if closed is None else closed,
            self.working_edge,
        )

    def segments(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Segment start and end points, including the closing segment."""
        pts = self.points
        if self.closed:
            return pts, np.roll(pts, -1, axis=0)
        return pts[:-1], pts[1:]

    def length(self) -> float:
        a, b = self.segments()
        return float(np.sum(np.hypot(*(b - a).T)))

    def bounds(self) -> tuple[float, float, float, float]:
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


@dataclass(frozen=True)
class WearReport:
    """Wear at the crown line and at the side-wear gauge line.

    A value of ``None`` means the measurement line missed the measured
    profile; the reason is listed in ``flags``.
    """

    vertical_wear: float | None
    side_wear: float | None
    crown_x: float
    side_y: float
    vertical_raw: float | None = None
    side_raw: float | None = None
    flags: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "vertical_wear_mm": self.vertical_wear,
            "side_wear_mm": self.side_wear,
            "crown_x_mm": self.crown_x,
            "side_y_mm": self.side_y,
            "vertical_raw_mm": self.vertical_raw,
            "side_raw_mm": self.side_raw,
            "flags": list(self.flags),
        }


def centroid(profile: Profile) -> NDArray[np.float64]:
    """Arc-length weighted centroid of the polyline."""
    a, b = profile.segments()
    lengths = np.hypot(*(b - a).T)
    total = lengths.sum()
    if total <= 0.0:
        raise ValueError("degenerate profile: zero total length")
    mids = 0.5 * (a + b)
    return (lengths[:, None] * mids).sum(axis=0) / total


def translate(profile: Profile, d: Displacement | NDArray[np.float64] | tuple[float, float]) -> Profile:
    offset = d.as_array() if isinstance(d, Displacement) else np.asarray(d, dtype=np.float64)
    if offset.shape != (2,) or not np.all(np.isfinite(offset)):
        raise ValueError(f"bad displacement {d!r}")
    return profile.with_points(profile.points + offset)


def resample(profile: Profile, spacing: float) -> Profile:
    """Subdivide every segment so consecutive points are at most ``spacing`` apart.

    Original vertices are kept; inserted points lie on the original segments,
    so the geometry (and arc length) is unchanged.
    """
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    a, b = profile.segments()
    lengths = np.hypot(*(b - a).T)
    counts = np.maximum(1, np.ceil(lengths / spacing - 1e-12).astype(np.int64))
    seg = np.repeat(np.arange(len(a)), counts)
    first = np.cumsum(counts) - counts
    t = (np.arange(len(seg)) - first[seg]) / counts[seg]
    pts = a[seg] + t[:, None] * (b[seg] - a[seg])
    if not profile.closed:
        pts = np.vstack([pts, profile.points[-1:]])
    return profile.with_points(pts)


def _project_onto_segments(
    p: NDArray[np.float64], a: NDArray[np.float64], b: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Squared distances and feet from points ``p`` (..., 2) to segments a-b (..., 2)."""
    ab = b - a
    denom = np.einsum("...i,...i->...", ab, ab)
    t = np.einsum("...i,...i->...", p - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    foot = a + t[..., None] * ab
    diff = p - foot
    return np.einsum("...i,...i->...", diff, diff), foot


def point_to_polyline_distance(
    p: NDArray[np.float64] | tuple[float, float], profile: Profile
) -> tuple[float, NDArray[np.float64]]:
    """Exact distance from ``p`` to the nearest segment and the foot point."""
    q = np.asarray(p, dtype=np.float64)
    a, b = profile.segments()
    d2, feet = _project_onto_segments(q[None, :], a, b)
    i = int(np.argmin(d2))
    return math.sqrt(float(d2[i])), feet[i].copy()


def distances_brute_force(points: NDArray[np.float64], profile: Profile) -> tuple[NDArray, NDArray]:
    """Vectorised all-pairs point-to-polyline distance; O(N*M) memory."""
    a, b = profile.segments()
    d2, feet = _project_onto_segments(points[:, None, :], a[None], b[None])
    idx = np.argmin(d2, axis=1)
    rows = np.arange(len(points))
    return np.sqrt(d2[rows, idx]), feet[rows, idx]


class PolylineIndex:
    """Nearest-point queries against a fixed polyline.

    The polyline is subdivided to ``spacing`` and indexed with a KD-tree over
    its vertices; each query checks the segments adjacent to the ``k`` nearest
    vertices. The subdivision does not change the geometry, so results agree
    with :func:`distances_brute_force` unless the true nearest segment has no
    vertex among the ``k`` nearest, which needs features thinner than
    ``spacing``.
    """

    def __init__(self, profile: Profile, spacing: float = 0.5, k: int = 6):
        dense = resample(profile, spacing)
        self.profile = profile
        self._pts = dense.points
        n = len(self._pts)
        self._closed = profile.closed
        self._n = n
        self._k = min(k, n)
        self._tree = cKDTree(self._pts)

    def query(self, points: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        _, idx = self._tree.query(points, k=self._k)
        idx = np.asarray(idx).reshape(len(points), self._k)
        n = self._n
        if self._closed:
            starts = np.concatenate([idx, (idx - 1) % n], axis=1)
            ends = (starts + 1) % n
        else:
            starts = np.concatenate([np.minimum(idx, n - 2), np.maximum(idx - 1, 0)], axis=1)
            ends = starts + 1
        a = self._pts[starts]
        b = self._pts[ends]
        d2, feet = _project_onto_segments(points[:, None, :], a, b)
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(points))
        return np.sqrt(d2[rows, best]), feet[rows, best]


def _segments_intersect(p1, p2, q1, q2) -> NDArray[np.bool_]:
    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
            c[..., 0] - a[..., 0]
        )

    o1 = orient(p1, p2, q1)
    o2 = orient(p1, p2, q2)
    o3 = orient(q1, q2, p1)
    o4 = orient(q1, q2, p2)
    return (o1 * o2 < 0) & (o3 * o4 < 0)


def is_simple(profile: Profile) -> bool:
    """True if no two non-adjacent segments cross (proper crossings only)."""
    a, b = profile.segments()
    m = len(a)
    lengths = np.hypot(*(b - a).T)
    # crossing segments have midpoints closer than the longest segment
    pairs = cKDTree(0.5 * (a + b)).query_pairs(float(lengths.max()) + 1e-9, output_type="ndarray")
    if len(pairs) == 0:
        return True
    i, j = np.sort(pairs, axis=1).T
    adjacent = j - i < 2
    i, j = i[~adjacent], j[~adjacent]
    if profile.closed:
        keep = ~((i == 0) & (j == m - 1))
        i, j = i[keep], j[keep]
    if len(i) == 0:
        return True
    crossing = _segments_intersect(a[i], b[i], a[j], b[j])
    return not bool(np.any(crossing))


def _line_crossings(profile: Profile, axis: int, value: float) -> NDArray[np.float64]:
    """Coordinates (along the other axis) where the polyline meets ``coord[axis] == value``."""
    a, b = profile.segments()
    other = 1 - axis
    ca, cb = a[:, axis] - value, b[:, axis] - value
    hits = []
    touching = np.isclose(ca, 0.0, atol=1e-12)
    hits.append(a[touching, other])
    if not profile.closed:
        if abs(profile.points[-1, axis] - value) <= 1e-12:
            hits.append(profile.points[-1:, other])
    crossing = (ca * cb < 0)
    t = ca[crossing] / (ca[crossing] - cb[crossing])
    hits.append(a[crossing, other] + t * (b[crossing, other] - a[crossing, other]))
    return np.concatenate(hits)


def crown_apex(profile: Profile) -> NDArray[np.float64]:
    """Highest point; for a flat top, the middle of the topmost vertices."""
    ys = profile.points[:, 1]
    top = ys.max()
    xs = profile.points[np.isclose(ys, top, rtol=0, atol=1e-9), 0]
    return np.array([0.5 * (xs.min() + xs.max()), top])


def compute_wear(designed: Profile, measured_aligned: Profile) -> WearReport:
    """Vertical and side wear of an aligned measured profile against the design.

    Vertical wear is taken on the vertical line through the designed crown
    apex; side wear on the horizontal line 16 mm below the apex, on the
    designed profile's working edge. Negative values are clamped to zero; the
    signed values are kept in ``vertical_raw`` / ``side_raw``.
    """
    apex = crown_apex(designed)
    crown_x = float(apex[0])
    side_y = float(apex[1] - SIDE_WEAR_DEPTH_MM)
    flags: list[str] = []

    design_tops = _line_crossings(designed, 0, crown_x)
    measured_tops = _line_crossings(measured_aligned, 0, crown_x)
    vertical_raw = None
    if len(measured_tops) == 0:
        flags.append("vertical: crown line misses measured profile")
    else:
        vertical_raw = float(design_tops.max() - measured_tops.max())

    design_sides = _line_crossings(designed, 1, side_y)
    measured_sides = _line_crossings(measured_aligned, 1, side_y)
    side_raw = None
    if len(measured_sides) == 0 or len(design_sides) == 0:
        flags.append("side: gauge line misses measured profile")
    elif designed.working_edge == "left":
        side_raw = float(measured_sides.min() - design_sides.min())
    else:
        side_raw = float(design_sides.max() - measured_sides.max())

    return WearReport(
        vertical_wear=None if vertical_raw is None else max(0.0, vertical_raw),
        side_wear=None if side_raw is None else max(0.0, side_raw),
        crown_x=crown_x,
        side_y=side_y,
        vertical_raw=vertical_raw,
        side_raw=side_raw,
        flags=tuple(flags),
    )


def write_profile(profile: Profile, csv_path: str | Path) -> Path:
    """Write ``x_mm,y_mm`` CSV plus a JSON sidecar with kind/closed/working_edge."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x_mm", "y_mm"])
        for x, y in profile.points:
            writer.writerow([repr(float(x)), repr(float(y))])
    meta = {"kind": profile.kind.value, "closed": profile.closed, "working_edge": profile.working_edge}
    csv_path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path


def read_profile(csv_path: str | Path) -> Profile:
    """Read a profile CSV; the sidecar is optional (defaults: typical, open, left)."""
    csv_path = Path(csv_path)
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x_mm", "y_mm"]:
            raise ValueError(f"{csv_path}: expected header 'x_mm,y_mm', got {header}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    sidecar = csv_path.with_suffix(".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return Profile(
        ProfileKind(meta.get("kind", "typical")),
        np.array(rows, dtype=np.float64).reshape(-1, 2),
        bool(meta.get("closed", False)),
        meta.get("working_edge", "left"),
    )
