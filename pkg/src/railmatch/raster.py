"""Deterministic image encoding of profile pairs.

Images are ``(H, W, 3)`` uint8 arrays, row 0 at the top. The mm origin sits
at the image centre with +x to the right and +y up.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from .geometry import Displacement, Profile

RGB = tuple[int, int, int]


@dataclass(frozen=True)
class ImageSpec:
    width_px: int = 512
    height_px: int = 512
    mm_per_px: float = 0.3
    background: RGB = (255, 255, 255)
    designed_color: RGB = (0, 0, 0)
    measured_color: RGB = (255, 0, 0)
    line_width_px: int = 2
    resize_to: int | None = 224

    def __post_init__(self) -> None:
        for name in ("background", "designed_color", "measured_color"):
            object.__setattr__(self, name, tuple(int(c) for c in getattr(self, name)))
        if self.width_px != self.height_px or self.width_px <= 0:
            raise ValueError("images must be square with positive size")
        if not self.mm_per_px > 0:
            raise ValueError("mm_per_px must be positive")
        if self.line_width_px < 1:
            raise ValueError("line_width_px must be >= 1")
        if self.background in (self.designed_color, self.measured_color):
            raise ValueError("stroke colours must differ from the background")
        if self.designed_color == self.measured_color:
            raise ValueError("designed and measured colours must differ")
        if self.resize_to is not None and not 0 < self.resize_to <= self.width_px:
            raise ValueError("resize_to must be in (0, width_px]")

    @property
    def canvas_mm(self) -> float:
        return self.width_px * self.mm_per_px

    @property
    def output_px(self) -> int:
        return self.width_px if self.resize_to is None else self.resize_to

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("background", "designed_color", "measured_color"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ImageSpec:
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class RenderedSample:
    images: tuple[NDArray[np.uint8], ...]
    label_norm: tuple[float, float]
    sample_id: str = ""

    def __post_init__(self) -> None:
        if len(self.images) not in (1, 2):
            raise ValueError("a rendered sample holds one or two images")
        if any(abs(v) > 1.0 for v in self.label_norm):
            raise ValueError(f"normalised label out of [-1, 1]: {self.label_norm}")


class OffCanvasError(ValueError):
    pass


def mm_to_px(points: NDArray[np.float64] | Sequence[float], spec: ImageSpec) -> NDArray[np.int64]:
    """Map mm coordinates to integer ``(col, row)``.

    ``col = floor(x / mm_per_px + W/2)``, ``row = floor(H/2 - y / mm_per_px)``.
    Values are rounded to 9 decimals before the floor so that exact multiples
    of the pixel pitch land on the intended pixel despite float division.
    """
    p = np.asarray(points, dtype=np.float64)
    u = np.round(p[..., 0] / spec.mm_per_px + spec.width_px / 2, 9)
    v = np.round(spec.height_px / 2 - p[..., 1] / spec.mm_per_px, 9)
    return np.stack([np.floor(u), np.floor(v)], axis=-1).astype(np.int64)


def bresenham(c0: int, r0: int, c1: int, r1: int) -> list[tuple[int, int]]:
    """Integer Bresenham line from (c0, r0) to (c1, r1), both ends included."""
    dc, dr = abs(c1 - c0), -abs(r1 - r0)
    sc = 1 if c0 < c1 else -1
    sr = 1 if r0 < r1 else -1
    err = dc + dr
    out = []
    c, r = c0, r0
    while True:
        out.append((c, r))
        if c == c1 and r == r1:
            return out
        e2 = 2 * err
        if e2 >= dr:
            err += dr
            c += sc
        if e2 <= dc:
            err += dc
            r += sr


def polyline_pixels(points_px: NDArray[np.int64], closed: bool = False) -> NDArray[np.int64]:
    """Bresenham pixels of every segment, as an (N, 2) ``(col, row)`` array."""
    pts = [tuple(int(v) for v in p) for p in points_px]
    if not pts:
        return np.empty((0, 2), dtype=np.int64)
    if closed and len(pts) > 1:
        pts.append(pts[0])
    pixels: list[tuple[int, int]] = [pts[0]]
    for (c0, r0), (c1, r1) in zip(pts[:-1], pts[1:]):
        if (c0, r0) != (c1, r1):
            pixels.extend(bresenham(c0, r0, c1, r1)[1:])
    return np.array(pixels, dtype=np.int64)


def draw_polyline(
    canvas: NDArray[np.uint8],
    points_px: NDArray[np.int64] | Iterable[Sequence[int]],
    color: RGB,
    line_width_px: int = 1,
    closed: bool = False,
) -> NDArray[np.uint8]:
    """Stamp a ``w x w`` square (top-left anchored) at each Bresenham pixel.

    Draws in place and returns ``canvas``; stamps are clipped at the right
    and bottom borders.
    """
    points_px = np.asarray(list(points_px) if not isinstance(points_px, np.ndarray) else points_px)
    if points_px.size == 0:
        return canvas
    pix = polyline_pixels(points_px.reshape(-1, 2), closed)
    h, w = canvas.shape[:2]
    offsets = np.arange(line_width_px)
    cols = (pix[:, 0, None, None] + offsets[None, None, :]).repeat(line_width_px, axis=1)
    rows = (pix[:, 1, None, None] + offsets[None, :, None]).repeat(line_width_px, axis=2)
    cols, rows = cols.ravel(), rows.ravel()
    ok = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    canvas[rows[ok], cols[ok]] = color
    return canvas


def blank_canvas(spec: ImageSpec) -> NDArray[np.uint8]:
    canvas = np.empty((spec.height_px, spec.width_px, 3), dtype=np.uint8)
    canvas[...] = spec.background
    return canvas


def _to_pixels(profile: Profile, spec: ImageSpec, what: str, sample_id: str) -> NDArray[np.int64]:
    px = mm_to_px(profile.points, spec)
    off = (px[:, 0] < 0) | (px[:, 0] >= spec.width_px) | (px[:, 1] < 0) | (px[:, 1] >= spec.height_px)
    if off.any():
        first = profile.points[np.argmax(off)]
        raise OffCanvasError(
            f"sample {sample_id or '<unnamed>'}: {int(off.sum())} {what} vertices off the "
            f"{spec.canvas_mm:g} mm canvas, e.g. ({first[0]:.2f}, {first[1]:.2f}) mm"
        )
    return px


def render_single(designed: Profile, measured: Profile, spec: ImageSpec, sample_id: str = "") -> NDArray[np.uint8]:
    """Both profiles on one canvas; measured is drawn last and wins overlaps."""
    d_px = _to_pixels(designed, spec, "designed", sample_id)
    m_px = _to_pixels(measured, spec, "measured", sample_id)
    canvas = blank_canvas(spec)
    draw_polyline(canvas, d_px, spec.designed_color, spec.line_width_px, designed.closed)
    draw_polyline(canvas, m_px, spec.measured_color, spec.line_width_px, measured.closed)
    return canvas


def render_separate(
    designed: Profile, measured: Profile, spec: ImageSpec, sample_id: str = ""
) -> tuple[NDArray[np.uint8], NDArray[np.uint8]]:
    d_px = _to_pixels(designed, spec, "designed", sample_id)
    m_px = _to_pixels(measured, spec, "measured", sample_id)
    a = draw_polyline(blank_canvas(spec), d_px, spec.designed_color, spec.line_width_px, designed.closed)
    b = draw_polyline(blank_canvas(spec), m_px, spec.measured_color, spec.line_width_px, measured.closed)
    return a, b


def normalize_label(d: Displacement, l_norm: float = 40.0) -> tuple[float, float]:
    if abs(d.dx) > l_norm or abs(d.dy) > l_norm:
        raise ValueError(f"label ({d.dx:.3f}, {d.dy:.3f}) mm outside the +/-{l_norm} mm envelope")
    return d.dx / l_norm, d.dy / l_norm


def denormalize_label(n: Sequence[float], l_norm: float = 40.0) -> Displacement:
    return Displacement(float(n[0]) * l_norm, float(n[1]) * l_norm)


def _bilinear_axis(n_src: int, n_dst: int) -> tuple[NDArray[np.int64], NDArray[np.int64], NDArray[np.float64]]:
    scale = n_src / n_dst
    src = (np.arange(n_dst) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, src - i0


def resize(image: NDArray[np.uint8], target_px: int) -> NDArray[np.uint8]:
    """Bilinear downscale to ``target_px`` square (half-pixel centres, no antialias)."""
    h, w = image.shape[:2]
    if target_px > h or target_px > w:
        raise ValueError(f"resize only downsamples: {h}x{w} -> {target_px}")
    if target_px == h == w:
        return image.copy()
    r0, r1, fr = _bilinear_axis(h, target_px)
    c0, c1, fc = _bilinear_axis(w, target_px)
    img = image.astype(np.float64)
    rows = img[r0] * (1.0 - fr)[:, None, None] + img[r1] * fr[:, None, None]
    out = rows[:, c0] * (1.0 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def render_sample(
    designed: Profile,
    measured: Profile,
    label: Displacement | None,
    spec: ImageSpec,
    mode: str = "single",
    l_norm: float = 40.0,
    sample_id: str = "",
) -> RenderedSample:
    """Render in ``single`` or ``separate`` mode, apply ``resize_to``, normalise the label."""
    if mode == "single":
        images: tuple[NDArray[np.uint8], ...] = (render_single(designed, measured, spec, sample_id),)
    elif mode == "separate":
        images = render_separate(designed, measured, spec, sample_id)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    if spec.resize_to is not None:
        images = tuple(resize(im, spec.resize_to) for im in images)
    label_norm = normalize_label(label, l_norm) if label is not None else (0.0, 0.0)
    return RenderedSample(images, label_norm, sample_id)


def image_digest(image: NDArray[np.uint8]) -> str:
    h = hashlib.sha256()
    h.update(str(image.shape).encode())
    h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()


def save_png(image: NDArray[np.uint8], path: str | Path) -> Path:
    path = Path(path)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")
    return path


def load_png(path: str | Path) -> NDArray[np.uint8]:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def required_margin_mm(spec: ImageSpec) -> float:
    """Half-canvas extent usable for vertices."""
    return math.floor(spec.width_px / 2) * spec.mm_per_px
