"""Translation-only registration baselines: trimmed ICP and RANSAC.

Both return the translation to apply to the measured profile so it lands on
the designed one, in the same convention as the generator labels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import NDArray

from .geometry import Displacement, PolylineIndex, Profile, centroid, resample

_MONOTONE_SLACK = 1e-12


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 100
    convergence_eps: float = 1e-6
    trim_ratio: float = 0.8
    max_corr_dist: float = 10.0
    resample_spacing: float = 0.5
    # also start from the crown-aligned guess and keep the lower objective
    crown_start: bool = True

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_eps > 0:
            raise ValueError("convergence_eps must be positive")
        if not 0.0 < self.trim_ratio <= 1.0:
            raise ValueError("trim_ratio must be in (0, 1]")
        if not self.max_corr_dist > 0 or not self.resample_spacing > 0:
            raise ValueError("max_corr_dist and resample_spacing must be positive")


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 500
    inlier_threshold: float = 0.3
    min_inlier_fraction: float = 0.3
    seed: int = 0
    resample_spacing: float = 0.5
    screen_points: int = 64
    rescored: int = 20

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0.0 <= self.min_inlier_fraction <= 1.0:
            raise ValueError("min_inlier_fraction must be in [0, 1]")


@dataclass
class MatchResult:
    displacement: Displacement
    residual_rms: float
    iterations_used: int = 0
    converged: bool = True
    inlier_fraction: float | None = None
    method: str = ""
    error: str | None = None
    objective_history: list[float] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["displacement"] = {"dx_mm": self.displacement.dx, "dy_mm": self.displacement.dy}
        if d["inlier_fraction"] is None:
            del d["inlier_fraction"]
        if d["objective_history"] is None:
            del d["objective_history"]
        return d


def _trim_count(n: int, trim_ratio: float) -> int:
    return max(1, min(n, int(round(trim_ratio * n))))


def objective(
    measured: Profile,
    designed: Profile | PolylineIndex,
    d: Displacement | NDArray[np.float64],
    trim_ratio: float = 0.8,
    max_corr_dist: float = math.inf,
) -> float:
    """Mean of the ``trim_ratio`` smallest squared distances from the shifted
    measured points to the designed polyline.

    Raises ``ValueError`` when no point lies within ``max_corr_dist``.
    """
    index = designed if isinstance(designed, PolylineIndex) else PolylineIndex(designed)
    t = d.as_array() if isinstance(d, Displacement) else np.asarray(d, dtype=np.float64)
    dist, _ = index.query(measured.points + t)
    if not np.any(dist <= max_corr_dist):
        raise ValueError(f"no correspondences within {max_corr_dist} mm")
    k = _trim_count(len(dist), trim_ratio)
    return float(np.mean(np.partition(dist * dist, k - 1)[:k]))


def _rms_residual(index: PolylineIndex, pts: NDArray[np.float64]) -> float:
    dist, _ = index.query(pts)
    return float(np.sqrt(np.mean(dist * dist)))


def crown_aligned_guess(measured: Profile, designed: Profile) -> Displacement:
    """Translation matching the bounding-box tops and horizontal centres.

    Unaffected by waist truncation, which moves the centroid by tens of mm.
    """
    mx0, _, mx1, my1 = measured.bounds()
    dx0, _, dx1, dy1 = designed.bounds()
    return Displacement(0.5 * (dx0 + dx1) - 0.5 * (mx0 + mx1), dy1 - my1)


def icp_translate(
    measured: Profile,
    designed: Profile,
    config: IcpConfig = IcpConfig(),
    initial: Displacement | None = None,
) -> MatchResult:
    """Trimmed point-to-polyline ICP over translations only.

    Starts from the centroid difference (or ``initial``). With
    ``config.crown_start`` a second run starts from
    :func:`crown_aligned_guess` and the run with the lower final trimmed
    objective wins; ties go to the first run.
    """
    index = PolylineIndex(designed)
    pts = resample(measured, config.resample_spacing).points
    if initial is None:
        initial = Displacement(*(centroid(designed) - centroid(measured)))
    best = _icp_run(index, pts, initial.as_array(), config)
    if config.crown_start:
        other = _icp_run(index, pts, crown_aligned_guess(measured, designed).as_array(), config)
        if other.error is None and (best.error is not None or other.residual_rms < best.residual_rms):
            best = other
    return best


def _icp_run(index: PolylineIndex, pts: NDArray[np.float64], t: NDArray[np.float64], config: IcpConfig) -> MatchResult:
    """One ICP descent from ``t``.

    Each iteration matches the points to their nearest points on the designed
    polyline, keeps the ``trim_ratio`` closest pairs that are within
    ``max_corr_dist``, and moves by their mean residual. If that step would
    raise the trimmed objective (possible only because of the distance gate),
    the ungated trimmed set is used instead, which cannot.
    """
    k = _trim_count(len(pts), config.trim_ratio)

    def trimmed(t_now):
        dist, feet = index.query(pts + t_now)
        order = np.argpartition(dist, k - 1)[:k]
        return dist, feet, order

    dist, feet, order = trimmed(t)
    current = float(np.mean(dist[order] ** 2))
    history = [current]
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        gated = order[dist[order] <= config.max_corr_dist]
        if len(gated) == 0:
            return MatchResult(
                Displacement(float(t[0]), float(t[1])),
                _rms_residual(index, pts + t),
                it,
                converged=False,
                method="icp",
                error=f"no correspondences within {config.max_corr_dist} mm",
                objective_history=history,
            )
        step = np.mean(feet[gated] - (pts[gated] + t), axis=0)
        new_dist, new_feet, new_order = trimmed(t + step)
        new_value = float(np.mean(new_dist[new_order] ** 2))
        if new_value > current + _MONOTONE_SLACK and len(gated) < len(order):
            step = np.mean(feet[order] - (pts[order] + t), axis=0)
            new_dist, new_feet, new_order = trimmed(t + step)
            new_value = float(np.mean(new_dist[new_order] ** 2))
        t = t + step
        dist, feet, order, current = new_dist, new_feet, new_order, new_value
        history.append(current)
        if float(np.hypot(*step)) < config.convergence_eps:
            converged = True
            break

    return MatchResult(
        Displacement(float(t[0]), float(t[1])),
        float(math.sqrt(current)),
        it,
        converged=converged,
        method="icp",
        objective_history=history,
    )


def ransac_translate(
    measured: Profile, designed: Profile, config: RansacConfig = RansacConfig()
) -> MatchResult:
    """One-point RANSAC over translation hypotheses.

    A hypothesis pairs a random measured point with a random designed point.
    Hypotheses are screened on a fixed random subset of the measured points
    and only the best ``config.rescored`` of them are scored on all points.
    The centroid-difference hypothesis is always scored in full, so the
    result never has fewer inliers than it. The winner is refined once by
    the mean residual over its inliers; the refinement is kept only if it
    does not lose inliers.
    """
    index = PolylineIndex(designed)
    # raw measured vertices: resampling would fill outlier spikes with points
    m_pts = measured.points
    d_pts = resample(designed, config.resample_spacing).points
    rng = np.random.default_rng(config.seed)
    n = len(m_pts)

    def score(t):
        dist, feet = index.query(m_pts + t)
        inl = dist < config.inlier_threshold
        return int(inl.sum()), inl, feet

    hyps = d_pts[rng.integers(0, len(d_pts), size=config.iterations)] - m_pts[
        rng.integers(0, n, size=config.iterations)
    ]
    subset = m_pts[rng.choice(n, size=min(n, config.screen_points), replace=False)]
    dist, _ = index.query((subset[None, :, :] + hyps[:, None, :]).reshape(-1, 2))
    screen = (dist.reshape(len(hyps), -1) < config.inlier_threshold).sum(axis=1)
    top = np.argsort(-screen, kind="stable")[: config.rescored]

    best_t = centroid(designed) - centroid(measured)
    best_count, best_inl, best_feet = score(best_t)
    for i in top:
        count, inl, feet = score(hyps[i])
        if count > best_count:
            best_t, best_count, best_inl, best_feet = hyps[i], count, inl, feet

    if best_count > 0:
        refined = best_t + np.mean(best_feet[best_inl] - (m_pts[best_inl] + best_t), axis=0)
        r_count, r_inl, _ = score(refined)
        if r_count >= best_count:
            best_t, best_count, best_inl = refined, r_count, r_inl

    fraction = best_count / n
    ok = fraction >= config.min_inlier_fraction
    if best_count:
        dist, _ = index.query(m_pts[best_inl] + best_t)
        rms = float(np.sqrt(np.mean(dist * dist)))
    else:
        rms = _rms_residual(index, m_pts + best_t)
    return MatchResult(
        Displacement(float(best_t[0]), float(best_t[1])),
        rms,
        config.iterations,
        converged=ok,
        inlier_fraction=fraction,
        method="ransac",
        error=None if ok else f"inlier fraction {fraction:.3f} below {config.min_inlier_fraction}",
    )
