import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from railmatch.classical import (
    IcpConfig,
    MatchResult,
    RansacConfig,
    icp_translate,
    objective,
    ransac_translate,
)
from railmatch.geometry import Displacement, PolylineIndex, Profile, ProfileKind, centroid, resample, translate
from railmatch.synthetic import GenConfig, add_sensor_noise, iter_samples, make_design_profile

T = ProfileKind.TYPICAL


@pytest.fixture(scope="module")
def designed():
    p = make_design_profile(T)
    return translate(p, -centroid(p))


# --- objective --------------------------------------------------------------------------


def test_objective_zero_on_self(designed):
    assert objective(designed, designed, Displacement(0, 0)) == 0.0


def test_objective_single_point_squared_distance():
    seg = Profile(T, [(0, 0), (10, 0)])
    # a one-point "profile" is not valid, so use two coincident-distance points
    m = Profile(T, [(3, 2), (4, 2)])
    assert objective(m, seg, (0, 0), trim_ratio=1.0) == pytest.approx(4.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_objective_change_of_variables(ax, ay, dx, dy):
    p = make_design_profile(ProfileKind.SWITCH)
    m = translate(resample(p, 2.0), (1.0, -2.0))
    a = np.array([ax, ay])
    lhs = objective(m, p, np.array([dx, dy]))
    rhs = objective(translate(m, a), p, np.array([dx, dy]) - a)
    assert rhs == pytest.approx(lhs, rel=1e-9, abs=1e-12)


def test_objective_without_correspondences_errors(designed):
    with pytest.raises(ValueError):
        objective(designed, designed, (500.0, 0.0), max_corr_dist=10.0)


# --- ICP ---------------------------------------------------------------------------------


def test_icp_recovers_pure_translation(designed):
    r = icp_translate(translate(designed, (-3, 2)), designed)
    assert r.converged
    assert r.displacement.dx == pytest.approx(3, abs=1e-3)
    assert r.displacement.dy == pytest.approx(-2, abs=1e-3)


def test_icp_identity_in_two_iterations(designed):
    r = icp_translate(designed, designed)
    assert (r.displacement.dx, r.displacement.dy) == pytest.approx((0, 0), abs=1e-12)
    assert r.iterations_used <= 2


@settings(max_examples=20, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.sampled_from(list(ProfileKind)))
def test_icp_oracle_exactness(tx, ty, kind):
    p = make_design_profile(kind)
    r = icp_translate(translate(p, (tx, ty)), p)
    assert abs(r.displacement.dx + tx) < 1e-3 and abs(r.displacement.dy + ty) < 1e-3


def _degraded_pairs(n, seed=0, **overrides):
    cfg = GenConfig(master_seed=seed, n_samples=n, **overrides)
    return list(iter_samples(cfg))


@pytest.fixture(scope="module")
def robust_samples():
    return _degraded_pairs(40, seed=21)


def test_icp_objective_monotone_every_iteration(robust_samples):
    for s in robust_samples:
        for start in (None, Displacement(7.0, -9.0)):
            r = icp_translate(s.measured, s.designed, IcpConfig(crown_start=False), initial=start)
            h = np.array(r.objective_history)
            assert np.all(np.diff(h) <= 1e-12), s.id


def test_icp_monotone_with_tight_gate(robust_samples):
    cfg = IcpConfig(crown_start=False, max_corr_dist=0.5)
    for s in robust_samples[:15]:
        r = icp_translate(s.measured, s.designed, cfg)
        if r.error is None:
            assert np.all(np.diff(r.objective_history) <= 1e-12)


def test_icp_frame_consistency(robust_samples):
    cfg = IcpConfig()
    for s in robust_samples[:15]:
        r = icp_translate(s.measured, s.designed, cfg)
        again = icp_translate(translate(s.measured, r.displacement), s.designed, cfg, initial=Displacement(0, 0))
        assert np.hypot(again.displacement.dx, again.displacement.dy) < cfg.convergence_eps * 10


def test_icp_converged_means_small_last_step(designed):
    r = icp_translate(translate(designed, (4, 4)), designed, IcpConfig(convergence_eps=1e-8))
    assert r.converged and r.residual_rms >= 0


def test_icp_robust_on_degraded_samples(robust_samples):
    ok = sum(
        abs(r.displacement.dx - s.label.dx) < 0.4 and abs(r.displacement.dy - s.label.dy) < 0.4
        for s in robust_samples
        for r in [icp_translate(s.measured, s.designed)]
    )
    assert ok / len(robust_samples) >= 0.95


def test_icp_empty_correspondences_flagged(designed):
    far = translate(designed, (300.0, 0.0))
    r = icp_translate(far, designed, IcpConfig(crown_start=False), initial=Displacement(0, 0))
    assert not r.converged and r.error


@pytest.mark.parametrize("bad", [{"max_iterations": 0}, {"trim_ratio": 0.0}, {"trim_ratio": 1.5}, {"max_corr_dist": -1}])
def test_icp_config_validation(bad):
    with pytest.raises(ValueError):
        IcpConfig(**bad)


# --- RANSAC ------------------------------------------------------------------------------


def test_ransac_pure_translation(designed):
    measured = translate(resample(designed, 0.5), (6.0, -11.0))
    r = ransac_translate(measured, designed)
    assert r.converged
    assert abs(r.displacement.dx + 6.0) < 0.3 and abs(r.displacement.dy - 11.0) < 0.3
    assert r.inlier_fraction == pytest.approx(1.0)


def test_ransac_deterministic(robust_samples):
    s = robust_samples[0]
    a = ransac_translate(s.measured, s.designed, RansacConfig(seed=5))
    b = ransac_translate(s.measured, s.designed, RansacConfig(seed=5))
    assert a == b


def test_ransac_never_worse_than_centroid_hypothesis(robust_samples):
    for s in robust_samples[:10]:
        r = ransac_translate(s.measured, s.designed, RansacConfig(iterations=50))
        c = centroid(s.designed) - centroid(s.measured)
        dist, _ = PolylineIndex(s.designed).query(s.measured.points + c)
        assert r.inlier_fraction * len(s.measured.points) >= np.sum(dist < 0.3)


def test_ransac_low_inlier_fraction_is_not_converged(designed):
    junk = Profile(T, np.random.default_rng(0).uniform(-60, 60, size=(200, 2)))
    r = ransac_translate(junk, designed, RansacConfig(iterations=20))
    assert not r.converged and "inlier fraction" in r.error


def _contaminated(seed):
    rng = np.random.default_rng(seed)
    p = make_design_profile(T, seed=seed)
    t = rng.uniform(-15, 15, size=2)
    base = translate(resample(p, 0.5), t)
    return p, add_sensor_noise(base, 0.0, 0.3, 15.0, seed=seed), -t


def test_ransac_beats_icp_under_heavy_outliers():
    ransac_ok = icp_ok = 0
    seeds = range(10)
    for seed in seeds:
        p, m, truth = _contaminated(seed)
        r = ransac_translate(m, p, RansacConfig(iterations=3000, seed=seed))
        err = np.abs(r.displacement.as_array() - truth)
        ransac_ok += bool(np.all(err < 0.4) and r.inlier_fraction >= 0.6)
        i = icp_translate(m, p)
        icp_ok += bool(np.all(np.abs(i.displacement.as_array() - truth) < 0.4))
    assert ransac_ok > len(seeds) / 2
    assert ransac_ok > icp_ok


def test_match_result_dict():
    d = MatchResult(Displacement(1, 2), 0.5, 3, True, method="icp").to_dict()
    assert d["displacement"] == {"dx_mm": 1, "dy_mm": 2}
    assert "inlier_fraction" not in d
