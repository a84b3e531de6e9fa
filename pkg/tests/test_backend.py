
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import two_pass_stats
from scenarios import ba_problem, noiseless_ba_problem
from srslam.assessment import SceneLabel
from srslam.backend import (
    BAObservations,
    KeyframeConfig,
    KeyframeLedger,
    adaptive_threshold,
    information_scale,
    local_ba,
    need_new_keyframe,
    penalize_information,
    selection_weight,
    stereo_measurements,
    stereo_residuals,
    weighted_pose_optimize,
    window_stats,
)
from srslam.core import CameraIntrinsics, PoseSE3, project_points, se3_exp
from srslam.errors import ClampWarning, ColdStart, Degenerate

unit = st.floats(0.0, 1.0)


def max_pose_diff(a, b):
    return max(np.max(np.abs(p.matrix() - q.matrix())) for p, q in zip(a, b))


# ---------------------------------------------------------------------------
# Keyframe selection
# ---------------------------------------------------------------------------


def test_window_stats_examples():
    m, v = window_stats([0.1, 0.1, 0.1])
    assert m == pytest.approx(0.1, abs=1e-15) and v == pytest.approx(0.0, abs=1e-15)
    m, v = window_stats([0.0, 0.2])
    assert m == pytest.approx(0.1, abs=1e-15) and v == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(ColdStart):
        window_stats([])


def test_window_stats_match_two_pass_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        vals = rng.uniform(0, 0.2, 20)
        m, v = window_stats(vals)
        m_ref, v_ref = two_pass_stats(vals)
        assert abs(m - m_ref) <= 1e-12 and abs(v - v_ref) <= 1e-12


def test_selection_weight_examples():
    assert selection_weight(0.0) == 0.0
    assert selection_weight(0.01) == 1.0
    assert selection_weight(5.0) == 1.0
    assert selection_weight(0.0025) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        selection_weight(-1e-3)


def test_adaptive_threshold_worked_example():
    th = adaptive_threshold(0.15, 0.10, 0.30, 0.5, 0.20)
    assert th == pytest.approx(0.30, abs=1e-12)
    assert not 0.15 >= th


@settings(max_examples=500, deadline=None)
@given(unit, unit, unit, unit)
def test_adaptive_threshold_limits(r, mean_bad, mean_kf, th):
    assert adaptive_threshold(r, mean_bad, mean_kf, 1.0, th) == pytest.approx(th + r - mean_bad, abs=1e-12)
    assert adaptive_threshold(r, mean_bad, mean_kf, 0.0, th) == pytest.approx(th - r + mean_kf, abs=1e-12)


def _ledger(bad=(), kf=(), **kw):
    led = KeyframeLedger(KeyframeConfig(**kw))
    led.bad_window.extend(bad)
    led.kf_window.extend(kf)
    return led


def test_good_frames_follow_spacing_rules():
    led = _ledger()
    first = need_new_keyframe(0, SceneLabel.GOOD, 0.9, led, timestamp=0.0, n_tracked=200)
    assert first.accepted and first.reason == "first"
    assert not need_new_keyframe(1, SceneLabel.GOOD, 0.9, led, timestamp=0.1, n_tracked=195).accepted
    assert need_new_keyframe(2, SceneLabel.GOOD, 0.9, led, timestamp=0.2, n_tracked=185).accepted
    assert need_new_keyframe(3, SceneLabel.GOOD, 0.9, led, timestamp=0.45, n_tracked=185).accepted


def test_bad_frames_cold_start():
    led = _ledger()
    for i in range(3):
        d = need_new_keyframe(i, SceneLabel.BAD, 0.19, led)
        assert not d.accepted and d.reason == "cold_start"
    assert need_new_keyframe(3, SceneLabel.BAD, 0.19, led).reason == "adaptive"
    assert list(led.bad_window) == [0.19] * 4


def test_flat_bad_stream_far_below_keyframes_is_rejected():
    led = _ledger(bad=[0.05] * 10, kf=[0.8] * 10)
    d = need_new_keyframe(0, SceneLabel.BAD, 0.05, led)
    assert d.w_select == 0.0
    assert d.th_adaptive == pytest.approx(0.20 - 0.05 + 0.8, abs=1e-12)
    assert not d.accepted


def test_bad_decision_uses_window_before_the_frame():
    led = _ledger(bad=[0.1, 0.1, 0.1], kf=[0.3])
    d = need_new_keyframe(0, SceneLabel.BAD, 0.15, led)
    w = selection_weight(0.0)
    assert d.th_adaptive == pytest.approx(adaptive_threshold(0.15, 0.1, 0.3, w, 0.2), abs=1e-15)


def test_information_scale_examples():
    assert information_scale(0.10) == pytest.approx(0.5, abs=1e-15)
    assert information_scale(0.0) == 0.0
    assert information_scale(0.05, is_bad=False) == 1.0
    assert np.allclose(penalize_information(np.eye(3), 0.15), 0.75 * np.eye(3), atol=1e-15)
    with pytest.warns(ClampWarning):
        assert information_scale(-0.1) == 0.0


@settings(max_examples=300, deadline=None)
@given(unit, unit)
def test_penalty_monotone(a, b):
    lo, hi = sorted((a, b))
    assert information_scale(lo) <= information_scale(hi)


def test_keyframe_config_validation():
    with pytest.raises(ValueError):
        KeyframeConfig(window=0)
    with pytest.raises(ValueError):
        KeyframeConfig(gamma_ref=0.0)


# ---------------------------------------------------------------------------
# Observations and pose-only optimization
# ---------------------------------------------------------------------------

K = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


def test_stereo_measurement_layout():
    m = stereo_measurements(K, [[100.0, 50.0], [10.0, 20.0]], [2.0, 0.0])
    assert m[0].tolist() == [100.0, 50.0, 100.0 - 525.0 * 0.08 / 2.0]
    assert np.isnan(m[1, 2])


def _pose_problem(seed, n=60, noise=0.0):
    rng = np.random.default_rng(seed)
    T = se3_exp(np.r_[rng.normal(0, 0.1, 3), rng.normal(0, 0.05, 3)])
    X = np.column_stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1, 1, n), rng.uniform(2, 5, n)])
    Pc = T.inverse().act(X)
    m = stereo_measurements(K, project_points(K, Pc), Pc[:, 2]) + rng.normal(0, noise, (n, 3))
    init = T.compose(se3_exp(rng.normal(0, 0.01, 6)))
    return T, X, m, init


def test_stereo_residuals_vanish_at_truth():
    T, X, m, _ = _pose_problem(0)
    assert np.max(np.abs(stereo_residuals(K, T.inverse(), X, m))) < 1e-9


def test_pose_optimize_recovers_truth():
    T, X, m, init = _pose_problem(1)
    res = weighted_pose_optimize(K, X, m, init)
    assert np.max(np.abs(res.pose.matrix() - T.matrix())) < 1e-9
    assert all(a >= b for a, b in zip(res.cost_history, res.cost_history[1:]))


def test_uniform_scaling_leaves_pose_unchanged():
    T, X, m, init = _pose_problem(2, noise=0.7)
    base = weighted_pose_optimize(K, X, m, init)
    for s in (1e-3, 0.5, 7.0):
        res = weighted_pose_optimize(K, X, m, init, scales=np.full(len(X), s))
        assert max_pose_diff([res.pose], [base.pose]) < 1e-9


def test_zero_weight_equals_deletion():
    T, X, m, init = _pose_problem(3, noise=0.7)
    drop = np.zeros(len(X), dtype=bool)
    drop[::3] = True
    m_bad = m.copy()
    m_bad[drop] += 25.0
    zeroed = weighted_pose_optimize(K, X, m_bad, init, scales=np.where(drop, 0.0, 1.0))
    deleted = weighted_pose_optimize(K, X[~drop], m[~drop], init)
    assert max_pose_diff([zeroed.pose], [deleted.pose]) < 1e-9


def test_pose_optimize_needs_observations():
    T, X, m, init = _pose_problem(4, n=5)
    with pytest.raises(Degenerate):
        weighted_pose_optimize(K, X, m, init)


def test_pose_prior_pulls_toward_prior():
    T, X, m, init = _pose_problem(5, n=8, noise=2.0)
    free = weighted_pose_optimize(K, X, m, init)
    tight = weighted_pose_optimize(K, X, m, init, prior=T, prior_information=np.eye(6) * 1e8)
    assert np.linalg.norm((tight.pose.inverse() @ T).translation) < np.linalg.norm((free.pose.inverse() @ T).translation)


# ---------------------------------------------------------------------------
# Local bundle adjustment
# ---------------------------------------------------------------------------


def test_local_ba_noiseless_recovers_truth():
    K_, P, X, obs, init, X0 = noiseless_ba_problem(0)
    res = local_ba(K_, init, X0, obs)
    assert res.cost < 1e-12
    assert max_pose_diff(res.poses, P) < 1e-6
    assert np.max(np.abs(res.points - X)) < 1e-6


def test_local_ba_gauge_is_bit_exact():
    K_, P, X, obs, init, X0 = ba_problem(1)
    res = local_ba(K_, init, X0, obs)
    assert res.poses[0] is init[0]
    assert np.array_equal(res.poses[0].matrix(), init[0].matrix())


def test_local_ba_uniform_keyframe_scaling():
    K_, P, X, obs, init, X0 = ba_problem(2)
    base = local_ba(K_, init, X0, obs)
    scaled = local_ba(K_, init, X0, obs, kf_scales=[0.3, 0.3, 0.3])
    assert max_pose_diff(base.poses, scaled.poses) < 1e-9
    assert np.max(np.abs(base.points - scaled.points)) < 1e-9


def test_local_ba_zero_weight_observations_equal_deletion():
    K_, P, X, obs, init, X0 = ba_problem(3)
    drop = (obs.kf == 2) & (obs.point % 4 == 0)
    info = np.where(drop[:, None, None], 0.0, 1.0) * np.eye(3)
    zeroed = local_ba(K_, init, X0, obs, information=info)
    keep = ~drop
    sub = BAObservations(obs.kf[keep], obs.point[keep], obs.measurements[keep])
    deleted = local_ba(K_, init, X0, sub)
    assert max_pose_diff(zeroed.poses, deleted.poses) < 1e-9
    assert np.max(np.abs(zeroed.points - deleted.points)) < 1e-9


def test_local_ba_rejects_unconstrained_keyframe():
    K_, P, X, obs, init, X0 = ba_problem(3)
    with pytest.raises(Degenerate):
        local_ba(K_, init, X0, obs, kf_scales=[1.0, 1.0, 0.0])


def test_local_ba_downweighting_corrupted_keyframe_helps():
    K_, P, X, obs, init, X0 = ba_problem(4)
    plain = local_ba(K_, init, X0, obs)
    weighted = local_ba(K_, init, X0, obs, kf_scales=[1.0, 1.0, 0.1])
    err = lambda r: np.linalg.norm((P[1].inverse() @ r.poses[1]).translation)  # noqa: E731
    assert err(weighted) < err(plain)


def test_local_ba_window_limits():
    K_, P, X, obs, init, X0 = noiseless_ba_problem(5, n_kf=2)
    single = local_ba(K_, init[:1], X0, obs)
    assert single.iterations == 0 and single.poses[0] is init[0]
    with pytest.raises(ValueError):
        local_ba(K_, [PoseSE3.identity()] * 9, X0, obs)
