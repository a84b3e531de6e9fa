import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from oracles import rodrigues
from srslam.core import PoseSE3, backproject_points, project_points, so3_exp
from srslam.errors import DegenerateAlignment, InsufficientOverlap, InvalidBaseline
from srslam.evaluation import (
    SceneSpec,
    align_umeyama,
    compute_ate,
    compute_rpe,
    evaluate_trajectory,
    generate_scene,
    improvement,
    rmse_sd,
    write_sequence,
)


def random_trajectory(seed, n=60, dt=0.1):
    rng = np.random.default_rng(seed)
    poses, T = [], PoseSE3.identity()
    for k in range(n):
        T = T @ random_pose(rng, t_scale=0.05, max_angle=math.radians(3))
        poses.append((k * dt, T))
    return poses


def transformed(traj, G):
    return [(t, G @ p) for t, p in traj]


# ---------------------------------------------------------------------------
# Alignment and ATE
# ---------------------------------------------------------------------------


def test_umeyama_identity():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    T = align_umeyama(pts, pts)
    assert np.allclose(T.matrix(), np.eye(4), atol=1e-12)


def test_umeyama_recovers_yaw():
    pts = np.random.default_rng(1).normal(size=(30, 3))
    R = rodrigues([0, 0, 1], math.radians(30))
    T = align_umeyama(pts, pts @ R.T + [1.0, -2.0, 0.5])
    assert np.max(np.abs(T.R - R)) < 1e-9
    assert np.allclose(T.translation, [1.0, -2.0, 0.5], atol=1e-9)


def test_umeyama_degenerate_inputs():
    with pytest.raises(DegenerateAlignment):
        align_umeyama(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateAlignment):
        align_umeyama(line, line)


def test_rmse_sd_population():
    assert rmse_sd([3.0, 4.0]) == pytest.approx((math.sqrt(12.5), 0.5), abs=1e-15)
    with pytest.raises(InsufficientOverlap):
        rmse_sd([])


def test_ate_against_itself_is_zero():
    traj = random_trajectory(2)
    assert compute_ate(traj, traj) == (0.0, 0.0)


def test_ate_constant_offset():
    traj = random_trajectory(3)
    shifted = [(t, PoseSE3(p.rotation, p.translation + [0.1, 0.0, 0.0])) for t, p in traj]
    rmse, sd = compute_ate(shifted, traj, align=False)
    assert rmse == pytest.approx(0.1, abs=1e-12) and sd == pytest.approx(0.0, abs=1e-12)
    rmse, _ = compute_ate(shifted, traj, align=True)
    assert rmse < 1e-12


def test_ate_invariant_to_global_transform():
    traj = random_trajectory(4)
    G = random_pose(np.random.default_rng(5))
    assert compute_ate(transformed(traj, G), traj)[0] < 1e-9


def test_ate_time_permuted_trajectory():
    traj = random_trajectory(6)
    rng = np.random.default_rng(7)
    perm = rng.permutation(len(traj))
    shuffled = [(traj[i][0], traj[j][1]) for i, j in enumerate(perm)]
    assert compute_ate(shuffled, traj)[0] > 0.05
    late = [(t + 100.0, p) for t, p in traj]
    with pytest.raises(InsufficientOverlap):
        compute_ate(late, traj)


# ---------------------------------------------------------------------------
# RPE
# ---------------------------------------------------------------------------


def test_rpe_against_itself_is_zero():
    traj = random_trajectory(8)
    assert np.allclose(compute_rpe(traj, traj), 0.0, atol=1e-12)


def test_rpe_constant_drift():
    gt = [(0.1 * k, PoseSE3.identity()) for k in range(30)]
    est = [(0.1 * k, PoseSE3.from_rt(np.eye(3), [0.001 * k, 0, 0])) for k in range(30)]
    t_rmse, t_sd, r_rmse, r_sd = compute_rpe(est, gt)
    assert t_rmse == pytest.approx(0.001, abs=1e-9) and t_sd == pytest.approx(0.0, abs=1e-9)
    assert r_rmse == 0.0


def test_rpe_pure_yaw_drift():
    gt = [(0.1 * k, PoseSE3.identity()) for k in range(30)]
    est = [(0.1 * k, PoseSE3.from_rt(so3_exp([0, 0, math.radians(0.1 * k)]), np.zeros(3))) for k in range(30)]
    t_rmse, _, r_rmse, r_sd = compute_rpe(est, gt)
    assert r_rmse == pytest.approx(0.1, abs=1e-9) and r_sd == pytest.approx(0.0, abs=1e-9)
    assert t_rmse == 0.0


def test_rpe_invariant_to_global_transform():
    traj = random_trajectory(9)
    other = random_trajectory(10)
    G = random_pose(np.random.default_rng(11))
    a = compute_rpe(other, traj)
    b = compute_rpe(transformed(other, G), traj)
    assert np.allclose(a, b, atol=1e-9)


def test_rpe_needs_two_matches():
    with pytest.raises(InsufficientOverlap):
        compute_rpe([(0.0, PoseSE3.identity())], [(0.0, PoseSE3.identity())])


def test_evaluate_trajectory_report():
    traj = random_trajectory(12)
    rep = evaluate_trajectory(traj, traj)
    assert rep.n_matched == len(traj)
    assert rep.ate_rmse == 0.0
    assert np.allclose(list(rep.values().values()), 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Improvement
# ---------------------------------------------------------------------------


def test_improvement_examples():
    assert improvement(0.3, 0.3) == 0.0
    assert improvement(0.0, 0.3) == 100.0
    assert improvement(0.0153, 0.2503) == pytest.approx(93.89, abs=0.01)
    with pytest.raises(InvalidBaseline):
        improvement(0.1, 0.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.0, 1e3), st.floats(1e-6, 1e3))
def test_improvement_formula(a, b):
    assert improvement(a, b) == pytest.approx(100.0 * (1.0 - a / b), rel=1e-12, abs=1e-9)


# ---------------------------------------------------------------------------
# Synthetic scene generator
# ---------------------------------------------------------------------------


def test_static_scene_has_no_dynamic_labels():
    scene = generate_scene(SceneSpec(n_frames=5, n_bodies=0, seed=0, width=160, height=120))
    f = scene.features(3, 2)
    assert len(f.dynamic) > 0 and not f.dynamic.any()
    assert scene.detections(3) == []


def test_body_flow_departs_from_camera_induced_flow():
    scene = generate_scene(SceneSpec(n_frames=12, n_bodies=1, seed=1, width=320, height=240, body_speed_px=10.0))
    f = scene.features(10, 9)
    assert f.dynamic.sum() > 10
    K = scene.intrinsics
    T = scene.relative_pose(10, 9)
    rigid = project_points(K, T.act(backproject_points(K, f.positions, f.depth)))
    gap = np.linalg.norm(f.matched - rigid, axis=1)
    assert np.all(gap[f.dynamic] >= 5.0)
    assert np.all(gap[~f.dynamic] < 1e-6)


def test_same_seed_same_scene(tmp_path):
    spec = SceneSpec(n_frames=4, n_bodies=1, seed=5, width=160, height=120)
    a, b = generate_scene(spec), generate_scene(spec)
    for i in range(4):
        ga, da = a.render(i)
        gb, db = b.render(i)
        assert np.array_equal(ga, gb) and np.array_equal(da, db)
    write_sequence(a, tmp_path / "a")
    write_sequence(b, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_rendered_depth_matches_geometry():
    scene = generate_scene(SceneSpec(n_frames=3, n_bodies=1, seed=2, width=320, height=240))
    for i in range(3):
        uv, z, vis = scene.visible(i)
        z_ray, _, _ = scene.raycast(i, uv[vis])
        assert vis.sum() > 100
        assert np.max(np.abs(z_ray - z[vis])) <= 1e-6
        # pixel-centre samples of the depth image agree with the ray caster
        _, depth = scene.render(i)
        rr, cc = np.mgrid[0:240:17, 0:320:23]
        z_px, _, _ = scene.raycast(i, np.column_stack([cc.ravel(), rr.ravel()]).astype(float))
        img = depth[rr.ravel(), cc.ravel()]
        ok = img > 0
        assert np.max(np.abs(img[ok] - z_px[ok])) <= 1e-6
