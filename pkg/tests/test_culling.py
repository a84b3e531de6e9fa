import math
import warnings

import cv2
import numpy as np
import pytest

from oracles import dbscan_bruteforce, same_partition
from scenarios import CULL_SIZE, culling_case
from srslam.core import CameraIntrinsics, Detection, FeatureLabel, FeaturePoint, hat
from srslam.culling import (
    NOISE,
    CullBranch,
    CullingConfig,
    FlowField,
    RegionOrigin,
    ScaleMode,
    adaptive_dbscan_params,
    adaptive_scale,
    apply_labels,
    build_regions,
    cull,
    dbscan,
    depth_preclusters,
    epipolar_anomalies,
    flow_anomalies,
    iqr_depth_threshold,
    lk_flow,
    potential_regions,
)
from srslam.errors import EmptyInput, FewTracksWarning, InsufficientMatches


def smooth_texture(h=120, w=160, seed=0):
    rng = np.random.default_rng(seed)
    img = cv2.GaussianBlur(rng.uniform(size=(h, w)), (0, 0), 2.0)
    return (img - img.min()) / (img.max() - img.min())


def grid_points(w, h, margin=20, step=15):
    xs, ys = np.meshgrid(np.arange(margin, w - margin, step), np.arange(margin, h - margin, step))
    return np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)


# ---------------------------------------------------------------------------
# Flow and anomalies
# ---------------------------------------------------------------------------


def test_lk_identity_pair_gives_zero_flow():
    img = smooth_texture()
    ff = lk_flow(img, img, grid_points(160, 120))
    assert ff.tracked.all()
    assert np.max(np.abs(ff.flow)) < 1e-3


def test_lk_recovers_two_pixel_shift():
    img = smooth_texture()
    shifted = np.roll(img, 2, axis=1)  # content moves 2 px right
    ff = lk_flow(img, shifted, grid_points(160, 120))
    assert ff.tracked.mean() > 0.9
    f = ff.flow[ff.tracked]
    assert np.all(np.abs(f[:, 0] - 2.0) <= 0.2)
    assert np.all(np.abs(f[:, 1]) <= 0.2)


def test_lk_zero_gradient_region_is_lost():
    img = smooth_texture()
    img[40:100, 40:120] = 0.5
    ff = lk_flow(img, img, [[80.0, 70.0], [20.0, 20.0]])
    assert not ff.tracked[0]
    assert np.isnan(ff.flow[0]).all()


def _field(flows):
    flows = np.asarray(flows, dtype=np.float64)
    pos = np.zeros_like(flows)
    return FlowField(pos, pos + flows, np.ones(len(flows), dtype=bool))


def test_flow_anomaly_examples():
    assert flow_anomalies(_field(np.tile([3.0, 1.0], (50, 1)))) == set()
    flows = np.zeros((100, 2))
    flows[37] = (20.0, 0.0)
    assert flow_anomalies(_field(flows)) == {37}
    lost = FlowField(np.zeros((10, 2)), np.full((10, 2), np.nan), np.zeros(10, dtype=bool))
    with pytest.warns(FewTracksWarning):
        assert flow_anomalies(lost) == set()


def _two_view(n=80, seed=0, n_moving=0):
    rng = np.random.default_rng(seed)
    K = np.array([[500.0, 0, 320], [0, 500.0, 240], [0, 0, 1]])
    X = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(2, 6, n)])
    ang = 0.05
    R = np.array([[math.cos(ang), 0, math.sin(ang)], [0, 1, 0], [-math.sin(ang), 0, math.cos(ang)]])
    t = np.array([0.3, 0.02, 0.05])

    def proj(P):
        q = P @ K.T
        return q[:, :2] / q[:, 2:]

    p1 = proj(X)
    p2 = proj(X @ R.T + t)
    Kinv = np.linalg.inv(K)
    F = Kinv.T @ hat(t) @ R @ Kinv
    moving = rng.choice(n, n_moving, replace=False)
    for i in moving:
        line = F @ np.array([p1[i, 0], p1[i, 1], 1.0])
        normal = line[:2] / np.linalg.norm(line[:2])
        p2[i] += normal * rng.uniform(5.0, 10.0) * rng.choice([-1, 1])
    return p1, p2, set(int(i) for i in moving)


def test_epipolar_static_scene_has_no_anomalies():
    p1, p2, _ = _two_view()
    assert epipolar_anomalies(p1, p2) == set()


def test_epipolar_flags_exactly_the_independent_movers():
    p1, p2, moving = _two_view(n=100, seed=3, n_moving=10)
    assert epipolar_anomalies(p1, p2) == moving


def test_epipolar_needs_eight_matches():
    p1, p2, _ = _two_view(n=7)
    with pytest.raises(InsufficientMatches):
        epipolar_anomalies(p1, p2)


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------


def test_regions_empty_without_evidence():
    assert build_regions([], [], np.zeros((5, 2)), (640, 480)) == []


def test_one_box_one_region():
    rng = np.random.default_rng(0)
    inside = rng.uniform([110, 110], [190, 190], size=(12, 2))
    outside = rng.uniform([300, 300], [400, 400], size=(8, 2))
    pos = np.vstack([inside, outside])
    regions = build_regions([Detection("person", 0.9, (100, 100, 200, 200), True)], [], pos, (640, 480))
    assert len(regions) == 1
    assert regions[0].origin is RegionOrigin.DETECTION_BOX
    assert regions[0].members == tuple(range(12))


def test_anomaly_cluster_outside_boxes_forms_region():
    pos = np.array([[50.0, 50.0], [55.0, 52.0], [400.0, 300.0], [600.0, 50.0]])
    regions = build_regions([], [0, 1], pos, (640, 480), padding=40)
    assert len(regions) == 1
    r = regions[0]
    assert r.origin is RegionOrigin.ANOMALY_CLUSTER
    assert r.members == (0, 1)
    assert r.bbox == (10.0, 10.0, 95.0, 92.0)


def test_anomaly_inside_box_adds_no_region():
    pos = np.array([[150.0, 150.0], [160.0, 160.0]])
    regions = build_regions([Detection("person", 0.9, (100, 100, 200, 200), True)], [0], pos, (640, 480))
    assert [r.origin for r in regions] == [RegionOrigin.DETECTION_BOX]


# ---------------------------------------------------------------------------
# Depth pre-clustering and adaptive parameters
# ---------------------------------------------------------------------------


def test_iqr_examples():
    assert iqr_depth_threshold([1, 2, 3, 4]) == 2.0
    assert iqr_depth_threshold([2.5] * 7) == 0.0
    assert iqr_depth_threshold(np.arange(1, 101)) == 50.0
    with pytest.raises(EmptyInput):
        iqr_depth_threshold([])


def test_depth_precluster_examples():
    groups = depth_preclusters([1.0, 5.0, 1.1, 5.2], 0.5)
    assert [g.tolist() for g in groups] == [[0, 2], [1, 3]]
    assert [g.tolist() for g in depth_preclusters([2.0] * 5, 0.0)] == [[0, 1, 2, 3, 4]]
    assert len(depth_preclusters([1.0, 1.1, 5.0, 5.2], 10.0)) == 1


def test_depth_preclusters_partition_indices():
    rng = np.random.default_rng(4)
    d = rng.uniform(0.5, 5.0, 60)
    d[[3, 9]] = np.nan
    d[11] = 0.0
    groups = depth_preclusters(d, 0.1)
    flat = np.concatenate(groups)
    assert sorted(flat.tolist()) == list(range(60))
    assert groups[-1].tolist() == [3, 9, 11]


def test_adaptive_scale_examples():
    lit = CullingConfig(scale_mode=ScaleMode.LITERAL)
    assert adaptive_scale(0.0, 1.0) == pytest.approx(1.25, abs=1e-12)
    assert adaptive_scale(0.0, 1.0, lit) == pytest.approx(1.25, abs=1e-12)
    assert adaptive_scale(1e3, 1.0) == pytest.approx(2.0, abs=1e-12)
    assert adaptive_scale(2.0, 1.0) == pytest.approx(0.5 + 1.5 / (1 + math.exp(-2.0)), abs=1e-12)
    assert adaptive_scale(2.0, 1.0) == pytest.approx(1.8212, abs=1e-4)


def test_adaptive_dbscan_params_examples():
    eps, min_pts = adaptive_dbscan_params(0.0, 0.0)
    assert eps == pytest.approx(0.025, abs=1e-12) and min_pts == 4
    eps, _ = adaptive_dbscan_params(1e3, 0.0)
    assert eps == pytest.approx(0.04, abs=1e-12)
    _, min_pts = adaptive_dbscan_params(0.0, -1e3)
    assert min_pts == 2


def test_culling_config_validation():
    with pytest.raises(ValueError):
        CullingConfig(eps_base=0.0)
    with pytest.raises(ValueError):
        CullingConfig(min_scale=2.0, max_scale=1.0)


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------


def test_dbscan_single_cluster_and_all_noise():
    tight = np.random.default_rng(0).uniform(0, 0.1, size=(20, 2))
    lab = dbscan(tight, 1.0, 3)
    assert lab.n_clusters == 1 and np.all(lab.labels == 0)
    sparse = np.arange(10.0).reshape(-1, 1) * 5.0
    lab = dbscan(sparse, 1.0, 2)
    assert lab.n_clusters == 0 and np.all(lab.labels == NOISE)


def test_dbscan_two_blobs_match_oracle():
    rng = np.random.default_rng(1)
    pts = np.vstack([rng.normal(0, 0.1, (50, 2)), rng.normal(5, 0.1, (50, 2))])
    lab = dbscan(pts, 0.3, 4)
    ref, n_ref = dbscan_bruteforce(pts, 0.3, 4)
    assert lab.n_clusters == n_ref == 2
    assert np.array_equal(lab.labels, ref)


def test_dbscan_counts_one_row_per_region_query():
    pts = np.random.default_rng(2).uniform(size=(30, 2))
    assert dbscan(pts, 0.2, 3).distance_evals == 30 * 30


def test_dbscan_rejects_bad_parameters():
    with pytest.raises(ValueError):
        dbscan(np.zeros((3, 2)), 0.0, 3)
    with pytest.raises(ValueError):
        dbscan(np.zeros((3, 2)), 1.0, 1)


def test_dbscan_noise_monotone_in_parameters():
    rng = np.random.default_rng(5)
    for _ in range(30):
        pts = rng.uniform(size=(int(rng.integers(10, 80)), 2))
        eps = float(rng.uniform(0.03, 0.2))
        m = int(rng.integers(2, 8))
        base = dbscan(pts, eps, m).labels == NOISE
        wider = dbscan(pts, eps * 1.5, m).labels == NOISE
        denser = dbscan(pts, eps, m + 2).labels == NOISE
        assert np.all(wider <= base)
        assert np.all(base <= denser)


def test_preclustering_preserves_partition_when_gaps_exceed_eps():
    rng = np.random.default_rng(6)
    for _ in range(20):
        n = 120
        z = np.concatenate([rng.normal(1.0, 0.01, n // 2), rng.normal(2.0, 0.01, n // 2)])
        pts = np.column_stack([rng.uniform(0, 0.2, n), rng.uniform(0, 0.2, n), z])
        eps, m = 0.03, 3
        flat = dbscan(pts, eps, m).labels
        combined = np.full(n, NOISE)
        offset = 0
        for g in depth_preclusters(z, eps):
            lab = dbscan(pts[g], eps, m)
            combined[g] = np.where(lab.labels == NOISE, NOISE, lab.labels + offset)
            offset += lab.n_clusters
        assert same_partition(flat, combined)


# ---------------------------------------------------------------------------
# Culling decisions
# ---------------------------------------------------------------------------


def _blob_features():
    """Near anomalous blob (ids 0-29) and far consistent blob (ids 30-59) in one box."""
    rng = np.random.default_rng(7)
    near = [FeaturePoint(tuple(rng.uniform([120, 120], [160, 160])), 1.0, float(rng.normal(1.0, 0.01))) for _ in range(30)]
    far = [FeaturePoint(tuple(rng.uniform([120, 120], [160, 160])), 1.0, float(rng.normal(3.0, 0.01))) for _ in range(30)]
    outside = [FeaturePoint((400.0 + k, 300.0), 1.0, 2.0) for k in range(5)]
    feats = near + far + outside
    regions = build_regions([Detection("person", 0.9, (100, 100, 200, 200), True)], [], np.array([f.position for f in feats]), (640, 480))
    return feats, regions, set(range(30))


def test_cull_aggressive_removes_all_members():
    feats, regions, anomalies = _blob_features()
    res = cull(feats, regions, 100.0, 0.5, 1.0, False, anomalies, diag=800.0)
    assert res.branch is CullBranch.AGGRESSIVE
    assert res.removed[:60].all() and not res.removed[60:].any()
    assert res.n_potential == 60 and res.n_removed == 60


def test_cull_refined_removes_only_anomalous_blob():
    feats, regions, anomalies = _blob_features()
    res = cull(feats, regions, 10.0, 0.5, 1.0, False, anomalies, diag=800.0)
    assert res.branch is CullBranch.REFINED
    assert res.removed[:30].all()
    assert not res.removed[30:].any()
    assert res.n_pregroups == 2


def test_cull_without_regions_changes_nothing():
    feats, _, _ = _blob_features()
    res = cull(feats, [], 10.0, 0.5, 1.0, False, set(range(30)))
    assert all(lab is FeatureLabel.STATIC for lab in res.labels)
    assert res.n_removed == 0


def test_apply_labels_walks_the_label_chain():
    feats, regions, anomalies = _blob_features()
    res = cull(feats, regions, 100.0, 0.5, 1.0, False, anomalies, diag=800.0)
    out = apply_labels(feats, res)
    assert [f.label for f in out] == list(res.labels)


def test_refined_culling_on_seeded_scene():
    case = culling_case(0)
    anomalies, regions, used_epi = potential_regions(
        case.flow.original, case.flow, case.detections, True, CULL_SIZE
    )
    assert used_epi
    members = sorted({i for r in regions for i in r.members})
    assert (~case.dynamic[members]).sum() > 0  # static background inside the box
    res = cull(case.features, regions, 10.0, 1.0, 1.0, False, anomalies)
    tp = int((res.removed & case.dynamic).sum())
    assert tp / res.removed.sum() >= 0.9
    assert tp / case.dynamic.sum() >= 0.9


def test_potential_regions_skip_epipolar_on_bad_frames():
    case = culling_case(1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        _, _, used = potential_regions(case.flow.original, case.flow, case.detections, False, CULL_SIZE)
    assert not used


def test_static_class_box_is_not_a_region():
    pos = np.array([[150.0, 150.0]])
    assert build_regions([Detection("chair", 0.9, (100, 100, 200, 200), False)], [], pos, (640, 480)) == []
