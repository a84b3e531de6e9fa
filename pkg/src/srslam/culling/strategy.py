"""Adaptive dynamic-feature removal: aggressive removal under high motion,
otherwise depth-assisted adaptive DBSCAN inside the potential regions."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from ..core import Detection, FeatureLabel, FeaturePoint, check_transition, feature_arrays
from ..errors import EmptyInput, FewTracksWarning, InsufficientMatches
from .dbscan import NOISE, dbscan
from .epipolar import epipolar_anomalies
from .flow import FlowField, flow_anomalies
from .regions import build_regions


class ScaleMode(str, enum.Enum):
    BOUNDED = "Bounded"
    LITERAL = "Literal"


@dataclass(frozen=True)
class CullingConfig:
    eps_base: float = 0.02
    minpts_base: int = 3
    min_scale: float = 0.5
    max_scale: float = 2.0
    alpha_eps: float = 1.0
    alpha_min: float = 1.0
    scale_mode: ScaleMode = ScaleMode.BOUNDED
    motion_threshold: float = 60.0
    epipolar_threshold: float = 1.0
    ransac_iters: int = 200
    ransac_seed: int = 0
    mad_factor: float = 3.0
    flow_min_deviation: float = 0.5
    region_padding: int = 40
    # Multiplies the IQR before it is used as the depth gap threshold.
    depth_gap_scale: float = 0.5
    cluster_anomaly_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scale_mode", ScaleMode(self.scale_mode))
        for name in ("eps_base", "minpts_base", "min_scale", "max_scale", "motion_threshold", "epipolar_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.min_scale < self.max_scale:
            raise ValueError("min_scale must be below max_scale")


class CullBranch(str, enum.Enum):
    AGGRESSIVE = "aggressive"
    REFINED = "refined"
    INIT = "init"


@dataclass(frozen=True)
class CullResult:
    labels: tuple
    branch: CullBranch
    n_potential: int
    n_removed: int
    distance_evals: int = 0
    n_pregroups: int = 0

    @property
    def removed(self) -> np.ndarray:
        return np.array([lab is FeatureLabel.REMOVED for lab in self.labels], dtype=bool)


CULLING_CSV_HEADER = ["frame_id", "n_features", "n_potential", "n_removed", "branch"]


# ---------------------------------------------------------------------------
# Depth pre-clustering
# ---------------------------------------------------------------------------


def iqr_depth_threshold(sorted_depths: Sequence[float]) -> float:
    d = np.asarray(sorted_depths, dtype=np.float64)
    n = d.size
    if n == 0:
        raise EmptyInput("no depths for the IQR threshold")
    q1 = d[min(int(math.floor(0.25 * n)), n - 1)]
    q3 = d[min(int(math.floor(0.75 * n)), n - 1)]
    return float(q3 - q1)


def depth_preclusters(depths, eps_depth: float) -> list:
    """Group indices by single-linkage along sorted depth.

    A gap larger than ``eps_depth`` between consecutive sorted depths starts a
    new group. Invalid (NaN or <= 0) depths form one trailing group. Each
    group is returned as a sorted index array.
    """
    if eps_depth < 0:
        raise ValueError("eps_depth must be >= 0")
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    valid = np.isfinite(d) & (d > 0)
    vidx = np.flatnonzero(valid)
    groups = []
    if vidx.size:
        order = vidx[np.argsort(d[vidx], kind="stable")]
        start = 0
        for k in range(1, order.size):
            if d[order[k]] - d[order[k - 1]] > eps_depth:
                groups.append(np.sort(order[start:k]))
                start = k
        groups.append(np.sort(order[start:]))
    inv = np.flatnonzero(~valid)
    if inv.size:
        groups.append(inv)
    return groups


# ---------------------------------------------------------------------------
# Adaptive parameters
# ---------------------------------------------------------------------------


def adaptive_scale(r: float, alpha: float, cfg: CullingConfig = CullingConfig()) -> float:
    s = float(expit(alpha * r))
    if cfg.scale_mode is ScaleMode.LITERAL:
        return (cfg.min_scale + cfg.max_scale) * s
    return cfg.min_scale + (cfg.max_scale - cfg.min_scale) * s


def adaptive_dbscan_params(r_final: float, r_feature: float, cfg: CullingConfig = CullingConfig()):
    eps = cfg.eps_base * adaptive_scale(r_final, cfg.alpha_eps, cfg)
    raw = cfg.minpts_base * adaptive_scale(r_feature, cfg.alpha_min, cfg)
    min_pts = max(2, int(math.floor(raw + 0.5)))
    return eps, min_pts


# ---------------------------------------------------------------------------
# Stage 1: potential regions
# ---------------------------------------------------------------------------


def potential_regions(
    positions,
    flow: Optional[FlowField],
    detections: Sequence[Detection],
    is_good: bool,
    image_size,
    cfg: CullingConfig = CullingConfig(),
):
    """Flow anomalies (plus epipolar ones on GOOD frames) merged with boxes.

    Returns ``(anomaly_ids, regions, used_epipolar)``.
    """
    anomalies: set = set()
    used_epipolar = False
    if flow is not None and len(flow):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FewTracksWarning)
            anomalies = flow_anomalies(flow, cfg.mad_factor, cfg.flow_min_deviation)
        if is_good:
            usable = flow.tracked.copy()
            if anomalies:
                usable[list(anomalies)] = False
            try:
                anomalies |= epipolar_anomalies(
                    flow.original,
                    flow.matched,
                    usable,
                    cfg.epipolar_threshold,
                    cfg.ransac_iters,
                    cfg.ransac_seed,
                )
                used_epipolar = True
            except InsufficientMatches:
                pass
    regions = build_regions(detections, anomalies, positions, image_size, cfg.region_padding)
    return anomalies, regions, used_epipolar


# ---------------------------------------------------------------------------
# Stage 2: removal
# ---------------------------------------------------------------------------


def refined_labels(
    pos: np.ndarray,
    depth: np.ndarray,
    members: np.ndarray,
    anomalous: np.ndarray,
    r_final: float,
    r_feature: float,
    diag: float,
    cfg: CullingConfig = CullingConfig(),
    use_preclustering: bool = True,
):
    """Removal decision for region members via depth-assisted adaptive DBSCAN.

    Returns ``(remove_mask over members, distance_evals, n_pregroups)``.
    """
    m_depth = depth[members]
    valid = np.isfinite(m_depth) & (m_depth > 0)
    if use_preclustering and valid.any():
        eps_depth = iqr_depth_threshold(np.sort(m_depth[valid])) * cfg.depth_gap_scale
        groups = depth_preclusters(m_depth, eps_depth)
    else:
        groups = [np.arange(members.size)]
    eps, min_pts = adaptive_dbscan_params(r_final, r_feature, cfg)
    remove = np.zeros(members.size, dtype=bool)
    evals = 0
    for g in groups:
        idx = members[g]
        pts = np.column_stack([pos[idx, 0] / diag, pos[idx, 1] / diag, np.where(valid[g], m_depth[g], 0.0)])
        lab = dbscan(pts, eps, min_pts)
        evals += lab.distance_evals
        anom = anomalous[idx]
        for c in range(lab.n_clusters):
            sel = lab.labels == c
            if anom[sel].mean() > cfg.cluster_anomaly_fraction:
                remove[g[sel]] = True
        noise = lab.labels == NOISE
        remove[g[noise & anom]] = True
    return remove, evals, len(groups)


def cull(
    features: Sequence[FeaturePoint],
    regions: Sequence,
    r_motion: float,
    r_final: float,
    r_feature: float,
    is_init: bool,
    anomalies: Iterable[int] = (),
    diag: Optional[float] = None,
    cfg: CullingConfig = CullingConfig(),
) -> CullResult:
    """Label every feature Static or Removed (region members pass through
    PotentialDynamic first)."""
    n = len(features)
    pos, depth, _ = feature_arrays(features)
    if diag is None:
        diag = float(np.hypot(*(pos.max(axis=0) + 1))) if n else 1.0
    labels = [f.label for f in features]
    members = sorted({i for r in regions for i in r.members})
    if is_init:
        branch = CullBranch.INIT
    elif r_motion > cfg.motion_threshold:
        branch = CullBranch.AGGRESSIVE
    else:
        branch = CullBranch.REFINED
    if not members:
        return CullResult(tuple(labels), branch, 0, sum(lab is FeatureLabel.REMOVED for lab in labels))
    members = np.array(members, dtype=np.intp)
    for i in members:
        check_transition(labels[i], FeatureLabel.POTENTIAL_DYNAMIC)
        labels[i] = FeatureLabel.POTENTIAL_DYNAMIC

    evals = 0
    n_groups = 0
    if branch is CullBranch.AGGRESSIVE:
        remove = np.ones(members.size, dtype=bool)
    else:
        anomalous = np.zeros(n, dtype=bool)
        anom = [i for i in anomalies if 0 <= i < n]
        anomalous[anom] = True
        remove, evals, n_groups = refined_labels(pos, depth, members, anomalous, r_final, r_feature, diag, cfg)
    for i, rm in zip(members, remove):
        labels[i] = FeatureLabel.REMOVED if rm else FeatureLabel.STATIC
    n_removed = sum(lab is FeatureLabel.REMOVED for lab in labels)
    return CullResult(tuple(labels), branch, int(members.size), n_removed, evals, n_groups)


def apply_labels(features: Sequence[FeaturePoint], result: CullResult) -> list:
    """Features with the culling outcome applied (Static stays Static)."""
    out = []
    for f, lab in zip(features, result.labels):
        if lab is FeatureLabel.REMOVED and f.label is not FeatureLabel.REMOVED:
            f = f.with_label(FeatureLabel.POTENTIAL_DYNAMIC).with_label(FeatureLabel.REMOVED)
        out.append(f)
    return out
