"""Per-frame scene reliability: four quality metrics, motion residual, fusion
into a final score and the GOOD/BAD label, plus reference-frame bookkeeping.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Detection, FeaturePoint, GridLayout, feature_arrays
from .errors import NoFrames, NoTracksWarning


class SceneLabel(str, enum.Enum):
    GOOD = "GOOD"
    BAD = "BAD"


class AttenuationMode(str, enum.Enum):
    LITERAL = "Literal"
    PROSE_CONSISTENT = "ProseConsistent"


@dataclass(frozen=True)
class AssessmentConfig:
    th_scene: float = 0.20
    r_change_baseline: float = 60.0
    depth_std_cap: float = 2.0  # C_m, meters
    depth_grad_cap: float = 0.5  # S_m, meters per pixel
    init_window: int = 5
    attenuation_mode: AttenuationMode = AttenuationMode.PROSE_CONSISTENT

    def __post_init__(self):
        object.__setattr__(self, "attenuation_mode", AttenuationMode(self.attenuation_mode))
        for name in ("th_scene", "r_change_baseline", "depth_std_cap", "depth_grad_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.init_window < 1:
            raise ValueError("init_window must be >= 1")


@dataclass(frozen=True)
class ReliabilityRecord:
    r_conf: float
    r_spatial: float
    r_feature: float
    r_depth: float
    r_current: float
    r_motion: float
    r_final: float
    label: SceneLabel

    @property
    def is_good(self) -> bool:
        return self.label is SceneLabel.GOOD

    def csv_row(self, frame_id: int) -> list:
        return [
            frame_id,
            f"{self.r_conf:.6f}",
            f"{self.r_spatial:.6f}",
            f"{self.r_feature:.6f}",
            f"{self.r_depth:.6f}",
            f"{self.r_current:.6f}",
            f"{self.r_motion:.6f}",
            f"{self.r_final:.6f}",
            self.label.value,
        ]


RELIABILITY_CSV_HEADER = [
    "frame_id",
    "r_conf",
    "r_spatial",
    "r_feature",
    "r_depth",
    "r_current",
    "r_motion",
    "r_final",
    "label",
]


@dataclass(frozen=True)
class ReferenceFrame:
    frame_id: int
    gray: np.ndarray
    features: tuple
    r_current: float
    depth: Optional[np.ndarray] = None
    timestamp: float = 0.0


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def metric_confidence(detections: Sequence[Detection]) -> float:
    if not detections:
        return 0.0
    return math.fsum(d.confidence for d in detections) / len(detections)


def metric_spatial(detections: Sequence[Detection], image_size) -> float:
    """Object size and centrality term, averaged over detections.

    ``image_size`` is (width, height) in pixels.
    """
    if not detections:
        return 0.0
    w, h = image_size
    area_total = float(w) * float(h)
    diag = math.hypot(w, h)
    icx, icy = 0.5 * w, 0.5 * h
    terms = []
    for d in detections:
        cx, cy = d.center
        size_term = max(0.0, 1.0 - d.area / area_total)
        dist_term = 1.0 - min(1.0, math.hypot(cx - icx, cy - icy) / diag)
        terms.append(size_term + dist_term)
    return math.fsum(terms) / len(terms)


def metric_feature(features: Sequence[FeaturePoint], grid: GridLayout) -> float:
    if not features:
        return 0.0
    pos = np.array([f.position for f in features], dtype=np.float64)
    resp = np.array([f.response for f in features], dtype=np.float64)
    cells = grid.cell_of(pos)
    total = 0.0
    for c in range(grid.n_cells):
        r = resp[cells == c]
        if r.size == 0:
            continue
        # sorted accumulation keeps the metric independent of feature order
        r = np.sort(r)
        mean = math.fsum(r) / r.size
        var = math.fsum((r - mean) ** 2) / r.size
        total += mean + 1.0 / (1.0 + math.sqrt(var))
    return total / grid.n_cells


def metric_depth(depth: np.ndarray, grid: GridLayout, cfg: AssessmentConfig = AssessmentConfig()) -> float:
    depth = np.asarray(depth, dtype=np.float64)
    valid_all = np.isfinite(depth) & (depth > 0)
    total = 0.0
    for rs, cs in grid.cell_slices():
        d = depth[rs, cs]
        v = valid_all[rs, cs]
        n_total = d.size
        n_valid = int(v.sum())
        if n_total == 0 or n_valid == 0:
            continue
        dv = d[v]
        sigma = float(np.std(dv))
        dx_ok = v[:, 1:] & v[:, :-1]
        dy_ok = v[1:, :] & v[:-1, :]
        grads = np.concatenate([np.abs(np.diff(d, axis=1))[dx_ok], np.abs(np.diff(d, axis=0))[dy_ok]])
        mu_g = float(grads.mean()) if grads.size else 0.0
        total += (
            n_valid / n_total
            + (1.0 - min(1.0, sigma / cfg.depth_std_cap))
            + (1.0 - min(1.0, mu_g / cfg.depth_grad_cap))
        )
    return total / grid.n_cells


def current_reliability(r_conf: float, r_spatial: float, r_feature: float, r_depth: float) -> float:
    return r_conf + r_spatial + r_feature + r_depth


def motion_residual(features: Sequence[FeaturePoint], grid: GridLayout) -> float:
    """Mean point flow magnitude plus mean per-cell flow-vector magnitude (px).

    Features whose ``flow`` is ``None`` are untracked and ignored.
    """
    tracked = [f for f in features if f.flow is not None]
    if not tracked:
        warnings.warn("no tracked features; motion residual set to 0", NoTracksWarning, stacklevel=2)
        return 0.0
    pos, _, flow = feature_arrays(tracked)
    mags = np.hypot(flow[:, 0], flow[:, 1])
    point_term = math.fsum(np.sort(mags)) / mags.size
    cells = grid.cell_of(pos)
    grid_sum = 0.0
    for c in range(grid.n_cells):
        m = cells == c
        if not m.any():
            continue
        mean_vec = flow[m].mean(axis=0)
        grid_sum += math.hypot(mean_vec[0], mean_vec[1])
    return point_term + grid_sum / grid.n_cells


def fuse_and_classify(r_current: float, r_motion: Optional[float], cfg: AssessmentConfig = AssessmentConfig()):
    """Final reliability and label. ``r_motion=None`` means no reference yet."""
    if r_motion is None:
        r = r_current
    elif cfg.attenuation_mode is AttenuationMode.LITERAL:
        r = (r_motion / cfg.r_change_baseline) * r_current
    else:
        r = max(0.0, 1.0 - r_motion / cfg.r_change_baseline) * r_current
    label = SceneLabel.GOOD if r >= cfg.th_scene else SceneLabel.BAD
    return r, label


def assess_frame(
    features: Sequence[FeaturePoint],
    detections: Sequence[Detection],
    depth: np.ndarray,
    grid: GridLayout,
    cfg: AssessmentConfig = AssessmentConfig(),
    has_reference: bool = True,
) -> ReliabilityRecord:
    """Full record for one frame; ``features`` carry flow to the reference."""
    h, w = depth.shape
    r_conf = metric_confidence(detections)
    r_spatial = metric_spatial(detections, (w, h))
    r_feature = metric_feature(features, grid)
    r_depth = metric_depth(depth, grid, cfg)
    r_c = current_reliability(r_conf, r_spatial, r_feature, r_depth)
    if has_reference:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoTracksWarning)
            r_r = motion_residual(features, grid)
        r, label = fuse_and_classify(r_c, r_r, cfg)
    else:
        r_r = 0.0
        r, label = fuse_and_classify(r_c, None, cfg)
    return ReliabilityRecord(r_conf, r_spatial, r_feature, r_depth, r_c, r_r, r, label)


# ---------------------------------------------------------------------------
# Reference frame
# ---------------------------------------------------------------------------


def initialize_reference(candidates: Sequence[ReferenceFrame]) -> ReferenceFrame:
    """Highest-R_c candidate; ties go to the earliest frame id."""
    if not candidates:
        raise NoFrames("reference initialization needs at least one frame")
    best = None
    for c in sorted(candidates, key=lambda c: c.frame_id):
        if best is None or c.r_current > best.r_current:
            best = c
    return best


def maybe_update_reference(ref: ReferenceFrame, curr: ReferenceFrame) -> ReferenceFrame:
    return curr if curr.r_current > ref.r_current else ref
