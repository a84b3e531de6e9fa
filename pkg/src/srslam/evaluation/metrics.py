"""Trajectory error metrics (ATE, RPE) and the improvement percentage."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..core import PoseSE3
from ..dataset_io.tum import associate
from ..errors import DegenerateAlignment, InsufficientOverlap, InvalidBaseline


@dataclass(frozen=True)
class TrajectoryErrorReport:
    ate_rmse: float
    ate_sd: float
    trpe_rmse: float
    trpe_sd: float
    rotrpe_rmse: float  # degrees
    rotrpe_sd: float
    n_matched: int

    FIELDS = ("ate_rmse", "ate_sd", "trpe_rmse", "trpe_sd", "rotrpe_rmse", "rotrpe_sd")

    def values(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def rmse_sd(errors) -> tuple:
    """Population RMSE and standard deviation of an error series."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise InsufficientOverlap("empty error series")
    rmse = math.sqrt(math.fsum(e * e) / e.size)
    mean = math.fsum(e) / e.size
    sd = math.sqrt(math.fsum((e - mean) ** 2) / e.size)
    return rmse, sd


def align_umeyama(est, gt) -> PoseSE3:
    """Rigid transform ``T`` (no scale) minimizing ``sum |T est_i - gt_i|^2``."""
    x = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if x.shape != y.shape:
        raise ValueError("position arrays differ in shape")
    if x.shape[0] < 3:
        raise DegenerateAlignment(f"{x.shape[0]} positions, need 3")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    sx = np.linalg.svd(xc, compute_uv=False)
    sy = np.linalg.svd(yc, compute_uv=False)
    scale = max(sx[0], sy[0], 1e-300)
    if sx[1] <= 1e-9 * scale or sy[1] <= 1e-9 * scale:
        raise DegenerateAlignment("positions are collinear")
    C = yc.T @ xc / x.shape[0]
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if np.max(np.abs(R - np.eye(3))) < 1e-12:
        R = np.eye(3)  # SVD round-off; keeps self-alignment exact
    t = my - R @ mx
    return PoseSE3.from_rt(R, t)


def match_trajectories(est: Sequence, gt: Sequence, tolerance: float = 0.02):
    """Pairs ``(est_pose, gt_pose)`` matched by timestamp."""
    pairs = associate([t for t, _ in est], [t for t, _ in gt], tolerance)
    return [est[i][1] for i, _ in pairs], [gt[j][1] for _, j in pairs]


def compute_ate(est: Sequence, gt: Sequence, tolerance: float = 0.02, align: bool = True) -> tuple:
    """(rmse, sd) of translational error after rigid alignment."""
    pe, pg = match_trajectories(est, gt, tolerance)
    if len(pe) < 3:
        raise InsufficientOverlap(f"{len(pe)} matched poses, need 3")
    x = np.array([p.translation for p in pe])
    y = np.array([p.translation for p in pg])
    if align:
        try:
            T = align_umeyama(x, y)
            x = T.act(x)
        except DegenerateAlignment:
            # Collinear or static positions: align centroids only.
            x = x - x.mean(axis=0) + y.mean(axis=0)
    return rmse_sd(np.linalg.norm(x - y, axis=1))


def relative_errors(pe: Sequence[PoseSE3], pg: Sequence[PoseSE3], delta: int = 1):
    """Translation norms and rotation angles (deg) of per-interval errors."""
    t_err, r_err = [], []
    for i in range(len(pe) - delta):
        q = pg[i].inverse().compose(pg[i + delta])
        p = pe[i].inverse().compose(pe[i + delta])
        E = q.inverse().compose(p)
        t_err.append(float(np.linalg.norm(E.translation)))
        r_err.append(math.degrees(E.angle()))
    return np.array(t_err), np.array(r_err)


def compute_rpe(est: Sequence, gt: Sequence, delta: int = 1, tolerance: float = 0.02, delta_s: Optional[float] = None):
    """(t_rmse, t_sd, rot_rmse, rot_sd) of relative pose errors.

    ``delta`` is in frames; ``delta_s`` (seconds) overrides it using the mean
    frame interval of the matched poses.
    """
    pairs = associate([t for t, _ in est], [t for t, _ in gt], tolerance)
    if len(pairs) < 2:
        raise InsufficientOverlap(f"{len(pairs)} matched poses, need 2")
    pe = [est[i][1] for i, _ in pairs]
    pg = [gt[j][1] for _, j in pairs]
    if delta_s is not None:
        ts = np.array([est[i][0] for i, _ in pairs])
        step = float(np.mean(np.diff(ts))) if ts.size > 1 else 1.0
        delta = max(1, int(round(delta_s / step)))
    if delta >= len(pe):
        raise InsufficientOverlap(f"interval {delta} exceeds {len(pe)} matched poses")
    t_err, r_err = relative_errors(pe, pg, delta)
    return (*rmse_sd(t_err), *rmse_sd(r_err))


def evaluate_trajectory(est, gt, tolerance: float = 0.02, delta: int = 1) -> TrajectoryErrorReport:
    ate = compute_ate(est, gt, tolerance)
    rpe = compute_rpe(est, gt, delta, tolerance)
    n = len(associate([t for t, _ in est], [t for t, _ in gt], tolerance))
    return TrajectoryErrorReport(*ate, *rpe, n)


def improvement(v_ours: float, v_base: float) -> float:
    """Percentage reduction ``(1 - v_ours / v_base) * 100``."""
    if not v_base > 0:
        raise InvalidBaseline(f"baseline value {v_base} must be positive")
    return (1.0 - v_ours / v_base) * 100.0
