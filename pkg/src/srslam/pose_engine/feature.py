"""Feature-based relative pose from 3-D to 2-D correspondences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import CameraIntrinsics, PoseSE3, backproject_points, hat_batch, projection_jacobian, se3_exp
from ..errors import TrackingLost

MIN_MATCHES = 6
INLIER_PX = 2.4477  # sqrt of the 95% chi-square quantile, 2 dof


@dataclass(frozen=True)
class FeaturePoseResult:
    pose: PoseSE3  # maps prev-camera coordinates to curr-camera coordinates
    converged: bool
    iterations: int
    n_matches: int
    rms: float  # reprojection RMS (px) over inliers at the returned pose
    n_inliers: int = 0


def _huber_weights(r_norm: np.ndarray, delta: float) -> np.ndarray:
    w = np.ones_like(r_norm)
    big = r_norm > delta
    w[big] = delta / r_norm[big]
    return w


def _huber_cost(r_norm: np.ndarray, delta: float) -> float:
    quad = r_norm <= delta
    return float(np.sum(np.where(quad, 0.5 * r_norm**2, delta * (r_norm - 0.5 * delta))))


def _reprojection(K, pose, X, obs):
    P = X @ pose.R.T + pose.translation
    z = P[:, 2]
    ok = z > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.stack([K.fx * P[:, 0] / z + K.cx, K.fy * P[:, 1] / z + K.cy], axis=1)
    r = u - obs
    r[~ok] = np.nan
    return P, r


def _gauss_newton(K, X, obs, pose, huber_delta, max_iters, step_eps):
    P, r = _reprojection(K, pose, X, obs)
    rn = np.linalg.norm(r, axis=1)
    cost = _huber_cost(np.nan_to_num(rn, nan=1e6), huber_delta)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        valid = np.isfinite(rn)
        if valid.sum() < MIN_MATCHES:
            break
        Jp = projection_jacobian(K, P[valid])
        # Left perturbation: d(exp(xi) P)/d xi = [I, -P^].
        dP = np.concatenate([np.broadcast_to(np.eye(3), (int(valid.sum()), 3, 3)), -hat_batch(P[valid])], axis=2)
        J = Jp @ dP  # (m, 2, 6)
        w = _huber_weights(rn[valid], huber_delta)
        rv = r[valid]
        H = np.einsum("n,nij,nik->jk", w, J, J)
        g = np.einsum("n,nij,ni->j", w, J, rv)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        accepted = False
        for _ in range(8):
            cand = se3_exp(step).compose(pose)
            P_c, r_c = _reprojection(K, cand, X, obs)
            rn_c = np.linalg.norm(r_c, axis=1)
            cost_c = _huber_cost(np.nan_to_num(rn_c, nan=1e6), huber_delta)
            if cost_c <= cost:
                pose, P, r, rn, cost = cand, P_c, r_c, rn_c, cost_c
                accepted = True
                break
            step = 0.5 * step
        if not accepted or np.linalg.norm(step) < step_eps:
            converged = True
            break
    return pose, converged, it


def feature_pose(
    K: CameraIntrinsics,
    pts_prev,
    depth_prev,
    pts_curr,
    init: Optional[PoseSE3] = None,
    huber_delta: float = 2.0,
    max_iters: int = 20,
    step_eps: float = 1e-10,
    outlier_rounds: int = 4,
    inlier_px: float = INLIER_PX,
) -> FeaturePoseResult:
    """Gauss-Newton on Huber-robust reprojection error.

    Points in the previous frame are back-projected with their depth and
    projected into the current frame. Matches without a valid depth are
    ignored; fewer than six usable matches raise ``TrackingLost``. After
    each of ``outlier_rounds`` solves, matches farther than ``inlier_px``
    from their prediction are set aside for the next solve.
    """
    pp = np.asarray(pts_prev, dtype=np.float64).reshape(-1, 2)
    pc = np.asarray(pts_curr, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth_prev, dtype=np.float64).reshape(-1)
    ok = np.isfinite(d) & (d > 0) & np.isfinite(pp).all(axis=1) & np.isfinite(pc).all(axis=1)
    n = int(ok.sum())
    if n < MIN_MATCHES:
        raise TrackingLost(f"{n} usable static matches, need {MIN_MATCHES}")
    X = backproject_points(K, pp[ok], d[ok])
    obs = pc[ok]

    pose = init if init is not None else PoseSE3.identity()
    inl = np.ones(n, dtype=bool)
    total_it, converged = 0, False
    for _ in range(max(outlier_rounds, 1)):
        pose, converged, it = _gauss_newton(K, X[inl], obs[inl], pose, huber_delta, max_iters, step_eps)
        total_it += it
        _, r = _reprojection(K, pose, X, obs)
        rn = np.linalg.norm(r, axis=1)
        new_inl = np.isfinite(rn) & (rn < inlier_px)
        if new_inl.sum() < MIN_MATCHES or np.array_equal(new_inl, inl):
            break
        inl = new_inl
    _, r = _reprojection(K, pose, X[inl], obs[inl])
    rn = np.linalg.norm(r, axis=1)
    valid = np.isfinite(rn)
    rms = float(np.sqrt(np.mean(rn[valid] ** 2))) if valid.any() else float("inf")
    return FeaturePoseResult(pose, converged, total_it, n, rms, int(inl.sum()))
