"""Information-weighted pose optimization and local bundle adjustment.

Observations are pixel positions with an optional depth. A depth turns the
observation into a stereo-like triple ``(u, v, u_r)`` with
``u_r = u - bf / z``, which fixes the scale gauge. No robust kernel is used,
so scaling every information matrix by the same constant leaves the
minimizer unchanged and zero information is equivalent to deletion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..core import CameraIntrinsics, PoseSE3, hat_batch, se3_exp, se3_log
from ..errors import Degenerate

DEFAULT_BASELINE_M = 0.08
RANK_TOL = 1e-10
COST_ROUNDOFF = 1e-13


@dataclass(frozen=True)
class WeightedObservation:
    """One measurement with its base information matrix and applied scale."""

    measurement: np.ndarray  # (u, v) or (u, v, u_r)
    information: np.ndarray  # base information, 2x2 or 3x3, px^-2
    scale: float = 1.0

    def __post_init__(self):
        info = np.asarray(self.information, dtype=np.float64)
        if not np.allclose(info, info.T):
            raise ValueError("information matrix must be symmetric")
        if self.scale < 0:
            raise ValueError("scale must be >= 0")

    @property
    def scaled_information(self) -> np.ndarray:
        return self.scale * np.asarray(self.information, dtype=np.float64)


def stereo_measurements(K: CameraIntrinsics, uv, depth, baseline: float = DEFAULT_BASELINE_M) -> np.ndarray:
    """(N, 3) ``(u, v, u_r)``; ``u_r`` is NaN where depth is invalid."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ur = np.where(np.isfinite(d) & (d > 0), uv[:, 0] - K.fx * baseline / d, np.nan)
    return np.column_stack([uv, ur])


def _info_blocks(meas: np.ndarray, info, scales) -> np.ndarray:
    """Per-observation 3x3 information, zeroed on the missing u_r row/column."""
    n = meas.shape[0]
    base = np.eye(3) if info is None else np.asarray(info, dtype=np.float64)
    if base.shape == (2, 2):
        b3 = np.zeros((3, 3))
        b3[:2, :2] = base
        b3[2, 2] = base[0, 0]
        base = b3
    if base.ndim == 2:
        base = np.broadcast_to(base, (n, 3, 3))
    out = np.array(base, dtype=np.float64, copy=True)
    s = np.ones(n) if scales is None else np.broadcast_to(np.asarray(scales, dtype=np.float64), (n,))
    out *= s[:, None, None]
    mono = ~np.isfinite(meas[:, 2])
    out[mono, 2, :] = 0.0
    out[mono, :, 2] = 0.0
    return out


def _predict(K: CameraIntrinsics, P: np.ndarray, bf: float):
    z = P[:, 2]
    iz = 1.0 / z
    u = K.fx * P[:, 0] * iz + K.cx
    v = K.fy * P[:, 1] * iz + K.cy
    pred = np.column_stack([u, v, u - bf * iz])
    J = np.zeros((P.shape[0], 3, 3))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * P[:, 0] * iz * iz
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * P[:, 1] * iz * iz
    J[:, 2, :] = J[:, 0, :]
    J[:, 2, 2] += bf * iz * iz
    return pred, J


def _residual(meas, pred):
    r = pred - meas
    r[:, 2] = np.where(np.isfinite(meas[:, 2]), r[:, 2], 0.0)
    return r


def stereo_residuals(K: CameraIntrinsics, T_cw: PoseSE3, points_w, measurements, baseline: float = DEFAULT_BASELINE_M):
    """(N, 3) predicted minus measured ``(u, v, u_r)``; ``u_r`` is 0 where unmeasured."""
    P = np.asarray(points_w, dtype=np.float64).reshape(-1, 3) @ T_cw.R.T + T_cw.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        pred, _ = _predict(K, P, K.fx * baseline)
    r = _residual(np.asarray(measurements, dtype=np.float64), pred)
    r[P[:, 2] <= 0] = np.inf
    return r


def _chi2(r, info) -> float:
    return float(np.einsum("ni,nij,nj->", r, info, r))


@dataclass
class OptimizationResult:
    poses: list  # camera-to-world
    points: Optional[np.ndarray]
    cost: float
    iterations: int
    cost_history: list = field(default_factory=list)

    @property
    def pose(self) -> PoseSE3:
        return self.poses[0]


# ---------------------------------------------------------------------------
# Pose-only
# ---------------------------------------------------------------------------


def weighted_pose_optimize(
    K: CameraIntrinsics,
    points_w,
    measurements,
    init: PoseSE3,
    scales=None,
    information=None,
    prior: Optional[PoseSE3] = None,
    prior_information=None,
    baseline: float = DEFAULT_BASELINE_M,
    max_iters: int = 100,
    step_tol: float = 1e-12,
) -> OptimizationResult:
    """Camera-to-world pose minimizing information-weighted reprojection error.

    ``measurements`` is (N, 2) or (N, 3) with ``u_r`` (NaN when no depth).
    ``scales`` multiplies each observation's information (frame-wide
    penalties are a constant per frame). An optional ``prior`` adds a
    6-DoF tangent-space term with ``prior_information`` (6x6).
    """
    Xw = np.asarray(points_w, dtype=np.float64).reshape(-1, 3)
    meas = np.asarray(measurements, dtype=np.float64)
    if meas.shape[1] == 2:
        meas = np.column_stack([meas, np.full(meas.shape[0], np.nan)])
    if Xw.shape[0] < 6 and prior is None:
        raise Degenerate(f"{Xw.shape[0]} observations, need 6")
    info = _info_blocks(meas, information, scales)
    bf = K.fx * baseline
    Lp = None if prior is None else (np.eye(6) if prior_information is None else np.asarray(prior_information, float))
    # Optimize T_cw with a left perturbation: P = exp(d) T_cw X.
    T_cw = init.inverse()

    def evaluate(T):
        P = T.act(Xw)
        if not (P[:, 2] > 0).all():
            return np.inf, None, None
        pred, J = _predict(K, P, bf)
        r = _residual(meas, pred)
        cost = _chi2(r, info)
        rp = None
        if prior is not None:
            rp = _prior_residual(T, prior)
            cost += float(rp @ Lp @ rp)
        return cost, (P, r, J), rp

    cost, state, rp = evaluate(T_cw)
    if not np.isfinite(cost):
        raise Degenerate("points behind the camera at the initial pose")
    history = [cost]
    damping = 1e-6
    it = 0
    for it in range(1, max_iters + 1):
        P, r, J = state
        dP = np.concatenate([np.broadcast_to(np.eye(3), (P.shape[0], 3, 3)), -hat_batch(P)], axis=2)
        A = J @ dP  # (N, 3, 6)
        H = np.einsum("nki,nkl,nlj->ij", A, info, A)
        g = np.einsum("nki,nkl,nl->i", A, info, r)
        if prior is not None:
            H = H + Lp
            g = g + Lp @ rp
        _check_rank(H)
        step, cost_new, T_new, state_new, rp_new = None, np.inf, None, None, None
        for _ in range(10):
            Hd = H + damping * np.diag(np.diag(H))
            step = -np.linalg.solve(Hd, g)
            T_new = se3_exp(step).compose(T_cw)
            cost_new, state_new, rp_new = evaluate(T_new)
            if _acceptable(cost_new, cost):
                break
            damping *= 10.0
        if not _acceptable(cost_new, cost):
            break
        T_cw, state, rp = T_new, state_new, rp_new
        done = np.linalg.norm(step) < step_tol
        cost = cost_new
        history.append(cost)
        damping = max(damping * 0.1, 1e-12)
        if done:
            break
    return OptimizationResult([T_cw.inverse()], None, cost, it, history)


def _acceptable(cost_new: float, cost: float) -> bool:
    # Near the minimum the cost change drops below its own round-off; steps
    # inside that band are still taken so convergence is judged by step size.
    return cost_new <= cost + COST_ROUNDOFF * cost


def _prior_residual(T_cw: PoseSE3, prior_wc: PoseSE3) -> np.ndarray:
    # Identity at the prior; its Jacobian w.r.t. a left perturbation is I to first order.
    return se3_log(T_cw.compose(prior_wc))


def _check_rank(H: np.ndarray) -> None:
    if not np.isfinite(H).all():
        raise Degenerate("non-finite normal equations")
    ev = np.linalg.eigvalsh(0.5 * (H + H.T))
    if ev[-1] <= 0 or ev[0] <= RANK_TOL * ev[-1]:
        raise Degenerate("rank-deficient normal equations")


# ---------------------------------------------------------------------------
# Local bundle adjustment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BAObservations:
    kf: np.ndarray  # (M,) keyframe index
    point: np.ndarray  # (M,) point index
    measurements: np.ndarray  # (M, 3) (u, v, u_r); u_r NaN when no depth


def local_ba(
    K: CameraIntrinsics,
    poses: Sequence[PoseSE3],
    points_w,
    obs: BAObservations,
    kf_scales=None,
    information=None,
    baseline: float = DEFAULT_BASELINE_M,
    max_iters: int = 500,
    step_tol: float = 1e-12,
    max_keyframes: int = 8,
) -> OptimizationResult:
    """Joint refinement of keyframe poses and points; the first pose is fixed.

    ``kf_scales`` gives each keyframe's information multiplier, applied to
    all of its observations. Fewer than two keyframes return the input.
    Points whose information is singular (e.g. only zero-weight
    observations) are held fixed.
    """
    poses = list(poses)
    X = np.array(points_w, dtype=np.float64).reshape(-1, 3)
    n_kf = len(poses)
    if n_kf > max_keyframes:
        raise ValueError(f"at most {max_keyframes} keyframes per local window")
    if n_kf < 2:
        return OptimizationResult(poses, X, 0.0, 0, [])
    kf = np.asarray(obs.kf, dtype=np.intp)
    pt = np.asarray(obs.point, dtype=np.intp)
    meas = np.asarray(obs.measurements, dtype=np.float64)
    if meas.shape[1] == 2:
        meas = np.column_stack([meas, np.full(meas.shape[0], np.nan)])
    s_kf = np.ones(n_kf) if kf_scales is None else np.asarray(kf_scales, dtype=np.float64)
    info = _info_blocks(meas, information, s_kf[kf])
    bf = K.fx * baseline
    n_pt = X.shape[0]
    T_cw = [p.inverse() for p in poses]

    def evaluate(Tcw, Xp):
        R = np.stack([t.R for t in Tcw])
        t = np.stack([t.translation for t in Tcw])
        P = np.einsum("nij,nj->ni", R[kf], Xp[pt]) + t[kf]
        if not (P[:, 2] > 0).all():
            return np.inf, None
        pred, J = _predict(K, P, bf)
        r = _residual(meas, pred)
        return _chi2(r, info), (P, r, J, R)

    cost, state = evaluate(T_cw, X)
    if not np.isfinite(cost):
        raise Degenerate("points behind a camera at the initial estimate")
    history = [cost]
    damping = 1e-6
    n_var = n_kf - 1
    it = 0
    for it in range(1, max_iters + 1):
        P, r, J, R = state
        Ap = J @ np.concatenate([np.broadcast_to(np.eye(3), (P.shape[0], 3, 3)), -hat_batch(P)], axis=2)
        Al = J @ R[kf]  # (M, 3, 3)
        WAp = np.einsum("nkl,nlj->nkj", info, Ap)
        WAl = np.einsum("nkl,nlj->nkj", info, Al)
        Hpp = np.zeros((6 * n_var, 6 * n_var))
        gp = np.zeros(6 * n_var)
        Hll = np.zeros((n_pt, 3, 3))
        gl = np.zeros((n_pt, 3))
        Hpl = np.zeros((6 * n_var, 3 * n_pt))
        np.add.at(Hll, pt, np.einsum("nki,nkj->nij", Al, WAl))
        np.add.at(gl, pt, np.einsum("nki,nk->ni", WAl, r))
        var = kf > 0
        blk_pp = np.einsum("nki,nkj->nij", Ap, WAp)
        blk_pl = np.einsum("nki,nkj->nij", Ap, WAl)
        g_p = np.einsum("nki,nk->ni", WAp, r)
        for k in range(1, n_kf):
            m = kf == k
            sl = slice(6 * (k - 1), 6 * k)
            Hpp[sl, sl] += blk_pp[m].sum(axis=0)
            gp[sl] += g_p[m].sum(axis=0)
        for o in np.flatnonzero(var):
            k, j = kf[o], pt[o]
            Hpl[6 * (k - 1) : 6 * k, 3 * j : 3 * j + 3] += blk_pl[o]

        active = _active_points(Hll)
        accepted = False
        for _ in range(10):
            dp, dl = _solve_schur(Hpp, gp, Hpl, Hll, gl, active, damping)
            new_T = [T_cw[0]] + [se3_exp(dp[6 * (k - 1) : 6 * k]).compose(T_cw[k]) for k in range(1, n_kf)]
            new_X = X + dl
            cost_new, state_new = evaluate(new_T, new_X)
            if _acceptable(cost_new, cost):
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            break
        step = np.concatenate([dp, dl.ravel()])
        T_cw, X, state = new_T, new_X, state_new
        done = np.linalg.norm(step) < step_tol
        cost = cost_new
        history.append(cost)
        damping = max(damping * 0.1, 1e-12)
        if done:
            break
    out = [poses[0]] + [t.inverse() for t in T_cw[1:]]
    return OptimizationResult(out, X, cost, it, history)


def _active_points(Hll: np.ndarray) -> np.ndarray:
    ev = np.linalg.eigvalsh(Hll)
    scale = np.max(ev[:, -1]) if ev.size else 0.0
    return ev[:, 0] > RANK_TOL * max(scale, 1e-300)


def _solve_schur(Hpp, gp, Hpl, Hll, gl, active, damping):
    n_pt = Hll.shape[0]
    dl = np.zeros((n_pt, 3))
    Hll_d = Hll + damping * np.einsum("nii->ni", Hll)[:, :, None] * np.eye(3)
    Hpp_d = Hpp + damping * np.diag(np.diag(Hpp))
    if Hpp.size == 0:
        dp = np.zeros(0)
    else:
        inv = np.linalg.inv(Hll_d[active])
        Hpl_a = Hpl.reshape(Hpl.shape[0], n_pt, 3)[:, active, :]
        HW = np.einsum("pnj,njk->pnk", Hpl_a, inv)
        S = Hpp_d - np.einsum("pnk,qnk->pq", HW, Hpl_a)
        rhs = -gp + np.einsum("pnk,nk->p", HW, gl[active])
        _check_rank(S)
        dp = np.linalg.solve(S, rhs)
    if active.any():
        Hlp = Hpl.T.reshape(n_pt, 3, -1)
        rhs_l = -gl - np.einsum("nij,j->ni", Hlp, dp) if dp.size else -gl
        dl[active] = np.einsum("nij,nj->ni", np.linalg.inv(Hll_d[active]), rhs_l[active])
    return dp, dl

