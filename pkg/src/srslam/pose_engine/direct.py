"""Direct photometric and geometric alignment against recent GOOD frames."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..core import (
    CameraIntrinsics,
    PoseSE3,
    backproject_points,
    bilinear_sample_array,
    hat_batch,
    projection_jacobian,
    se3_exp,
)
from ..errors import NoReferences

FOREGROUND_GAMMA = 0.1
BACKGROUND_GAMMA = 1.0


@dataclass(frozen=True)
class DirectConfig:
    K: int = 5
    decay_rate: float = 1.0  # lambda, 1/s
    fusion_sensitivity: float = 0.05  # mu, 1/px
    cauchy_c: float = 0.25
    pyramid_levels: int = 3
    max_iters: int = 30
    convergence_eps: float = 1e-6
    max_pixels: int = 6000
    min_gradient: float = 1e-3
    alpha_i: Optional[float] = None  # fixed photometric scale; None = per-iteration median ratio

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.decay_rate < 0 or self.fusion_sensitivity < 0:
            raise ValueError("decay and fusion rates must be >= 0")
        if not self.cauchy_c > 0:
            raise ValueError("cauchy_c must be positive")
        if self.pyramid_levels < 1 or self.max_iters < 1:
            raise ValueError("pyramid_levels and max_iters must be >= 1")


# ---------------------------------------------------------------------------
# Reference buffer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoodFrame:
    frame_id: int
    timestamp: float
    gray: np.ndarray
    depth: np.ndarray
    pose: PoseSE3  # camera-to-world


class GoodFrameBuffer:
    """The most recent ``capacity`` GOOD frames, oldest first."""

    def __init__(self, capacity: int = 5):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._items: deque = deque(maxlen=capacity)

    def push(self, frame: GoodFrame) -> None:
        if self._items and frame.timestamp <= self._items[-1].timestamp:
            raise ValueError("GOOD frames must be pushed in increasing timestamp order")
        self._items.append(frame)

    def snapshot(self) -> tuple:
        return tuple(self._items)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(tuple(self._items))

    @property
    def capacity(self) -> int:
        return self._items.maxlen


def time_decay(t_ref: float, t_curr: float, rate: float) -> float:
    """Reference weight; decays with the reference's age ``t_curr - t_ref``."""
    return math.exp(-rate * (t_curr - t_ref))


# ---------------------------------------------------------------------------
# Warp, residuals, cost
# ---------------------------------------------------------------------------


def _as_pose(xi) -> PoseSE3:
    return xi if isinstance(xi, PoseSE3) else se3_exp(xi)


def warp_points(xy, depth_a, K: CameraIntrinsics, T_ba: PoseSE3):
    """Warp pixels of A into B. Returns ``(uv, P_b, valid)``.

    ``depth_a`` are the per-pixel depths of A (already sampled). A warp is
    invalid when the depth is invalid, the transformed point is behind B, or
    the projection leaves B's image.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth_a, dtype=np.float64).reshape(-1)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(d) & (d > 0)
    X = backproject_points(K, xy, np.where(ok, d, 1.0))
    P = X @ T_ba.R.T + T_ba.translation
    z = P[:, 2]
    ok &= z > 0
    zs = np.where(ok, z, 1.0)
    uv = np.stack([K.fx * P[:, 0] / zs + K.cx, K.fy * P[:, 1] / zs + K.cy], axis=1)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)
    uv[~ok] = np.nan
    return uv, P, ok


def warp(x, xi, depth_a: np.ndarray, K: CameraIntrinsics):
    """Warp one pixel ``x`` of A by ``T(xi)``; ``None`` when invalid.

    The source depth is read at the nearest pixel of ``depth_a``.
    """
    h, w = depth_a.shape
    c, r = int(round(x[0])), int(round(x[1]))
    if not (0 <= c < w and 0 <= r < h):
        return None
    uv, _, ok = warp_points([x], [depth_a[r, c]], K, _as_pose(xi))
    return uv[0] if ok[0] else None


@dataclass(frozen=True)
class ResidualSet:
    r_i: np.ndarray  # photometric residual per pixel (NaN when invalid)
    r_d: np.ndarray  # depth residual per pixel (NaN when invalid)
    valid: np.ndarray
    j_i: Optional[np.ndarray] = None  # (N, 6), w.r.t. a right perturbation of T_ba
    j_d: Optional[np.ndarray] = None


def pixel_residuals(xy, depth_a, int_a, gray_b, depth_b, K, T_ba: PoseSE3, jacobians=False) -> ResidualSet:
    """Photometric and depth residuals of A's pixels warped into B.

    ``r_I = I_B(W(x)) - I_A(x)`` and ``r_D = D_B(W(x)) - z(T x_3d)``, both
    bilinearly sampled. Jacobians are taken w.r.t. ``delta`` in
    ``T_ba * exp(delta)`` using the gradient of the bilinear interpolant.
    """
    uv, P, ok = warp_points(xy, depth_a, K, T_ba)
    n = uv.shape[0]
    if jacobians:
        ib, ok_i, gi = bilinear_sample_array(gray_b, uv, with_grad=True)
        db, ok_d, gd = bilinear_sample_array(depth_b, uv, depth=True, with_grad=True)
    else:
        ib, ok_i = bilinear_sample_array(gray_b, uv)
        db, ok_d = bilinear_sample_array(depth_b, uv, depth=True)
    valid = ok & ok_i & ok_d
    r_i = np.where(valid, ib - np.asarray(int_a, dtype=np.float64), np.nan)
    r_d = np.where(valid, db - P[:, 2], np.nan)
    if not jacobians:
        return ResidualSet(r_i, r_d, valid)
    j_i = np.full((n, 6), np.nan)
    j_d = np.full((n, 6), np.nan)
    if valid.any():
        d = np.asarray(depth_a, dtype=np.float64)[valid]
        X = backproject_points(K, np.asarray(xy, dtype=np.float64).reshape(-1, 2)[valid], d)
        R = T_ba.R
        # d P / d delta = R [I, -X^]
        dP = np.einsum("ij,njk->nik", R, np.concatenate([np.broadcast_to(np.eye(3), (X.shape[0], 3, 3)), -hat_batch(X)], axis=2))
        Jpi = projection_jacobian(K, P[valid])
        duv = Jpi @ dP  # (m, 2, 6)
        j_i[valid] = np.einsum("ni,nij->nj", gi[valid], duv)
        j_d[valid] = np.einsum("ni,nij->nj", gd[valid], duv) - dP[:, 2, :]
    return ResidualSet(r_i, r_d, valid, j_i, j_d)


def residuals(xi, frame_a, frame_b, K: CameraIntrinsics, pixels=None) -> ResidualSet:
    """Residuals of every pixel of A (or ``pixels``) against B under ``T(xi)``.

    ``frame_a``/``frame_b`` are ``(gray, depth)`` pairs or objects with
    ``gray`` and ``depth`` attributes; ``T(xi)`` maps A's camera to B's.
    """
    ga, da = _images(frame_a)
    gb, db = _images(frame_b)
    if pixels is None:
        rr, cc = np.mgrid[0 : ga.shape[0], 0 : ga.shape[1]]
        pixels = np.column_stack([cc.ravel(), rr.ravel()]).astype(np.float64)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    ci = np.round(pixels).astype(np.intp)
    return pixel_residuals(pixels, da[ci[:, 1], ci[:, 0]], ga[ci[:, 1], ci[:, 0]], gb, db, K, _as_pose(xi))


def _images(f):
    if isinstance(f, tuple):
        return np.asarray(f[0], dtype=np.float64), np.asarray(f[1], dtype=np.float64)
    return np.asarray(f.gray, dtype=np.float64), np.asarray(f.depth, dtype=np.float64)


def cauchy(r, c: float) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return 0.5 * c * c * np.log1p((r / c) ** 2)


def cauchy_weight(r, c: float) -> np.ndarray:
    """IRLS weight rho'(r)/r of the Cauchy cost."""
    r = np.asarray(r, dtype=np.float64)
    return 1.0 / (1.0 + (r / c) ** 2)


def photometric_scale(r_i, r_d) -> float:
    """median|r_D| / median|r_I| over finite residuals; 1.0 when undefined."""
    a = np.abs(np.asarray(r_i, dtype=np.float64))
    b = np.abs(np.asarray(r_d, dtype=np.float64))
    ok = np.isfinite(a) & np.isfinite(b)
    if not ok.any():
        return 1.0
    mi = float(np.median(a[ok]))
    md = float(np.median(b[ok]))
    if not (mi > 0 and md > 0):
        return 1.0
    return md / mi


def combined_cost(r_i, r_d, w_i=1.0, w_d=1.0, alpha_i=1.0, c: float = 0.25, gamma=1.0) -> float:
    """Sum over valid pixels of ``gamma * (C(alpha w_I r_I) + C(w_D r_D))``."""
    r_i = np.asarray(r_i, dtype=np.float64)
    r_d = np.asarray(r_d, dtype=np.float64)
    per = cauchy(alpha_i * np.asarray(w_i) * r_i, c) + cauchy(np.asarray(w_d) * r_d, c)
    per = np.asarray(gamma) * per
    per = np.broadcast_to(per, np.broadcast(r_i, r_d).shape)
    ok = np.isfinite(per)
    return float(np.sum(per[ok]))


def inverse_gradient_weights(grad_mag: np.ndarray) -> np.ndarray:
    """Weights in (0, 1] that shrink where the image gradient is large.

    Gradient magnitude stands in for interpolation variance; it is
    normalized by its median so the weights are scale free.
    """
    g = np.abs(np.asarray(grad_mag, dtype=np.float64))
    fin = np.isfinite(g)
    med = float(np.median(g[fin])) if fin.any() else 0.0
    if not med > 0:
        return np.ones_like(g)
    return np.where(fin, 1.0 / (1.0 + g / med), 1.0)


def region_gamma(xy, regions, scale: float = 1.0) -> np.ndarray:
    """Per-pixel gamma: foreground value inside any region box, 1 elsewhere.

    ``regions`` holds objects with a ``bbox`` or plain ``(x1, y1, x2, y2)``
    tuples in full-resolution pixels; ``scale`` maps them to ``xy``.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    gamma = np.full(xy.shape[0], BACKGROUND_GAMMA)
    for reg in regions or ():
        x1, y1, x2, y2 = (float(v) * scale for v in getattr(reg, "bbox", reg))
        inside = (xy[:, 0] >= x1) & (xy[:, 0] <= x2) & (xy[:, 1] >= y1) & (xy[:, 1] <= y2)
        gamma[inside] = FOREGROUND_GAMMA
    return gamma


# ---------------------------------------------------------------------------
# Pyramid
# ---------------------------------------------------------------------------


def downsample_gray(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    a = img[: 2 * h2, : 2 * w2]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def downsample_depth(depth: np.ndarray) -> np.ndarray:
    """2x2 block mean; blocks with any invalid sample become invalid (0)."""
    h, w = depth.shape
    h2, w2 = h // 2, w // 2
    a = depth[: 2 * h2, : 2 * w2]
    blocks = [a[0::2, 0::2], a[1::2, 0::2], a[0::2, 1::2], a[1::2, 1::2]]
    with np.errstate(invalid="ignore"):
        ok = np.logical_and.reduce([np.isfinite(b) & (b > 0) for b in blocks])
    mean = 0.25 * sum(np.where(ok, b, 0.0) for b in blocks)
    return np.where(ok, mean, 0.0)


def build_pyramid(gray: np.ndarray, depth: np.ndarray, levels: int) -> list:
    g = np.asarray(gray, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    out = [(g, d)]
    for _ in range(1, levels):
        g, d = downsample_gray(g), downsample_depth(d)
        out.append((g, d))
    return out


def _gradient_magnitude(img: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy)


# ---------------------------------------------------------------------------
# Multi-reference refinement
# ---------------------------------------------------------------------------


@dataclass
class DirectResult:
    pose: PoseSE3  # camera-to-world of the current frame
    converged: bool
    final_cost: float
    iterations: int
    ref_ids: tuple = ()
    ref_weights: tuple = ()  # B_k per reference
    ref_costs: tuple = ()  # weighted cost per reference at the final pose
    cost_history: list = field(default_factory=list)


class _Level:
    """Pixel selection and fixed per-pixel weights of one pyramid level."""

    def __init__(self, gray, depth, K, regions, scale, cfg: DirectConfig):
        self.K = K
        grad = _gradient_magnitude(gray)
        ok = (depth > 0) & np.isfinite(depth) & (grad > cfg.min_gradient)
        rr, cc = np.nonzero(ok)
        idx = np.arange(rr.size)
        if rr.size > cfg.max_pixels:
            idx = idx[:: int(math.ceil(rr.size / cfg.max_pixels))]
        rr, cc = rr[idx], cc[idx]
        self.xy = np.column_stack([cc, rr]).astype(np.float64)
        self.depth = depth[rr, cc]
        self.intensity = gray[rr, cc]
        self.w_i = inverse_gradient_weights(grad[rr, cc])
        self.w_d = inverse_gradient_weights(_gradient_magnitude(depth)[rr, cc])
        self.gamma = region_gamma(self.xy, regions, scale)


def _evaluate(level: _Level, refs, T_wc: PoseSE3, jacobians: bool):
    out = []
    for (gb, db, T_kw, bk) in refs:
        T_kc = T_kw.compose(T_wc)
        out.append(pixel_residuals(level.xy, level.depth, level.intensity, gb, db, level.K, T_kc, jacobians))
    return out


def _total_cost(level: _Level, refs, sets, alpha, c):
    costs = []
    for (_, _, _, bk), rs in zip(refs, sets):
        costs.append(bk * combined_cost(rs.r_i, rs.r_d, level.w_i, level.w_d, alpha, c, level.gamma))
    return float(sum(costs)), costs


def _alpha(sets, cfg: DirectConfig) -> float:
    if cfg.alpha_i is not None:
        return cfg.alpha_i
    r_i = np.concatenate([s.r_i for s in sets]) if sets else np.array([])
    r_d = np.concatenate([s.r_d for s in sets]) if sets else np.array([])
    return photometric_scale(r_i, r_d)


def _normal_equations(level, refs, sets, alpha, c, T_wc):
    H = np.zeros((6, 6))
    g = np.zeros(6)
    for (_, _, T_kw, bk), rs in zip(refs, sets):
        v = rs.valid
        if not v.any():
            continue
        gam = level.gamma[v] * bk
        for r, J, wgt in (
            (alpha * level.w_i[v] * rs.r_i[v], alpha * level.w_i[v, None] * rs.j_i[v], None),
            (level.w_d[v] * rs.r_d[v], level.w_d[v, None] * rs.j_d[v], None),
        ):
            ok = np.isfinite(r) & np.isfinite(J).all(axis=1)
            w = gam[ok] * cauchy_weight(r[ok], c)
            H += (J[ok] * w[:, None]).T @ J[ok]
            g += (J[ok] * w[:, None]).T @ r[ok]
    return H, g


def direct_refine(
    gray: np.ndarray,
    depth: np.ndarray,
    timestamp: float,
    K: CameraIntrinsics,
    buffer,
    regions: Sequence = (),
    cfg: DirectConfig = DirectConfig(),
    init: Optional[PoseSE3] = None,
) -> DirectResult:
    """Estimate the current camera-to-world pose by joint direct alignment.

    One shared pose increment is optimized against every buffered GOOD
    frame, each term weighted by its time decay, coarse to fine. Pixels
    inside potential dynamic ``regions`` are down-weighted. ``init``
    defaults to the pose of the most recent reference.
    """
    refs_src = list(buffer)
    if not refs_src:
        raise NoReferences("no GOOD frames buffered")
    T_wc = init if init is not None else refs_src[-1].pose
    levels = cfg.pyramid_levels
    cur_pyr = build_pyramid(gray, depth, levels)
    ref_pyrs = [build_pyramid(r.gray, r.depth, levels) for r in refs_src]
    weights = [time_decay(r.timestamp, timestamp, cfg.decay_rate) for r in refs_src]
    c = cfg.cauchy_c
    history = []
    total_iters = 0
    fails = 0
    converged = False

    for lvl in range(levels - 1, -1, -1):
        Kl = K.scaled(lvl)
        g_a, d_a = cur_pyr[lvl]
        level = _Level(g_a, d_a, Kl, regions, 0.5**lvl, cfg)
        refs = [(p[lvl][0], p[lvl][1], r.pose.inverse(), bk) for p, r, bk in zip(ref_pyrs, refs_src, weights)]
        if level.xy.shape[0] < 6:
            continue
        sets = _evaluate(level, refs, T_wc, True)
        damping = 0.0
        fails = 0
        converged = False
        for _ in range(cfg.max_iters):
            total_iters += 1
            alpha = _alpha(sets, cfg)
            cost, _ = _total_cost(level, refs, sets, alpha, c)
            history.append(cost)
            H, g = _normal_equations(level, refs, sets, alpha, c, T_wc)
            if not np.isfinite(H).all() or np.trace(H) <= 0:
                break
            A = H + damping * np.diag(np.diag(H))
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(A, g, rcond=None)[0]
            if np.linalg.norm(step) < cfg.convergence_eps:
                converged = True
                break
            accepted = False
            for _ in range(9):  # full step plus up to 8 halvings
                cand = T_wc.compose(se3_exp(step))
                cand_sets = _evaluate(level, refs, cand, True)
                cand_cost, _ = _total_cost(level, refs, cand_sets, alpha, c)
                if cand_cost < cost:
                    accepted = True
                    break
                step = 0.5 * step
            if accepted:
                T_wc, sets = cand, cand_sets
                damping *= 0.1
                fails = 0
                if np.linalg.norm(step) < cfg.convergence_eps:
                    converged = True
                    break
            else:
                fails += 1
                damping = max(1e-4, damping * 10.0)
                if fails >= 3:
                    break
        else:
            converged = True  # iteration budget spent while still decreasing

    level0 = _Level(cur_pyr[0][0], cur_pyr[0][1], K, regions, 1.0, cfg)
    refs0 = [(p[0][0], p[0][1], r.pose.inverse(), bk) for p, r, bk in zip(ref_pyrs, refs_src, weights)]
    sets0 = _evaluate(level0, refs0, T_wc, False)
    alpha0 = _alpha(sets0, cfg)
    final, per_ref = _total_cost(level0, refs0, sets0, alpha0, c)
    return DirectResult(
        pose=T_wc,
        converged=converged and fails < 3,
        final_cost=final,
        iterations=total_iters,
        ref_ids=tuple(r.frame_id for r in refs_src),
        ref_weights=tuple(weights),
        ref_costs=tuple(per_ref),
        cost_history=history,
    )
