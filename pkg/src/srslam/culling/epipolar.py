"""Fundamental matrix estimation (normalized 8-point in RANSAC) and
epipolar outlier flagging."""

from __future__ import annotations

import numpy as np

from ..errors import InsufficientMatches


def _normalize(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    ph = np.column_stack([pts, np.ones(len(pts))]) @ T.T
    return ph, T


def eight_point(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """F with ``x2^T F x1 = 0`` from >= 8 correspondences (least squares)."""
    if len(p1) < 8:
        raise InsufficientMatches(f"{len(p1)} correspondences, need 8")
    a, T1 = _normalize(p1)
    b, T2 = _normalize(p2)
    A = np.column_stack(
        [
            b[:, 0] * a[:, 0],
            b[:, 0] * a[:, 1],
            b[:, 0],
            b[:, 1] * a[:, 0],
            b[:, 1] * a[:, 1],
            b[:, 1],
            a[:, 0],
            a[:, 1],
            np.ones(len(a)),
        ]
    )
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    S[2] = 0.0
    F = U @ np.diag(S) @ Vt
    F = T2.T @ F @ T1
    n = np.linalg.norm(F)
    return F / n if n > 0 else F


def symmetric_epipolar_distance(F, p1, p2) -> np.ndarray:
    """RMS of the two point-to-epipolar-line distances (px)."""
    x1 = np.column_stack([p1, np.ones(len(p1))])
    x2 = np.column_stack([p2, np.ones(len(p2))])
    l2 = x1 @ F.T  # lines in image 2
    l1 = x2 @ F  # lines in image 1
    num = np.abs((x2 * l2).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = num / np.hypot(l2[:, 0], l2[:, 1])
        d1 = num / np.hypot(l1[:, 0], l1[:, 1])
    d = np.sqrt(0.5 * (d1 * d1 + d2 * d2))
    return np.where(np.isfinite(d), d, np.inf)


def ransac_fundamental(p1, p2, threshold=1.0, iters=200, seed=0):
    """Returns (F, inlier mask). Deterministic for a given seed."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    n = len(p1)
    if n < 8:
        raise InsufficientMatches(f"{n} usable matches, need 8")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = -1
    best_err = np.inf
    for _ in range(iters):
        sample = rng.choice(n, 8, replace=False)
        try:
            F = eight_point(p1[sample], p2[sample])
        except np.linalg.LinAlgError:
            continue
        d = symmetric_epipolar_distance(F, p1, p2)
        mask = d <= threshold
        count = int(mask.sum())
        err = float(np.minimum(d, threshold).sum())
        if count > best_count or (count == best_count and err < best_err):
            best_mask, best_count, best_err = mask, count, err
    if best_mask is None or best_count < 8:
        best_mask = np.ones(n, dtype=bool)
    F = eight_point(p1[best_mask], p2[best_mask])
    mask = symmetric_epipolar_distance(F, p1, p2) <= threshold
    if mask.sum() >= 8:
        F = eight_point(p1[mask], p2[mask])
        mask = symmetric_epipolar_distance(F, p1, p2) <= threshold
    return F, mask


def epipolar_anomalies(pts_curr, pts_ref, usable=None, threshold=1.0, iters=200, seed=0) -> set:
    """Indices of matches violating the epipolar constraint.

    ``usable`` is a boolean mask of matches allowed to drive estimation
    (typically tracked and not already flagged by the flow test); every
    finite match is then tested against the estimated F.
    """
    p1 = np.asarray(pts_curr, dtype=np.float64).reshape(-1, 2)
    p2 = np.asarray(pts_ref, dtype=np.float64).reshape(-1, 2)
    finite = np.isfinite(p1).all(axis=1) & np.isfinite(p2).all(axis=1)
    use = finite if usable is None else (finite & np.asarray(usable, dtype=bool))
    idx = np.flatnonzero(use)
    if idx.size < 8:
        raise InsufficientMatches(f"{idx.size} usable matches, need 8")
    F, _ = ransac_fundamental(p1[idx], p2[idx], threshold, iters, seed)
    test = np.flatnonzero(finite)
    d = symmetric_epipolar_distance(F, p1[test], p2[test])
    return {int(i) for i in test[d > threshold]}
