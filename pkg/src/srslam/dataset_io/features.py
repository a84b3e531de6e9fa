"""Harris corners with grid bucketing."""

from __future__ import annotations

import math

import cv2
import numpy as np

from ..core import FeaturePoint, GridLayout, nearest_depth, normalize_responses

HARRIS_BLOCK = 3
HARRIS_KSIZE = 3
HARRIS_K = 0.04
REL_THRESHOLD = 0.01
MIN_DISTANCE = 5.0


def harris_response(gray: np.ndarray) -> np.ndarray:
    return cv2.cornerHarris(np.asarray(gray, dtype=np.float32), HARRIS_BLOCK, HARRIS_KSIZE, HARRIS_K).astype(np.float64)


def _candidates(resp: np.ndarray):
    """Pixels that are 3x3 local maxima above the relative threshold."""
    peak = resp.max() if resp.size else 0.0
    if not peak > 1e-12:
        return np.zeros((0, 2)), np.zeros(0)
    dil = cv2.dilate(resp.astype(np.float32), np.ones((3, 3), np.uint8)).astype(np.float64)
    mask = (resp >= dil - 1e-12 * peak) & (resp > REL_THRESHOLD * peak)
    rr, cc = np.nonzero(mask)
    return np.column_stack([cc, rr]).astype(np.float64), resp[rr, cc]


def _greedy_nms(xy, score, min_dist):
    order = np.argsort(-score, kind="stable")
    keep = []
    taken = np.zeros((0, 2))
    for i in order:
        if taken.shape[0] and (((taken - xy[i]) ** 2).sum(axis=1) < min_dist * min_dist).any():
            continue
        keep.append(i)
        taken = np.vstack([taken, xy[i]])
    return np.array(keep, dtype=np.intp)


def detect_features(gray: np.ndarray, max_n: int = 1000, depth=None, grid: GridLayout = None) -> list:
    """Up to ``max_n`` corners spread over a 3x3 grid.

    Each cell first gets an equal quota of its strongest corners; leftover
    capacity goes to the strongest remaining corners anywhere. Responses are
    normalized to [0, 1] per frame.
    """
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    grid = grid or GridLayout(w, h)
    xy, score = _candidates(harris_response(gray))
    if score.size == 0 or max_n <= 0:
        return []
    keep = _greedy_nms(xy, score, MIN_DISTANCE)
    xy, score = xy[keep], score[keep]
    cells = grid.cell_of(xy)
    quota = max(1, math.ceil(max_n / grid.n_cells))
    chosen = np.zeros(score.size, dtype=bool)
    for c in range(grid.n_cells):
        idx = np.flatnonzero(cells == c)
        idx = idx[np.argsort(-score[idx], kind="stable")][:quota]
        chosen[idx] = True
    if chosen.sum() > max_n:
        idx = np.flatnonzero(chosen)
        drop = idx[np.argsort(score[idx], kind="stable")][: chosen.sum() - max_n]
        chosen[drop] = False
    rest = np.flatnonzero(~chosen)
    room = max_n - int(chosen.sum())
    if room > 0 and rest.size:
        chosen[rest[np.argsort(-score[rest], kind="stable")][:room]] = True
    sel = np.flatnonzero(chosen)
    sel = sel[np.lexsort((xy[sel, 0], xy[sel, 1]))]
    resp = normalize_responses(score[sel])
    dep = nearest_depth(depth, xy[sel]) if depth is not None else np.full(sel.size, np.nan)
    return [
        FeaturePoint((float(x), float(y)), float(r), None if not np.isfinite(d) else float(d))
        for (x, y), r, d in zip(xy[sel], resp, dep)
    ]
