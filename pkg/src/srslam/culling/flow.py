"""Pyramidal Lucas-Kanade tracking and flow-magnitude outlier detection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import cv2
import numpy as np

from ..errors import FewTracksWarning

LK_WINDOW = (21, 21)
LK_MAX_LEVEL = 2  # three pyramid levels
LK_MAX_ITERS = 30
LK_MIN_EIG = 1e-4


@dataclass(frozen=True)
class FlowField:
    """Per-feature correspondences; ``flow = matched - original`` where tracked."""

    original: np.ndarray  # (N, 2)
    matched: np.ndarray  # (N, 2), NaN where lost
    tracked: np.ndarray  # (N,) bool

    @property
    def flow(self) -> np.ndarray:
        f = self.matched - self.original
        f[~self.tracked] = np.nan
        return f

    def __len__(self):
        return self.original.shape[0]


def _to_u8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def lk_flow(curr: np.ndarray, ref: np.ndarray, positions) -> FlowField:
    """Track ``positions`` of ``curr`` into ``ref``.

    Images are float gray in [0, 1] (or uint8). Points whose spatial-gradient
    matrix is near-singular or that leave the image are marked lost.
    """
    if curr.shape != ref.shape:
        raise ValueError("images must have the same size")
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        return FlowField(pts.copy(), pts.copy(), np.zeros(0, dtype=bool))
    p0 = pts.astype(np.float32).reshape(-1, 1, 2)
    p1, status, _ = cv2.calcOpticalFlowPyrLK(
        _to_u8(curr),
        _to_u8(ref),
        p0,
        None,
        winSize=LK_WINDOW,
        maxLevel=LK_MAX_LEVEL,
        criteria=(cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS, LK_MAX_ITERS, 0.01),
        minEigThreshold=LK_MIN_EIG,
    )
    matched = p1.reshape(-1, 2).astype(np.float64)
    h, w = curr.shape
    ok = status.reshape(-1).astype(bool)
    ok &= np.isfinite(matched).all(axis=1)
    ok &= (matched[:, 0] >= 0) & (matched[:, 0] <= w - 1) & (matched[:, 1] >= 0) & (matched[:, 1] <= h - 1)
    matched[~ok] = np.nan
    return FlowField(pts.copy(), matched, ok)


def flow_anomalies(flow: FlowField, mad_factor: float = 3.0, min_deviation: float = 0.5) -> set:
    """Indices whose flow magnitude departs from the median by > mad_factor * MAD.

    ``min_deviation`` (px) keeps sub-pixel tracking noise from being flagged
    when the MAD collapses to ~0 on a near-uniform field.
    """
    idx = np.flatnonzero(flow.tracked)
    if idx.size < 5:
        warnings.warn(f"only {idx.size} tracked points; no flow anomalies", FewTracksWarning, stacklevel=2)
        return set()
    f = flow.flow[idx]
    mag = np.hypot(f[:, 0], f[:, 1])
    med = np.median(mag)
    dev = np.abs(mag - med)
    mad = np.median(dev)
    thr = max(mad_factor * mad, min_deviation)
    return {int(i) for i in idx[dev > thr]}
