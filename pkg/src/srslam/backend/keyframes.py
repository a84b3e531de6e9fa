"""Reliability-gated keyframe selection."""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..assessment import SceneLabel
from ..errors import ClampWarning, ColdStart


@dataclass(frozen=True)
class KeyframeConfig:
    window: int = 20
    w_base: float = 1.0
    gamma_ref: float = 0.01
    th_scene: float = 0.20
    min_bad_entries: int = 3
    min_interval_s: float = 0.25
    min_feature_loss: int = 15

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not (self.gamma_ref > 0 and self.th_scene > 0):
            raise ValueError("gamma_ref and th_scene must be positive")
        if self.w_base < 0:
            raise ValueError("w_base must be >= 0")


class KeyframeLedger:
    """Sliding windows of BAD-frame and accepted-keyframe reliabilities."""

    def __init__(self, cfg: KeyframeConfig = KeyframeConfig()):
        self.cfg = cfg
        self.bad_window: deque = deque(maxlen=cfg.window)
        self.kf_window: deque = deque(maxlen=cfg.window)
        self.last_kf_time: Optional[float] = None
        self.last_kf_tracked: Optional[int] = None

    def keyframe_mean(self) -> float:
        """Mean reliability of recent keyframes; ``th_scene`` before any exist."""
        if not self.kf_window:
            return self.cfg.th_scene
        return math.fsum(self.kf_window) / len(self.kf_window)


@dataclass(frozen=True)
class KeyframeDecision:
    frame_id: int
    label: SceneLabel
    r: float
    th_adaptive: Optional[float]
    accepted: bool
    w_select: Optional[float]
    reason: str

    def csv_row(self) -> list:
        fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        return [self.frame_id, self.label.value, f"{self.r:.6f}", fmt(self.th_adaptive), int(self.accepted), fmt(self.w_select)]


KEYFRAME_CSV_HEADER = ["frame_id", "label", "r", "th_adaptive", "accepted", "w_select"]


def window_stats(values) -> tuple:
    """Population mean and variance of the window contents."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ColdStart("BAD-frame window is empty")
    mean = math.fsum(v) / v.size
    var = math.fsum((v - mean) ** 2) / v.size
    return mean, var


def selection_weight(var: float, w_base: float = 1.0, gamma_ref: float = 0.01) -> float:
    if var < 0:
        raise ValueError("variance must be >= 0")
    return w_base * min(var / gamma_ref, 1.0)


def adaptive_threshold(r_bad: float, mean_bad: float, mean_kf: float, w_select: float, th_scene: float) -> float:
    return th_scene + w_select * (r_bad - mean_bad) - (1.0 - w_select) * (r_bad - mean_kf)


def need_new_keyframe(
    frame_id: int,
    label: SceneLabel,
    r: float,
    ledger: KeyframeLedger,
    timestamp: float = 0.0,
    n_tracked: Optional[int] = None,
) -> KeyframeDecision:
    """Keyframe decision for one assessed frame; updates ``ledger``.

    GOOD frames are accepted once enough time has passed or enough tracked
    features were lost since the last keyframe. BAD frames are accepted when
    ``r >= th_adaptive``, with the window statistics taken before the frame
    itself enters the BAD window.
    """
    cfg = ledger.cfg
    label = SceneLabel(label)
    if label is SceneLabel.GOOD:
        if ledger.last_kf_time is None:
            accepted, reason = True, "first"
        else:
            dt = timestamp - ledger.last_kf_time
            loss = 0 if (n_tracked is None or ledger.last_kf_tracked is None) else ledger.last_kf_tracked - n_tracked
            accepted = dt >= cfg.min_interval_s or loss >= cfg.min_feature_loss
            reason = "good" if accepted else "spacing"
        decision = KeyframeDecision(frame_id, label, r, None, accepted, None, reason)
    else:
        if len(ledger.bad_window) < cfg.min_bad_entries:
            decision = KeyframeDecision(frame_id, label, r, None, False, None, "cold_start")
        else:
            mean_bad, var_bad = window_stats(ledger.bad_window)
            w = selection_weight(var_bad, cfg.w_base, cfg.gamma_ref)
            th = adaptive_threshold(r, mean_bad, ledger.keyframe_mean(), w, cfg.th_scene)
            accepted = r >= th
            decision = KeyframeDecision(frame_id, label, r, th, accepted, w, "adaptive")
        ledger.bad_window.append(r)
    if decision.accepted:
        ledger.kf_window.append(r)
        ledger.last_kf_time = timestamp
        ledger.last_kf_tracked = n_tracked
    return decision


def information_scale(r: float, th_scene: float = 0.20, is_bad: bool = True) -> float:
    """Frame-wide information multiplier: ``R_bad / th_scene`` for BAD frames."""
    if not is_bad:
        return 1.0
    if r < 0:
        warnings.warn(f"negative reliability {r} clamped to 0", ClampWarning, stacklevel=2)
        r = 0.0
    return min(r, th_scene) / th_scene


def penalize_information(q_inv, r_bad: float, th_scene: float = 0.20, is_bad: bool = True) -> np.ndarray:
    q = np.asarray(q_inv, dtype=np.float64)
    return information_scale(r_bad, th_scene, is_bad) * q
