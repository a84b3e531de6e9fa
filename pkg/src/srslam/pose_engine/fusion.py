"""Blend of feature-based and direct pose estimates."""

from __future__ import annotations

import math

from ..core import PoseSE3, se3_exp, se3_log


def fusion_weight(r_motion: float, mu: float) -> float:
    """Weight of the feature-based estimate, ``exp(-mu * R_r)``."""
    return math.exp(-mu * r_motion)


def fuse_pose(T_feature: PoseSE3, T_direct: PoseSE3, r_motion: float, mu: float = 0.05) -> PoseSE3:
    """Geodesic blend ``T_f * exp((1 - w) * log(T_f^-1 T_d))`` with ``w = exp(-mu R_r)``.

    The endpoints are returned unchanged at ``w == 1`` and ``w == 0``.
    """
    w = fusion_weight(r_motion, mu)
    if w == 1.0:
        return T_feature
    if w == 0.0:
        return T_direct
    delta = se3_log(T_feature.inverse().compose(T_direct))
    return T_feature.compose(se3_exp((1.0 - w) * delta))
