from .direct import (
    BACKGROUND_GAMMA,
    FOREGROUND_GAMMA,
    DirectConfig,
    DirectResult,
    GoodFrame,
    GoodFrameBuffer,
    ResidualSet,
    build_pyramid,
    cauchy,
    cauchy_weight,
    combined_cost,
    direct_refine,
    inverse_gradient_weights,
    photometric_scale,
    pixel_residuals,
    region_gamma,
    residuals,
    time_decay,
    warp,
    warp_points,
)
from .feature import MIN_MATCHES, FeaturePoseResult, feature_pose
from .fusion import fuse_pose, fusion_weight
