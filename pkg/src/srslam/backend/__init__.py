from .keyframes import (
    KEYFRAME_CSV_HEADER,
    KeyframeConfig,
    KeyframeDecision,
    KeyframeLedger,
    adaptive_threshold,
    information_scale,
    need_new_keyframe,
    penalize_information,
    selection_weight,
    window_stats,
)
from .optimize import (
    DEFAULT_BASELINE_M,
    BAObservations,
    OptimizationResult,
    WeightedObservation,
    local_ba,
    stereo_measurements,
    stereo_residuals,
    weighted_pose_optimize,
)
