from .synthetic import SceneFeatures, SceneSpec, SyntheticScene, generate_scene, write_sequence
from .metrics import (
    TrajectoryErrorReport,
    align_umeyama,
    compute_ate,
    compute_rpe,
    evaluate_trajectory,
    improvement,
    match_trajectories,
    relative_errors,
    rmse_sd,
)
