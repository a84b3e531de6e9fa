"""Scene-reliability RGB-D SLAM front-end."""

from .assessment import AssessmentConfig, ReliabilityRecord, SceneLabel, assess_frame
from .config import PipelineConfig, load_config
from .core import CameraIntrinsics, Detection, FeatureLabel, FeaturePoint, GridLayout, PoseSE3, se3_exp, se3_log
from .pipeline import Pipeline, run_sequence

__version__ = "0.1.0"

__all__ = [
    "AssessmentConfig",
    "CameraIntrinsics",
    "Detection",
    "FeatureLabel",
    "FeaturePoint",
    "GridLayout",
    "Pipeline",
    "PipelineConfig",
    "PoseSE3",
    "ReliabilityRecord",
    "SceneLabel",
    "assess_frame",
    "load_config",
    "run_sequence",
    "se3_exp",
    "se3_log",
]
