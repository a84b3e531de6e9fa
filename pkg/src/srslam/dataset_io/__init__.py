from .detections import DEFAULT_DYNAMIC_CLASSES, DetectionFile, clip_box, load_detections, make_detection, write_detections
from .features import detect_features, harris_response
from .tum import (
    RawFrame,
    RgbdSequence,
    SequenceManifest,
    associate,
    format_pose_line,
    load_intrinsics,
    load_sequence,
    read_index,
    read_trajectory,
    write_trajectory,
)
