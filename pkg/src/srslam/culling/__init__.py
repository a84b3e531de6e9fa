from .dbscan import NOISE, DbscanLabeling, dbscan
from .epipolar import eight_point, epipolar_anomalies, ransac_fundamental, symmetric_epipolar_distance
from .flow import FlowField, flow_anomalies, lk_flow
from .regions import PotentialDynamicRegion, RegionOrigin, build_regions
from .strategy import (
    CULLING_CSV_HEADER,
    CullBranch,
    CullingConfig,
    CullResult,
    ScaleMode,
    adaptive_dbscan_params,
    adaptive_scale,
    apply_labels,
    cull,
    depth_preclusters,
    iqr_depth_threshold,
    potential_regions,
    refined_labels,
)
