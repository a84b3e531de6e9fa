"""Potential dynamic regions from a-priori dynamic detections and
geometrically anomalous features."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from ..core import Detection


class RegionOrigin(str, enum.Enum):
    DETECTION_BOX = "DetectionBox"
    ANOMALY_CLUSTER = "AnomalyCluster"


@dataclass(frozen=True)
class PotentialDynamicRegion:
    origin: RegionOrigin
    bbox: tuple  # (x1, y1, x2, y2), inclusive px
    members: tuple  # feature indices

    def contains(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        x1, y1, x2, y2 = self.bbox
        return (xy[:, 0] >= x1) & (xy[:, 0] <= x2) & (xy[:, 1] >= y1) & (xy[:, 1] <= y2)


def build_regions(
    detections: Sequence[Detection],
    anomaly_ids: Iterable[int],
    positions,
    image_size,
    padding: int = 40,
) -> list:
    """One region per a-priori dynamic box, plus dilated anomaly clusters.

    ``positions`` is the (N, 2) feature position array; ``image_size`` is
    (width, height).
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    w, h = image_size
    regions = []
    dyn_boxes = [d for d in detections if d.apriori_dynamic]
    inside_any = np.zeros(len(pos), dtype=bool)
    for det in dyn_boxes:
        inside = det.contains(pos)
        inside_any |= inside
        regions.append(
            PotentialDynamicRegion(RegionOrigin.DETECTION_BOX, tuple(det.bbox), tuple(np.flatnonzero(inside).tolist()))
        )

    outside = sorted(i for i in set(anomaly_ids) if not inside_any[i])
    if not outside:
        return regions
    mask = np.zeros((h, w), dtype=bool)
    for i in outside:
        x, y = pos[i]
        c0 = int(max(0, np.floor(x - padding)))
        c1 = int(min(w - 1, np.ceil(x + padding)))
        r0 = int(max(0, np.floor(y - padding)))
        r1 = int(min(h - 1, np.ceil(y + padding)))
        mask[r0 : r1 + 1, c0 : c1 + 1] = True
    lab, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    for sl in ndimage.find_objects(lab):
        rs, cs = sl
        bbox = (float(cs.start), float(rs.start), float(cs.stop - 1), float(rs.stop - 1))
        x1, y1, x2, y2 = bbox
        inside = (pos[:, 0] >= x1) & (pos[:, 0] <= x2) & (pos[:, 1] >= y1) & (pos[:, 1] <= y2)
        regions.append(
            PotentialDynamicRegion(RegionOrigin.ANOMALY_CLUSTER, bbox, tuple(np.flatnonzero(inside).tolist()))
        )
    return regions
