"""Line-oriented detection files.

Format: a line holding only a timestamp opens a block; each following line
``class confidence x1 y1 x2 y2`` is one detection for that timestamp.
Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import math
import warnings
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..core import Detection
from ..errors import ClampWarning, ParseError

DEFAULT_DYNAMIC_CLASSES = frozenset({"person"})


class DetectionFile:
    """Detections keyed by timestamp, with nearest-timestamp lookup."""

    def __init__(self, records: Optional[dict] = None):
        self.records = dict(sorted((records or {}).items()))
        self._ts = np.array(list(self.records.keys()), dtype=np.float64)

    def __len__(self):
        return len(self.records)

    def lookup(self, t: float, tolerance: float = 0.02) -> tuple:
        """Detections of the block nearest ``t``; empty when none is within tolerance."""
        if self._ts.size == 0:
            return ()
        k = int(np.argmin(np.abs(self._ts - t)))
        if abs(self._ts[k] - t) > tolerance:
            return ()
        return self.records[float(self._ts[k])]


def clip_box(box, image_size) -> tuple:
    w, h = image_size
    x1, y1, x2, y2 = box
    x1, x2 = sorted((min(max(x1, 0.0), w - 1.0), min(max(x2, 0.0), w - 1.0)))
    y1, y2 = sorted((min(max(y1, 0.0), h - 1.0), min(max(y2, 0.0), h - 1.0)))
    return (x1, y1, x2, y2)


def make_detection(cls, conf, box, image_size=None, dynamic_classes: Iterable[str] = DEFAULT_DYNAMIC_CLASSES) -> Detection:
    if not 0.0 <= conf <= 1.0:
        clamped = min(max(conf, 0.0), 1.0)
        warnings.warn(f"confidence {conf} of {cls!r} clamped to {clamped}", ClampWarning, stacklevel=2)
        conf = clamped
    box = tuple(float(v) for v in box)
    if image_size is not None:
        box = clip_box(box, image_size)
    return Detection(cls, float(conf), box, cls in set(dynamic_classes))


def load_detections(path, image_size=None, dynamic_classes: Iterable[str] = DEFAULT_DYNAMIC_CLASSES) -> DetectionFile:
    path = Path(path)
    records: dict = {}
    current = None
    dyn = frozenset(dynamic_classes)
    with path.open() as fh:
        for no, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) == 1:
                try:
                    current = float(parts[0])
                except ValueError:
                    raise ParseError(path, no, f"bad timestamp {parts[0]!r}") from None
                records.setdefault(current, [])
                continue
            if len(parts) != 6:
                raise ParseError(path, no, f"expected 'class conf x1 y1 x2 y2', got {len(parts)} fields")
            if current is None:
                raise ParseError(path, no, "detection before any timestamp line")
            try:
                vals = [float(v) for v in parts[1:]]
            except ValueError:
                raise ParseError(path, no, "non-numeric detection field") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(path, no, "non-finite detection field")
            records[current].append(make_detection(parts[0], vals[0], vals[1:], image_size, dyn))
    return DetectionFile({t: tuple(v) for t, v in records.items()})


def write_detections(records: dict, path) -> None:
    """Inverse of ``load_detections`` for ``{timestamp: [Detection, ...]}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for t in sorted(records):
            fh.write(f"{t:.6f}\n")
            for d in records[t]:
                x1, y1, x2, y2 = d.bbox
                fh.write(f"{d.class_name} {d.confidence:.6f} {x1:.2f} {y1:.2f} {x2:.2f} {y2:.2f}\n")
