"""TUM RGB-D sequence layout: index files, association, trajectories."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import cv2
import numpy as np

from ..core import TUM_FR3, CameraIntrinsics, PoseSE3, INTRINSICS_PRESETS, sanitize_depth, to_gray
from ..errors import EmptySequence, ParseError

log = logging.getLogger(__name__)


def read_index(path) -> list:
    """``(timestamp, relative path)`` entries of an rgb.txt/depth.txt file."""
    out = []
    path = Path(path)
    with path.open() as fh:
        for no, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) < 2:
                raise ParseError(path, no, "expected '<timestamp> <file>'")
            try:
                t = float(parts[0])
            except ValueError:
                raise ParseError(path, no, f"bad timestamp {parts[0]!r}") from None
            if not math.isfinite(t):
                raise ParseError(path, no, "timestamp is not finite")
            out.append((t, parts[1]))
    return out


def associate(ts_a: Sequence[float], ts_b: Sequence[float], tolerance: float = 0.02) -> list:
    """One-to-one nearest-timestamp pairs ``(i, j)`` with ``|a_i - b_j| < tolerance``.

    Candidate pairs are taken greedily by increasing time difference, so
    each entry is used at most once. The result is sorted by ``i``.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    a = np.asarray(ts_a, dtype=np.float64)
    b = np.asarray(ts_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return []
    order_b = np.argsort(b, kind="stable")
    bs = b[order_b]
    cands = []
    for i, t in enumerate(a):
        lo = np.searchsorted(bs, t - tolerance, side="left")
        hi = np.searchsorted(bs, t + tolerance, side="right")
        for k in range(lo, hi):
            d = abs(t - bs[k])
            if d < tolerance:
                cands.append((d, i, int(order_b[k])))
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def load_intrinsics(path) -> CameraIntrinsics:
    """Intrinsics from a JSON file: either ``{"preset": name}`` or explicit fields."""
    data = json.loads(Path(path).read_text())
    base = INTRINSICS_PRESETS[data["preset"]] if "preset" in data else None
    fields = {}
    for key in ("fx", "fy", "cx", "cy", "width", "height", "depth_scale"):
        if key in data:
            fields[key] = data[key]
        elif base is not None:
            fields[key] = getattr(base, key)
    return CameraIntrinsics(**fields)


@dataclass(frozen=True)
class SequenceManifest:
    root: Path
    rgb: str = "rgb.txt"
    depth: str = "depth.txt"
    groundtruth: str = "groundtruth.txt"
    tolerance: float = 0.02
    intrinsics: Optional[CameraIntrinsics] = None
    depth_scale: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        if not self.tolerance > 0:
            raise ValueError("association tolerance must be positive")

    def camera(self) -> CameraIntrinsics:
        if self.intrinsics is not None:
            return self.intrinsics
        cam = self.root / "camera.json"
        return load_intrinsics(cam) if cam.exists() else TUM_FR3


@dataclass(frozen=True)
class RawFrame:
    index: int
    timestamp: float
    gray: np.ndarray  # float64 in [0, 1]
    depth: np.ndarray  # meters, 0 where invalid
    rgb_path: Path
    depth_path: Path


class RgbdSequence:
    """Associated rgb/depth pairs of one sequence, in timestamp order."""

    def __init__(self, manifest: SequenceManifest):
        self.manifest = manifest
        self.intrinsics = manifest.camera()
        self.depth_scale = manifest.depth_scale or self.intrinsics.depth_scale
        rgb = read_index(manifest.root / manifest.rgb)
        dep = read_index(manifest.root / manifest.depth)
        pairs = associate([t for t, _ in rgb], [t for t, _ in dep], manifest.tolerance)
        self.unmatched_rgb = len(rgb) - len(pairs)
        self.unmatched_depth = len(dep) - len(pairs)
        if not pairs:
            raise EmptySequence(f"no rgb/depth associations within {manifest.tolerance} s in {manifest.root}")
        if self.unmatched_rgb or self.unmatched_depth:
            log.info("skipped %d rgb and %d depth entries without a partner", self.unmatched_rgb, self.unmatched_depth)
        entries = sorted(((rgb[i][0], rgb[i][1], dep[j][1]) for i, j in pairs), key=lambda e: e[0])
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    @property
    def timestamps(self) -> list:
        return [e[0] for e in self.entries]

    def frame(self, k: int) -> RawFrame:
        t, rp, dp = self.entries[k]
        rgb_path = self.manifest.root / rp
        depth_path = self.manifest.root / dp
        img = cv2.imread(str(rgb_path), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise OSError(f"cannot read image {rgb_path}")
        dimg = cv2.imread(str(depth_path), cv2.IMREAD_UNCHANGED)
        if dimg is None:
            raise OSError(f"cannot read depth image {depth_path}")
        gray = _gray_from_bgr(img)
        depth = sanitize_depth(dimg.astype(np.float64) * self.depth_scale)
        return RawFrame(k, t, gray, depth, rgb_path, depth_path)

    def __iter__(self) -> Iterator[RawFrame]:
        for k in range(len(self.entries)):
            yield self.frame(k)

    def groundtruth(self) -> Optional[list]:
        p = self.manifest.root / self.manifest.groundtruth
        return read_trajectory(p) if p.exists() else None


def _gray_from_bgr(img: np.ndarray) -> np.ndarray:
    scale = 65535.0 if img.dtype == np.uint16 else 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float64) / scale
    if img.ndim == 2:
        return img
    return to_gray(img[:, :, 2::-1])


def load_sequence(manifest: SequenceManifest) -> RgbdSequence:
    return RgbdSequence(manifest)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


def format_pose_line(t: float, pose: PoseSE3) -> str:
    q = np.round(np.asarray(pose.rotation, dtype=np.float64), 6)
    # Renormalize until the printed digits are a fixed point, so that a
    # read/write round trip reproduces the file exactly.
    for _ in range(8):
        q2 = np.round(q / np.linalg.norm(q), 6)
        if np.array_equal(q2, q):
            break
        q = q2
    vals = [t, *pose.translation, *q]
    # avoid printing "-0.000000"
    return " ".join(f"{(v if round(v, 6) != 0 else 0.0):.6f}" for v in vals)


def write_trajectory(poses, path) -> None:
    """Write ``(timestamp, PoseSE3)`` pairs as TUM lines, ascending in time."""
    path = Path(path)
    rows = sorted(poses, key=lambda p: p[0])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for t, pose in rows:
                fh.write(format_pose_line(t, pose) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write trajectory {path}: {exc}") from exc


def read_trajectory(path) -> list:
    """``(timestamp, PoseSE3)`` pairs from a TUM trajectory file."""
    path = Path(path)
    out = []
    with path.open() as fh:
        for no, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.replace(",", " ").split()
            if len(parts) != 8:
                raise ParseError(path, no, f"expected 8 fields, got {len(parts)}")
            try:
                v = [float(x) for x in parts]
            except ValueError:
                raise ParseError(path, no, "non-numeric field") from None
            if not all(math.isfinite(x) for x in v):
                raise ParseError(path, no, "non-finite value")
            try:
                pose = PoseSE3(np.array(v[4:8]), np.array(v[1:4]))
            except ValueError as exc:
                raise ParseError(path, no, str(exc)) from None
            out.append((v[0], pose))
    out.sort(key=lambda p: p[0])
    return out
