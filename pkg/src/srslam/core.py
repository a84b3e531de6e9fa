"""Shared domain types and geometric primitives.

Poses are camera-to-world transforms unless stated otherwise. Quaternions are
stored in (x, y, z, w) order, the same order TUM trajectory files use.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AxisAmbiguous, BehindCamera

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Angles this close to pi have no well-defined log axis.
_PI_TOL = 1e-12


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Camera and images
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0 / 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def scaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of pyramid level ``level`` (each level halves the resolution)."""
        if level == 0:
            return self
        s = 0.5**level
        w = max(1, self.width >> level)
        h = max(1, self.height >> level)
        cx = min((self.cx + 0.5) * s - 0.5, w - 1)
        cy = min((self.cy + 0.5) * s - 0.5, h - 1)
        return CameraIntrinsics(self.fx * s, self.fy * s, max(cx, 0.0), max(cy, 0.0), w, h, self.depth_scale)


TUM_FR1 = CameraIntrinsics(517.3, 516.5, 318.6, 255.3, 640, 480, 1.0 / 5000.0)
TUM_FR2 = CameraIntrinsics(520.9, 521.0, 325.1, 249.7, 640, 480, 1.0 / 5000.0)
TUM_FR3 = CameraIntrinsics(535.4, 539.2, 320.1, 247.6, 640, 480, 1.0 / 5000.0)
INTRINSICS_PRESETS = {"tum_fr1": TUM_FR1, "tum_fr2": TUM_FR2, "tum_fr3": TUM_FR3}


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """RGB (H, W, 3) in [0, 255] or [0, 1] to a float gray image in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        gray = rgb
    else:
        gray = rgb[..., 0] * LUMA_WEIGHTS[0] + rgb[..., 1] * LUMA_WEIGHTS[1] + rgb[..., 2] * LUMA_WEIGHTS[2]
    if gray.size and gray.max() > 1.0:
        gray = gray / 255.0
    return np.clip(gray, 0.0, 1.0)


def sanitize_depth(depth: np.ndarray) -> np.ndarray:
    """Map non-finite and negative samples to 0 (invalid)."""
    d = np.array(depth, dtype=np.float64)
    d[~np.isfinite(d) | (d < 0)] = 0.0
    return d


def bilinear_sample(img: np.ndarray, x: Sequence[float], depth: bool = False) -> Optional[float]:
    """Sample ``img`` at sub-pixel ``x = (col, row)``; ``None`` when invalid.

    A sample is invalid when any of the four neighbours falls outside the
    image, or (for depth images) holds an invalid value.
    """
    vals, valid = bilinear_sample_array(img, np.array([[x[0], x[1]]], dtype=np.float64), depth=depth)
    return float(vals[0]) if valid[0] else None


def bilinear_sample_array(img, pts, depth=False, with_grad=False):
    """Vectorised bilinear sampling.

    Returns ``(values, valid)`` or ``(values, valid, grad)`` where ``grad`` is
    the (N, 2) derivative of the bilinear interpolant w.r.t. (col, row).
    """
    img = np.asarray(img)
    h, w = img.shape
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (y >= 0) & (x <= w - 1) & (y <= h - 1)
    if w < 2 or h < 2:
        valid[:] = False
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.minimum(np.floor(xs), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(ys), max(h - 2, 0)).astype(np.intp)
    ax = xs - x0
    ay = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    if depth:
        with np.errstate(invalid="ignore"):
            for v in (v00, v01, v10, v11):
                valid &= np.isfinite(v) & (v > 0)
    top = (1.0 - ax) * v00 + ax * v01
    bot = (1.0 - ax) * v10 + ax * v11
    vals = (1.0 - ay) * top + ay * bot
    vals = np.where(valid, vals, np.nan)
    if not with_grad:
        return vals, valid
    gx = (1.0 - ay) * (v01 - v00) + ay * (v11 - v10)
    gy = bot - top
    grad = np.stack([gx, gy], axis=1)
    grad[~valid] = np.nan
    return vals, valid, grad


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridLayout:
    width: int
    height: int
    rows: int = 3
    cols: int = 3

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cell_of(self, xy) -> np.ndarray:
        """Cell index (row-major) for each (col, row) position."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        c = np.clip((xy[:, 0] * self.cols // self.width).astype(int), 0, self.cols - 1)
        r = np.clip((xy[:, 1] * self.rows // self.height).astype(int), 0, self.rows - 1)
        return r * self.cols + c

    def cell_slices(self):
        """(row slice, col slice) per cell, consistent with :meth:`cell_of`."""
        out = []
        for r in range(self.rows):
            r0 = -(-r * self.height // self.rows)
            r1 = -(-(r + 1) * self.height // self.rows)
            for c in range(self.cols):
                c0 = -(-c * self.width // self.cols)
                c1 = -(-(c + 1) * self.width // self.cols)
                out.append((slice(r0, r1), slice(c0, c1)))
        return out


# ---------------------------------------------------------------------------
# Features and detections
# ---------------------------------------------------------------------------


class FeatureLabel(str, enum.Enum):
    STATIC = "Static"
    POTENTIAL_DYNAMIC = "PotentialDynamic"
    REMOVED = "Removed"


_ALLOWED = {
    FeatureLabel.STATIC: {FeatureLabel.STATIC, FeatureLabel.POTENTIAL_DYNAMIC},
    FeatureLabel.POTENTIAL_DYNAMIC: {FeatureLabel.STATIC, FeatureLabel.REMOVED, FeatureLabel.POTENTIAL_DYNAMIC},
    FeatureLabel.REMOVED: {FeatureLabel.REMOVED},
}


def check_transition(old: FeatureLabel, new: FeatureLabel) -> None:
    if new not in _ALLOWED[old]:
        raise ValueError(f"illegal label transition {old.value} -> {new.value}")


@dataclass(frozen=True)
class FeaturePoint:
    position: tuple
    response: float = 0.0
    depth: Optional[float] = None
    flow: Optional[tuple] = None
    label: FeatureLabel = FeatureLabel.STATIC

    def with_label(self, label: FeatureLabel) -> "FeaturePoint":
        check_transition(self.label, label)
        return FeaturePoint(self.position, self.response, self.depth, self.flow, label)


def feature_arrays(features: Sequence[FeaturePoint]):
    """Positions (N, 2), depths (N,) with NaN for invalid, flows (N, 2) with NaN for absent."""
    n = len(features)
    pos = np.zeros((n, 2))
    dep = np.full(n, np.nan)
    flo = np.full((n, 2), np.nan)
    for i, f in enumerate(features):
        pos[i] = f.position
        if f.depth is not None and f.depth > 0 and math.isfinite(f.depth):
            dep[i] = f.depth
        if f.flow is not None:
            flo[i] = f.flow
    return pos, dep, flo


def normalize_responses(responses) -> np.ndarray:
    r = np.asarray(responses, dtype=np.float64)
    if r.size == 0:
        return r
    m = r.max()
    if m <= 0:
        return np.zeros_like(r)
    return np.clip(r / m, 0.0, 1.0)


@dataclass(frozen=True)
class Detection:
    class_name: str
    confidence: float
    bbox: tuple  # (x1, y1, x2, y2) in px
    apriori_dynamic: bool = False

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.bbox
        return max(0.0, x2 - x1) * max(0.0, y2 - y1)

    @property
    def center(self) -> tuple:
        x1, y1, x2, y2 = self.bbox
        return (0.5 * (x1 + x2), 0.5 * (y1 + y2))

    def contains(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        x1, y1, x2, y2 = self.bbox
        return (xy[:, 0] >= x1) & (xy[:, 0] <= x2) & (xy[:, 1] >= y1) & (xy[:, 1] <= y2)


# ---------------------------------------------------------------------------
# SO(3) / SE(3)
# ---------------------------------------------------------------------------


def hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def hat_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def quat_mul(a, b) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``x -> R x + t`` with R stored as a unit quaternion."""

    rotation: np.ndarray = field(default_factory=lambda: _frozen([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: _frozen([0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("invalid quaternion")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        object.__setattr__(self, "rotation", _frozen(q))
        object.__setattr__(self, "translation", _frozen(np.asarray(self.translation, dtype=np.float64).reshape(3)))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> "PoseSE3":
        return cls(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        q = quat_mul(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return PoseSE3(q, t)

    __matmul__ = compose

    def inverse(self) -> "PoseSE3":
        x, y, z, w = self.rotation
        qi = np.array([-x, -y, -z, w])
        return PoseSE3(qi, -(quat_to_matrix(qi) @ self.translation))

    def act(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.R.T + self.translation

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        x, y, z, w = self.rotation
        return 2.0 * math.atan2(math.sqrt(x * x + y * y + z * z), abs(w))

    def allclose(self, other: "PoseSE3", atol=1e-9) -> bool:
        same_q = np.allclose(self.rotation, other.rotation, atol=atol) or np.allclose(
            self.rotation, -other.rotation, atol=atol
        )
        return same_q and np.allclose(self.translation, other.translation, atol=atol)


def _so3_coeffs(theta):
    """A = sin/θ, B = (1-cos)/θ², C = (θ - sin)/θ³ with series near 0."""
    t2 = theta * theta
    if theta < 1e-4:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / t2
        c = (theta - math.sin(theta)) / (t2 * theta)
    return a, b, c


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    a, b, _ = _so3_coeffs(theta)
    P = hat(phi)
    return np.eye(3) + a * P + b * (P @ P)


def se3_exp(xi) -> PoseSE3:
    """Twist ``(rho, phi)`` (translation part first) to a pose."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, phi = xi[:3], xi[3:]
    theta = float(np.linalg.norm(phi))
    half = 0.5 * theta
    if theta < 1e-8:
        s = 0.5 - theta * theta / 48.0
    else:
        s = math.sin(half) / theta
    q = np.array([phi[0] * s, phi[1] * s, phi[2] * s, math.cos(half)])
    _, b, c = _so3_coeffs(theta)
    P = hat(phi)
    V = np.eye(3) + b * P + c * (P @ P)
    return PoseSE3(q, V @ rho)


def se3_log(T: PoseSE3) -> np.ndarray:
    q = np.asarray(T.rotation, dtype=np.float64)
    if q[3] < 0:
        q = -q
    v = q[:3]
    vn = float(np.linalg.norm(v))
    theta = 2.0 * math.atan2(vn, q[3])
    if math.pi - theta < _PI_TOL:
        raise AxisAmbiguous("rotation angle is pi; log axis is ambiguous")
    if vn < 1e-12:
        phi = 2.0 * v / q[3]
    else:
        phi = theta * v / vn
    theta = float(np.linalg.norm(phi))
    P = hat(phi)
    if theta < 1e-4:
        t2 = theta * theta
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        d = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / (theta * theta)
    Vinv = np.eye(3) - 0.5 * P + d * (P @ P)
    return np.concatenate([Vinv @ T.translation, phi])


# ---------------------------------------------------------------------------
# Pinhole model
# ---------------------------------------------------------------------------


def project(K: CameraIntrinsics, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if not X[2] > 0:
        raise BehindCamera(f"point depth {X[2]} is not positive")
    return np.array([K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy])


def backproject(K: CameraIntrinsics, x, d: float) -> np.ndarray:
    if not d > 0:
        raise BehindCamera(f"depth {d} is not positive")
    return np.array([(x[0] - K.cx) / K.fx * d, (x[1] - K.cy) / K.fy * d, d])


def project_points(K: CameraIntrinsics, X: np.ndarray) -> np.ndarray:
    """Vectorised projection; rows with z <= 0 become NaN."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    z = X[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * X[:, 0] / z + K.cx
        v = K.fy * X[:, 1] / z + K.cy
    out = np.stack([u, v], axis=1)
    out[~(z > 0)] = np.nan
    return out


def backproject_points(K: CameraIntrinsics, xy: np.ndarray, d: np.ndarray) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    return np.stack([(xy[:, 0] - K.cx) / K.fx * d, (xy[:, 1] - K.cy) / K.fy * d, d], axis=1)


def projection_jacobian(K: CameraIntrinsics, X: np.ndarray) -> np.ndarray:
    """d pi / d X, shape (N, 2, 3)."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    iz = 1.0 / X[:, 2]
    J = np.zeros((X.shape[0], 2, 3))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * X[:, 0] * iz * iz
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * X[:, 1] * iz * iz
    return J


def nearest_depth(depth: np.ndarray, xy) -> np.ndarray:
    """Depth at the nearest pixel; NaN when out of bounds or invalid."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    h, w = depth.shape
    out = np.full(xy.shape[0], np.nan)
    with np.errstate(invalid="ignore"):
        c = np.round(xy[:, 0])
        r = np.round(xy[:, 1])
        ok = np.isfinite(c) & np.isfinite(r) & (c >= 0) & (c < w) & (r >= 0) & (r < h)
    vals = depth[r[ok].astype(int), c[ok].astype(int)]
    vals = np.where((vals > 0) & np.isfinite(vals), vals, np.nan)
    out[ok] = vals
    return out


# ---------------------------------------------------------------------------
# Frame
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    id: int
    timestamp: float
    gray: np.ndarray
    depth: np.ndarray
    features: tuple = ()
    detections: tuple = ()
    reliability: Optional[object] = None
    pose: Optional[PoseSE3] = None

    @property
    def shape(self):
        return self.gray.shape
