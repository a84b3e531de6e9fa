"""Ray-cast synthetic RGB-D scenes with exact ground truth.

The world is an axis-aligned textured room seen by a camera that starts at
the origin looking down +z (y points down). Dynamic bodies are textured boxes
translating along x. Every surface is Lambertian with a texture defined on the
surface itself, so intensities are exactly consistent across views and
rendered depth is exact at pixel centres.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from ..core import CameraIntrinsics, Detection, PoseSE3, project_points, so3_exp
from ..dataset_io.detections import write_detections
from ..dataset_io.tum import write_trajectory

ROOM_MIN = np.array([-2.0, -1.5, -3.0])
ROOM_MAX = np.array([2.0, 1.2, 4.0])
BODY_HALF_SIZE = np.array([0.25, 0.5, 0.15])
MIN_RANGE = 0.4
MAX_RANGE = 10.0
OCCLUDER_DEPTH = 0.3
SURFACE_OCCLUDER = -2


@dataclass(frozen=True)
class SceneSpec:
    n_frames: int = 100
    width: int = 640
    height: int = 480
    n_bodies: int = 1
    body_speed_px: float = 10.0
    seed: int = 0
    cam_translation_amp: float = 0.05  # m
    cam_rotation_amp_deg: float = 1.0
    n_static_points: int = 600
    n_body_points: int = 150
    fps: float = 30.0
    # (first, last) frame of a span where a textureless board sweeps across
    # and fully covers the view in its middle frames.
    occlusion_span: Optional[tuple] = None


@dataclass(frozen=True)
class _Texture:
    period: float
    phase_u: float
    phase_v: float
    wave_u: float
    wave_v: float
    wave_phase: float

    def __call__(self, u, v):
        k = 2.0 * math.pi / self.period
        checker = np.tanh(2.5 * np.sin(k * u + self.phase_u) * np.sin(k * v + self.phase_v))
        wave = np.sin(self.wave_u * u + self.wave_v * v + self.wave_phase)
        return 0.5 + 0.3 * checker + 0.12 * wave


def _random_texture(rng, lo, hi) -> _Texture:
    return _Texture(
        float(rng.uniform(lo, hi)),
        float(rng.uniform(0, 2 * math.pi)),
        float(rng.uniform(0, 2 * math.pi)),
        float(rng.uniform(-4, 4)),
        float(rng.uniform(-4, 4)),
        float(rng.uniform(0, 2 * math.pi)),
    )


@dataclass(frozen=True)
class SceneFeatures:
    """Ground-truth correspondences between frame ``i`` and frame ``ref``."""

    positions: np.ndarray  # (N, 2) in frame i
    depth: np.ndarray  # (N,) camera z in frame i
    matched: np.ndarray  # (N, 2) in frame ref
    dynamic: np.ndarray  # (N,) bool
    point_ids: np.ndarray  # (N,) global point ids (bodies after static)
    body: np.ndarray  # (N,) body index or -1

    @property
    def flow(self) -> np.ndarray:
        return self.matched - self.positions


@dataclass
class SyntheticScene:
    spec: SceneSpec
    intrinsics: CameraIntrinsics
    poses: list  # camera-to-world per frame
    timestamps: np.ndarray
    static_points: np.ndarray  # (N, 3) world
    body_points: list  # per body (M, 3) in body-local coords
    body_tracks: np.ndarray  # (n_bodies, n_frames, 3) body centres (world)
    wall_textures: list
    body_textures: list
    body_confidence: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    # -- geometry ---------------------------------------------------------

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def occluder_columns(self, i: int):
        """Image column interval covered by the occluding board, or None."""
        span = self.spec.occlusion_span
        if span is None:
            return None
        a, b = span
        if not a <= i <= b:
            return None
        w = self.spec.width
        n = b - a + 1
        ramp = max(1, min(2, n // 3))
        k = i - a
        if k < ramp:
            frac = (k + 1) / (ramp + 1)
            return (0.0, frac * w)
        if k > n - 1 - ramp:
            frac = (n - k) / (ramp + 1)
            return (w - frac * w, float(w))
        return (-1.0, float(w) + 1.0)

    def raycast(self, i: int, uv: np.ndarray, pose: Optional[PoseSE3] = None, bodies: bool = True):
        """Depth (camera z), intensity and surface id along pixel rays.

        Bodies are placed as in frame ``i``. With ``pose`` given the camera is
        moved there and the occluder (tied to the frame's camera) is skipped.
        Surface ids: 0..5 room walls, 100 + b for body b, -2 occluder.
        Depth is the exact geometric depth; no sensor range limits.
        """
        K = self.intrinsics
        own_camera = pose is None
        pose = self.poses[i] if pose is None else pose
        bf = i
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        dc = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))], axis=1)
        d = dc @ pose.R.T
        o = pose.translation
        n = len(uv)
        depth = np.full(n, np.inf)
        surf = np.full(n, -1, dtype=np.int64)
        hit_pt = np.zeros((n, 3))

        # room: exit point of the box containing the camera
        with np.errstate(divide="ignore", invalid="ignore"):
            for axis in range(3):
                for j, bound in enumerate((ROOM_MIN[axis], ROOM_MAX[axis])):
                    s = (bound - o[axis]) / d[:, axis]
                    ok = (s > 0) & (s < depth)
                    depth[ok] = s[ok]
                    surf[ok] = axis * 2 + j
        hit_pt = o + depth[:, None] * d

        for b in range(self.body_tracks.shape[0] if bodies else 0):
            c = self.body_tracks[b, bf]
            lo = c - BODY_HALF_SIZE
            hi = c + BODY_HALF_SIZE
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo - o) / d
                t2 = (hi - o) / d
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            tn = np.nanmax(tmin, axis=1)
            tf = np.nanmin(tmax, axis=1)
            ok = (tn <= tf) & (tn > 0) & (tn < depth)
            depth[ok] = tn[ok]
            surf[ok] = 100 + b
            hit_pt[ok] = o + tn[ok, None] * d[ok]

        cols = self.occluder_columns(i) if own_camera else None
        if cols is not None:
            ok = (uv[:, 0] >= cols[0]) & (uv[:, 0] <= cols[1])
            depth[ok] = OCCLUDER_DEPTH
            surf[ok] = SURFACE_OCCLUDER

        inten = np.full(n, 0.5)
        for s_id in np.unique(surf):
            m = surf == s_id
            if s_id == SURFACE_OCCLUDER or s_id < 0:
                continue
            p = hit_pt[m]
            if s_id >= 100:
                b = s_id - 100
                local = p - self.body_tracks[b, bf]
                rel = np.abs(local) / BODY_HALF_SIZE
                face = np.argmax(rel, axis=1)
                u = np.where(face == 0, local[:, 1], local[:, 0])
                v = np.where(face == 2, local[:, 1], local[:, 2])
                inten[m] = self.body_textures[b](u, v)
            else:
                axis = s_id // 2
                others = [a for a in range(3) if a != axis]
                inten[m] = self.wall_textures[s_id](p[:, others[0]], p[:, others[1]])
        return depth, np.clip(inten, 0.0, 1.0), surf

    def render(self, i: int):
        """(gray, depth) images of frame ``i``; depth 0 where out of range."""
        if i in self._cache:
            return self._cache[i]
        out = self._render(i, None)
        if len(self._cache) < 8:
            self._cache[i] = out
        return out

    def render_pose(self, pose: PoseSE3, body_frame: int = 0):
        """Render from an arbitrary camera pose with bodies as in ``body_frame``."""
        return self._render(body_frame, pose)

    def _render(self, i, pose):
        K = self.intrinsics
        vv, uu = np.mgrid[0 : K.height, 0 : K.width]
        uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
        depth, inten, _ = self.raycast(i, uv, pose=pose)
        depth = depth.reshape(K.height, K.width)
        depth = np.where((depth >= MIN_RANGE) & (depth <= MAX_RANGE), depth, 0.0)
        return inten.reshape(K.height, K.width), depth

    # -- ground truth ------------------------------------------------------

    def world_points(self, i: int):
        """All scene points at frame ``i`` in world coordinates plus body index."""
        pts = [self.static_points]
        body = [np.full(len(self.static_points), -1)]
        for b, local in enumerate(self.body_points):
            pts.append(local + self.body_tracks[b, i])
            body.append(np.full(len(local), b))
        return np.concatenate(pts), np.concatenate(body)

    def visible(self, i: int):
        """(positions, camera depth, visible mask) of every scene point in frame i."""
        K = self.intrinsics
        Xw, _ = self.world_points(i)
        Xc = self.poses[i].inverse().act(Xw)
        uv = project_points(K, Xc)
        inside = np.isfinite(uv).all(axis=1)
        inside &= (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)
        vis = inside.copy()
        idx = np.flatnonzero(inside)
        if idx.size:
            z_ray, _, _ = self.raycast(i, uv[idx])
            vis[idx] = np.abs(z_ray - Xc[idx, 2]) <= 1e-6 * np.maximum(1.0, Xc[idx, 2])
        return uv, Xc[:, 2], vis

    def features(self, i: int, ref: int) -> SceneFeatures:
        """Points visible in frame ``i`` with exact correspondences in ``ref``."""
        uv_i, z_i, vis_i = self.visible(i)
        _, body = self.world_points(i)
        K = self.intrinsics
        Xw_ref, _ = self.world_points(ref)
        uv_r = project_points(K, self.poses[ref].inverse().act(Xw_ref))
        ok = vis_i & np.isfinite(uv_r).all(axis=1)
        idx = np.flatnonzero(ok)
        return SceneFeatures(
            uv_i[idx].copy(),
            z_i[idx].copy(),
            uv_r[idx].copy(),
            body[idx] >= 0,
            idx.copy(),
            body[idx].copy(),
        )

    def relative_pose(self, i: int, j: int) -> PoseSE3:
        """Transform mapping camera-i coordinates to camera-j coordinates."""
        return self.poses[j].inverse() @ self.poses[i]

    def detections(self, i: int, class_name: str = "person") -> list:
        K = self.intrinsics
        out = []
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        Tcw = self.poses[i].inverse()
        for b in range(self.body_tracks.shape[0]):
            corners = self.body_tracks[b, i] + signs * BODY_HALF_SIZE
            uv = project_points(K, Tcw.act(corners))
            if not np.isfinite(uv).all():
                continue
            x1 = max(0.0, uv[:, 0].min())
            y1 = max(0.0, uv[:, 1].min())
            x2 = min(K.width - 1.0, uv[:, 0].max())
            y2 = min(K.height - 1.0, uv[:, 1].max())
            if x2 <= x1 or y2 <= y1:
                continue
            cols = self.occluder_columns(i)
            if cols is not None and cols[0] <= 0.5 * (x1 + x2) <= cols[1]:
                continue  # hidden behind the occluder
            out.append(Detection(class_name, float(self.body_confidence[b]), (x1, y1, x2, y2), True))
        return out


def _camera_pose(spec: SceneSpec, i: int, phases) -> PoseSE3:
    t = i / spec.fps
    a = spec.cam_translation_amp
    trans = np.array(
        [
            a * math.sin(0.9 * t + phases[0]) - a * math.sin(phases[0]),
            0.5 * a * math.sin(1.3 * t + phases[1]) - 0.5 * a * math.sin(phases[1]),
            0.6 * a * math.sin(0.7 * t + phases[2]) - 0.6 * a * math.sin(phases[2]),
        ]
    )
    r = math.radians(spec.cam_rotation_amp_deg)
    rot = np.array(
        [
            0.5 * r * (math.sin(1.1 * t + phases[3]) - math.sin(phases[3])),
            r * (math.sin(0.8 * t + phases[4]) - math.sin(phases[4])),
            0.3 * r * (math.sin(0.6 * t + phases[5]) - math.sin(phases[5])),
        ]
    )
    return PoseSE3.from_rt(so3_exp(rot), trans)


def _triangle(x0, lo, hi, step, n):
    """Positions bouncing between lo and hi with constant |step|."""
    out = np.empty(n)
    x = x0
    v = step
    for k in range(n):
        out[k] = x
        if not lo <= x + v <= hi:
            v = -v
        x += v
    return out


def generate_scene(spec: SceneSpec = SceneSpec()) -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    f = 525.0 * spec.width / 640.0
    K = CameraIntrinsics(f, f, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0, spec.width, spec.height, 1.0 / 5000.0)
    phases = rng.uniform(0, 2 * math.pi, size=6)
    poses = [_camera_pose(spec, i, phases) for i in range(spec.n_frames)]
    timestamps = np.arange(spec.n_frames) / spec.fps

    wall_textures = [_random_texture(rng, 0.2, 0.35) for _ in range(6)]
    body_textures = [_random_texture(rng, 0.1, 0.16) for _ in range(spec.n_bodies)]

    tracks = np.zeros((spec.n_bodies, spec.n_frames, 3))
    for b in range(spec.n_bodies):
        z = float(rng.uniform(1.8, 2.6))
        y = float(rng.uniform(-0.1, 0.3))
        speed = spec.body_speed_px * z / f
        x_lim = 0.55 * z * (spec.width / 2.0) / f
        x0 = float(rng.uniform(-x_lim, x_lim)) * 0.8
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        xs = _triangle(x0, -x_lim, x_lim, sign * speed, spec.n_frames) if speed > 0 else np.full(spec.n_frames, x0)
        tracks[b, :, 0] = xs
        tracks[b, :, 1] = y
        tracks[b, :, 2] = z

    scene = SyntheticScene(
        spec,
        K,
        poses,
        timestamps,
        np.zeros((0, 3)),
        [],
        tracks,
        wall_textures,
        body_textures,
        rng.uniform(0.75, 0.95, size=spec.n_bodies),
    )

    # static points: rays through random pixels of frame 0 hitting the room
    uv = np.column_stack(
        [rng.uniform(0, spec.width - 1, spec.n_static_points * 2), rng.uniform(0, spec.height - 1, spec.n_static_points * 2)]
    )
    # rays blocked by bodies still define a wall point behind them
    depth, _, surf = scene.raycast(0, uv, pose=poses[0], bodies=False)
    keep = np.flatnonzero(surf >= 0)[: spec.n_static_points]
    Xc = np.column_stack(
        [(uv[keep, 0] - K.cx) / K.fx * depth[keep], (uv[keep, 1] - K.cy) / K.fy * depth[keep], depth[keep]]
    )
    scene.static_points = poses[0].act(Xc)

    for b in range(spec.n_bodies):
        # points on the camera-facing face and the two side faces
        m = spec.n_body_points
        face = rng.choice([0, 0, 0, 1, 2], size=m)
        hs = BODY_HALF_SIZE
        pts = rng.uniform(-1, 1, size=(m, 3)) * hs
        pts[face == 0, 2] = -hs[2]
        pts[face == 1, 0] = -hs[0]
        pts[face == 2, 0] = hs[0]
        scene.body_points.append(pts)
    return scene


def write_sequence(scene: SyntheticScene, out_dir) -> Path:
    """Write ``scene`` as a TUM-layout sequence with detections and intrinsics.

    RGB frames are 8-bit (gray replicated to three channels), depth is
    16-bit PNG at the intrinsics' depth scale.
    """
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    K = scene.intrinsics
    rgb_lines, depth_lines, dets = [], [], {}
    gt = []
    for i in range(scene.n_frames):
        t = float(scene.timestamps[i])
        gray, depth = scene.render(i)
        g8 = np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8)
        d16 = np.clip(np.round(depth / K.depth_scale), 0, 65535).astype(np.uint16)
        name = f"{t:.6f}.png"
        cv2.imwrite(str(out / "rgb" / name), np.dstack([g8, g8, g8]))
        cv2.imwrite(str(out / "depth" / name), d16)
        rgb_lines.append(f"{t:.6f} rgb/{name}")
        depth_lines.append(f"{t:.6f} depth/{name}")
        dets[t] = scene.detections(i)
        gt.append((t, scene.poses[i]))
    header = "# timestamp filename\n"
    (out / "rgb.txt").write_text(header + "\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text(header + "\n".join(depth_lines) + "\n")
    write_trajectory(gt, out / "groundtruth.txt")
    write_detections(dets, out / "detections.txt")
    cam = {k: getattr(K, k) for k in ("fx", "fy", "cx", "cy", "width", "height", "depth_scale")}
    (out / "camera.json").write_text(json.dumps(cam, indent=2, sort_keys=True) + "\n")
    spec = dataclasses.asdict(scene.spec)
    (out / "scene.json").write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")
    return out
