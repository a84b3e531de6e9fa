"""Per-frame front-end: features, reliability, culling, pose, keyframes."""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .assessment import RELIABILITY_CSV_HEADER, ReferenceFrame, ReliabilityRecord, assess_frame, initialize_reference, maybe_update_reference
from .backend import (
    KEYFRAME_CSV_HEADER,
    BAObservations,
    KeyframeDecision,
    KeyframeLedger,
    information_scale,
    local_ba,
    need_new_keyframe,
    stereo_measurements,
    stereo_residuals,
    weighted_pose_optimize,
)
from .config import PipelineConfig
from .core import CameraIntrinsics, FeaturePoint, GridLayout, PoseSE3, backproject_points, nearest_depth
from .culling import CULLING_CSV_HEADER, CullResult, FlowField, cull, lk_flow, potential_regions
from .dataset_io import DetectionFile, RgbdSequence, detect_features, write_trajectory
from .errors import Degenerate, FewTracksWarning, NoTracksWarning, TrackingLost
from .pose_engine import GoodFrame, GoodFrameBuffer, direct_refine, feature_pose, fuse_pose, fusion_weight

log = logging.getLogger(__name__)

POSE_CSV_HEADER = ["frame_id", "source", "w_diff", "direct_converged", "final_cost"]
STAGE_ORDER = ("features", "assessment", "culling", "feature_pose", "direct", "fusion", "keyframe", "pose_opt")
CHI2_GATE_2 = 5.991  # 95% chi-square quantiles, 1 px sigma
CHI2_GATE_3 = 7.815
KF_MATCH_PX = 2.0
MIN_SHARED_POINTS = 10


@dataclass
class FrameReport:
    frame_id: int
    timestamp: float
    record: ReliabilityRecord
    cull: CullResult
    pose: PoseSE3
    source: str  # feature, fused or constant_velocity
    w_diff: float
    direct_converged: Optional[bool]
    final_cost: Optional[float]
    keyframe: KeyframeDecision
    stages: list = field(default_factory=list)

    def pose_row(self) -> list:
        conv = "" if self.direct_converged is None else int(self.direct_converged)
        cost = "" if self.final_cost is None else f"{self.final_cost:.6g}"
        return [self.frame_id, self.source, f"{self.w_diff:.6f}", conv, cost]

    def culling_row(self) -> list:
        return [self.frame_id, len(self.cull.labels), self.cull.n_potential, self.cull.n_removed, self.cull.branch.value]


@dataclass
class _Keyframe:
    frame_id: int
    pose: PoseSE3
    gray: np.ndarray
    depth: np.ndarray
    positions: np.ndarray
    depths: np.ndarray
    point_ids: np.ndarray
    scale: float


@dataclass
class _Prev:
    gray: np.ndarray
    depth: np.ndarray
    pose: PoseSE3
    tracked: bool = True


def _stereo_inliers(r: np.ndarray, meas: np.ndarray) -> np.ndarray:
    chi2 = np.einsum("ni,ni->n", r, r)
    gate = np.where(np.isfinite(meas[:, 2]), CHI2_GATE_3, CHI2_GATE_2)
    return np.isfinite(chi2) & (chi2 < gate)


def check_stage_order(stages: Sequence[str]) -> None:
    """Raise when a frame's stages ran out of the pipeline order."""
    rank = [STAGE_ORDER.index(s) for s in stages]
    if rank != sorted(rank):
        raise AssertionError(f"pipeline stages out of order: {list(stages)}")


class Pipeline:
    def __init__(self, K: CameraIntrinsics, cfg: PipelineConfig = PipelineConfig()):
        self.K = K
        self.cfg = cfg
        self.grid = GridLayout(K.width, K.height)
        self.diag = K.diagonal
        self.buffer = GoodFrameBuffer(cfg.direct.K)
        self.ledger = KeyframeLedger(cfg.keyframes)
        self.reports: list = []
        self.trajectory: list = []
        self.keyframes: list = []
        self.map_points: dict = {}
        self._next_point = 0
        self._n_accepted = 0
        self._init_candidates: list = []
        self.reference: Optional[ReferenceFrame] = None
        self._prev: Optional[_Prev] = None
        self._velocity = PoseSE3.identity()
        sig_t, sig_r = cfg.pose_prior_sigma_t, cfg.pose_prior_sigma_r
        self._prior_info = np.diag([1 / sig_t**2] * 3 + [1 / sig_r**2] * 3)

    # -- helpers ---------------------------------------------------------

    def _predicted_pose(self) -> PoseSE3:
        if self._prev is None:
            return PoseSE3.identity()
        return self._prev.pose.compose(self._velocity)

    def _flows(self, gray, pos):
        flow_prev = lk_flow(gray, self._prev.gray, pos) if self._prev is not None else None
        flow_ref = lk_flow(gray, self.reference.gray, pos) if self.reference is not None else None
        return flow_prev, flow_ref

    @staticmethod
    def _with_flow(features, flow_ref: Optional[FlowField]):
        if flow_ref is None:
            return list(features)
        f = flow_ref.flow
        return [
            FeaturePoint(p.position, p.response, p.depth, tuple(f[i]) if flow_ref.tracked[i] else None, p.label)
            for i, p in enumerate(features)
        ]

    # -- main step ---------------------------------------------------------

    def process(self, frame_id: int, timestamp: float, gray: np.ndarray, depth: np.ndarray, detections=()) -> FrameReport:
        cfg = self.cfg
        stages = []
        detections = tuple(detections)
        h, w = gray.shape
        feats = detect_features(gray, cfg.max_features, depth, self.grid)
        pos = np.array([f.position for f in feats], dtype=np.float64).reshape(-1, 2)
        stages.append("features")

        is_init = len(self.trajectory) < cfg.assessment.init_window
        flow_prev, flow_ref = self._flows(gray, pos)
        feats = self._with_flow(feats, flow_ref)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoTracksWarning)
            rec = assess_frame(feats, detections, depth, self.grid, cfg.assessment, has_reference=self.reference is not None)
        stages.append("assessment")

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FewTracksWarning)
            anomalies, regions, _ = potential_regions(pos, flow_prev, detections, rec.is_good, (w, h), cfg.culling)
        result = cull(feats, regions, rec.r_motion, rec.r_final, rec.r_feature, is_init, anomalies, self.diag, cfg.culling)
        stages.append("culling")

        static = ~result.removed if len(feats) else np.zeros(0, dtype=bool)
        T_pred = self._predicted_pose()
        T_feature, source, corr = T_pred, "constant_velocity", None
        if self._prev is not None:
            src, flow_src = self._prev, flow_prev
            if not self._prev.tracked and self.keyframes:
                # recover against the last keyframe after a tracking loss
                kf = self.keyframes[-1]
                src, flow_src = _Prev(kf.gray, kf.depth, kf.pose), lk_flow(gray, kf.gray, pos)
            sel = static & flow_src.tracked
            pts_prev = flow_src.matched[sel]
            d_prev = nearest_depth(src.depth, pts_prev)
            try:
                init = T_pred.inverse().compose(src.pose)
                fp = feature_pose(self.K, pts_prev, d_prev, pos[sel], init=init)
                T_feature = src.pose.compose(fp.pose.inverse())
                source = "feature"
                corr = (src.pose, pts_prev, d_prev, pos[sel])
            except TrackingLost:
                log.info("frame %d: tracking lost, constant-velocity pose", frame_id)
        else:
            source = "feature"  # first frame anchors the world frame
        stages.append("feature_pose")

        T_fused, w_diff, converged, final_cost = T_feature, 1.0, None, None
        if not rec.is_good and len(self.buffer):
            assert "culling" in stages
            res = direct_refine(gray, depth, timestamp, self.K, self.buffer, regions, cfg.direct, init=T_feature)
            stages.append("direct")
            converged, final_cost = res.converged, res.final_cost
            if res.converged:
                w_diff = fusion_weight(rec.r_motion, cfg.direct.fusion_sensitivity)
                T_fused = fuse_pose(T_feature, res.pose, rec.r_motion, cfg.direct.fusion_sensitivity)
                source = "fused"
        stages.append("fusion")

        n_tracked = int(flow_prev.tracked.sum()) if flow_prev is not None else len(feats)
        decision = need_new_keyframe(frame_id, rec.label, rec.r_final, self.ledger, timestamp, n_tracked)
        stages.append("keyframe")

        scale = information_scale(rec.r_final, cfg.assessment.th_scene, not rec.is_good)
        T_final = self._optimize_pose(T_fused, corr, depth, scale) if corr is not None else T_fused
        stages.append("pose_opt")
        check_stage_order(stages)

        report = FrameReport(frame_id, timestamp, rec, result, T_final, source, w_diff, converged, final_cost, decision, stages)
        self._finish(report, gray, depth, feats, static, scale, tracked=corr is not None or self._prev is None)
        return report

    def _optimize_pose(self, T_fused: PoseSE3, corr, depth, scale: float) -> PoseSE3:
        src_pose, pts_prev, d_prev, pts_curr = corr
        ok = np.isfinite(d_prev)
        if ok.sum() < 6:
            return T_fused
        Xw = src_pose.act(backproject_points(self.K, pts_prev[ok], d_prev[ok]))
        meas = stereo_measurements(self.K, pts_curr[ok], nearest_depth(depth, pts_curr[ok]))
        T = T_fused
        # Gate, solve, then re-gate at the solution once.
        for _ in range(2):
            inl = _stereo_inliers(stereo_residuals(self.K, T.inverse(), Xw, meas), meas)
            if inl.sum() < 6:
                return T
            try:
                T = weighted_pose_optimize(
                    self.K, Xw[inl], meas[inl], T, scales=scale, prior=T_fused, prior_information=self._prior_info
                ).pose
            except Degenerate:
                return T_fused
        return T

    def _finish(self, report: FrameReport, gray, depth, feats, static, scale, tracked=True):
        rec = report.record
        ref_cand = ReferenceFrame(report.frame_id, gray, tuple(feats), rec.r_current, depth, report.timestamp)
        if self.reference is None:
            self._init_candidates.append(ref_cand)
            if len(self._init_candidates) >= self.cfg.assessment.init_window:
                self.reference = initialize_reference(self._init_candidates)
                self._init_candidates = []
        else:
            self.reference = maybe_update_reference(self.reference, ref_cand)

        if rec.is_good:
            self.buffer.push(GoodFrame(report.frame_id, report.timestamp, gray, depth, report.pose))
        if self._prev is not None:
            self._velocity = self._prev.pose.inverse().compose(report.pose)
        self._prev = _Prev(gray, depth, report.pose, tracked)
        self.trajectory.append((report.timestamp, report.pose))
        self.reports.append(report)
        # a pose from the motion model is too uncertain to anchor map points
        if report.keyframe.accepted and tracked:
            self._add_keyframe(report, gray, depth, feats, static, scale)

    # -- keyframes and local BA -------------------------------------------------

    def _add_keyframe(self, report, gray, depth, feats, static, scale):
        pos = np.array([f.position for f in feats], dtype=np.float64).reshape(-1, 2)
        dep = np.array([np.nan if f.depth is None else f.depth for f in feats], dtype=np.float64)
        keep = static & np.isfinite(dep) if len(feats) else np.zeros(0, dtype=bool)
        pos, dep = pos[keep], dep[keep]
        ids = np.full(pos.shape[0], -1, dtype=np.int64)
        if self.keyframes and pos.shape[0]:
            last = self.keyframes[-1]
            fl = lk_flow(gray, last.gray, pos)
            for i in np.flatnonzero(fl.tracked):
                if last.positions.shape[0] == 0:
                    break
                d2 = ((last.positions - fl.matched[i]) ** 2).sum(axis=1)
                j = int(np.argmin(d2))
                if d2[j] <= KF_MATCH_PX**2 and last.point_ids[j] not in ids:
                    ids[i] = last.point_ids[j]
        Xw = report.pose.act(backproject_points(self.K, pos, dep)) if pos.shape[0] else np.zeros((0, 3))
        for i in np.flatnonzero(ids < 0):
            ids[i] = self._next_point
            self.map_points[self._next_point] = Xw[i]
            self._next_point += 1
        self.keyframes.append(_Keyframe(report.frame_id, report.pose, gray, depth, pos, dep, ids, scale))
        self._n_accepted += 1
        if self._n_accepted % self.cfg.ba_every == 0:
            self._run_local_ba()

    def _run_local_ba(self):
        window = self.keyframes[-self.cfg.ba_window :]
        if len(window) < 2:
            return
        counts: dict = {}
        for kf in window:
            for pid in kf.point_ids:
                counts[int(pid)] = counts.get(int(pid), 0) + 1
        shared = sorted(p for p, c in counts.items() if c >= 2)
        if len(shared) < MIN_SHARED_POINTS:
            return
        index = {p: j for j, p in enumerate(shared)}
        kf_idx, pt_idx, meas = [], [], []
        for k, kf in enumerate(window):
            m = np.array([int(p) in index for p in kf.point_ids], dtype=bool)
            if not m.any():
                continue
            kf_idx.extend([k] * int(m.sum()))
            pt_idx.extend(index[int(p)] for p in kf.point_ids[m])
            meas.append(stereo_measurements(self.K, kf.positions[m], kf.depths[m]))
        kf_idx, pt_idx, meas = np.array(kf_idx), np.array(pt_idx), np.vstack(meas)
        poses = [kf.pose for kf in window]
        X = np.array([self.map_points[p] for p in shared])
        res = None
        for _ in range(2):
            r = np.zeros_like(meas)
            for k, pose in enumerate(poses):
                m = kf_idx == k
                r[m] = stereo_residuals(self.K, pose.inverse(), X[pt_idx[m]], meas[m])
            inl = _stereo_inliers(r, meas)
            if inl.sum() < MIN_SHARED_POINTS:
                return
            obs = BAObservations(kf_idx[inl], pt_idx[inl], meas[inl])
            try:
                res = local_ba(self.K, poses, X, obs, kf_scales=[kf.scale for kf in window])
            except Degenerate:
                return
            poses, X = res.poses, res.points
        by_frame = {}
        for kf, pose in zip(window, res.poses):
            kf.pose = pose
            by_frame[kf.frame_id] = pose
        for p, x in zip(shared, res.points):
            self.map_points[p] = x
        for idx, rep in enumerate(self.reports):
            if rep.frame_id in by_frame:
                rep.pose = by_frame[rep.frame_id]
                self.trajectory[idx] = (rep.timestamp, rep.pose)
        if self.reports and self.reports[-1].frame_id in by_frame:
            self._prev.pose = by_frame[self.reports[-1].frame_id]

    # -- outputs -------------------------------------------------------------------

    @property
    def direct_frames(self) -> list:
        return [r.frame_id for r in self.reports if "direct" in r.stages]

    def write_reports(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "reliability.csv", RELIABILITY_CSV_HEADER, [r.record.csv_row(r.frame_id) for r in self.reports])
        _write_csv(out / "culling.csv", CULLING_CSV_HEADER, [r.culling_row() for r in self.reports])
        _write_csv(out / "poses.csv", POSE_CSV_HEADER, [r.pose_row() for r in self.reports])
        _write_csv(out / "keyframes.csv", KEYFRAME_CSV_HEADER, [r.keyframe.csv_row() for r in self.reports])


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def run_sequence(
    seq: RgbdSequence,
    detections: Optional[DetectionFile],
    cfg: PipelineConfig = PipelineConfig(),
    out_dir=None,
    max_frames: Optional[int] = None,
) -> Pipeline:
    """Process a loaded sequence; writes trajectory and reports when ``out_dir`` is set.

    Outside deterministic mode the next frame is read from disk while the
    current one is processed; results are identical either way.
    """
    pipe = Pipeline(seq.intrinsics, cfg)
    n = len(seq) if max_frames is None else min(len(seq), max_frames)
    dets = detections or DetectionFile()

    def step(raw):
        pipe.process(raw.index, raw.timestamp, raw.gray, raw.depth, dets.lookup(raw.timestamp, cfg.detection_tolerance))

    if cfg.deterministic or n < 2:
        for k in range(n):
            step(seq.frame(k))
    else:
        with ThreadPoolExecutor(max_workers=1) as pool:
            fut = pool.submit(seq.frame, 0)
            for k in range(n):
                raw = fut.result()
                if k + 1 < n:
                    fut = pool.submit(seq.frame, k + 1)
                step(raw)
    if out_dir is not None:
        out = Path(out_dir)
        write_trajectory(pipe.trajectory, out / "trajectory.txt")
        pipe.write_reports(out)
    return pipe
