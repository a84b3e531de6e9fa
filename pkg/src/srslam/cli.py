"""Command-line entry point: ``srslam run|assess|cull|eval|synth``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .assessment import RELIABILITY_CSV_HEADER, assess_frame, initialize_reference, maybe_update_reference, ReferenceFrame
from .config import load_config
from .core import FeaturePoint, GridLayout
from .culling import CULLING_CSV_HEADER, cull, lk_flow, potential_regions
from .dataset_io import DetectionFile, SequenceManifest, detect_features, load_detections, load_sequence, read_trajectory
from .errors import SrSlamError
from .evaluation import SceneSpec, TrajectoryErrorReport, evaluate_trajectory, generate_scene, improvement, write_sequence
from .pipeline import run_sequence

log = logging.getLogger("srslam")


def _open_out(path: Optional[str]):
    if path is None or path == "-":
        return sys.stdout, False
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p.open("w", newline=""), True


def _sequence(args, cfg):
    seq = load_sequence(SequenceManifest(Path(args.sequence), tolerance=cfg.association_tolerance))
    det_path = args.detections
    if det_path is None and (Path(args.sequence) / "detections.txt").exists():
        det_path = Path(args.sequence) / "detections.txt"
    K = seq.intrinsics
    dets = (
        load_detections(det_path, (K.width, K.height), cfg.dynamic_classes) if det_path is not None else DetectionFile()
    )
    return seq, dets


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.deterministic:
        cfg = dataclasses.replace(cfg, deterministic=True)
    seq, dets = _sequence(args, cfg)
    out = Path(args.out or cfg.report_dir or "out")
    pipe = run_sequence(seq, dets, cfg, out, max_frames=args.max_frames)
    n_bad = sum(not r.record.is_good for r in pipe.reports)
    print(
        f"processed {len(pipe.reports)} frames ({n_bad} BAD), {len(pipe.keyframes)} keyframes, "
        f"direct refinement on {len(pipe.direct_frames)} frames; outputs in {out}"
    )
    return 0


def _assess_stream(seq, dets, cfg, max_frames=None):
    """Yield ``(raw frame, features, record, flow to previous frame)`` per frame."""
    K = seq.intrinsics
    grid = GridLayout(K.width, K.height)
    ref, cands, prev = None, [], None
    n = len(seq) if max_frames is None else min(len(seq), max_frames)
    for k in range(n):
        raw = seq.frame(k)
        feats = detect_features(raw.gray, cfg.max_features, raw.depth, grid)
        pos = np.array([f.position for f in feats], dtype=np.float64).reshape(-1, 2)
        if ref is not None:
            fl = lk_flow(raw.gray, ref.gray, pos)
            feats = [
                FeaturePoint(p.position, p.response, p.depth, tuple(fl.flow[i]) if fl.tracked[i] else None, p.label)
                for i, p in enumerate(feats)
            ]
        d = dets.lookup(raw.timestamp, cfg.detection_tolerance)
        rec = assess_frame(feats, d, raw.depth, grid, cfg.assessment, has_reference=ref is not None)
        flow_prev = lk_flow(raw.gray, prev, pos) if prev is not None else None
        yield raw, feats, rec, flow_prev, d
        cand = ReferenceFrame(raw.index, raw.gray, tuple(feats), rec.r_current, raw.depth, raw.timestamp)
        if ref is None:
            cands.append(cand)
            if len(cands) >= cfg.assessment.init_window:
                ref = initialize_reference(cands)
        else:
            ref = maybe_update_reference(ref, cand)
        prev = raw.gray


def cmd_assess(args) -> int:
    cfg = load_config(args.config)
    seq, dets = _sequence(args, cfg)
    fh, close = _open_out(args.out)
    try:
        wr = csv.writer(fh)
        wr.writerow(RELIABILITY_CSV_HEADER)
        for raw, _, rec, _, _ in _assess_stream(seq, dets, cfg, args.max_frames):
            wr.writerow(rec.csv_row(raw.index))
    finally:
        if close:
            fh.close()
    return 0


def cmd_cull(args) -> int:
    cfg = load_config(args.config)
    seq, dets = _sequence(args, cfg)
    K = seq.intrinsics
    fh, close = _open_out(args.out)
    try:
        wr = csv.writer(fh)
        wr.writerow(CULLING_CSV_HEADER)
        for k, (raw, feats, rec, flow_prev, d) in enumerate(_assess_stream(seq, dets, cfg, args.max_frames)):
            pos = np.array([f.position for f in feats], dtype=np.float64).reshape(-1, 2)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                anomalies, regions, _ = potential_regions(pos, flow_prev, d, rec.is_good, (K.width, K.height), cfg.culling)
            res = cull(
                feats, regions, rec.r_motion, rec.r_final, rec.r_feature,
                k < cfg.assessment.init_window, anomalies, K.diagonal, cfg.culling,
            )
            wr.writerow([raw.index, len(feats), res.n_potential, res.n_removed, res.branch.value])
    finally:
        if close:
            fh.close()
    return 0


def _table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for n, r in enumerate(rows):
        lines.append("  ".join(str(c).rjust(w) for c, w in zip(r, widths)))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _improvement_or_zero(ours: float, base: float) -> float:
    # Two error-free trajectories improve on each other by nothing.
    if base == 0 and ours == 0:
        return 0.0
    return improvement(ours, base)


def cmd_eval(args) -> int:
    gt = read_trajectory(args.gt)
    est = read_trajectory(args.est)
    rep = evaluate_trajectory(est, gt, args.tolerance, args.delta)
    base: Optional[TrajectoryErrorReport] = None
    if args.baseline:
        base = evaluate_trajectory(read_trajectory(args.baseline), gt, args.tolerance, args.delta)

    header = ["metric", "est"] + (["baseline", "improvement_pct"] if base else [])
    rows = [header]
    impr = {}
    for k, v in rep.values().items():
        row = [k, f"{v:.6f}"]
        if base is not None:
            b = base.values()[k]
            impr[k] = _improvement_or_zero(v, b)
            row += [f"{b:.6f}", f"{impr[k]:.2f}"]
        rows.append(row)
    if args.csv:
        fh, close = _open_out(args.csv)
        try:
            csv.writer(fh).writerows(rows)
        finally:
            if close:
                fh.close()
    print(_table(rows))

    failures = []
    if args.max_ate is not None and rep.ate_rmse > args.max_ate:
        failures.append(f"ATE RMSE {rep.ate_rmse:.6f} > {args.max_ate}")
    if args.max_trpe is not None and rep.trpe_rmse > args.max_trpe:
        failures.append(f"T.RPE RMSE {rep.trpe_rmse:.6f} > {args.max_trpe}")
    if args.max_rotrpe is not None and rep.rotrpe_rmse > args.max_rotrpe:
        failures.append(f"ROT.RPE RMSE {rep.rotrpe_rmse:.6f} > {args.max_rotrpe}")
    if args.min_improvement is not None:
        if base is None:
            failures.append("--min-improvement needs --baseline")
        elif impr["ate_rmse"] < args.min_improvement:
            failures.append(f"ATE improvement {impr['ate_rmse']:.2f}% < {args.min_improvement}%")
    for f in failures:
        print(f"FAIL: {f}", file=sys.stderr)
    return 1 if failures else 0


def cmd_synth(args) -> int:
    spec = SceneSpec(
        n_frames=args.frames,
        width=args.width,
        height=args.height,
        n_bodies=args.bodies,
        seed=args.seed,
        occlusion_span=tuple(args.occlusion) if args.occlusion else None,
    )
    out = write_sequence(generate_scene(spec), args.out)
    print(f"wrote {spec.n_frames} frames to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srslam", description="Scene-reliability RGB-D SLAM front-end.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def seq_args(sp):
        sp.add_argument("--sequence", required=True, help="TUM-layout sequence directory")
        sp.add_argument("--detections", help="detections file (default: <sequence>/detections.txt if present)")
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--max-frames", type=int)

    sp = sub.add_parser("run", help="run the full pipeline on a sequence")
    seq_args(sp)
    sp.add_argument("--out", help="output directory for trajectory and CSV reports")
    sp.add_argument("--deterministic", action="store_true", help="strictly sequential execution")
    sp.set_defaults(func=cmd_run)

    for name, fn, what in (("assess", cmd_assess, "reliability"), ("cull", cmd_cull, "culling")):
        sp = sub.add_parser(name, help=f"emit the per-frame {what} CSV")
        seq_args(sp)
        sp.add_argument("--out", help="CSV path (default: stdout)")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("eval", help="ATE/RPE of a trajectory against ground truth")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--est", required=True)
    sp.add_argument("--baseline", help="second trajectory to compute improvement against")
    sp.add_argument("--tolerance", type=float, default=0.02, help="timestamp association tolerance (s)")
    sp.add_argument("--delta", type=int, default=1, help="RPE interval in frames")
    sp.add_argument("--csv", help="also write the table as CSV")
    sp.add_argument("--max-ate", type=float)
    sp.add_argument("--max-trpe", type=float)
    sp.add_argument("--max-rotrpe", type=float, help="degrees")
    sp.add_argument("--min-improvement", type=float, help="percent, on ATE RMSE")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="write a synthetic sequence with exact ground truth")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bodies", type=int, default=1)
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--width", type=int, default=640)
    sp.add_argument("--height", type=int, default=480)
    sp.add_argument("--occlusion", type=int, nargs=2, metavar=("FIRST", "LAST"), help="frame span of a full occlusion")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SrSlamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
