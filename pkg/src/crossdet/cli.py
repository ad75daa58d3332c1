"""``crossdet`` command line: evaluate, genlabels, fuse, synth, losscheck, plot.

Exit codes: 0 success, 1 usage error, 2 data error.  Every command that
writes files also writes ``run_manifest.json`` next to them; on a data error
the manifest is still written, with ``status: failed``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Sequence

from . import __version__
from .evaluation import EvalConfig, EvalReport, evaluate
from .formats import (
    FormatError,
    read_calibration,
    read_cloud_dir,
    read_detection_log,
    read_groundtruth_log,
    write_detection_log,
)
from .fusion import FusionConfig, fuse_logs
from .geometry import TransformError
from .losses import gradient_check
from .plotting import plot_pr, render_csv
from .synth import ScenarioSpec, generate_scenario, write_scenario
from .weaklabel import (
    WeakLabelConfig,
    augment_rotations,
    export_dataset,
    generate_weak_labels,
    restrict_to_teacher_fov,
)

log = logging.getLogger("crossdet")

MANIFEST_NAME = "run_manifest.json"
DATA_ERRORS = (FormatError, TransformError, ValueError, KeyError, OSError, RuntimeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit code 1 for usage errors, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    elif path.exists():
        h.update(path.read_bytes())
    else:
        return "missing"
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs: Sequence[str],
                    started: float, status: str, error: str | None = None,
                    outputs: Sequence[str] = ()) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "jobs", "quiet")}
    manifest = {
        "command": command,
        "config": config,
        "inputs": {p: _digest(Path(p)) for p in inputs if p is not None},
        "outputs": sorted(outputs),
        "status": status,
        "tool_version": __version__,
        "duration_s": round(time.monotonic() - started, 6),
    }
    if error is not None:
        manifest["error"] = error
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _parallel_map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Commands are generators: the first yield names the manifest directory and the
# inputs, the second the outputs once everything is written.


def cmd_evaluate(args: argparse.Namespace):
    out = Path(args.out)
    inputs = [args.det, args.gt, args.calib, args.clouds]
    yield out, inputs
    fov_sensor = None if args.fov_sensor.lower() == "none" else args.fov_sensor
    cfg = EvalConfig(gate=args.gate, min_lidar_returns=args.min_returns,
                     occlusion_radius=args.occlusion_radius, fov_sensor_id=fov_sensor,
                     lidar_sensor_id=args.lidar_sensor, ignore_height=not args.use_height,
                     ap_mode=args.ap_mode)
    dets = read_detection_log(args.det)
    gts = read_groundtruth_log(args.gt)
    calib = read_calibration(args.calib) if args.calib else None
    clouds = read_cloud_dir(args.clouds) if args.clouds else None
    report = evaluate(dets, gts, clouds, calib, cfg, sequence_id=args.sequence)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "curve.csv").write_text(render_csv([report]))
    outputs = ["report.json", "curve.csv"]
    if args.plot:
        plot_pr([report], out / "pr.svg", out / "curve.csv")
        outputs.append("pr.svg")
    if not args.quiet:
        print(f"{report.detector_id}: AP {report.ap:.4f}  peak-F1 {report.peak_f1:.4f} "
              f"@ {report.peak_threshold:.4f}  ({report.total_groundtruth} gt, "
              f"{report.ignored_groundtruth} ignored)")
    yield outputs


def _genlabels_frame(item, calib, cfg, restrict):
    frame_id, dets, cloud = item
    frame = generate_weak_labels(dets, cloud, calib, cfg, frame_id)
    if restrict:
        frame = restrict_to_teacher_fov(frame, calib, cfg)
    return augment_rotations(frame, cfg)


def cmd_genlabels(args: argparse.Namespace):
    out = Path(args.out)
    yield out, [args.teacher_det, args.clouds, args.calib]
    yaws = tuple(math.radians(float(v)) for v in args.aug_yaws_deg.split(",")) if args.aug_yaws_deg else None
    cfg = WeakLabelConfig(
        teacher_sensor_id=args.teacher_sensor, lidar_sensor_id=args.lidar_sensor,
        min_points=args.min_points, max_range=args.max_range, min_teacher_confidence=args.min_conf,
        augmentation_yaws=yaws, augmentation_count=args.aug_count,
        seed=WeakLabelConfig.seed if args.seed is None else args.seed,
    )
    dets = read_detection_log(args.teacher_det)
    if args.teacher_detector:
        dets = [d for d in dets if d.detector_id == args.teacher_detector]
    clouds = read_cloud_dir(args.clouds)
    calib = read_calibration(args.calib)
    by_frame = {f: [] for f in clouds}
    for d in dets:
        if d.frame_id not in by_frame:
            raise KeyError(f"no point cloud for teacher frame {d.frame_id} in {args.clouds}")
        by_frame[d.frame_id].append(d)
    items = [(f, by_frame[f], clouds[f]) for f in sorted(by_frame)]
    work = partial(_genlabels_frame, calib=calib, cfg=cfg, restrict=not args.no_fov_crop)
    frames = [fr for group in _parallel_map(work, items, args.jobs) for fr in group]
    manifest = export_dataset(frames, out, calib, cfg)
    if not args.quiet:
        print(f"exported {manifest['n_frames']} frames with {manifest['n_labels']} labels to {out}")
    outputs = ["manifest.json"] + [f"{e['name']}{ext}" for e in manifest["frames"] for ext in (".bin", ".txt")]
    yield outputs


def cmd_fuse(args: argparse.Namespace):
    out_path = Path(args.out)
    yield out_path.parent, list(args.det) + [args.calib]
    logs = {}
    for path in args.det:
        recs = read_detection_log(path)
        name = "+".join(sorted({r.detector_id for r in recs})) or Path(path).stem
        if name in logs:
            name = f"{name}#{len(logs)}"
        logs[name] = recs
    cfg = FusionConfig(gate=args.gate, confidence_rule=args.rule, linkage=args.linkage,
                       fov_partition=args.fov_partition)
    calib = read_calibration(args.calib) if args.calib else None
    if cfg.fov_partition is not None and (calib is None or len(logs) != 2):
        raise UsageError("--fov-partition needs --calib and exactly two --det logs (inside, outside)")
    fused = fuse_logs(logs, cfg, calib)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        write_detection_log(fused, fh)
    if not args.quiet:
        print(f"fused {sum(len(v) for v in logs.values())} detections into {len(fused)}")
    yield [out_path.name]


def cmd_synth(args: argparse.Namespace):
    out = Path(args.out)
    yield out, [args.spec]
    spec_dict = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = ScenarioSpec.from_dict(spec_dict)
    files = write_scenario(generate_scenario(spec), out)
    if not args.quiet:
        print(f"wrote scenario (seed {spec.seed}, {spec.n_frames} frames) to {out}")
    yield sorted(files.values()) + ["scenario.json"]


def cmd_losscheck(args: argparse.Namespace):
    out = Path(args.out) if args.out else None
    yield out, []
    worst = gradient_check(args.points, seed=args.seed or 0, step=args.step)
    ok = worst < args.tolerance
    print(f"max relative error {worst:.3e} over {args.points} points "
          f"({'PASS' if ok else 'FAIL'} at {args.tolerance:g})")
    if not ok:
        raise RuntimeError(f"gradient check failed: {worst:.3e} >= {args.tolerance:g}")
    yield []


def cmd_plot(args: argparse.Namespace):
    out_svg = Path(args.out)
    yield out_svg.parent, list(args.report)
    reports = [EvalReport.from_dict(json.loads(Path(p).read_text())) for p in args.report]
    csv_path = out_svg.with_suffix(".csv")
    out_svg.parent.mkdir(parents=True, exist_ok=True)
    plot_pr(reports, out_svg, csv_path)
    yield [out_svg.name, csv_path.name]


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker processes (default: available cores)")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--seed", type=int, default=None,
                        help="RNG seed (genlabels default 42, synth default from --spec)")

    parser = _Parser(prog="crossdet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"crossdet {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    defaults = EvalConfig()
    wl = WeakLabelConfig()
    fz = FusionConfig()

    p = sub.add_parser("evaluate", parents=[common], help="score a detection log against groundtruth")
    p.add_argument("--det", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--clouds", help="directory of <frame>.bin lidar clouds (enables occlusion discounting)")
    p.add_argument("--calib")
    p.add_argument("--gate", type=float, default=defaults.gate)
    p.add_argument("--min-returns", type=int, default=defaults.min_lidar_returns)
    p.add_argument("--occlusion-radius", type=float, default=defaults.occlusion_radius)
    p.add_argument("--fov-sensor", default=defaults.fov_sensor_id, help="'none' disables the FOV cut")
    p.add_argument("--lidar-sensor", default=defaults.lidar_sensor_id)
    p.add_argument("--use-height", action="store_true", help="match on 3D instead of ground-plane distance")
    p.add_argument("--ap-mode", choices=("rectangular", "interpolated"), default=defaults.ap_mode)
    p.add_argument("--sequence", default="sequence")
    p.add_argument("--out", default="eval_out")
    p.add_argument("--plot", action="store_true", help="also write pr.svg")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("genlabels", parents=[common], help="export weak lidar labels from teacher boxes")
    p.add_argument("--teacher-det", required=True)
    p.add_argument("--teacher-detector", help="only use records with this detector id")
    p.add_argument("--clouds", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--teacher-sensor", default=wl.teacher_sensor_id)
    p.add_argument("--lidar-sensor", default=wl.lidar_sensor_id)
    p.add_argument("--min-points", type=int, default=wl.min_points)
    p.add_argument("--max-range", type=float, default=wl.max_range)
    p.add_argument("--min-conf", type=float, default=wl.min_teacher_confidence)
    p.add_argument("--aug-count", type=int, default=wl.augmentation_count)
    p.add_argument("--aug-yaws-deg", help="comma separated fixed yaws instead of random draws")
    p.add_argument("--no-fov-crop", action="store_true")
    p.set_defaults(func=cmd_genlabels)

    p = sub.add_parser("fuse", parents=[common], help="fuse detection logs of several detectors")
    p.add_argument("--det", action="append", required=True)
    p.add_argument("--gate", type=float, default=fz.gate)
    p.add_argument("--rule", choices=("max", "mean"), default=fz.confidence_rule)
    p.add_argument("--linkage", choices=("seed", "complete"), default=fz.linkage)
    p.add_argument("--fov-partition", metavar="SENSOR")
    p.add_argument("--calib")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scenario")
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("losscheck", parents=[common], help="verify loss gradients by finite differences")
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_losscheck)

    p = sub.add_parser("plot", parents=[common], help="plot PR curves of evaluation reports")
    p.add_argument("--report", action="append", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.monotonic()
    steps = args.func(args)
    out_dir, inputs = next(steps)
    try:
        outputs = next(steps)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"crossdet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        msg = f"{type(exc).__name__}: {exc}"
        print(f"crossdet {args.command}: data error: {msg}", file=sys.stderr)
        if out_dir is not None:
            try:
                _write_manifest(out_dir, args.command, args, inputs, started, "failed", msg)
            except OSError:
                pass
        return 2
    if out_dir is not None:
        _write_manifest(out_dir, args.command, args, inputs, started, "ok", outputs=outputs)
    return 0


def main() -> None:
    sys.exit(run())
