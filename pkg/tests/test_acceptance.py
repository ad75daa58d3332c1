"""Acceptance suite: one test per headline requirement, each at its stated tolerance."""
import io
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from crossdet.cli import run
from crossdet.evaluation import EvalConfig, evaluate
from crossdet.formats import (
    CalibrationSet,
    DetectionRecord,
    FormatError,
    GroundtruthRecord,
    SensorCalibration,
    calibration_to_dict,
    kitti_to_box,
    parse_calibration,
    parse_detection_log,
    parse_groundtruth_log,
    parse_kitti_label,
    parse_point_cloud,
    serialize_kitti_label,
    serialize_point_cloud,
    write_detection_log,
    write_groundtruth_log,
)
from crossdet.fusion import FusionConfig, fuse_fov_partitioned, fuse_frame, fuse_logs
from crossdet.geometry import (
    Biternion,
    OrientedBox3,
    PointCloud,
    RigidTransform,
    SectorFov,
    normalize_angle,
    points_in_obb,
    rotate_scene,
)
from crossdet.losses import angle_loss, gradient_check
from crossdet.synth import ScenarioSpec, generate_scenario, oracle_ap
from crossdet.weaklabel import WeakLabelConfig, audit_export, build_frames, export_dataset

criterion = pytest.mark.criterion


def suite_specs(n=100):
    rng = np.random.default_rng(2024)
    for seed in range(n):
        yield ScenarioSpec(
            seed=seed,
            n_frames=int(rng.integers(1, 51)),
            persons_per_frame=(0, int(rng.integers(0, 11))),
            fp_rate=float(rng.uniform(0, 3)),
            fn_rate=float(rng.uniform(0, 0.5)),
            localization_noise_sigma=float(rng.uniform(0, 0.4)),
        )


def report(ok: bool, name: str, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


# ---------------------------------------------------------------------------


@criterion("AP oracle equivalence")
def test_ap_oracle_equivalence():
    cfg = EvalConfig()
    worst, n_runs = 0.0, 0
    start = time.perf_counter()
    for spec in suite_specs():
        scn = generate_scenario(spec)
        assert spec.n_frames <= 50 and spec.persons_per_frame[1] <= 10
        for dets in scn.detections.values():
            ap = evaluate(dets, scn.groundtruth, scn.clouds, scn.calib, cfg).ap
            ref = oracle_ap(dets, scn.groundtruth, cfg, scn.calib, scn.clouds)
            worst = max(worst, abs(ap - ref))
            n_runs += 1
    elapsed = time.perf_counter() - start
    report(worst < 1e-9 and elapsed < 60, "AP oracle equivalence",
           f"max |AP - oracle| = {worst:.2e} over {n_runs} runs in {elapsed:.1f} s")
    assert worst < 1e-9
    assert elapsed < 60.0


@criterion("Gate semantics")
def test_gate_semantics():
    cfg = EvalConfig(fov_sensor_id=None)
    g = [GroundtruthRecord(0, "p", 4.0, 1.0, 0.9)]

    def scored(x, y, z=None):
        return evaluate([DetectionRecord(0, "s", "d", 0.8, x, y, z)], g, None, None, cfg)

    near, far = scored(4.49, 1.0), scored(4.0, 1.0 - 0.51)
    same_xy = scored(4.0, 1.0, z=1.9)
    ok = (near.curve[-1].tp == 1 and far.curve[-1].fp == 1 and far.curve[-1].fn == 1
          and same_xy.curve[-1].tp == 1)
    report(ok, "Gate semantics", "0.49 m TP, 0.51 m FP, z-only offset TP")
    assert near.ap == 1.0 and near.curve[-1].tp == 1
    assert far.ap == 0.0 and far.curve[-1].fp == 1 and far.curve[-1].fn == 1
    assert same_xy.ap == 1.0


def _cylinder(x, y, n):
    ang = np.linspace(0, 2 * math.pi, n, endpoint=False)
    return np.column_stack([x + 0.35 * np.cos(ang), y + 0.35 * np.sin(ang), np.full(n, 1.0), np.ones(n)])


@criterion("Occlusion discounting boundary")
def test_occlusion_boundary():
    cfg = EvalConfig(fov_sensor_id=None)
    calib = CalibrationSet({"lidar": SensorCalibration(RigidTransform.from_yaw(0.3, (0.5, -0.2, 0.6)))})
    base_to_lidar = calib["lidar"].pose.inverse()
    gts = [GroundtruthRecord(0, "six", 3.0, 0.0, 0.9), GroundtruthRecord(0, "seven", 6.0, 2.0, 0.9)]
    pts = np.vstack([_cylinder(3.0, 0.0, 6), _cylinder(6.0, 2.0, 7),
                     # a return just outside the radius must not count
                     [[3.0 + 0.41, 0.0, 1.0, 1.0]]])
    pts[:, :3] = base_to_lidar.apply(pts[:, :3])
    dets = [DetectionRecord(0, "s", "d", 0.9, 3.0, 0.0), DetectionRecord(0, "s", "d", 0.8, 6.0, 2.0)]
    rep = evaluate(dets, gts, {0: PointCloud(pts)}, calib, cfg)
    ok = rep.ignored_groundtruth == 1 and rep.total_groundtruth == 2 and rep.curve[-1].tp == 1
    report(ok, "Occlusion discounting boundary", "6 returns ignored, 7 returns scored")
    assert rep.ignored_groundtruth == 1
    assert [(p.tp, p.fp, p.fn) for p in rep.curve] == [(1, 0, 0)]


@criterion("Weak-label filters")
def test_weak_label_filters(tmp_path):
    cfg = WeakLabelConfig(augmentation_count=2, min_teacher_confidence=0.0)
    totals = {"below_min_points": 0, "beyond_range": 0}
    problems, n_labels = [], 0
    for seed in range(6):
        scn = generate_scenario(ScenarioSpec(seed=seed, n_frames=12, persons_per_frame=(2, 10),
                                             arena=(0.5, 18.0, -9.0, 9.0)))
        frames = build_frames(scn.detections["rgbd"], scn.clouds, scn.calib, cfg)
        out = tmp_path / f"s{seed}"
        manifest = export_dataset(frames, out, scn.calib, cfg)
        for k in totals:
            totals[k] += manifest["discards"][k]
        n_labels += manifest["n_labels"]
        problems += audit_export(out, cfg)
        # independent re-check: every exported line re-parsed, strict range limit
        for txt in out.glob("*.txt"):
            for line in txt.read_text().splitlines():
                box = kitti_to_box(parse_kitti_label(line))
                if math.hypot(box.center[0], box.center[1]) > cfg.max_range + 0.01:
                    problems.append(f"{txt.name}: {line}")
    ok = not problems and n_labels > 0 and min(totals.values()) > 0
    report(ok, "Weak-label filters",
           f"{n_labels} labels audited, discarded {totals}, {len(problems)} violations")
    assert n_labels > 0 and min(totals.values()) > 0  # both filters actually exercised
    assert problems == []


@criterion("Rotation-augmentation invariance")
def test_rotation_invariance():
    rng = np.random.default_rng(77)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(0, 300))
        box = OrientedBox3(rng.uniform(-10, 10, 3), rng.uniform(0.2, 4, 3), rng.uniform(-math.pi, math.pi))
        pts = np.column_stack([rng.normal(box.center, box.extents, (n, 3)), rng.uniform(0, 1, n)])
        yaw = rng.uniform(-4 * math.pi, 4 * math.pi)
        cloud = PointCloud(pts)
        rc, (rb,) = rotate_scene(cloud, [box], yaw)
        mismatches += points_in_obb(rc, rb) != points_in_obb(cloud, box)
    report(mismatches == 0, "Rotation-augmentation invariance", f"{mismatches}/1000 count changes")
    assert mismatches == 0


@criterion("Loss gradient check")
def test_loss_gradient_check():
    worst = gradient_check(n_points=1000, seed=0, step=1e-6)
    rng = np.random.default_rng(8)
    scale_err = 0.0
    for _ in range(1000):
        c, s = rng.normal(size=2)
        yaw = rng.uniform(-math.pi, math.pi)
        base = angle_loss(Biternion(c, s), yaw)
        for k in (0.1, 3.0, 100.0):
            scale_err = max(scale_err, abs(base - angle_loss(Biternion(k * c, k * s), yaw)))
    ok = worst < 1e-5 and scale_err < 1e-12
    report(ok, "Loss gradient check", f"max rel. error {worst:.2e}, scale deviation {scale_err:.1e}")
    assert worst < 1e-5
    assert scale_err < 1e-12


@criterion("Fusion gate semantics")
def test_fusion_micro_cases():
    calib = CalibrationSet({"kinect": SensorCalibration(RigidTransform.from_yaw(0.0, (0.2, 0.0, 1.2)),
                                                        SectorFov.from_degrees(0.0, 43.0, 0.0, 15.0))})

    def rec(det, x, y, conf):
        return DetectionRecord(0, det, det, conf, x, y)

    checks = []
    for heading in np.linspace(-math.pi, math.pi, 12, endpoint=False):
        for gap, expect in ((0.3, 1), (0.6, 2)):
            for conf_a, conf_b in ((0.9, 0.4), (0.4, 0.9), (0.5, 0.5)):
                a = rec("rgbd", 5.0, 1.0, conf_a)
                b = rec("lidar", 5.0 + gap * math.cos(heading), 1.0 + gap * math.sin(heading), conf_b)
                for linkage in ("seed", "complete"):
                    for sets in ({"rgbd": [a], "lidar": [b]}, {"lidar": [b], "rgbd": [a]}):
                        out = fuse_frame(sets, FusionConfig(linkage=linkage))
                        checks.append(len(out) == expect)
                        if expect == 1:
                            checks.append(len(out[0].members) == 2 and out[0].confidence == max(conf_a, conf_b))
    cfg = FusionConfig(fov_partition="kinect")
    for bearing_deg in range(-180, 180, 5):
        x = 0.2 + 6 * math.cos(math.radians(bearing_deg))
        y = 6 * math.sin(math.radians(bearing_deg))
        inside = abs(bearing_deg) <= 43
        out = fuse_fov_partitioned([rec("rgbd", x, y, 0.7)], [rec("lidar", x, y, 0.6)], calib, cfg,
                                   "rgbd", "lidar")
        kept = {m[0][0] for m in (f.members for f in out)}
        checks.append(kept == ({"rgbd"} if inside else {"lidar"}))
    # beyond the sector range the lidar is the only source
    far = fuse_logs({"rgbd": [rec("rgbd", 20.0, 0.0, 0.7)], "lidar": [rec("lidar", 20.0, 0.0, 0.6)]},
                    cfg, calib)
    checks.append(len(far) == 1 and far[0].confidence == 0.6)
    report(all(checks), "Fusion gate semantics", f"{sum(checks)}/{len(checks)} micro-cases")
    assert all(checks)


@criterion("Monotone-confidence invariance")
def test_cube_confidence_invariance():
    worst = 0.0
    for mode in ("rectangular", "interpolated"):
        cfg = EvalConfig(ap_mode=mode)
        for spec in list(suite_specs(40)):
            scn = generate_scenario(spec)
            for dets in scn.detections.values():
                cubed = [DetectionRecord(d.frame_id, d.sensor_id, d.detector_id, d.confidence ** 3,
                                         d.x, d.y, d.z, d.box, d.det_id) for d in dets]
                a = evaluate(dets, scn.groundtruth, scn.clouds, scn.calib, cfg)
                b = evaluate(cubed, scn.groundtruth, scn.clouds, scn.calib, cfg)
                worst = max(worst, abs(a.ap - b.ap), abs(a.peak_f1 - b.peak_f1))
    report(worst <= 1e-12, "Monotone-confidence invariance", f"max change {worst:.1e}")
    assert worst <= 1e-12


# ---------------------------------------------------------------------------
# format robustness


def _valid_samples():
    det = json.dumps({"schema": 1, "frame": 4, "sensor": "kinect", "detector": "yolo", "conf": 0.5,
                      "x": 1.5, "y": -2.0, "z": 0.9,
                      "box": {"cx": 1.5, "cy": -2.0, "cz": 0.9, "d": 0.5, "w": 0.6, "h": 1.8, "yaw": 0.3}})
    gt = json.dumps({"schema": 1, "frame": 4, "person": "p1", "x": 1.5, "y": -2.0, "z": 0.9, "ignore": False})
    calib = json.dumps(calibration_to_dict(generate_scenario(ScenarioSpec(n_frames=1)).calib))
    kitti = serialize_kitti_label(OrientedBox3((5, 1, 0.9), (0.6, 0.6, 1.8), 0.4), "Pedestrian", 0.75)
    cloud = serialize_point_cloud(PointCloud([[1, 2, 3, 0.5], [4, 5, 6, 0.25]]))
    return [det.encode(), gt.encode(), calib.encode(), kitti.encode(), cloud]


PARSERS = (
    ("detection log", lambda b: parse_detection_log(b)),
    ("groundtruth log", lambda b: parse_groundtruth_log(b)),
    ("calibration", parse_calibration),
    ("kitti label", parse_kitti_label),
    ("point cloud", parse_point_cloud),
)


def _fuzz_inputs(rng, n):
    seeds = _valid_samples()
    for i in range(n):
        kind = i % 3
        if kind == 0:  # raw random bytes
            yield rng.bytes(int(rng.integers(0, 128)))
        elif kind == 1:  # mutated valid documents
            src = bytearray(seeds[int(rng.integers(len(seeds)))])
            for _ in range(int(rng.integers(1, 6))):
                if not src:
                    break
                pos = int(rng.integers(len(src)))
                op = int(rng.integers(3))
                if op == 0:
                    src[pos] = int(rng.integers(256))
                elif op == 1:
                    del src[pos]
                else:
                    src.insert(pos, int(rng.integers(256)))
            yield bytes(src)
        else:  # token soup from the grammar of the formats
            tokens = [b"{", b"}", b"[", b"]", b'"schema"', b":", b",", b"1", b"-1", b"1e999", b"NaN",
                      b'"frame"', b'"conf"', b'"x"', b'"box"', b'"sensors"', b'"T"', b"null", b"true",
                      b"Pedestrian", b" ", b"\n", b"0.5", b"-0.00", b"inf"]
            yield b"".join(tokens[int(k)] for k in rng.integers(0, len(tokens), int(rng.integers(0, 40))))


def _roundtrips(rng, n):
    failures = []
    for i in range(n):
        frame = int(rng.integers(0, 10**6))
        box = OrientedBox3(rng.uniform(-40, 40, 3), rng.uniform(0.05, 5, 3), rng.uniform(-math.pi, math.pi))
        det = DetectionRecord(frame, f"s{i % 7}", f"d{i % 5}", float(rng.uniform()), float(rng.normal() * 30),
                              float(rng.normal() * 30), float(rng.normal()) if i % 2 else None,
                              box if i % 3 else None, f"id{i}" if i % 4 else None)
        buf = io.StringIO()
        write_detection_log([det], buf)
        if parse_detection_log(buf.getvalue()) != [det]:
            failures.append(("detection", i))
        gt = GroundtruthRecord(frame, f"p{i}", float(rng.normal() * 30), float(rng.normal() * 30),
                               float(rng.uniform(0, 2)), bool(i % 2))
        buf = io.StringIO()
        write_groundtruth_log([gt], buf)
        if parse_groundtruth_log(buf.getvalue()) != [gt]:
            failures.append(("groundtruth", i))
        n = int(rng.integers(0, 8))
        vals = np.column_stack([rng.normal(0, 50, (n, 3)), rng.uniform(0, 255, n)]).astype("<f4")
        raw = vals.tobytes()
        cloud = parse_point_cloud(raw)
        if serialize_point_cloud(cloud) != raw or parse_point_cloud(serialize_point_cloud(cloud)) != cloud:
            failures.append(("cloud", i))
        back = kitti_to_box(parse_kitti_label(serialize_kitti_label(box, "Pedestrian", float(rng.uniform()))))
        if not (np.max(np.abs(np.subtract(back.extents, box.extents))) <= 0.005 + 1e-9
                and np.max(np.abs(np.subtract(back.center[:2], box.center[:2]))) <= 0.005 + 1e-9
                and abs(back.center[2] - box.center[2]) <= 0.0075 + 1e-9
                and abs(normalize_angle(back.yaw - box.yaw)) <= 0.005 + 1e-9):
            failures.append(("kitti", i))
        if i % 10 == 0:
            pose = RigidTransform.from_yaw(float(rng.uniform(-4, 4)), rng.normal(size=3))
            calib = CalibrationSet({"a": SensorCalibration(pose, SectorFov(0.1, 1.0, 0.0, 9.0))})
            again = parse_calibration(json.dumps(calibration_to_dict(calib)))
            # the file stores FOV angles in degrees, so radians come back within an ulp or two
            f0, f1 = calib.fov("a"), again.fov("a")
            if not (np.allclose(again["a"].pose.matrix(), pose.matrix(), atol=1e-12)
                    and abs(f0.forward_yaw - f1.forward_yaw) < 1e-12
                    and abs(f0.half_angle - f1.half_angle) < 1e-12
                    and (f0.min_range, f0.max_range) == (f1.min_range, f1.max_range)):
                failures.append(("calibration", i))
    return failures


@criterion("Format robustness")
def test_format_robustness():
    rng = np.random.default_rng(99)
    crashes = []
    n_inputs = 100_000
    for blob in _fuzz_inputs(rng, n_inputs):
        for name, parse in PARSERS:
            try:
                parse(blob)
            except FormatError:
                pass
            except Exception as exc:  # anything unstructured is a crash
                crashes.append((name, blob, repr(exc)))
    failures = _roundtrips(np.random.default_rng(100), 10_000)
    ok = not crashes and not failures
    report(ok, "Format robustness",
           f"{len(crashes)} crashes over {n_inputs} inputs x {len(PARSERS)} parsers, "
           f"{len(failures)} round-trip failures over 10000 values")
    assert crashes[:5] == []
    assert failures[:5] == []


# ---------------------------------------------------------------------------


def _pipeline(workdir: Path, monkeypatch) -> dict[str, bytes]:
    monkeypatch.chdir(workdir)
    steps = [
        ["synth", "--out", "scn", "--seed", "11", "--spec", "spec.json"],
        ["genlabels", "--teacher-det", "scn/det_rgbd.jsonl", "--clouds", "scn/clouds", "--calib",
         "scn/calib.json", "--out", "labels", "--seed", "5", "--aug-count", "3", "--jobs", "2"],
        ["evaluate", "--det", "scn/det_rgbd.jsonl", "--gt", "scn/gt.jsonl", "--clouds", "scn/clouds",
         "--calib", "scn/calib.json", "--out", "eval_rgbd", "--plot"],
        ["evaluate", "--det", "scn/det_lidar.jsonl", "--gt", "scn/gt.jsonl", "--clouds", "scn/clouds",
         "--calib", "scn/calib.json", "--out", "eval_lidar"],
        ["plot", "--report", "eval_rgbd/report.json", "--report", "eval_lidar/report.json", "--out", "plot/pr.svg"],
    ]
    (workdir / "spec.json").write_text(json.dumps({"n_frames": 6, "persons_per_frame": [1, 5]}))
    for argv in steps:
        assert run(argv + ["--quiet"]) == 0, argv
    artifacts = {}
    for path in sorted(p for p in workdir.rglob("*") if p.is_file()):
        data = path.read_bytes()
        if path.name == "run_manifest.json":
            manifest = json.loads(data)
            assert manifest.pop("duration_s") >= 0
            data = json.dumps(manifest, sort_keys=True).encode()
        artifacts[str(path.relative_to(workdir))] = data
    return artifacts


@criterion("End-to-end determinism")
def test_end_to_end_determinism(tmp_path, monkeypatch):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = _pipeline(tmp_path / "a", monkeypatch)
    second = _pipeline(tmp_path / "b", monkeypatch)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    expected = {"scn/run_manifest.json", "labels/manifest.json", "eval_rgbd/report.json",
                "eval_rgbd/pr.svg", "plot/pr.svg", "plot/pr.csv"}
    ok = not differing and expected <= first.keys()
    report(ok, "End-to-end determinism", f"{len(first)} artifacts compared, {len(differing)} differ")
    assert expected <= first.keys()
    assert differing == []
