"""Seeded synthetic scenarios and brute-force oracles.

The oracles here deliberately re-derive matching, FOV membership, occlusion
counting and box containment from scratch instead of importing the
evaluation or geometry routines they are used to check.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .formats import (
    CalibrationSet,
    DetectionRecord,
    GroundtruthRecord,
    SensorCalibration,
    serialize_point_cloud,
    write_calibration,
    write_detection_log,
    write_groundtruth_log,
)
from .geometry import OrientedBox3, PointCloud, RigidTransform, SectorFov

PERSON_RADIUS = 0.25
PERSON_HEIGHT = 1.75


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 0
    n_frames: int = 10
    persons_per_frame: tuple[int, int] = (1, 6)
    arena: tuple[float, float, float, float] = (0.5, 14.0, -8.0, 8.0)  # xmin, xmax, ymin, ymax
    min_separation: float = 0.8
    localization_noise_sigma: float = 0.15
    fp_rate: float = 1.0
    fn_rate: float = 0.1
    tp_confidence: tuple[float, float] = (5.0, 2.0)  # Beta(a, b)
    fp_confidence: tuple[float, float] = (2.0, 5.0)
    detectors: tuple[str, ...] = ("rgbd", "lidar")
    fov_half_angle_deg: float | None = 43.0
    fov_max_range: float = 15.0
    points_per_person: tuple[int, int] = (0, 60)
    background_points: int = 200
    person_extents: tuple[float, float, float] = (0.5, 0.6, 1.75)

    def __post_init__(self) -> None:
        xmin, xmax, ymin, ymax = self.arena
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("arena must be non-degenerate")
        if min(self.fp_rate, self.fn_rate, self.localization_noise_sigma, self.min_separation) < 0:
            raise ValueError("rates and noise must be non-negative")
        if self.fn_rate > 1.0:
            raise ValueError("fn_rate is a probability")
        lo, hi = self.persons_per_frame
        if lo < 0 or hi < lo:
            raise ValueError("persons_per_frame must be a valid non-negative range")
        lo, hi = self.points_per_person
        if lo < 0 or hi < lo:
            raise ValueError("points_per_person must be a valid non-negative range")

    @classmethod
    def from_dict(cls, d: Mapping) -> ScenarioSpec:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Scenario:
    groundtruth: list[GroundtruthRecord]
    detections: dict[str, list[DetectionRecord]]
    clouds: dict[int, PointCloud]  # lidar frame
    calib: CalibrationSet
    spec: ScenarioSpec = field(default_factory=ScenarioSpec)


def default_calibration(spec: ScenarioSpec) -> CalibrationSet:
    fov = None
    if spec.fov_half_angle_deg is not None:
        fov = SectorFov.from_degrees(0.0, spec.fov_half_angle_deg, 0.0, spec.fov_max_range)
    return CalibrationSet({
        "kinect": SensorCalibration(RigidTransform.from_yaw(0.0, (0.2, 0.0, 1.2)), fov),
        "lidar": SensorCalibration(RigidTransform.from_yaw(0.0, (0.0, 0.0, 0.6))),
    })


def _place_persons(rng: np.random.Generator, n: int, spec: ScenarioSpec) -> list[tuple[float, float]]:
    xmin, xmax, ymin, ymax = spec.arena
    placed: list[tuple[float, float]] = []
    for _ in range(n):
        for _attempt in range(100):
            x, y = rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)
            if all(math.hypot(x - px, y - py) >= spec.min_separation for px, py in placed):
                placed.append((float(x), float(y)))
                break
    return placed


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    """Pure function of ``spec`` (including its seed)."""
    rng = np.random.default_rng(spec.seed)
    calib = default_calibration(spec)
    base_to_lidar = calib["lidar"].pose.inverse()
    xmin, xmax, ymin, ymax = spec.arena
    d, w, h = spec.person_extents
    gts: list[GroundtruthRecord] = []
    dets: dict[str, list[DetectionRecord]] = {name: [] for name in spec.detectors}
    clouds: dict[int, PointCloud] = {}
    for frame in range(spec.n_frames):
        n = int(rng.integers(spec.persons_per_frame[0], spec.persons_per_frame[1] + 1))
        persons = _place_persons(rng, n, spec)
        chunks = []
        for k, (x, y) in enumerate(persons):
            gts.append(GroundtruthRecord(frame, f"p{k:03d}", x, y, h / 2.0))
            m = int(rng.integers(spec.points_per_person[0], spec.points_per_person[1] + 1))
            r = PERSON_RADIUS * np.sqrt(rng.uniform(0, 1, m))
            phi = rng.uniform(-math.pi, math.pi, m)
            chunks.append(np.column_stack([x + r * np.cos(phi), y + r * np.sin(phi),
                                           rng.uniform(0.0, PERSON_HEIGHT, m), rng.uniform(0, 1, m)]))
        nb = spec.background_points
        chunks.append(np.column_stack([rng.uniform(xmin, xmax, nb), rng.uniform(ymin, ymax, nb),
                                       rng.uniform(0.0, 0.05, nb), rng.uniform(0, 1, nb)]))
        pts = np.vstack(chunks)
        pts[:, :3] = base_to_lidar.apply(pts[:, :3])
        clouds[frame] = PointCloud(pts)

        for name in spec.detectors:
            frame_dets = []
            for x, y in persons:
                if rng.uniform() < spec.fn_rate:
                    continue
                nx, ny = (rng.normal(0.0, spec.localization_noise_sigma, 2)
                          if spec.localization_noise_sigma > 0 else (0.0, 0.0))
                conf = float(rng.beta(*spec.tp_confidence))
                frame_dets.append((x + float(nx), y + float(ny), conf))
            for _ in range(int(rng.poisson(spec.fp_rate))):
                frame_dets.append((float(rng.uniform(xmin, xmax)), float(rng.uniform(ymin, ymax)),
                                   float(rng.beta(*spec.fp_confidence))))
            for x, y, conf in frame_dets:
                yaw = float(rng.uniform(-math.pi, math.pi))
                box = OrientedBox3((x, y, h / 2.0), (d, w, h), yaw)
                idx = len(dets[name])
                dets[name].append(DetectionRecord(frame, name, name, conf, x, y, h / 2.0, box,
                                                  det_id=f"{name}-{idx:06d}"))
    return Scenario(gts, dets, clouds, calib, spec)


def write_scenario(scenario: Scenario, out_dir: str | Path) -> dict[str, str]:
    """Write ``gt.jsonl``, ``det_<name>.jsonl``, ``calib.json`` and ``clouds/<frame>.bin``."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    files = {}
    with open(out / "gt.jsonl", "w") as fh:
        write_groundtruth_log(scenario.groundtruth, fh)
    files["gt"] = "gt.jsonl"
    for name, recs in sorted(scenario.detections.items()):
        with open(out / f"det_{name}.jsonl", "w") as fh:
            write_detection_log(recs, fh)
        files[f"det_{name}"] = f"det_{name}.jsonl"
    write_calibration(scenario.calib, out / "calib.json")
    files["calib"] = "calib.json"
    for frame, cloud in sorted(scenario.clouds.items()):
        (out / "clouds" / f"{frame:06d}.bin").write_bytes(serialize_point_cloud(cloud))
    files["clouds"] = "clouds"
    (out / "scenario.json").write_text(json.dumps(scenario.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return files


# ---------------------------------------------------------------------------
# Oracles


def _oracle_in_sector(px: float, py: float, matrix: np.ndarray, fov: SectorFov) -> bool:
    # sensor pose as a plain homogeneous matrix; invert by solving instead of transposing
    local = np.linalg.solve(matrix, np.array([px, py, 0.0, 1.0]))
    rng = math.sqrt(local[0] ** 2 + local[1] ** 2)
    if not fov.min_range <= rng <= fov.max_range:
        return False
    bearing = math.degrees(math.atan2(local[1], local[0]))
    off = (bearing - math.degrees(fov.forward_yaw)) % 360.0
    off = min(off, 360.0 - off)
    return off <= math.degrees(fov.half_angle)


def oracle_ap(detections: Sequence[DetectionRecord], groundtruth: Sequence[GroundtruthRecord],
              cfg, calib: CalibrationSet | None = None,
              clouds: Mapping[int, PointCloud] | None = None) -> float:
    """AP by re-running matching from scratch at every unique confidence threshold.

    ``cfg`` supplies gate, height handling, FOV sensor and occlusion settings.
    When ``calib``/``clouds`` are given, the FOV cut and occlusion flags are
    recomputed here as well; otherwise the inputs are taken as already filtered.
    """
    gts = [(g.frame_id, g.person_id, g.x, g.y, g.z, g.ignore) for g in groundtruth]
    dets = [(d.frame_id, d.confidence, d.x, d.y, d.z, i) for i, d in enumerate(detections)]
    if calib is not None and cfg.fov_sensor_id is not None:
        sensor = calib.sensors[cfg.fov_sensor_id]
        mats = lambda f: sensor.pose_at(f).matrix()  # noqa: E731
        gts = [g for g in gts if _oracle_in_sector(g[2], g[3], mats(g[0]), sensor.fov)]
        dets = [d for d in dets if _oracle_in_sector(d[2], d[3], mats(d[0]), sensor.fov)]
    if clouds is not None:
        lidar = calib.sensors.get(cfg.lidar_sensor_id) if calib is not None else None
        flagged = []
        for f, pid, x, y, z, ign in gts:
            pts = clouds[f].points[:, :3]
            if lidar is not None:
                m = lidar.pose_at(f).matrix()
                pts = (m @ np.c_[pts, np.ones(len(pts))].T).T[:, :3]
            n = 0
            for p in pts:
                if (p[0] - x) ** 2 + (p[1] - y) ** 2 <= cfg.occlusion_radius ** 2:
                    n += 1
            flagged.append((f, pid, x, y, z, ign or n < cfg.min_lidar_returns))
        gts = flagged

    n_pos = sum(1 for g in gts if not g[5])
    dets_by_frame: dict[int, list] = {}
    gts_by_frame: dict[int, list] = {}
    for d in dets:
        dets_by_frame.setdefault(d[0], []).append(d)
    for g in gts:
        gts_by_frame.setdefault(g[0], []).append(g)
    thresholds = sorted({d[1] for d in dets}, reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        tp = fp = 0
        for frame, frame_dets in dets_by_frame.items():
            active = sorted((d for d in frame_dets if d[1] >= t), key=lambda d: (-d[1], d[5]))
            free = sorted(gts_by_frame.get(frame, []), key=lambda g: g[1])
            for d in active:
                cands = []
                for g in free:
                    if cfg.ignore_height:
                        dist = math.sqrt((d[2] - g[2]) ** 2 + (d[3] - g[3]) ** 2)
                    else:
                        dist = math.sqrt((d[2] - g[2]) ** 2 + (d[3] - g[3]) ** 2 + (d[4] - g[4]) ** 2)
                    if dist <= cfg.gate:
                        cands.append((dist, g[1], g))
                if not cands:
                    fp += 1
                    continue
                _, _, g = min(cands, key=lambda c: (c[0], c[1]))
                free.remove(g)
                if not g[5]:
                    tp += 1
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / n_pos if n_pos else 0.0
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def oracle_points_in_obb(cloud: PointCloud | np.ndarray, box: OrientedBox3) -> int:
    """Count points in a box by half-space tests against its face planes.

    Face normals come from the box corners, built by rotating local corners as
    complex numbers, rather than from an inverse rotation matrix.
    """
    pts = cloud.points[:, :3] if isinstance(cloud, PointCloud) else np.asarray(cloud)[:, :3]
    d, w, h = box.extents
    cx, cy, cz = box.center
    turn = complex(math.cos(box.yaw), math.sin(box.yaw))
    c = complex(cx, cy)
    # ground-plane corners counter-clockwise, starting at local (+d/2, +w/2)
    corners = [c + turn * complex(sx * d / 2, sy * w / 2) for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1))]
    count = 0
    for p in pts:
        if abs(p[2] - cz) > h / 2:
            continue
        q = complex(p[0], p[1])
        inside = True
        for a, b in zip(corners, corners[1:] + corners[:1]):
            edge = b - a
            # cross(edge, q - a) >= 0 for points on the left of a CCW edge
            cross = edge.real * (q - a).imag - edge.imag * (q - a).real
            if cross < -1e-12 * abs(edge):
                inside = False
                break
        count += inside
    return count
