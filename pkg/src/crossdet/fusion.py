"""Cross-detector fusion by gated nearest-neighbour association on the ground plane."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

from .formats import CalibrationSet, DetectionRecord
from .geometry import point_in_fov


@dataclass(frozen=True)
class FusionConfig:
    gate: float = 0.5
    confidence_rule: str = "max"
    linkage: str = "seed"  # "seed": gate against the seed only; "complete": against every member
    fov_partition: str | None = None

    def __post_init__(self) -> None:
        if not self.gate > 0.0:
            raise ValueError("gate must be positive")
        if self.confidence_rule not in ("max", "mean"):
            raise ValueError(f"unknown confidence rule {self.confidence_rule!r}")
        if self.linkage not in ("seed", "complete"):
            raise ValueError(f"unknown linkage {self.linkage!r}")


@dataclass(frozen=True)
class FusedDetection:
    frame_id: int
    x: float
    y: float
    confidence: float
    members: tuple[tuple[str, int], ...]  # (detector_id, index in that detector's input)

    def to_record(self, detector_id: str | None = None, sensor_id: str = "fused") -> DetectionRecord:
        if detector_id is None:
            detector_id = "fused:" + "+".join(sorted({m[0] for m in self.members}))
        return DetectionRecord(self.frame_id, sensor_id, detector_id,
                               self.confidence, self.x, self.y)


def _dist(a: DetectionRecord, b: DetectionRecord) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def _cluster(members: list[tuple[str, int, DetectionRecord]], rule: str) -> FusedDetection:
    confs = [d.confidence for _, _, d in members]
    total = sum(confs)
    if total > 0.0:
        x = sum(d.confidence * d.x for _, _, d in members) / total
        y = sum(d.confidence * d.y for _, _, d in members) / total
    else:
        x = sum(d.x for _, _, d in members) / len(members)
        y = sum(d.y for _, _, d in members) / len(members)
    conf = max(confs) if rule == "max" else total / len(confs)
    return FusedDetection(members[0][2].frame_id, x, y, conf,
                          tuple((det_id, idx) for det_id, idx, _ in members))


def fuse_frame(detection_sets: Mapping[str, Sequence[DetectionRecord]],
               cfg: FusionConfig | None = None) -> list[FusedDetection]:
    """Fuse one frame's detections from several detectors.

    Detections are visited by descending confidence (ties: detector id, then
    input index).  Each unassigned one seeds a cluster and takes, from every
    other detector, the nearest unassigned detection within the gate.
    """
    cfg = cfg or FusionConfig()
    pool = [(det_id, i, d) for det_id, dets in detection_sets.items() for i, d in enumerate(dets)]
    frames = {d.frame_id for _, _, d in pool}
    if len(frames) > 1:
        raise ValueError(f"fuse_frame got records from several frames: {sorted(frames)}")
    pool.sort(key=lambda e: (-e[2].confidence, e[0], e[1]))
    assigned: set[tuple[str, int]] = set()
    detectors = sorted(detection_sets)
    fused = []
    for det_id, i, seed in pool:
        if (det_id, i) in assigned:
            continue
        assigned.add((det_id, i))
        members = [(det_id, i, seed)]
        for other in detectors:
            if other == det_id:
                continue
            best, best_dist = None, math.inf
            for j, cand in enumerate(detection_sets[other]):
                if (other, j) in assigned:
                    continue
                if cfg.linkage == "complete":
                    dist = max(_dist(cand, m) for _, _, m in members)
                else:
                    dist = _dist(cand, seed)
                if dist <= cfg.gate and dist < best_dist:
                    best, best_dist = j, dist
            if best is not None:
                assigned.add((other, best))
                members.append((other, best, detection_sets[other][best]))
        fused.append(_cluster(members, cfg.confidence_rule))
    return fused


def fuse_fov_partitioned(inside_set: Sequence[DetectionRecord], outside_set: Sequence[DetectionRecord],
                         calib: CalibrationSet, cfg: FusionConfig,
                         inside_id: str = "inside", outside_id: str = "outside") -> list[FusedDetection]:
    """Keep ``inside_set`` within the partition sensor's FOV and ``outside_set`` strictly outside it."""
    if cfg.fov_partition is None:
        raise ValueError("fov_partition is not configured")
    fov = calib.fov(cfg.fov_partition)
    sensor = calib[cfg.fov_partition]

    def inside(d: DetectionRecord) -> bool:
        return point_in_fov(fov, sensor.pose_at(d.frame_id), (d.x, d.y, 0.0))

    out = [FusedDetection(d.frame_id, d.x, d.y, d.confidence, ((inside_id, i),))
           for i, d in enumerate(inside_set) if inside(d)]
    out += [FusedDetection(d.frame_id, d.x, d.y, d.confidence, ((outside_id, i),))
            for i, d in enumerate(outside_set) if not inside(d)]
    return out


def _by_frame(records: Sequence[DetectionRecord]) -> dict[int, list[DetectionRecord]]:
    grouped: dict[int, list[DetectionRecord]] = defaultdict(list)
    for r in records:
        grouped[r.frame_id].append(r)
    return grouped


def fuse_logs(logs: Mapping[str, Sequence[DetectionRecord]], cfg: FusionConfig | None = None,
              calib: CalibrationSet | None = None) -> list[DetectionRecord]:
    """Fuse whole detection logs frame by frame into a standard detection log.

    With ``cfg.fov_partition`` set, exactly two logs are expected: the first
    (in mapping order) is kept inside the FOV and the second outside it.
    """
    cfg = cfg or FusionConfig()
    grouped = {name: _by_frame(recs) for name, recs in logs.items()}
    frames = sorted({f for g in grouped.values() for f in g})
    out: list[DetectionRecord] = []
    detector_id = "fused:" + "+".join(sorted(logs))
    if cfg.fov_partition is not None:
        if len(logs) != 2 or calib is None:
            raise ValueError("FOV-partitioned fusion needs exactly two logs and a calibration")
        inside_name, outside_name = list(logs)
        for f in frames:
            fused = fuse_fov_partitioned(grouped[inside_name].get(f, []),
                                         grouped[outside_name].get(f, []),
                                         calib, cfg, inside_name, outside_name)
            out.extend(fd.to_record(detector_id) for fd in fused)
        return out
    for f in frames:
        sets = {name: g.get(f, []) for name, g in grouped.items()}
        out.extend(fd.to_record(detector_id) for fd in fuse_frame(sets, cfg))
    return out
