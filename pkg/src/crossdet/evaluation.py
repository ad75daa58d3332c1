"""Centroid-based person detection benchmark.

Pipeline: field-of-view restriction, occlusion discounting from lidar
returns, greedy ground-plane matching, precision/recall sweep over the
detection confidences, average precision and peak F1.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .formats import CalibrationSet, DetectionRecord, GroundtruthRecord
from .geometry import PointCloud, point_in_fov

log = logging.getLogger(__name__)


class MatchLabel(str, enum.Enum):
    TP = "TP"
    FP = "FP"
    IGNORED = "IGNORED"


@dataclass(frozen=True)
class EvalConfig:
    gate: float = 0.5
    min_lidar_returns: int = 7
    occlusion_radius: float = 0.4
    fov_sensor_id: str | None = "kinect"
    lidar_sensor_id: str = "lidar"
    ignore_height: bool = True
    ap_mode: str = "rectangular"

    def __post_init__(self) -> None:
        if not self.gate > 0.0:
            raise ValueError("gate must be positive")
        if self.min_lidar_returns < 0:
            raise ValueError("min_lidar_returns must be non-negative")
        if not self.occlusion_radius > 0.0:
            raise ValueError("occlusion_radius must be positive")
        if self.ap_mode not in ("rectangular", "interpolated"):
            raise ValueError(f"unknown ap_mode {self.ap_mode!r}")


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


@dataclass
class FrameMatch:
    frame_id: int
    detections: list[DetectionRecord]  # descending confidence, stable
    labels: list[MatchLabel]
    matched_person: list[str | None]
    unmatched_groundtruth: int  # non-ignored groundtruth left unmatched


@dataclass
class EvalReport:
    detector_id: str
    sequence_id: str
    curve: list[PrPoint]
    ap: float
    peak_f1: float
    peak_threshold: float
    total_groundtruth: int
    ignored_groundtruth: int
    n_detections: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curve"] = [asdict(p) for p in self.curve]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalReport:
        d = dict(d)
        d["curve"] = [PrPoint(**p) for p in d["curve"]]
        return cls(**d)


def _safe_div(num: float, den: float, empty: float) -> float:
    return num / den if den else empty


def make_pr_point(threshold: float, tp: int, fp: int, fn: int) -> PrPoint:
    precision = _safe_div(tp, tp + fp, 1.0)
    recall = _safe_div(tp, tp + fn, 0.0)
    f1 = _safe_div(2.0 * precision * recall, precision + recall, 0.0)
    return PrPoint(threshold, tp, fp, fn, precision, recall, f1)


# ---------------------------------------------------------------------------
# Protocol stages


def apply_fov_restriction(detections: Sequence[DetectionRecord],
                          groundtruth: Sequence[GroundtruthRecord],
                          calib: CalibrationSet, cfg: EvalConfig,
                          ) -> tuple[list[DetectionRecord], list[GroundtruthRecord]]:
    """Keep only records whose ground-plane centroid lies in the FOV sensor's sector."""
    sensor = calib[cfg.fov_sensor_id]
    fov = calib.fov(cfg.fov_sensor_id)

    def inside(frame: int, x: float, y: float) -> bool:
        return point_in_fov(fov, sensor.pose_at(frame), (x, y, 0.0))

    dets = [d for d in detections if inside(d.frame_id, d.x, d.y)]
    gts = [g for g in groundtruth if inside(g.frame_id, g.x, g.y)]
    return dets, gts


def count_cylinder_returns(cloud: PointCloud, x: float, y: float, radius: float) -> int:
    """Points within ``radius`` of ``(x, y)`` on the ground plane, any height."""
    xyz = cloud.xyz
    return int(np.count_nonzero(np.hypot(xyz[:, 0] - x, xyz[:, 1] - y) <= radius))


def discount_occluded(groundtruth: Sequence[GroundtruthRecord],
                      clouds: Mapping[int, PointCloud],
                      cfg: EvalConfig) -> list[GroundtruthRecord]:
    """Flag groundtruth with fewer than ``cfg.min_lidar_returns`` nearby returns as ignored.

    ``clouds`` must already be expressed in the same (base) frame as the groundtruth.
    """
    missing = sorted({g.frame_id for g in groundtruth} - set(clouds))
    if missing:
        raise KeyError(f"no point cloud for frame(s) {missing}")
    out = []
    for g in groundtruth:
        n = count_cylinder_returns(clouds[g.frame_id], g.x, g.y, cfg.occlusion_radius)
        out.append(replace(g, ignore=g.ignore or n < cfg.min_lidar_returns))
    return out


def _distance(d: DetectionRecord, g: GroundtruthRecord, ignore_height: bool) -> float:
    if ignore_height:
        return math.hypot(d.x - g.x, d.y - g.y)
    if d.z is None:
        raise ValueError(f"detection in frame {d.frame_id} has no height but ignore_height is off")
    return math.sqrt((d.x - g.x) ** 2 + (d.y - g.y) ** 2 + (d.z - g.z) ** 2)


def sort_by_confidence(detections: Iterable[DetectionRecord]) -> list[DetectionRecord]:
    return sorted(detections, key=lambda d: -d.confidence)


def match_frame(detections: Sequence[DetectionRecord], groundtruth: Sequence[GroundtruthRecord],
                cfg: EvalConfig) -> FrameMatch:
    """Greedy matching of one frame.

    ``detections`` are processed in the given order, which must be descending
    confidence.  Each takes the nearest still-available groundtruth within the
    gate (ties: lower person id).  Taking an ignore-flagged groundtruth makes
    the detection IGNORED rather than TP.
    """
    frames = {d.frame_id for d in detections} | {g.frame_id for g in groundtruth}
    if len(frames) > 1:
        raise ValueError(f"match_frame got records from several frames: {sorted(frames)}")
    available = sorted(groundtruth, key=lambda g: g.person_id)
    taken = [False] * len(available)
    labels: list[MatchLabel] = []
    persons: list[str | None] = []
    for det in detections:
        best = -1
        best_dist = math.inf
        for j, g in enumerate(available):
            if taken[j]:
                continue
            dist = _distance(det, g, cfg.ignore_height)
            if dist <= cfg.gate and dist < best_dist:
                best, best_dist = j, dist
        if best < 0:
            labels.append(MatchLabel.FP)
            persons.append(None)
            continue
        taken[best] = True
        persons.append(available[best].person_id)
        labels.append(MatchLabel.IGNORED if available[best].ignore else MatchLabel.TP)
    unmatched = sum(1 for g, t in zip(available, taken) if not t and not g.ignore)
    frame_id = next(iter(frames)) if frames else -1
    return FrameMatch(frame_id, list(detections), labels, persons, unmatched)


def match_all(detections: Sequence[DetectionRecord], groundtruth: Sequence[GroundtruthRecord],
              cfg: EvalConfig) -> list[FrameMatch]:
    det_by_frame: dict[int, list[DetectionRecord]] = defaultdict(list)
    gt_by_frame: dict[int, list[GroundtruthRecord]] = defaultdict(list)
    for d in detections:
        det_by_frame[d.frame_id].append(d)
    for g in groundtruth:
        gt_by_frame[g.frame_id].append(g)
    frames = sorted(set(det_by_frame) | set(gt_by_frame))
    return [match_frame(sort_by_confidence(det_by_frame[f]), gt_by_frame[f], cfg) for f in frames]


def curve_from_matches(matches: Sequence[FrameMatch], n_groundtruth: int) -> list[PrPoint]:
    """Cumulate per-detection labels into one PR point per unique confidence.

    IGNORED detections contribute nothing and do not create thresholds.
    """
    scored = [(d.confidence, lab) for m in matches for d, lab in zip(m.detections, m.labels)
              if lab is not MatchLabel.IGNORED]
    if not scored:
        return [make_pr_point(1.0, 0, 0, n_groundtruth)]
    scored.sort(key=lambda s: -s[0])
    curve = []
    tp = fp = 0
    for i, (conf, lab) in enumerate(scored):
        if lab is MatchLabel.TP:
            tp += 1
        else:
            fp += 1
        if i + 1 == len(scored) or scored[i + 1][0] != conf:
            curve.append(make_pr_point(conf, tp, fp, n_groundtruth - tp))
    return curve


def pr_curve(detections: Sequence[DetectionRecord], groundtruth: Sequence[GroundtruthRecord],
             cfg: EvalConfig) -> list[PrPoint]:
    matches = match_all(detections, groundtruth, cfg)
    n_gt = sum(1 for g in groundtruth if not g.ignore)
    return curve_from_matches(matches, n_gt)


def average_precision(curve: Sequence[PrPoint], mode: str = "rectangular") -> float:
    """Area under the PR curve: sum of recall steps times precision.

    ``interpolated`` replaces each precision by the maximum precision at any
    lower threshold (the monotone envelope).
    """
    precisions = [p.precision for p in curve]
    if mode == "interpolated":
        running = 0.0
        for i in range(len(precisions) - 1, -1, -1):
            running = max(running, precisions[i])
            precisions[i] = running
    elif mode != "rectangular":
        raise ValueError(f"unknown ap mode {mode!r}")
    ap = 0.0
    prev_recall = 0.0
    for p, prec in zip(curve, precisions):
        ap += (p.recall - prev_recall) * prec
        prev_recall = p.recall
    return ap


def peak_f1(curve: Sequence[PrPoint]) -> tuple[float, float]:
    """Best F1 and its threshold; ties go to the higher threshold."""
    if not curve:
        raise ValueError("peak_f1 of an empty curve")
    best = max(curve, key=lambda p: (p.f1, p.threshold))
    return best.f1, best.threshold


def clouds_to_base(clouds: Mapping[int, PointCloud], calib: CalibrationSet | None,
                   lidar_sensor_id: str) -> dict[int, PointCloud]:
    if calib is None or lidar_sensor_id not in calib:
        log.info("no calibration for '%s'; treating clouds as base-frame", lidar_sensor_id)
        return dict(clouds)
    sensor = calib[lidar_sensor_id]
    return {f: c.transformed(sensor.pose_at(f)) for f, c in clouds.items()}


def evaluate(detections: Sequence[DetectionRecord], groundtruth: Sequence[GroundtruthRecord],
             clouds: Mapping[int, PointCloud] | None, calib: CalibrationSet | None,
             cfg: EvalConfig | None = None, sequence_id: str = "sequence") -> EvalReport:
    """Run the full protocol and build a report.

    ``clouds`` are lidar-frame clouds keyed by frame; pass ``None`` to skip
    occlusion discounting.  With ``cfg.fov_sensor_id=None`` no FOV cut is made.
    """
    cfg = cfg or EvalConfig()
    dets, gts = list(detections), list(groundtruth)
    if cfg.fov_sensor_id is not None:
        if calib is None:
            raise ValueError("FOV restriction requested but no calibration given")
        dets, gts = apply_fov_restriction(dets, gts, calib, cfg)
    if clouds is not None:
        gts = discount_occluded(gts, clouds_to_base(clouds, calib, cfg.lidar_sensor_id), cfg)
    matches = match_all(dets, gts, cfg)
    n_ignored = sum(1 for g in gts if g.ignore)
    curve = curve_from_matches(matches, len(gts) - n_ignored)
    best_f1, best_thr = peak_f1(curve)
    detector_ids = sorted({d.detector_id for d in detections})
    config = asdict(cfg)
    config["ignored_detection_policy"] = "excluded (neither TP nor FP)"
    config["occlusion_model"] = "vertical cylinder around groundtruth centroid"
    config["occlusion_discounting"] = clouds is not None
    return EvalReport(
        detector_id="+".join(detector_ids) or "none",
        sequence_id=sequence_id,
        curve=curve,
        ap=average_precision(curve, cfg.ap_mode),
        peak_f1=best_f1,
        peak_threshold=best_thr,
        total_groundtruth=len(gts),
        ignored_groundtruth=n_ignored,
        n_detections=len(dets),
        config=config,
    )
