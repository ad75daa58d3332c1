"""Turn RGB-D teacher boxes into weak 3D lidar training labels.

Per frame: confidence cut, transfer of teacher boxes into the lidar frame
through the extrinsic calibration, point counting, min-points and range
filters, optional crop to the teacher's field of view, and yaw rotation
augmentation.  Results are exported as KITTI-like ``.bin``/``.txt`` pairs
plus a JSON manifest.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .formats import (
    CalibrationSet,
    DetectionRecord,
    calibration_to_dict,
    read_kitti_labels,
    kitti_to_box,
    read_point_cloud,
    serialize_kitti_label,
    serialize_point_cloud,
)
from .geometry import (
    OrientedBox3,
    PointCloud,
    RigidTransform,
    points_in_obb,
    rotate_scene,
    transform_box,
)

log = logging.getLogger(__name__)

DISCARD_KEYS = ("low_confidence", "below_min_points", "beyond_range", "outside_teacher_fov")


@dataclass(frozen=True)
class WeakLabelConfig:
    teacher_sensor_id: str = "kinect"
    lidar_sensor_id: str = "lidar"
    min_points: int = 1
    max_range: float = 15.0
    min_teacher_confidence: float = 0.5
    augmentation_yaws: tuple[float, ...] | None = None
    augmentation_count: int = 8
    seed: int = 42
    class_name: str = "Pedestrian"

    def __post_init__(self) -> None:
        if self.min_points < 1:
            raise ValueError("min_points must be at least 1")
        if not self.max_range > 0.0:
            raise ValueError("max_range must be positive")
        if self.augmentation_yaws is None and self.augmentation_count < 1:
            raise ValueError("augmentation_count must be at least 1")


@dataclass(frozen=True)
class WeakLabel:
    box: OrientedBox3  # lidar frame
    point_count: int
    teacher_confidence: float
    provenance: str


@dataclass
class WeakLabelFrame:
    frame_id: int
    cloud: PointCloud
    labels: list[WeakLabel]
    augmentation_index: int | None = None
    augmentation_yaw: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        if self.augmentation_index is None:
            return f"{self.frame_id:06d}"
        return f"{self.frame_id:06d}_{self.augmentation_index:02d}"


def _provenance(det: DetectionRecord, index: int) -> str:
    if det.det_id is not None:
        return det.det_id
    return f"{det.detector_id}:{det.frame_id}:{index}"


def generate_weak_labels(teacher_detections: Sequence[DetectionRecord], cloud: PointCloud,
                         calib: CalibrationSet, cfg: WeakLabelConfig,
                         frame_id: int | None = None) -> WeakLabelFrame:
    """Build the weak labels of one frame from base-frame teacher boxes.

    ``cloud`` is in the lidar frame; labels are returned in the lidar frame.
    """
    if cfg.teacher_sensor_id not in calib:
        raise KeyError(f"no calibration for teacher sensor '{cfg.teacher_sensor_id}'")
    lidar_pose = calib[cfg.lidar_sensor_id].pose_at(frame_id)
    base_to_lidar = lidar_pose.inverse()
    frames = {d.frame_id for d in teacher_detections}
    if frame_id is None:
        if len(frames) > 1:
            raise ValueError(f"teacher detections span several frames: {sorted(frames)}")
        frame_id = next(iter(frames)) if frames else 0
    elif frames - {frame_id}:
        raise ValueError(f"teacher detections from frames {sorted(frames)} given for frame {frame_id}")

    discards = dict.fromkeys(DISCARD_KEYS, 0)
    labels = []
    for i, det in enumerate(teacher_detections):
        if det.box is None:
            raise ValueError(f"teacher detection {_provenance(det, i)} carries no 3D box")
        if det.confidence < cfg.min_teacher_confidence:
            discards["low_confidence"] += 1
            continue
        box = transform_box(base_to_lidar, det.box)
        n = points_in_obb(cloud, box)
        if n < cfg.min_points:
            discards["below_min_points"] += 1
            continue
        if box.ground_range > cfg.max_range:
            discards["beyond_range"] += 1
            continue
        labels.append(WeakLabel(box, n, det.confidence, _provenance(det, i)))
    return WeakLabelFrame(frame_id, cloud, labels, metadata={"discards": discards})


def _in_teacher_fov(xyz_lidar: np.ndarray, lidar_pose: RigidTransform,
                    teacher_pose: RigidTransform, fov) -> np.ndarray:
    lidar_to_teacher = teacher_pose.inverse().compose(lidar_pose)
    local = lidar_to_teacher.apply(np.asarray(xyz_lidar, dtype=float).reshape(-1, 3))
    return fov.contains_array(local[:, :2])


def restrict_to_teacher_fov(frame: WeakLabelFrame, calib: CalibrationSet,
                            cfg: WeakLabelConfig) -> WeakLabelFrame:
    """Crop labels and cloud to the teacher's horizontal sector.

    Point counts are recomputed on the cropped cloud, and labels that fall
    below ``cfg.min_points`` are dropped.
    """
    fov = calib.fov(cfg.teacher_sensor_id)
    teacher_pose = calib[cfg.teacher_sensor_id].pose_at(frame.frame_id)
    lidar_pose = calib[cfg.lidar_sensor_id].pose_at(frame.frame_id)
    keep = _in_teacher_fov(frame.cloud.xyz, lidar_pose, teacher_pose, fov)
    cloud = PointCloud(frame.cloud.points[keep])

    discards = dict(frame.metadata.get("discards", dict.fromkeys(DISCARD_KEYS, 0)))
    labels = []
    for lab in frame.labels:
        if not _in_teacher_fov(lab.box.center, lidar_pose, teacher_pose, fov)[0]:
            discards["outside_teacher_fov"] += 1
            continue
        n = points_in_obb(cloud, lab.box)
        if n < cfg.min_points:
            discards["below_min_points"] += 1
            continue
        labels.append(replace(lab, point_count=n))
    metadata = dict(frame.metadata)
    metadata["discards"] = discards
    metadata["fov_crop"] = {"sensor": cfg.teacher_sensor_id,
                            "points_before": len(frame.cloud), "points_after": len(cloud)}
    return replace(frame, cloud=cloud, labels=labels, metadata=metadata)


def augmentation_yaws(frame_id: int, cfg: WeakLabelConfig) -> list[float]:
    if cfg.augmentation_yaws is not None:
        return [float(y) for y in cfg.augmentation_yaws]
    rng = np.random.default_rng([cfg.seed, frame_id])
    return [float(y) for y in rng.uniform(-math.pi, math.pi, size=cfg.augmentation_count)]


def augment_rotations(frame: WeakLabelFrame, cfg: WeakLabelConfig) -> list[WeakLabelFrame]:
    """One rotated copy of the frame per configured yaw (seeded per frame id)."""
    out = []
    for k, yaw in enumerate(augmentation_yaws(frame.frame_id, cfg)):
        cloud, boxes = rotate_scene(frame.cloud, [lab.box for lab in frame.labels], yaw)
        labels = []
        for lab, box in zip(frame.labels, boxes):
            n = points_in_obb(cloud, box)
            if n != lab.point_count:
                raise RuntimeError(
                    f"rotation by {yaw} changed the point count of {lab.provenance}: "
                    f"{lab.point_count} -> {n}")
            labels.append(replace(lab, box=box))
        out.append(replace(frame, cloud=cloud, labels=labels, augmentation_index=k,
                           augmentation_yaw=yaw, metadata=dict(frame.metadata)))
    return out


def build_frames(teacher_detections: Sequence[DetectionRecord], clouds: Mapping[int, PointCloud],
                 calib: CalibrationSet, cfg: WeakLabelConfig, restrict_fov: bool = True,
                 augment: bool = True) -> list[WeakLabelFrame]:
    """Run the per-frame pipeline over every frame that has a cloud."""
    by_frame: dict[int, list[DetectionRecord]] = {f: [] for f in clouds}
    for det in teacher_detections:
        if det.frame_id not in by_frame:
            raise KeyError(f"no point cloud for teacher frame {det.frame_id}")
        by_frame[det.frame_id].append(det)
    frames = []
    for frame_id in sorted(by_frame):
        frame = generate_weak_labels(by_frame[frame_id], clouds[frame_id], calib, cfg, frame_id)
        if restrict_fov:
            frame = restrict_to_teacher_fov(frame, calib, cfg)
        frames.extend(augment_rotations(frame, cfg) if augment else [frame])
    return frames


def _config_echo(cfg: WeakLabelConfig) -> dict:
    d = asdict(cfg)
    if d["augmentation_yaws"] is not None:
        d["augmentation_yaws"] = list(d["augmentation_yaws"])
    return d


def export_dataset(frames: Sequence[WeakLabelFrame], out_dir: str | Path,
                   calib: CalibrationSet | None, cfg: WeakLabelConfig) -> dict:
    """Write ``<name>.bin`` / ``<name>.txt`` per frame and ``manifest.json``.

    Labels are written relative to the lidar frame (identity extrinsic), in
    the camera-style axes of the KITTI label layout.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    totals = dict.fromkeys(DISCARD_KEYS, 0)
    counted: set[int] = set()
    entries, provenance = [], {}
    for frame in frames:
        bin_path, txt_path = out / f"{frame.name}.bin", out / f"{frame.name}.txt"
        try:
            bin_path.write_bytes(serialize_point_cloud(frame.cloud))
            txt_path.write_text("".join(
                serialize_kitti_label(lab.box, cfg.class_name, lab.teacher_confidence) + "\n"
                for lab in frame.labels))
        except OSError as exc:
            raise OSError(f"failed writing {exc.filename or out}: {exc.strerror}") from exc
        # discard statistics belong to the source frame, not to each augmented copy
        if frame.frame_id not in counted:
            counted.add(frame.frame_id)
            for key, n in frame.metadata.get("discards", {}).items():
                totals[key] = totals.get(key, 0) + n
        entries.append({
            "name": frame.name,
            "frame_id": frame.frame_id,
            "augmentation_yaw": frame.augmentation_yaw,
            "n_points": len(frame.cloud),
            "n_labels": len(frame.labels),
            "fov_crop": frame.metadata.get("fov_crop"),
        })
        provenance[frame.name] = [
            {"teacher": lab.provenance, "point_count": lab.point_count,
             "confidence": lab.teacher_confidence}
            for lab in frame.labels
        ]
    manifest = {
        "config": _config_echo(cfg),
        "calibration": calibration_to_dict(calib) if calib is not None else None,
        "label_frame": cfg.lidar_sensor_id,
        "n_frames": len(entries),
        "n_labels": sum(e["n_labels"] for e in entries),
        "frames": entries,
        "discards": totals,
        "provenance": provenance,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# Worst-case geometric slack of a 2-decimal KITTI label: 0.005 m per centre
# component, 0.005 m per extent and 0.005 rad of yaw over a half-diagonal < 2 m.
QUANTIZATION_MARGIN = 0.03


def audit_export(out_dir: str | Path, cfg: WeakLabelConfig) -> list[str]:
    """Re-read an exported dataset and list every filter violation (empty means clean).

    Range is checked on the re-parsed label location allowing only for the
    2-decimal rounding.  Point counts are checked twice: the manifest value
    must reach ``min_points`` and the re-parsed box, widened by the rounding
    margin, must still contain that many re-parsed points.
    """
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    problems = []
    range_tol = math.hypot(0.005, 0.005)
    for entry in manifest["frames"]:
        name = entry["name"]
        labels = read_kitti_labels(out / f"{name}.txt")
        cloud = read_point_cloud(out / f"{name}.bin")
        prov = manifest["provenance"][name]
        if len(labels) != entry["n_labels"] or len(prov) != len(labels):
            problems.append(f"{name}: label count mismatch")
            continue
        for k, (lab, meta) in enumerate(zip(labels, prov)):
            box = kitti_to_box(lab)
            if box.ground_range > cfg.max_range + range_tol:
                problems.append(f"{name}#{k}: range {box.ground_range:.3f} m beyond {cfg.max_range}")
            if meta["point_count"] < cfg.min_points:
                problems.append(f"{name}#{k}: manifest point count {meta['point_count']}")
            grown = OrientedBox3(box.center, tuple(e + 2 * QUANTIZATION_MARGIN for e in box.extents),
                                 box.yaw)
            n = points_in_obb(cloud, grown)
            if n < cfg.min_points:
                problems.append(f"{name}#{k}: only {n} points inside the exported box")
    return problems
