"""Readers and writers for detection/groundtruth logs, calibration, clouds and KITTI-like labels.

Logs are JSON-lines with a ``schema`` field.  Every parser reports problems as
:class:`FormatError` carrying the offending line (or point) and field.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .geometry import (
    OrientedBox3,
    PointCloud,
    RigidTransform,
    SectorFov,
    TransformError,
    normalize_angle,
    transform_box,
)

SCHEMA_VERSION = 1
KITTI_PRECISION = 2


class FormatError(ValueError):
    """Malformed input.  ``line`` is 1-based when the input is line oriented."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class DetectionRecord:
    frame_id: int
    sensor_id: str
    detector_id: str
    confidence: float
    x: float
    y: float
    z: float | None = None
    box: OrientedBox3 | None = None
    det_id: str | None = None

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class GroundtruthRecord:
    frame_id: int
    person_id: str
    x: float
    y: float
    z: float
    ignore: bool = False


@dataclass(frozen=True)
class SensorCalibration:
    pose: RigidTransform  # sensor -> base
    fov: SectorFov | None = None
    frame_poses: Mapping[int, RigidTransform] = field(default_factory=dict)

    def pose_at(self, frame_id: int | None = None) -> RigidTransform:
        if frame_id is not None and frame_id in self.frame_poses:
            return self.frame_poses[frame_id]
        return self.pose


@dataclass(frozen=True)
class CalibrationSet:
    sensors: Mapping[str, SensorCalibration]

    def __getitem__(self, sensor_id: str) -> SensorCalibration:
        try:
            return self.sensors[sensor_id]
        except KeyError:
            raise KeyError(f"no calibration for sensor '{sensor_id}'") from None

    def __contains__(self, sensor_id: object) -> bool:
        return sensor_id in self.sensors

    def fov(self, sensor_id: str) -> SectorFov:
        fov = self[sensor_id].fov
        if fov is None:
            raise KeyError(f"sensor '{sensor_id}' has no field of view in the calibration")
        return fov


@dataclass(frozen=True)
class KittiLabelLine:
    class_name: str
    truncated: float
    occluded: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # camera-style x right, y down, z forward
    rotation_y: float
    score: float | None = None


# ---------------------------------------------------------------------------
# JSON-lines logs


def _lines(stream: Iterable[str | bytes] | str | bytes) -> Iterable[str | bytes]:
    if isinstance(stream, (str, bytes)):
        return stream.splitlines()
    return stream


def _load_json_line(raw: str | bytes, lineno: int):
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 ({exc.reason})", lineno) from None
    if not raw.strip():
        return None
    try:
        obj = json.loads(raw)
    except (ValueError, RecursionError) as exc:
        raise FormatError(f"invalid JSON ({exc})", lineno) from None
    if not isinstance(obj, dict):
        raise FormatError("record must be a JSON object", lineno)
    if obj.get("schema") != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema {obj.get('schema')!r}", lineno, "schema")
    return obj


def _number(obj: Mapping, key: str, lineno: int, required: bool = True) -> float | None:
    if key not in obj or obj[key] is None:
        if required:
            raise FormatError("missing", lineno, key)
        return None
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"expected a number, got {value!r}", lineno, key)
    value = float(value)
    if not math.isfinite(value):
        raise FormatError("must be finite", lineno, key)
    return value


def _frame(obj: Mapping, lineno: int) -> int:
    value = obj.get("frame")
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise FormatError(f"expected a non-negative integer, got {value!r}", lineno, "frame")
    return value


def _string(obj: Mapping, key: str, lineno: int) -> str:
    value = obj.get(key)
    if not isinstance(value, str) or not value:
        raise FormatError(f"expected a non-empty string, got {value!r}", lineno, key)
    return value


def _box(obj, lineno: int) -> OrientedBox3:
    if not isinstance(obj, dict):
        raise FormatError("expected an object", lineno, "box")
    vals = {k: _number(obj, k, lineno) for k in ("cx", "cy", "cz", "d", "w", "h", "yaw")}
    try:
        return OrientedBox3((vals["cx"], vals["cy"], vals["cz"]),
                            (vals["d"], vals["w"], vals["h"]), vals["yaw"])
    except ValueError as exc:
        raise FormatError(str(exc), lineno, "box") from None


def parse_detection_log(stream: Iterable[str | bytes] | str | bytes) -> list[DetectionRecord]:
    """Parse a detection log; unknown keys are ignored, blank lines skipped."""
    records = []
    for lineno, raw in enumerate(_lines(stream), start=1):
        obj = _load_json_line(raw, lineno)
        if obj is None:
            continue
        conf = _number(obj, "conf", lineno)
        if not 0.0 <= conf <= 1.0:
            raise FormatError(f"confidence out of range: {conf}", lineno, "conf")
        det_id = obj.get("id")
        if det_id is not None and not isinstance(det_id, str):
            raise FormatError("expected a string", lineno, "id")
        records.append(DetectionRecord(
            frame_id=_frame(obj, lineno),
            sensor_id=_string(obj, "sensor", lineno),
            detector_id=_string(obj, "detector", lineno),
            confidence=conf,
            x=_number(obj, "x", lineno),
            y=_number(obj, "y", lineno),
            z=_number(obj, "z", lineno, required=False),
            box=_box(obj["box"], lineno) if obj.get("box") is not None else None,
            det_id=det_id,
        ))
    return records


def parse_groundtruth_log(stream: Iterable[str | bytes] | str | bytes) -> list[GroundtruthRecord]:
    records = []
    seen: set[tuple[int, str]] = set()
    for lineno, raw in enumerate(_lines(stream), start=1):
        obj = _load_json_line(raw, lineno)
        if obj is None:
            continue
        frame = _frame(obj, lineno)
        person = obj.get("person")
        if isinstance(person, int) and not isinstance(person, bool):
            person = str(person)
        if not isinstance(person, str) or not person:
            raise FormatError(f"expected a person id, got {person!r}", lineno, "person")
        if (frame, person) in seen:
            raise FormatError(f"duplicate person '{person}' in frame {frame}", lineno, "person")
        seen.add((frame, person))
        records.append(GroundtruthRecord(
            frame, person,
            _number(obj, "x", lineno), _number(obj, "y", lineno), _number(obj, "z", lineno),
            ignore=bool(obj.get("ignore", False)),
        ))
    return records


def detection_to_json(rec: DetectionRecord) -> str:
    obj: dict = {"schema": SCHEMA_VERSION, "frame": rec.frame_id, "sensor": rec.sensor_id,
                 "detector": rec.detector_id, "conf": rec.confidence, "x": rec.x, "y": rec.y}
    if rec.z is not None:
        obj["z"] = rec.z
    if rec.box is not None:
        b = rec.box
        obj["box"] = {"cx": b.center[0], "cy": b.center[1], "cz": b.center[2],
                      "d": b.extents[0], "w": b.extents[1], "h": b.extents[2], "yaw": b.yaw}
    if rec.det_id is not None:
        obj["id"] = rec.det_id
    return json.dumps(obj)


def groundtruth_to_json(rec: GroundtruthRecord) -> str:
    obj = {"schema": SCHEMA_VERSION, "frame": rec.frame_id, "person": rec.person_id,
           "x": rec.x, "y": rec.y, "z": rec.z}
    if rec.ignore:
        obj["ignore"] = True
    return json.dumps(obj)


def write_detection_log(records: Iterable[DetectionRecord], fh: IO[str]) -> None:
    for rec in records:
        fh.write(detection_to_json(rec) + "\n")


def write_groundtruth_log(records: Iterable[GroundtruthRecord], fh: IO[str]) -> None:
    for rec in records:
        fh.write(groundtruth_to_json(rec) + "\n")


def read_detection_log(path: str | Path) -> list[DetectionRecord]:
    with open(path, "rb") as fh:
        return parse_detection_log(fh)


def read_groundtruth_log(path: str | Path) -> list[GroundtruthRecord]:
    with open(path, "rb") as fh:
        return parse_groundtruth_log(fh)


# ---------------------------------------------------------------------------
# Calibration


def _transform(values, where: str) -> RigidTransform:
    if not isinstance(values, list) or len(values) != 16:
        raise FormatError("expected 16 row-major numbers", field=where)
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        raise FormatError("expected 16 row-major numbers", field=where)
    try:
        return RigidTransform.from_matrix(values, project=True)
    except (TransformError, np.linalg.LinAlgError) as exc:
        raise FormatError(str(exc), field=where) from None


def parse_calibration(text: str | bytes) -> CalibrationSet:
    """Parse ``{"sensors": {id: {"T": [16], "fov": {...}?, "frames": {frame: [16]}?}}}``."""
    try:
        doc = json.loads(text)
    except (ValueError, RecursionError) as exc:
        raise FormatError(f"invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("sensors"), dict):
        raise FormatError("expected an object with a 'sensors' map", field="sensors")
    sensors = {}
    for sid, entry in doc["sensors"].items():
        if not isinstance(entry, dict):
            raise FormatError("expected an object", field=f"sensors.{sid}")
        pose = _transform(entry.get("T"), f"sensors.{sid}.T")
        fov = None
        if entry.get("fov") is not None:
            f = entry["fov"]
            if not isinstance(f, dict):
                raise FormatError("expected an object", field=f"sensors.{sid}.fov")
            nums = {}
            for key, default in (("forward_deg", 0.0), ("half_angle_deg", None),
                                 ("min_m", 0.0), ("max_m", math.inf)):
                v = f.get(key, default)
                if v is None or isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise FormatError(f"expected a number, got {v!r}", field=f"sensors.{sid}.fov.{key}")
                nums[key] = float(v)
            try:
                fov = SectorFov.from_degrees(nums["forward_deg"], nums["half_angle_deg"],
                                             nums["min_m"], nums["max_m"])
            except ValueError as exc:
                raise FormatError(str(exc), field=f"sensors.{sid}.fov") from None
        frames = {}
        raw_frames = entry.get("frames") or {}
        if not isinstance(raw_frames, dict):
            raise FormatError("expected an object", field=f"sensors.{sid}.frames")
        for key, values in raw_frames.items():
            try:
                frame = int(key)
            except ValueError:
                raise FormatError(f"bad frame id {key!r}", field=f"sensors.{sid}.frames") from None
            frames[frame] = _transform(values, f"sensors.{sid}.frames.{key}")
        sensors[sid] = SensorCalibration(pose, fov, frames)
    return CalibrationSet(sensors)


def calibration_to_dict(calib: CalibrationSet) -> dict:
    out = {}
    for sid in sorted(calib.sensors):
        s = calib.sensors[sid]
        entry: dict = {"T": s.pose.matrix().ravel().tolist()}
        if s.fov is not None:
            entry["fov"] = {
                "forward_deg": math.degrees(s.fov.forward_yaw),
                "half_angle_deg": math.degrees(s.fov.half_angle),
                "min_m": s.fov.min_range,
            }
            if math.isfinite(s.fov.max_range):
                entry["fov"]["max_m"] = s.fov.max_range
        if s.frame_poses:
            entry["frames"] = {str(k): v.matrix().ravel().tolist()
                               for k, v in sorted(s.frame_poses.items())}
        out[sid] = entry
    return {"sensors": out}


def read_calibration(path: str | Path) -> CalibrationSet:
    return parse_calibration(Path(path).read_bytes())


def write_calibration(calib: CalibrationSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(calibration_to_dict(calib), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Binary point clouds


def parse_point_cloud(blob: bytes) -> PointCloud:
    """Decode little-endian float32 ``x, y, z, intensity`` quadruples."""
    if len(blob) % 16:
        raise FormatError(f"truncated point record ({len(blob)} bytes is not a multiple of 16)")
    arr = np.frombuffer(blob, dtype="<f4").reshape(-1, 4)
    bad = ~np.all(np.isfinite(arr), axis=1)
    if bad.any():
        raise FormatError(f"non-finite value at point {int(np.argmax(bad))}")
    neg = arr[:, 3] < 0
    if neg.any():
        raise FormatError(f"negative intensity at point {int(np.argmax(neg))}")
    return PointCloud(arr.astype(np.float64))


def serialize_point_cloud(cloud: PointCloud) -> bytes:
    return cloud.points.astype("<f4").tobytes()


def read_point_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    try:
        return parse_point_cloud(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def read_cloud_dir(directory: str | Path) -> dict[int, PointCloud]:
    """Load every ``<frame>.bin`` in a directory keyed by integer frame id."""
    clouds = {}
    for path in sorted(Path(directory).glob("*.bin")):
        try:
            frame = int(path.stem)
        except ValueError:
            continue
        clouds[frame] = read_point_cloud(path)
    return clouds


def compensate_domain(cloud: PointCloud, z_offset: float, intensity_scale: float) -> PointCloud:
    """Shift heights and rescale intensities into [0, 1] (mounting-height / intensity adaptation)."""
    if not intensity_scale > 0.0:
        raise ValueError(f"intensity_scale must be positive, got {intensity_scale}")
    pts = cloud.points.copy()
    pts[:, 2] += z_offset
    pts[:, 3] = np.clip(pts[:, 3] * intensity_scale, 0.0, 1.0)
    return PointCloud(pts)


# ---------------------------------------------------------------------------
# KITTI-like labels
#
# Sensor frame (x fwd, y left, z up) -> camera-style frame (x right, y down, z fwd):
#   cam = (-y, -z, x).  A yaw of 0 (facing sensor x) corresponds to rotation_y = -pi/2.


def _fmt(v: float) -> str:
    s = f"{v:.{KITTI_PRECISION}f}"
    return "0.00" if s == "-0.00" else s


def box_to_kitti(box: OrientedBox3, class_name: str = "Pedestrian", score: float | None = None,
                 extrinsic: RigidTransform | None = None) -> KittiLabelLine:
    """Express a base-frame box as a KITTI label relative to the sensor at ``extrinsic``."""
    local = box
    if extrinsic is not None:
        local = transform_box(extrinsic.inverse(), box)
    x, y, z = local.center
    d, w, h = local.extents
    bottom = (x, y, z - h / 2.0)
    location = (-bottom[1], -bottom[2], bottom[0])
    rotation_y = normalize_angle(-local.yaw - math.pi / 2.0)
    alpha = normalize_angle(rotation_y - math.atan2(location[0], location[2]))
    return KittiLabelLine(class_name, 0.0, 0, alpha, (-1.0, -1.0, -1.0, -1.0),
                          (h, w, d), location, rotation_y, score)


def kitti_to_box(label: KittiLabelLine, extrinsic: RigidTransform | None = None) -> OrientedBox3:
    """Inverse of :func:`box_to_kitti`."""
    h, w, d = label.dimensions
    cx, cy, cz = label.location
    center = (cz, -cx, -cy + h / 2.0)
    box = OrientedBox3(center, (d, w, h), -label.rotation_y - math.pi / 2.0)
    if extrinsic is not None:
        box = transform_box(extrinsic, box)
    return box


def format_kitti_label(label: KittiLabelLine) -> str:
    fields = [label.class_name, _fmt(label.truncated), str(int(label.occluded)), _fmt(label.alpha)]
    fields += [_fmt(v) for v in label.bbox2d]
    fields += [_fmt(v) for v in label.dimensions]
    fields += [_fmt(v) for v in label.location]
    fields.append(_fmt(label.rotation_y))
    if label.score is not None:
        fields.append(_fmt(label.score))
    return " ".join(fields)


def serialize_kitti_label(box: OrientedBox3, class_name: str = "Pedestrian",
                          score: float | None = None,
                          extrinsic: RigidTransform | None = None) -> str:
    return format_kitti_label(box_to_kitti(box, class_name, score, extrinsic))


def parse_kitti_label(line: str | bytes) -> KittiLabelLine:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 ({exc.reason})") from None
    parts = line.split()
    if len(parts) not in (15, 16):
        raise FormatError(f"expected 15 or 16 fields, got {len(parts)}")
    names = ["truncated", "occluded", "alpha", "x1", "y1", "x2", "y2", "h", "w", "l",
             "x", "y", "z", "rotation_y", "score"]
    values = []
    for name, text in zip(names, parts[1:]):
        try:
            v = int(text) if name == "occluded" else float(text)
        except ValueError:
            raise FormatError(f"not numeric: {text!r}", field=name) from None
        if name != "occluded" and not math.isfinite(v):
            raise FormatError(f"must be finite: {text!r}", field=name)
        values.append(v)
    return KittiLabelLine(
        class_name=parts[0], truncated=values[0], occluded=values[1], alpha=values[2],
        bbox2d=tuple(values[3:7]), dimensions=tuple(values[7:10]),
        location=tuple(values[10:13]), rotation_y=values[13],
        score=values[14] if len(values) == 15 else None,
    )


def read_kitti_labels(path: str | Path) -> list[KittiLabelLine]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(parse_kitti_label(line))
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}", lineno) from None
    return out


def with_ignore(records: Sequence[GroundtruthRecord], flags: Sequence[bool]) -> list[GroundtruthRecord]:
    return [replace(r, ignore=bool(f)) for r, f in zip(records, flags)]
