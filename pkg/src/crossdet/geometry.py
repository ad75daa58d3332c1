"""Rigid transforms, yaw-only oriented boxes, angle representations and FOV sectors.

Frames follow the usual robotics convention: x forward, y left, z up.  All
value types are immutable; the arrays they hold are flagged read-only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
ORTHONORMAL_TOL = 1e-9
DEFAULT_TILT_TOL = 1e-6


def normalize_angle(angle: float) -> float:
    """Wrap an angle into the half-open interval (-pi, pi]."""
    a = math.remainder(float(angle), TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    return a


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TransformError(ValueError):
    """Raised for invalid rotations or transforms rejected in strict mode."""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p' = R p + t``.

    ``rotation`` must be orthonormal with determinant +1 (checked to 1e-9).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise TransformError("transform contains non-finite values")
        if np.max(np.abs(r @ r.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise TransformError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise TransformError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(yaw_matrix(yaw), np.asarray(translation, dtype=float))

    @classmethod
    def from_matrix(cls, matrix, project: bool = False) -> RigidTransform:
        """Build from a 4x4 homogeneous matrix (or 16 row-major numbers).

        With ``project=True`` the 3x3 block is snapped onto the nearest
        rotation via SVD first, which absorbs rounding in calibration files.
        """
        m = np.asarray(matrix, dtype=float).reshape(4, 4)
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise TransformError("last row of homogeneous matrix must be [0, 0, 0, 1]")
        r = m[:3, :3]
        if project:
            u, _, vt = np.linalg.svd(r)
            d = np.sign(np.linalg.det(u @ vt))
            r = u @ np.diag([1.0, 1.0, d]) @ vt
        return cls(r, m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return ``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    @property
    def tilt(self) -> float:
        """Angle between the rotated and the original z axis (roll/pitch magnitude)."""
        r = self.rotation
        return math.atan2(math.hypot(r[0, 2], r[1, 2]), r[2, 2])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __repr__(self) -> str:
        return f"RigidTransform(yaw={self.yaw:.6f}, tilt={self.tilt:.2e}, t={self.translation.tolist()})"


@dataclass(frozen=True)
class OrientedBox3:
    """Yaw-only 3D box: centroid, extents ``(d, w, h)`` along local x/y/z, yaw about z."""

    center: tuple[float, float, float]
    extents: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        center = tuple(float(c) for c in self.center)
        extents = tuple(float(e) for e in self.extents)
        if len(center) != 3 or len(extents) != 3:
            raise ValueError("center and extents must be 3-vectors")
        if not all(math.isfinite(v) for v in center + extents) or not math.isfinite(self.yaw):
            raise ValueError("box parameters must be finite")
        if min(extents) <= 0.0:
            raise ValueError(f"box extents must be strictly positive, got {extents}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def ground_range(self) -> float:
        return math.hypot(self.center[0], self.center[1])


@dataclass(frozen=True)
class Biternion:
    """Angle as a 2-vector ``(cos, sin)``; need not be unit length until normalized."""

    cos_component: float
    sin_component: float

    @classmethod
    def from_yaw(cls, yaw: float) -> Biternion:
        return cls(math.cos(yaw), math.sin(yaw))

    @property
    def norm(self) -> float:
        return math.hypot(self.cos_component, self.sin_component)

    def normalized(self) -> Biternion:
        n = self.norm
        if n == 0.0:
            raise ValueError("cannot normalize a zero biternion")
        return Biternion(self.cos_component / n, self.sin_component / n)

    def to_yaw(self) -> float:
        return math.atan2(self.sin_component, self.cos_component)


@dataclass(frozen=True)
class SectorFov:
    """Horizontal field of view: bearing sector around ``forward_yaw`` plus range bounds."""

    forward_yaw: float
    half_angle: float
    min_range: float = 0.0
    max_range: float = math.inf

    def __post_init__(self) -> None:
        if not 0.0 < self.half_angle <= math.pi:
            raise ValueError(f"half_angle must lie in (0, pi], got {self.half_angle}")
        if self.min_range < 0.0 or not self.max_range > self.min_range:
            raise ValueError("require 0 <= min_range < max_range")

    @classmethod
    def from_degrees(cls, forward_deg: float, half_angle_deg: float,
                     min_range: float = 0.0, max_range: float = math.inf) -> SectorFov:
        return cls(math.radians(forward_deg), math.radians(half_angle_deg), min_range, max_range)

    def contains_xy(self, x: float, y: float) -> bool:
        """Membership test for a point already expressed in the sensor frame."""
        r = math.hypot(x, y)
        if r < self.min_range or r > self.max_range:
            return False
        offset = normalize_angle(math.atan2(y, x) - self.forward_yaw)
        return abs(offset) <= self.half_angle

    def contains_array(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        r = np.hypot(xy[:, 0], xy[:, 1])
        offset = np.arctan2(xy[:, 1], xy[:, 0]) - self.forward_yaw
        # wrap into [-pi, pi]; the sign is irrelevant after abs()
        offset = np.abs(np.remainder(offset + math.pi, TWO_PI) - math.pi)
        return (r >= self.min_range) & (r <= self.max_range) & (offset <= self.half_angle)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``(N, 4)`` array of ``x, y, z, intensity`` stored as float64."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"point cloud must have shape (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        if np.any(pts[:, 3] < 0.0):
            raise ValueError("point intensities must be non-negative")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def transformed(self, t: RigidTransform) -> PointCloud:
        out = self.points.copy()
        out[:, :3] = t.apply(self.xyz)
        return PointCloud(out)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return bool(np.array_equal(self.points, other.points))


def transform_point(t: RigidTransform, p: Sequence[float]) -> np.ndarray:
    return t.rotation @ np.asarray(p, dtype=float) + t.translation


def transform_box(t: RigidTransform, box: OrientedBox3, strict: bool = True,
                  tilt_tol: float = DEFAULT_TILT_TOL) -> OrientedBox3:
    """Move a box by ``t`` keeping only the yaw part of its rotation.

    Raises:
        TransformError: in strict mode, when ``t`` carries roll/pitch above ``tilt_tol``.
    """
    if strict and t.tilt > tilt_tol:
        raise TransformError(
            f"transform has roll/pitch of {t.tilt:.3e} rad, above tolerance {tilt_tol:.1e}"
        )
    center = transform_point(t, box.center)
    return OrientedBox3(tuple(center), box.extents, box.yaw + t.yaw)


def points_in_obb_mask(cloud: PointCloud | np.ndarray, box: OrientedBox3) -> np.ndarray:
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)[:, :3]
    rel = xyz - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # inverse yaw rotation into the box frame
    local_x = c * rel[:, 0] + s * rel[:, 1]
    local_y = -s * rel[:, 0] + c * rel[:, 1]
    d, w, h = box.extents
    return (
        (np.abs(local_x) <= d / 2.0)
        & (np.abs(local_y) <= w / 2.0)
        & (np.abs(rel[:, 2]) <= h / 2.0)
    )


def points_in_obb(cloud: PointCloud | np.ndarray, box: OrientedBox3) -> int:
    """Count points inside the closed box (boundary points count as inside)."""
    return int(np.count_nonzero(points_in_obb_mask(cloud, box)))


def point_in_fov(fov: SectorFov, sensor_pose: RigidTransform, p: Sequence[float]) -> bool:
    """Is ``p`` (base frame) inside the sector of the sensor at ``sensor_pose`` (sensor to base)?"""
    local = sensor_pose.rotation.T @ (np.asarray(p, dtype=float) - sensor_pose.translation)
    return fov.contains_xy(local[0], local[1])


def rotate_scene(cloud: PointCloud, boxes: Sequence[OrientedBox3],
                 yaw: float) -> tuple[PointCloud, list[OrientedBox3]]:
    """Rotate cloud and boxes jointly about the vertical axis through the origin."""
    t = RigidTransform.from_yaw(yaw)
    return cloud.transformed(t), [transform_box(t, b) for b in boxes]
