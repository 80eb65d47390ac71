"""Pinhole camera model: back-projection of depth pixels to world space
and re-projection of world points into camera frames.

Coordinate conventions
======================
Camera frame (standard pinhole): +z forward along the optical axis,
+x right, +y down.  Poses are stored camera-to-world: a camera-frame
point q maps to the world as ``R @ q + t``.

Pixels are sampled at their integer coordinates; no half-pixel center
offset is applied, so (u, v) maps straight through the intrinsics in
both directions.

All operations are pure functions over immutable inputs and are safe to
call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from semfield.errors import BoundsError, InvalidInputError

_ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform.

    rotation: 3x3 orthonormal matrix with determinant +1 (checked to 1e-6).
    translation: camera center in world meters.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise InvalidInputError(f"rotation must be 3x3, got {rot.shape}")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise InvalidInputError("pose contains non-finite values")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHONORMAL_TOL:
            raise InvalidInputError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHONORMAL_TOL:
            raise InvalidInputError("rotation determinant must be +1 within 1e-6")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "Pose":
        """Build from a row-major 4x4 camera-to-world homogeneous matrix."""
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (4, 4):
            raise InvalidInputError(f"pose matrix must be 4x4, got {mat.shape}")
        if np.max(np.abs(mat[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > _ORTHONORMAL_TOL:
            raise InvalidInputError("pose matrix bottom row must be [0, 0, 0, 1]")
        return cls(mat[:3, :3], mat[:3, 3])

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat


@dataclass(frozen=True)
class DepthImage:
    """Per-pixel depth in meters with a validity mask.

    Invalid pixels (mask False) are excluded from every back-projection.
    Valid depths must be finite and strictly positive.
    """

    values: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise InvalidInputError(f"depth must be HxW, got shape {values.shape}")
        if self.valid is None:
            valid = np.isfinite(values) & (values > 0)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != values.shape:
                raise InvalidInputError(
                    f"validity mask shape {valid.shape} != depth shape {values.shape}"
                )
        masked = values[valid]
        if masked.size and not (np.all(np.isfinite(masked)) and np.all(masked > 0)):
            raise InvalidInputError("valid depths must be finite and > 0")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_millimeters(cls, mm: np.ndarray) -> "DepthImage":
        """Convert a 16-bit integer millimeter raster; zero means invalid."""
        mm = np.asarray(mm)
        valid = mm > 0
        return cls(mm.astype(np.float32) / 1000.0, valid)


@dataclass(frozen=True)
class Point3:
    """A world-space point in meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise InvalidInputError(f"point has non-finite components: ({self.x}, {self.y}, {self.z})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Point3":
        arr = np.asarray(arr, dtype=np.float64).reshape(3)
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))


def backproject_pixel(u: float, v: float, depth: float, k: CameraIntrinsics, pose: Pose) -> Point3:
    """Lift one depth pixel into world coordinates.

    Returns ``R @ (depth * [(u-cx)/fx, (v-cy)/fy, 1]) + t``.
    """
    if not (math.isfinite(depth) and depth > 0):
        raise InvalidInputError(f"depth must be finite and > 0, got {depth}")
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise BoundsError(f"pixel ({u}, {v}) outside image {k.width}x{k.height}")
    ray = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    world = pose.rotation @ (depth * ray) + pose.translation
    return Point3.from_array(world)


def backproject_frame_arrays(
    depth: DepthImage, k: CameraIntrinsics, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized back-projection of every valid pixel.

    Returns (pixels, points): pixels is (N, 2) int64 (u, v) in row-major
    pixel order, points is (N, 3) float64 world coordinates.
    """
    if (depth.height, depth.width) != (k.height, k.width):
        raise InvalidInputError(
            f"depth image {depth.height}x{depth.width} does not match "
            f"intrinsics {k.height}x{k.width}"
        )
    vv, uu = np.nonzero(depth.valid)  # row-major order
    d = depth.values[vv, uu].astype(np.float64)
    rays = np.stack(
        [(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(d)], axis=1
    )
    cam = rays * d[:, None]
    points = cam @ pose.rotation.T + pose.translation
    pixels = np.stack([uu, vv], axis=1).astype(np.int64)
    return pixels, points


def backproject_frame(
    depth: DepthImage, k: CameraIntrinsics, pose: Pose
) -> list[tuple[tuple[int, int], Point3]]:
    """Back-project a whole frame; one ((u, v), point) entry per valid pixel,
    in row-major pixel order."""
    pixels, points = backproject_frame_arrays(depth, k, pose)
    return [
        ((int(u), int(v)), Point3.from_array(p)) for (u, v), p in zip(pixels, points)
    ]


def project_point(p: Point3, k: CameraIntrinsics, pose: Pose) -> tuple[float, float, float] | None:
    """Project a world point into the camera; inverse of backproject_pixel.

    Returns (u, v, depth) with depth the camera-frame z, or None when the
    point is behind the camera (z <= 0).
    """
    cam = pose.rotation.T @ (p.as_array() - pose.translation)
    z = cam[2]
    if z <= 0:
        return None
    u = k.fx * cam[0] / z + k.cx
    v = k.fy * cam[1] / z + k.cy
    return (float(u), float(v), float(z))
