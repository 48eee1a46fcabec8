"""Rigid-body math, pinhole projection, and calibration error metrics.

Conventions used throughout the package:

* A ``RigidTransform`` maps points from its source frame into its target
  frame via ``p_target = R @ p_source + t``.
* Euler angles follow the fixed-axis z-y-x sequence (yaw about z first,
  then pitch about y, then roll about x), i.e.
  ``R = Rx(roll) @ Ry(pitch) @ Rz(yaw)``. Angles are wrapped to (-pi, pi].
  This sequence is singular at pitch = +-90 deg, far from the front-facing
  LiDAR-camera arrangement; the intrinsic z-y-x alternative is singular
  exactly at that arrangement, which would make Euler-difference error
  metrics meaningless for the poses this package calibrates.
* Pixel coordinates are (u, v) with u along image columns (x) and v along
  rows (y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Points closer to the image plane than this are treated as unprojectable.
DEPTH_EPSILON = 1e-6

ORTHONORMAL_TOL = 1e-9


class GeometryError(ValueError):
    pass


def wrap_angle(a):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    wrapped = np.mod(-a + np.pi, 2.0 * np.pi)
    out = -(wrapped - np.pi)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose relating two named coordinate frames."""

    rotation: np.ndarray
    translation: np.ndarray
    source_frame: str = "source"
    target_frame: str = "target"

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise GeometryError("rotation determinant is not +1")
        R = R.copy()
        t = t.copy()
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, frame="any", target=None):
        return cls(np.eye(3), np.zeros(3), frame, target or frame)

    @classmethod
    def from_matrix(cls, M, source_frame="source", target_frame="target"):
        M = np.asarray(M, dtype=float).reshape(4, 4)
        if not np.allclose(M[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise GeometryError("homogeneous matrix has malformed last row")
        return cls(M[:3, :3], M[:3, 3], source_frame, target_frame)

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other):
        """Return self @ other, mapping other.source_frame to self.target_frame."""
        if other.target_frame != self.source_frame:
            raise GeometryError(
                f"frame mismatch: cannot compose {self.source_frame}<-... with "
                f"...->{other.target_frame}"
            )
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            other.source_frame,
            self.target_frame,
        )

    def invert(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation, self.target_frame, self.source_frame)

    def apply(self, points):
        """Transform one point (3,) or many points (N, 3)."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters (no distortion model)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise GeometryError("principal point outside image bounds")

    @property
    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @classmethod
    def from_matrix(cls, K, width, height):
        K = np.asarray(K, dtype=float).reshape(3, 3)
        return cls(K[0, 0], K[1, 1], K[0, 2], K[1, 2], int(width), int(height))


@dataclass(frozen=True)
class LidarPoint:
    """One LiDAR return: position in the LiDAR frame plus reflectance intensity."""

    position: np.ndarray
    intensity: float

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        object.__setattr__(self, "position", p)
        if not math.isfinite(self.intensity) or self.intensity < 0:
            raise GeometryError("intensity must be finite and non-negative")


def cloud_to_array(cloud):
    """Normalize a point cloud to an (N, 4) float array of x, y, z, intensity."""
    if isinstance(cloud, np.ndarray):
        arr = np.asarray(cloud, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise GeometryError("cloud array must have shape (N, 4)")
        return arr
    arr = np.empty((len(cloud), 4), dtype=float)
    for i, pt in enumerate(cloud):
        arr[i, :3] = pt.position
        arr[i, 3] = pt.intensity
    return arr


@dataclass(frozen=True)
class EulerAngles:
    """Fixed-axis z-y-x angles in radians, each wrapped to (-pi, pi]."""

    yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))
        object.__setattr__(self, "pitch", float(wrap_angle(self.pitch)))
        object.__setattr__(self, "roll", float(wrap_angle(self.roll)))

    @property
    def vector(self):
        return np.array([self.yaw, self.pitch, self.roll])


def rotation_from_euler(e: EulerAngles) -> np.ndarray:
    cy, sy = math.cos(e.yaw), math.sin(e.yaw)
    cp, sp = math.cos(e.pitch), math.sin(e.pitch)
    cr, sr = math.cos(e.roll), math.sin(e.roll)
    return np.array(
        [
            [cp * cy, -cp * sy, sp],
            [cr * sy + sr * sp * cy, cr * cy - sr * sp * sy, -sr * cp],
            [sr * sy - cr * sp * cy, sr * cy + cr * sp * sy, cr * cp],
        ]
    )


def euler_from_rotation(R) -> EulerAngles:
    R = np.asarray(R, dtype=float)
    sp = min(1.0, max(-1.0, R[0, 2]))
    pitch = math.asin(sp)
    if abs(sp) < 1.0 - 1e-10:
        roll = math.atan2(-R[1, 2], R[2, 2])
        yaw = math.atan2(-R[0, 1], R[0, 0])
    else:
        # Gimbal lock: roll and yaw are coupled; put everything into roll.
        roll = math.atan2(R[2, 1], R[1, 1])
        yaw = 0.0
    return EulerAngles(yaw, pitch, roll)


def project_point(p, K: Intrinsics):
    """Project a camera-frame point to a pixel. Returns None for non-positive depth."""
    p = np.asarray(p, dtype=float)
    z = p[2]
    if z <= DEPTH_EPSILON:
        return None
    return np.array([K.fx * p[0] / z + K.cx, K.fy * p[1] / z + K.cy])


def project_points(points, K: Intrinsics):
    """Vectorized projection of (N, 3) camera-frame points.

    Returns (pixels (N, 2), valid (N,) bool); pixels of invalid points are NaN.
    """
    pts = np.asarray(points, dtype=float)
    z = pts[:, 2]
    valid = z > DEPTH_EPSILON
    pix = np.full((len(pts), 2), np.nan)
    zc = np.where(valid, z, 1.0)
    pix[:, 0] = np.where(valid, K.fx * pts[:, 0] / zc + K.cx, np.nan)
    pix[:, 1] = np.where(valid, K.fy * pts[:, 1] / zc + K.cy, np.nan)
    return pix, valid


def unproject_pixel(pixel, depth, K: Intrinsics):
    """Back-project a pixel at a known depth into the camera frame."""
    u, v = pixel
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def transform_point(T: RigidTransform, p):
    return T.apply(p)


def canonical_virtual_pose(source_frame="lidar", target_frame="virtual_camera"):
    """Default virtual-camera pose looking down the LiDAR +x axis.

    Maps LiDAR x-forward / y-left / z-up onto camera z-forward / x-right /
    y-down, with zero translation.
    """
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return RigidTransform(R, np.zeros(3), source_frame, target_frame)


def _check_frames(estimated: RigidTransform, truth: RigidTransform):
    if (estimated.source_frame, estimated.target_frame) != (
        truth.source_frame,
        truth.target_frame,
    ):
        raise GeometryError("error metrics require the same frame pair")


def rotation_error(estimated: RigidTransform, truth: RigidTransform) -> float:
    """Norm of the componentwise-wrapped Euler-vector difference, in radians."""
    _check_frames(estimated, truth)
    r_est = euler_from_rotation(estimated.rotation).vector
    r_true = euler_from_rotation(truth.rotation).vector
    return float(np.linalg.norm(wrap_angle(r_est - r_true)))


def translation_error(estimated: RigidTransform, truth: RigidTransform) -> float:
    """Distance between the two sensor positions expressed in the source frame.

    For a point transform p_cam = R p + t the camera position in the source
    frame is -R^-1 t, so the metric is ||-R*^-1 t* + R^-1 t||.
    """
    _check_frames(estimated, truth)
    c_est = -estimated.rotation.T @ estimated.translation
    c_true = -truth.rotation.T @ truth.translation
    return float(np.linalg.norm(c_est - c_true))
