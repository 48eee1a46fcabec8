"""Target-free LiDAR-camera extrinsic calibration via cross-modal mask matching."""

from .geometry import (
    EulerAngles,
    Intrinsics,
    LidarPoint,
    RigidTransform,
    canonical_virtual_pose,
    rotation_error,
    translation_error,
)

__all__ = [
    "EulerAngles",
    "Intrinsics",
    "LidarPoint",
    "RigidTransform",
    "canonical_virtual_pose",
    "rotation_error",
    "translation_error",
]

__version__ = "0.1.0"
