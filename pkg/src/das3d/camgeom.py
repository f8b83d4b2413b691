"""Pinhole camera, pose containers and depth normalization.

Units: image coordinates in px, depth and camera space in mm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    cx: float
    cy: float

    def __post_init__(self):
        if not self.f > 0:
            raise GeometryError(f"focal length must be positive, got {self.f}")

    def to_dict(self) -> dict:
        return {"f": float(self.f), "cx": float(self.cx), "cy": float(self.cy)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["f"]), float(d["cx"]), float(d["cy"]))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Pose3D:
    """K joints as (x px, y px, d mm) in image coordinates."""

    joints: np.ndarray
    root_index: int = 0
    valid: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        j = _frozen(self.joints)
        if j.ndim != 2 or j.shape[1] != 3 or j.shape[0] < 2:
            raise GeometryError(f"Pose3D needs (K>=2, 3) joints, got {j.shape}")
        if not 0 <= self.root_index < j.shape[0]:
            raise GeometryError(f"root_index {self.root_index} out of range for K={j.shape[0]}")
        object.__setattr__(self, "joints", j)
        if self.valid is not None:
            object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))

    @property
    def K(self) -> int:
        return self.joints.shape[0]

    @property
    def root(self) -> np.ndarray:
        return self.joints[self.root_index]


@dataclass(frozen=True)
class CameraPose3D:
    """K joints as (X, Y, Z) mm in the camera frame."""

    joints: np.ndarray
    root_index: int = 0

    def __post_init__(self):
        j = _frozen(self.joints)
        if j.ndim != 2 or j.shape[1] != 3:
            raise GeometryError(f"CameraPose3D needs (K, 3) joints, got {j.shape}")
        if not np.all(np.isfinite(j)):
            raise GeometryError("camera-space joints must be finite")
        object.__setattr__(self, "joints", j)

    @property
    def K(self) -> int:
        return self.joints.shape[0]

    @property
    def root(self) -> np.ndarray:
        return self.joints[self.root_index]


def project(points, intr: CameraIntrinsics) -> np.ndarray:
    """(..., 3) camera-space mm -> (..., 3) of (x px, y px, d mm)."""
    p = np.asarray(points, dtype=np.float64)
    Z = p[..., 2]
    if np.any(Z <= 0):
        raise GeometryError("point behind camera (Z <= 0)")
    x = intr.f * p[..., 0] / Z + intr.cx
    y = intr.f * p[..., 1] / Z + intr.cy
    return np.stack([x, y, Z], axis=-1)


def back_project(points, intr: CameraIntrinsics) -> np.ndarray:
    """(..., 3) of (x px, y px, d mm) -> (..., 3) camera-space mm."""
    q = np.asarray(points, dtype=np.float64)
    d = q[..., 2]
    if np.any(d <= 0):
        raise GeometryError("depth must be positive")
    X = (q[..., 0] - intr.cx) * d / intr.f
    Y = (q[..., 1] - intr.cy) * d / intr.f
    return np.stack([X, Y, d], axis=-1)


def normalize_depth(d, f: float):
    if not f > 0:
        raise GeometryError(f"focal length must be positive, got {f}")
    return np.asarray(d, dtype=np.float64) / f if np.ndim(d) else float(d) / f


def denormalize_depth(d_norm, f: float):
    if not f > 0:
        raise GeometryError(f"focal length must be positive, got {f}")
    return np.asarray(d_norm, dtype=np.float64) * f if np.ndim(d_norm) else float(d_norm) * f


def pose_to_camera(pose: Pose3D, intr: CameraIntrinsics) -> CameraPose3D:
    return CameraPose3D(back_project(pose.joints, intr), pose.root_index)


def camera_to_pose(cam: CameraPose3D, intr: CameraIntrinsics) -> Pose3D:
    return Pose3D(project(cam.joints, intr), cam.root_index)
