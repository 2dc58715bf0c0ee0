"""Pinhole camera frames and SE(3) pose utilities.

Poses are camera-to-world 4x4 matrices. In camera space +z points forward,
+x right and +y down.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

SE3_TOL = 1e-9


def check_se3(pose, where: str = "pose", tol: float = SE3_TOL) -> np.ndarray:
    """Validate a rigid 4x4 transform and return it as a float64 array.

    Diagnostics name the offending axis so a bad manifest entry can be fixed
    without guessing.
    """
    T = np.asarray(pose, dtype=np.float64)
    if T.shape == (16,):
        T = T.reshape(4, 4)
    if T.shape != (4, 4):
        raise ValidationError(f"{where}: expected a 4x4 matrix, got shape {T.shape}")
    if not np.all(np.isfinite(T)):
        raise ValidationError(f"{where}: non-finite entries")
    if not np.allclose(T[3], (0.0, 0.0, 0.0, 1.0), rtol=0, atol=tol):
        raise ValidationError(f"{where}: bottom row must be [0 0 0 1], got {T[3].tolist()}")
    R = T[:3, :3]
    axes = "xyz"
    for k in range(3):
        norm = np.linalg.norm(R[:, k])
        if abs(norm - 1.0) > tol:
            raise ValidationError(
                f"{where}: rotation {axes[k]}-axis column has norm {norm:.12g}, expected 1"
            )
    for a, b in ((0, 1), (0, 2), (1, 2)):
        dot = float(R[:, a] @ R[:, b])
        if abs(dot) > tol:
            raise ValidationError(
                f"{where}: rotation {axes[a]}- and {axes[b]}-axis columns are not "
                f"orthogonal (dot = {dot:.3g})"
            )
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise ValidationError(f"{where}: rotation determinant is {det:.12g}, expected +1")
    return T


def invert_se3(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def make_pose(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


@dataclass(frozen=True, eq=False)
class CameraFrame:
    pose: np.ndarray  # 4x4 camera-to-world
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    frame_index: int = 0
    view_id: int = 0

    def __post_init__(self):
        where = f"camera (frame {self.frame_index}, view {self.view_id})"
        pose = check_se3(self.pose, where)
        pose.flags.writeable = False
        object.__setattr__(self, "pose", pose)
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"{where}: focal lengths must be > 0")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValidationError(f"{where}: width/height must be integers")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"{where}: width/height must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(f"{where}: principal point ({self.cx}, {self.cy}) outside the image")

    @property
    def world_to_camera(self) -> np.ndarray:
        return invert_se3(self.pose)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (n, 3) into this camera's coordinates."""
        R, t = self.pose[:3, :3], self.pose[:3, 3]
        return (np.asarray(points, dtype=np.float64) - t) @ R
