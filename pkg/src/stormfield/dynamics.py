"""Time evolution of a weather field.

Particles move with constant velocity, are recycled when they leave the
field box, and the whole field is rigidly re-posed with the camera so a
compact box of particles can cover an arbitrarily long drive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraFrame, check_se3, invert_se3
from .errors import ValidationError
from .field import FieldBounds, ParticleSet, WeatherFieldConfig, sample_field

ROT_TOL = 1e-9


@dataclass(frozen=True)
class Toggles:
    """Ablation switches; all on reproduces the full pipeline."""

    attributes: bool = True
    dynamics: bool = True
    alignment: bool = True

    def to_dict(self) -> dict:
        return {"attributes": self.attributes, "dynamics": self.dynamics, "alignment": self.alignment}


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("rigid transform needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("rigid transform has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ROT_TOL:
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ROT_TOL:
            raise ValidationError("rotation determinant must be +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def _check_dt(dt: float) -> float:
    dt = float(dt)
    if not math.isfinite(dt) or dt <= 0:
        raise ValidationError(f"time step must be a positive finite number, got {dt}")
    return dt


def step(particles: ParticleSet, dt: float) -> ParticleSet:
    """Advance every particle by ``velocity * dt``."""
    dt = _check_dt(dt)
    return particles.replace(positions=particles.positions + particles.velocities * dt)


def recycle_positions(positions: np.ndarray, lo, hi, offset: float):
    """Per-axis reset of coordinates that left ``[lo, hi]``.

    Below ``lo`` resets to ``hi - offset``; above ``hi`` resets to
    ``lo + offset``. Returns the new positions and a boolean row mask of the
    particles that changed.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    offset = float(offset)
    if not math.isfinite(offset) or offset < 0:
        raise ValidationError(f"recycle offset must be >= 0, got {offset}")
    bad = offset >= hi - lo
    if np.any(bad):
        axis = "xyz"[int(np.argmax(bad))]
        raise ValidationError(
            f"recycle offset {offset} must be smaller than the {axis}-axis extent {(hi - lo)[np.argmax(bad)]}"
        )
    below = positions < lo
    above = positions > hi
    out = np.where(below, hi - offset, positions)
    out = np.where(above, lo + offset, out)
    return out, np.any(below | above, axis=1)


def recycle(particles: ParticleSet, bounds: FieldBounds, offset: float) -> ParticleSet:
    new, changed = recycle_positions(particles.positions, bounds.lo, bounds.hi, offset)
    if not changed.any():
        return particles
    return particles.replace(positions=new)


def _pose_matrix(pose) -> np.ndarray:
    if isinstance(pose, CameraFrame):
        return pose.pose
    return check_se3(pose)


def relative_transform(pose_ref, pose_now) -> RigidTransform:
    """Rigid motion taking the reference camera onto the current one.

    Accepts ``CameraFrame`` objects or raw camera-to-world matrices and
    returns ``T_now @ inv(T_ref)``.
    """
    T_ref = _pose_matrix(pose_ref)
    T_now = _pose_matrix(pose_now)
    delta = T_now @ invert_se3(T_ref)
    R = delta[:3, :3]
    # re-orthonormalize so rounding in the product never trips validation
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, delta[:3, 3])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (w, x, y, z) quaternions, broadcasting over rows."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    return np.array([w, x, y, z])


def align_field(particles: ParticleSet, xform: RigidTransform) -> ParticleSet:
    """Re-pose the field rigidly: positions map to ``R p + t`` and each
    particle's orientation is pre-multiplied by ``R``."""
    q = quat_multiply(matrix_to_quat(xform.rotation), particles.rotations)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return particles.replace(positions=xform.apply(particles.positions), rotations=q)


def place_in_world(local: ParticleSet, field_pose: np.ndarray) -> ParticleSet:
    """Move a field sampled in its local frame to world coordinates.

    Unlike ``align_field`` this also rotates the velocities, since the
    configured velocity is expressed in the field's own frame.
    """
    xf = RigidTransform.from_matrix(field_pose)
    placed = align_field(local, xf)
    return placed.replace(velocities=local.velocities @ xf.rotation.T)


def recycle_in_frame(particles: ParticleSet, bounds: FieldBounds, offset: float,
                     field_pose: np.ndarray) -> ParticleSet:
    """Recycle against a box that lives in the frame ``field_pose``.

    Only rows that were actually reset are written back, so particles that
    stay inside keep their world coordinates bit-for-bit.
    """
    R, t = field_pose[:3, :3], field_pose[:3, 3]
    local = (particles.positions - t) @ R
    new_local, changed = recycle_positions(local, bounds.lo, bounds.hi, offset)
    if not changed.any():
        return particles
    positions = particles.positions.copy()
    positions[changed] = new_local[changed] @ R.T + t
    return particles.replace(positions=positions)


def simulate(config: WeatherFieldConfig, trajectory: Sequence[CameraFrame], dt: float,
             seed: int, toggles: Toggles = Toggles()) -> list[ParticleSet]:
    """Run the field along a camera trajectory, one particle set per pose.

    The field is sampled in the first camera's frame (bounds and velocity
    are camera-relative) and emitted as-is for frame 0. Every later frame
    applies, in order: alignment by the consecutive-pose delta, a velocity
    step, and recycling against the bounds carried along with the field.
    """
    if len(trajectory) == 0:
        raise ValidationError("trajectory must contain at least one camera")
    dt = _check_dt(dt)
    field_pose = _pose_matrix(trajectory[0]).copy()
    particles = place_in_world(sample_field(config, seed, attributes=toggles.attributes), field_pose)
    frames = [particles]
    for prev, cur in zip(trajectory[:-1], trajectory[1:]):
        if toggles.alignment:
            xf = relative_transform(prev, cur)
            particles = align_field(particles, xf)
            field_pose = xf.as_matrix() @ field_pose
        if toggles.dynamics:
            particles = step(particles, dt)
            particles = recycle_in_frame(particles, config.bounds, config.recycle_offset, field_pose)
        frames.append(particles)
    return frames
