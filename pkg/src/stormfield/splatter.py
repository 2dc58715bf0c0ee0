"""Software Gaussian splatting: pinhole projection plus depth-sorted
front-to-back alpha compositing over a background frame.

Frames are float64 arrays of shape (height, width, 3) with values in [0, 1].
Pixel (row y, column x) samples the splat footprint at image coordinate
(x, y).
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numba
import numpy as np

from .camera import CameraFrame
from .errors import ValidationError
from .field import ParticleSet

NEAR_PLANE = 0.05  # meters
CUTOFF = 18.0  # squared Mahalanobis radius beyond which a splat contributes nothing
TILE = 16

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the system TBB is too old for numba; skip it instead of warning
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@dataclass(frozen=True)
class Splat2D:
    center: tuple[float, float]
    cov2d: np.ndarray
    depth: float
    color: tuple[float, float, float]
    opacity: float


@dataclass(frozen=True, eq=False)
class Splats:
    """Struct-of-arrays batch of projected splats.

    ``index`` maps each splat back to its particle row.
    """

    centers: np.ndarray  # (n, 2)
    covs: np.ndarray  # (n, 2, 2)
    depths: np.ndarray  # (n,)
    colors: np.ndarray  # (n, 3)
    opacities: np.ndarray  # (n,)
    index: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.depths)

    def __getitem__(self, i) -> Splat2D:
        return Splat2D(
            center=(float(self.centers[i, 0]), float(self.centers[i, 1])),
            cov2d=self.covs[i].copy(),
            depth=float(self.depths[i]),
            color=tuple(float(c) for c in self.colors[i]),
            opacity=float(self.opacities[i]),
        )

    @classmethod
    def from_list(cls, splats: Iterable[Splat2D]) -> "Splats":
        splats = list(splats)
        n = len(splats)
        return cls(
            centers=np.array([s.center for s in splats], dtype=np.float64).reshape(n, 2),
            covs=np.array([s.cov2d for s in splats], dtype=np.float64).reshape(n, 2, 2),
            depths=np.array([s.depth for s in splats], dtype=np.float64).reshape(n),
            colors=np.array([s.color for s in splats], dtype=np.float64).reshape(n, 3),
            opacities=np.array([s.opacity for s in splats], dtype=np.float64).reshape(n),
            index=np.arange(n),
        )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def project(particles: ParticleSet, camera: CameraFrame) -> Splats:
    """Project every particle; culled particles are simply absent.

    A particle is culled when its camera-space depth is at or below the near
    plane, its screen covariance is degenerate, or its footprint bounding box
    (out to the compositing cutoff) misses the image.
    """
    R_cam = camera.pose[:3, :3]
    p = camera.to_camera(particles.positions)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    keep = z > NEAR_PLANE
    idx = np.nonzero(keep)[0]
    x, y, z = x[idx], y[idx], z[idx]

    # world covariance R S^2 R^T, rotated into camera space, then J (.) J^T
    M = quat_to_matrix(particles.rotations[idx]) * particles.scales[idx][:, None, :]
    M = np.einsum("ji,njk->nik", R_cam, M)
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / z**2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / z**2
    T = J @ M
    covs = T @ np.swapaxes(T, 1, 2)

    centers = np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], axis=1)
    det = covs[:, 0, 0] * covs[:, 1, 1] - covs[:, 0, 1] ** 2
    rx = np.sqrt(CUTOFF * np.maximum(covs[:, 0, 0], 0.0))
    ry = np.sqrt(CUTOFF * np.maximum(covs[:, 1, 1], 0.0))
    visible = (
        np.isfinite(det) & (det > 0)
        & (centers[:, 0] + rx >= 0) & (centers[:, 0] - rx <= camera.width - 1)
        & (centers[:, 1] + ry >= 0) & (centers[:, 1] - ry <= camera.height - 1)
    )
    sel = idx[visible]
    return Splats(
        centers=centers[visible],
        covs=covs[visible],
        depths=z[visible],
        colors=particles.colors[sel],
        opacities=particles.opacities[sel],
        index=sel,
    )


def project_one(particles: ParticleSet, index: int, camera: CameraFrame) -> Optional[Splat2D]:
    """Project a single particle; ``None`` means it was culled."""
    sub = ParticleSet(
        positions=particles.positions[index:index + 1],
        rotations=particles.rotations[index:index + 1],
        scales=particles.scales[index:index + 1],
        colors=particles.colors[index:index + 1],
        opacities=particles.opacities[index:index + 1],
        velocities=particles.velocities[index:index + 1],
    )
    splats = project(sub, camera)
    return splats[0] if len(splats) else None


@numba.njit(cache=True)
def _bin_tiles(x0, x1, y0, y1, tiles_x, tiles_y):
    n = x0.shape[0]
    counts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    for k in range(n):
        for ty in range(y0[k] // TILE, y1[k] // TILE + 1):
            for tx in range(x0[k] // TILE, x1[k] // TILE + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    # k ascends in depth order, so each tile list comes out depth-sorted
    for k in range(n):
        for ty in range(y0[k] // TILE, y1[k] // TILE + 1):
            for tx in range(x0[k] // TILE, x1[k] // TILE + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = k
                fill[t] += 1
    return offsets, ids


@numba.njit(parallel=True, cache=True)
def _composite(bg, cx, cy, ca, cb, cc, colors, opac, offsets, ids, tiles_x, tiles_y, cutoff):
    h, w, _ = bg.shape
    out = np.empty_like(bg)
    for t in numba.prange(tiles_x * tiles_y):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        stop = offsets[t + 1]
        for py in range(ty * TILE, min((ty + 1) * TILE, h)):
            for px in range(tx * TILE, min((tx + 1) * TILE, w)):
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for j in range(start, stop):
                    k = ids[j]
                    dx = px - cx[k]
                    dy = py - cy[k]
                    q = ca[k] * dx * dx + 2.0 * cb[k] * dx * dy + cc[k] * dy * dy
                    if q > cutoff:
                        continue
                    alpha = opac[k] * np.exp(-0.5 * q)
                    r += colors[k, 0] * alpha * trans
                    g += colors[k, 1] * alpha * trans
                    b += colors[k, 2] * alpha * trans
                    trans *= 1.0 - alpha
                    if trans == 0.0:
                        break
                out[py, px, 0] = min(max(r + bg[py, px, 0] * trans, 0.0), 1.0)
                out[py, px, 1] = min(max(g + bg[py, px, 1] * trans, 0.0), 1.0)
                out[py, px, 2] = min(max(b + bg[py, px, 2] * trans, 0.0), 1.0)
    return out


def check_frame(frame, width: Optional[int] = None, height: Optional[int] = None,
                where: str = "frame") -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"{where}: expected an (height, width, 3) RGB array, got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValidationError(f"{where}: empty frame")
    if width is not None and (arr.shape[1], arr.shape[0]) != (width, height):
        raise ValidationError(
            f"{where}: size {arr.shape[1]}x{arr.shape[0]} does not match camera {width}x{height}"
        )
    return arr


def rasterize(splats: "Splats | Sequence[Splat2D]", background: np.ndarray) -> np.ndarray:
    """Composite splats front to back over ``background``.

    Splats are sorted by depth internally (ties keep input order). Pixels no
    splat reaches come out bit-identical to the background.
    """
    bg = np.ascontiguousarray(check_frame(background, where="background"))
    if not isinstance(splats, Splats):
        splats = Splats.from_list(splats)
    if len(splats) == 0:
        return bg.copy()
    for name in ("centers", "covs", "depths", "colors", "opacities"):
        if not np.all(np.isfinite(getattr(splats, name))):
            raise ValidationError(f"splat {name} must be finite")
    h, w, _ = bg.shape
    order = np.argsort(splats.depths, kind="stable")
    centers = splats.centers[order]
    covs = splats.covs[order]
    det = covs[:, 0, 0] * covs[:, 1, 1] - covs[:, 0, 1] * covs[:, 1, 0]
    if np.any(det <= 0) or np.any(covs[:, 0, 0] <= 0):
        raise ValidationError("splat covariances must be positive definite")
    ca = covs[:, 1, 1] / det
    cb = -0.5 * (covs[:, 0, 1] + covs[:, 1, 0]) / det
    cc = covs[:, 0, 0] / det
    rx = np.sqrt(CUTOFF * covs[:, 0, 0])
    ry = np.sqrt(CUTOFF * covs[:, 1, 1])
    x0 = np.clip(np.ceil(centers[:, 0] - rx), 0, w - 1).astype(np.int64)
    x1 = np.clip(np.floor(centers[:, 0] + rx), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.ceil(centers[:, 1] - ry), 0, h - 1).astype(np.int64)
    y1 = np.clip(np.floor(centers[:, 1] + ry), 0, h - 1).astype(np.int64)
    onscreen = (
        (centers[:, 0] + rx >= 0) & (centers[:, 0] - rx <= w - 1)
        & (centers[:, 1] + ry >= 0) & (centers[:, 1] - ry <= h - 1)
        & (x0 <= x1) & (y0 <= y1)
    )
    x0, x1, y0, y1 = x0[onscreen], x1[onscreen], y0[onscreen], y1[onscreen]
    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE
    offsets, ids = _bin_tiles(x0, x1, y0, y1, tiles_x, tiles_y)
    sel = order[onscreen]
    return _composite(
        bg,
        np.ascontiguousarray(centers[onscreen, 0]),
        np.ascontiguousarray(centers[onscreen, 1]),
        np.ascontiguousarray(ca[onscreen]),
        np.ascontiguousarray(cb[onscreen]),
        np.ascontiguousarray(cc[onscreen]),
        np.ascontiguousarray(np.clip(splats.colors[sel], 0.0, 1.0)),
        np.ascontiguousarray(np.clip(splats.opacities[sel], 0.0, 1.0)),
        offsets, ids, tiles_x, tiles_y, CUTOFF,
    )


def render_frame(particles: ParticleSet, camera: CameraFrame, background: np.ndarray) -> np.ndarray:
    bg = check_frame(background, camera.width, camera.height, where="background")
    return rasterize(project(particles, camera), bg)


def render_sequence(frames: Iterable[tuple[ParticleSet, CameraFrame, np.ndarray]]) -> list[np.ndarray]:
    """Render each (particles, camera, background) triple independently."""
    out = []
    for i, (particles, camera, background) in enumerate(frames):
        try:
            out.append(render_frame(particles, camera, background))
        except ValidationError as exc:
            raise ValidationError(f"frame {i}: {exc}") from exc
    return out


def configure_threads(env=os.environ) -> int:
    """Cap rasterizer parallelism from ``STORMFIELD_THREADS``."""
    raw = env.get("STORMFIELD_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValidationError(f"STORMFIELD_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise ValidationError("STORMFIELD_THREADS must be >= 1")
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return numba.get_num_threads()
