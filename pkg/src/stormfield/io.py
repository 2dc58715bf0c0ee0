"""File formats: scene manifests, trajectory files, PNG frames, text
matrices, embedding lists and raw flow fields.

All writers are deterministic; identical inputs produce identical bytes.
"""
from __future__ import annotations

import contextlib
import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .camera import CameraFrame
from .errors import ValidationError
from .field import ParticleSet
from .metrics import FlowField

DEFAULT_FRAME_INTERVAL = 0.1  # seconds

TRAJECTORY_MAGIC = b"STFTRAJ1"
TRAJECTORY_VERSION = 1
PARTICLE_COLUMNS = (
    "px", "py", "pz",
    "qw", "qx", "qy", "qz",
    "sx", "sy", "sz",
    "r", "g", "b",
    "opacity",
    "vx", "vy", "vz",
)
_F32 = np.dtype("<f4")


# -- scene manifests ---------------------------------------------------------

@dataclass(frozen=True)
class ManifestFrame:
    camera: CameraFrame
    background_path: Path

    @property
    def frame_index(self) -> int:
        return self.camera.frame_index

    @property
    def view_id(self) -> int:
        return self.camera.view_id


@dataclass(frozen=True)
class SceneManifest:
    """Multi-view camera rig: one entry per (frame, view).

    Poses are camera-to-world, stored row-major as 16 numbers.
    """

    frames: tuple[ManifestFrame, ...]
    center_view: int
    frame_interval: float = DEFAULT_FRAME_INTERVAL

    @property
    def frame_indices(self) -> list[int]:
        return sorted({f.frame_index for f in self.frames})

    @property
    def views(self) -> list[int]:
        return sorted({f.view_id for f in self.frames})

    def entry(self, frame_index: int, view_id: int) -> ManifestFrame:
        for f in self.frames:
            if f.frame_index == frame_index and f.view_id == view_id:
                return f
        raise KeyError((frame_index, view_id))

    def center_trajectory(self) -> list[CameraFrame]:
        return [self.entry(i, self.center_view).camera for i in self.frame_indices]

    def entries_at(self, frame_index: int) -> list[ManifestFrame]:
        return sorted((f for f in self.frames if f.frame_index == frame_index), key=lambda f: f.view_id)


_FRAME_KEYS = {"frame_index", "view_id", "pose", "intrinsics", "background_path"}
_INTRINSIC_KEYS = {"fx", "fy", "cx", "cy", "width", "height"}


def parse_manifest(doc: dict, root: Path) -> SceneManifest:
    if not isinstance(doc, dict):
        raise ValidationError("manifest must be a JSON object")
    unknown = set(doc) - {"frames", "center_view", "frame_interval"}
    if unknown:
        raise ValidationError(f"manifest: unknown keys {sorted(unknown)}")
    if "frames" not in doc or "center_view" not in doc:
        raise ValidationError("manifest needs 'frames' and 'center_view'")
    center = int(doc["center_view"])
    interval = float(doc.get("frame_interval", DEFAULT_FRAME_INTERVAL))
    if not interval > 0:
        raise ValidationError(f"frame_interval must be > 0, got {interval}")
    frames = []
    seen = set()
    for n, raw in enumerate(doc["frames"]):
        where = f"manifest frame entry {n}"
        if not isinstance(raw, dict) or set(raw) != _FRAME_KEYS:
            got = sorted(raw) if isinstance(raw, dict) else type(raw).__name__
            raise ValidationError(f"{where}: expected keys {sorted(_FRAME_KEYS)}, got {got}")
        intr = raw["intrinsics"]
        if not isinstance(intr, dict) or set(intr) != _INTRINSIC_KEYS:
            raise ValidationError(f"{where}: intrinsics need exactly {sorted(_INTRINSIC_KEYS)}")
        pose = np.asarray(raw["pose"], dtype=np.float64)
        if pose.shape != (16,):
            raise ValidationError(f"{where}: pose must hold 16 numbers (row-major 4x4), got {pose.size}")
        camera = CameraFrame(
            pose=pose.reshape(4, 4),
            fx=float(intr["fx"]), fy=float(intr["fy"]),
            cx=float(intr["cx"]), cy=float(intr["cy"]),
            width=int(intr["width"]), height=int(intr["height"]),
            frame_index=int(raw["frame_index"]), view_id=int(raw["view_id"]),
        )
        key = (camera.frame_index, camera.view_id)
        if key in seen:
            raise ValidationError(f"{where}: duplicate entry for frame {key[0]}, view {key[1]}")
        seen.add(key)
        bg = Path(raw["background_path"])
        if not bg.is_absolute():
            bg = root / bg
        frames.append(ManifestFrame(camera, bg))
    if not frames:
        raise ValidationError("manifest has no frames")

    manifest = SceneManifest(tuple(frames), center, interval)
    for view in manifest.views:
        idx = sorted(f.frame_index for f in frames if f.view_id == view)
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise ValidationError(f"view {view}: frame indices are not contiguous: {idx}")
    for i in manifest.frame_indices:
        if (i, center) not in seen:
            raise ValidationError(f"frame {i} has no center-view ({center}) entry")
    return manifest


def load_manifest(path, check_files: bool = True) -> SceneManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    manifest = parse_manifest(doc, path.parent)
    if check_files:
        for f in manifest.frames:
            if not f.background_path.is_file():
                raise FileNotFoundError(f"background frame not found: {f.background_path}")
    return manifest


def manifest_to_dict(manifest: SceneManifest, root: Optional[Path] = None) -> dict:
    def rel(p: Path):
        if root is not None:
            with contextlib.suppress(ValueError):
                return str(p.relative_to(root))
        return str(p)

    return {
        "center_view": manifest.center_view,
        "frame_interval": manifest.frame_interval,
        "frames": [
            {
                "frame_index": f.frame_index,
                "view_id": f.view_id,
                "pose": f.camera.pose.reshape(-1).tolist(),
                "intrinsics": {
                    "fx": f.camera.fx, "fy": f.camera.fy, "cx": f.camera.cx, "cy": f.camera.cy,
                    "width": f.camera.width, "height": f.camera.height,
                },
                "background_path": rel(f.background_path),
            }
            for f in manifest.frames
        ],
    }


# -- trajectory files --------------------------------------------------------

def particles_to_block(p: ParticleSet) -> bytes:
    cols = np.concatenate([
        p.positions, p.rotations, p.scales, p.colors, p.opacities[:, None], p.velocities,
    ], axis=1)
    return np.ascontiguousarray(cols, dtype=_F32).tobytes()


def block_to_particles(data: bytes, count: int) -> ParticleSet:
    cols = np.frombuffer(data, dtype=_F32).reshape(count, len(PARTICLE_COLUMNS)).astype(np.float64)
    q = cols[:, 3:7]
    return ParticleSet(
        positions=cols[:, 0:3],
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True) if count else q,
        scales=cols[:, 7:10],
        colors=np.clip(cols[:, 10:13], 0.0, 1.0),
        opacities=np.clip(cols[:, 13], 0.0, 1.0),
        velocities=cols[:, 14:17],
    )


def encode_trajectory(header: dict, frames: Sequence[tuple[int, ParticleSet]]) -> bytes:
    """Serialize a trajectory.

    Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header,
    then per frame a u32 frame index, a u32 particle count and ``count`` rows
    of 17 little-endian float32 columns (see ``PARTICLE_COLUMNS``).
    """
    header = dict(header)
    header.setdefault("version", TRAJECTORY_VERSION)
    header["columns"] = list(PARTICLE_COLUMNS)
    header["frames"] = [int(i) for i, _ in frames]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [TRAJECTORY_MAGIC, struct.pack("<I", len(head)), head]
    for index, particles in frames:
        parts.append(struct.pack("<II", int(index), len(particles)))
        parts.append(particles_to_block(particles))
    return b"".join(parts)


def decode_trajectory(data: bytes) -> tuple[dict, list[tuple[int, ParticleSet]]]:
    if data[:8] != TRAJECTORY_MAGIC:
        raise ValidationError("not a stormfield trajectory file (bad magic)")
    try:
        (hlen,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12:12 + hlen])
        if not isinstance(header, dict):
            raise ValidationError("trajectory header must be a JSON object")
        pos = 12 + hlen
        frames = []
        row = len(PARTICLE_COLUMNS) * 4
        while pos < len(data):
            index, count = struct.unpack_from("<II", data, pos)
            pos += 8
            block = data[pos:pos + count * row]
            if len(block) != count * row:
                raise ValidationError("trajectory file is truncated")
            frames.append((index, block_to_particles(block, count)))
            pos += count * row
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"corrupt trajectory file: {exc}") from exc
    if header.get("version") != TRAJECTORY_VERSION:
        raise ValidationError(f"unsupported trajectory version {header.get('version')}")
    if [i for i, _ in frames] != header.get("frames"):
        raise ValidationError("trajectory frame records disagree with the header")
    return header, frames


def read_trajectory(path) -> tuple[dict, list[tuple[int, ParticleSet]]]:
    return decode_trajectory(Path(path).read_bytes())


# -- images ------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """8-bit PNG to float64 (H, W, 3) in [0, 1], mapped linearly (no gamma)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def is_rgb8_png(path) -> bool:
    with Image.open(path) as im:
        return im.format == "PNG" and im.mode == "RGB"


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def png_bytes(frame: np.ndarray) -> bytes:
    import io as _io

    buf = _io.BytesIO()
    Image.fromarray(to_uint8(frame), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, frame: np.ndarray) -> None:
    atomic_write_bytes(path, png_bytes(frame))


# -- text matrices and embeddings --------------------------------------------

def parse_matrix(text: str, where: str = "matrix") -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValidationError(f"{where}: empty file")
    try:
        rows, cols = (int(x) for x in lines[0].split())
        values = [float(x) for ln in lines[1:] for x in ln.split()]
    except ValueError as exc:
        raise ValidationError(f"{where}: {exc}") from exc
    if rows < 1 or cols < 1:
        raise ValidationError(f"{where}: header must give positive 'rows cols'")
    if len(values) != rows * cols or len(lines) - 1 != rows:
        raise ValidationError(f"{where}: header says {rows}x{cols}, found {len(lines) - 1} rows / {len(values)} values")
    return np.array(values, dtype=np.float64).reshape(rows, cols)


def format_matrix(m) -> str:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in m]
    return "\n".join(lines) + "\n"


def read_matrix(path) -> np.ndarray:
    return parse_matrix(Path(path).read_text(), str(path))


def write_matrix(path, m) -> None:
    atomic_write_bytes(path, format_matrix(m).encode())


def read_embeddings(path) -> np.ndarray:
    """Embedding list: first line ``d``, then one space-separated vector per line."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty embedding file")
    try:
        d = int(lines[0].strip())
        vecs = [[float(x) for x in ln.split()] for ln in lines[1:]]
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if not vecs:
        raise ValidationError(f"{path}: no embedding vectors")
    for n, v in enumerate(vecs):
        if len(v) != d:
            raise ValidationError(f"{path}: vector {n} has {len(v)} values, header says {d}")
    return np.array(vecs, dtype=np.float64)


def write_embeddings(path, vecs) -> None:
    vecs = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
    text = f"{vecs.shape[1]}\n" + "".join(" ".join(repr(float(x)) for x in v) + "\n" for v in vecs)
    atomic_write_bytes(path, text.encode())


# -- flow fields ---------------------------------------------------------------

def flow_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_flow(path) -> FlowField:
    """Planar little-endian float32 u then v, then one validity byte per pixel.

    Dimensions come from the ``<path>.json`` sidecar (``width``, ``height``).
    """
    path = Path(path)
    side = flow_sidecar(path)
    if not side.is_file():
        raise FileNotFoundError(f"flow sidecar not found: {side}")
    meta = json.loads(side.read_text())
    try:
        w, h = int(meta["width"]), int(meta["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{side}: needs integer 'width' and 'height'") from exc
    data = path.read_bytes()
    n = w * h
    if len(data) != n * 9:
        raise ValidationError(f"{path}: expected {n * 9} bytes for {w}x{h} flow, got {len(data)}")
    u = np.frombuffer(data, _F32, n, 0).reshape(h, w)
    v = np.frombuffer(data, _F32, n, 4 * n).reshape(h, w)
    valid = np.frombuffer(data, np.uint8, n, 8 * n).reshape(h, w) != 0
    return FlowField(u, v, valid)


def write_flow(path, flow: FlowField) -> None:
    h, w = flow.u.shape
    data = (
        np.ascontiguousarray(flow.u, _F32).tobytes()
        + np.ascontiguousarray(flow.v, _F32).tobytes()
        + np.ascontiguousarray(flow.valid, np.uint8).tobytes()
    )
    atomic_write_bytes(path, data)
    atomic_write_bytes(flow_sidecar(path), json.dumps({"height": h, "width": w}).encode())


# -- safe writes ---------------------------------------------------------------

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


@dataclass
class StagedOutput:
    """Collect output files in a hidden staging directory and move them into
    place only on success; on failure nothing this run would create remains.
    """

    out_dir: Path
    _stage: Optional[Path] = None
    _created_dir: bool = False
    _names: list = field(default_factory=list)

    def __enter__(self) -> "StagedOutput":
        self.out_dir = Path(self.out_dir)
        if not self.out_dir.exists():
            self.out_dir.mkdir(parents=True)
            self._created_dir = True
        self._stage = Path(tempfile.mkdtemp(prefix=".stormfield-stage-", dir=self.out_dir))
        return self

    def path(self, name: str) -> Path:
        self._names.append(name)
        return self._stage / name

    def write_bytes(self, name: str, data: bytes) -> None:
        self.path(name).write_bytes(data)

    def copy_from(self, name: str, src) -> None:
        shutil.copyfile(src, self.path(name))

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for name in self._names:
                    os.replace(self._stage / name, self.out_dir / name)
        finally:
            shutil.rmtree(self._stage, ignore_errors=True)
            if exc_type is not None and self._created_dir:
                with contextlib.suppress(OSError):
                    self.out_dir.rmdir()
        return False


def metric_record(metric: str, value: float, inputs) -> str:
    return json.dumps({"metric": metric, "value": value, "inputs": inputs}, sort_keys=True)
