import json
import math
from pathlib import Path

import numpy as np
import pytest
from PIL import Image
from scipy.spatial.transform import Rotation

from stormfield.camera import CameraFrame, make_pose

ACCEPTANCE_RESULTS = []


def random_pose(rng, t_scale=5.0):
    R = Rotation.random(random_state=rng).as_matrix()
    return make_pose(R, rng.normal(scale=t_scale, size=3))


def forward_pose(z, yaw=0.0):
    R = Rotation.from_euler("y", yaw).as_matrix()
    return make_pose(R, (0.0, 0.0, z))


def camera(pose=None, w=64, h=48, f=40.0, frame_index=0, view_id=0):
    return CameraFrame(np.eye(4) if pose is None else pose, f, f, w / 2, h / 2, w, h,
                       frame_index=frame_index, view_id=view_id)


def write_scene(root: Path, n_frames=3, views=(0,), w=48, h=32, step=0.5, seed=0):
    """Write a small multi-view scene: noisy PNG backgrounds plus a manifest."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for i in range(n_frames):
        for v in views:
            bg = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
            name = f"bg_{i:03d}_{v}.png"
            Image.fromarray(bg, "RGB").save(root / name)
            yaw = (v - views[len(views) // 2]) * math.radians(40)
            pose = forward_pose(i * step, yaw)
            frames.append({
                "frame_index": i,
                "view_id": v,
                "pose": pose.reshape(-1).tolist(),
                "intrinsics": {"fx": 30.0, "fy": 30.0, "cx": w / 2, "cy": h / 2, "width": w, "height": h},
                "background_path": name,
            })
    manifest = {"center_view": views[len(views) // 2], "frames": frames}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" :: {detail}" if detail else "")
        ACCEPTANCE_RESULTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
