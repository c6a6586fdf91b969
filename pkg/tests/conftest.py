import numpy as np
import pytest

from ram3d.field import FieldConfig, init_params
from ram3d.scene_io import Camera


def look_at_camera(eye, target, width=16, height=16, focal=16.0, near=0.5, far=4.0):
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross([0.0, 1.0, 0.0], back)
    right /= np.linalg.norm(right)
    up = np.cross(back, right)
    c2w = np.concatenate([np.stack([right, up, back], axis=1), eye[:, None]], axis=1)
    return Camera(width, height, focal, focal, width / 2.0, height / 2.0, c2w, near, far)


@pytest.fixture
def small_field_config():
    return FieldConfig(levels=3, features_per_level=2, table_size_log2=8, base_resolution=3, level_scale=1.7,
                       mlp_hidden=8, mlp_layers=3, bounds=((-1, -1, -1), (1, 1, 1)))


def perturbed_params(config, seed, scale=0.5):
    """float64 parameters with O(1) hash entries so every path carries signal."""
    rng = np.random.default_rng(seed)
    p = init_params(config, seed, dtype=np.float64)
    p.arrays["hash_tables"] = rng.uniform(-scale, scale, p.hash_tables.shape)
    for k in p.names():
        if k != "hash_tables":
            p.arrays[k] = p.arrays[k] + rng.normal(0, 0.2, p.arrays[k].shape)
    return p


@pytest.fixture(scope="session")
def synthetic_scene():
    from ram3d.synthetic import SyntheticScene
    scene = SyntheticScene()
    gt = scene.build()
    return scene, gt, scene.dataset(gt)


_ACCEPTANCE = []


def record_acceptance(number, name, ok, detail=""):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {name}  [{detail}]"
    print(line)
    _ACCEPTANCE.append((number, line))


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
