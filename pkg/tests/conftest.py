import numpy as np
import pytest
from hypothesis import settings

from mpnerf.dataset import write_toy_scene
from mpnerf.geometry import Camera, look_at

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng, scale=3.0) -> np.ndarray:
    pose = np.eye(4)
    pose[:3, :3] = random_rotation(rng)
    pose[:3, 3] = rng.uniform(-scale, scale, 3)
    return pose


def random_camera(rng) -> Camera:
    w = int(rng.integers(8, 300))
    h = int(rng.integers(8, 300))
    return Camera(w, h, float(rng.uniform(20.0, 500.0)), random_pose(rng))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ring_camera():
    """Camera 4 units from the origin looking at it."""
    return Camera(40, 30, 50.0, look_at([4.0, 0.0, 1.0]))


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    """A 24x24 toy scene with 30 train views, small enough for unit tests."""
    root = tmp_path_factory.mktemp("tiny_scene")
    return write_toy_scene(root, "cubes", seed=3, resolution=24, counts={"train": 30, "val": 2, "test": 2})


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
