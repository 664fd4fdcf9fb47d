import time

import numpy as np
import pytest

from uwmvs import SceneSpec, UnderwaterMVS, render_dataset
from uwmvs.geometry import CameraIntrinsics, CameraPose, Viewpoint

# acceptance verdict lines, filled by tests/test_acceptance.py and echoed at the end of the run
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[k])


def random_rotation(rng, max_angle=0.5):
    """Rotation about a random axis by at most ``max_angle`` radians (Rodrigues)."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    a = rng.uniform(-max_angle, max_angle)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * K @ K


def random_viewpoint(rng, width=64, height=48, max_angle=0.3, max_shift=0.5):
    k = CameraIntrinsics(rng.uniform(40, 120), rng.uniform(40, 120), rng.uniform(20, 40), rng.uniform(15, 30))
    pose = CameraPose(random_rotation(rng, max_angle), rng.uniform(-max_shift, max_shift, 3))
    return Viewpoint(k, pose, width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_spec():
    return SceneSpec()


@pytest.fixture(scope="session")
def default_dataset(default_spec):
    return render_dataset(default_spec)


@pytest.fixture(scope="session")
def full_model(default_dataset):
    """The medium-aware model after the full 3k-iteration schedule (~2.5 min)."""
    t0 = time.perf_counter()
    model = UnderwaterMVS(iterations=3000, seed=0).fit(default_dataset)
    model.fit_seconds_ = time.perf_counter() - t0
    return model


@pytest.fixture(scope="session")
def ablated_model(default_dataset):
    """Same schedule with the medium subnet switched off."""
    return UnderwaterMVS(iterations=3000, seed=0, use_medium=False).fit(default_dataset)
