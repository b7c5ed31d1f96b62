from pathlib import Path

import numpy as np
import pytest

DATA = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def block_scene_path():
    return DATA / "block_scene.yaml"


def pose_close(a, b, tol=1e-9):
    """Rotation-angle and translation distance both below ``tol``."""
    from fidslam.se3 import ominus

    d = ominus(a, b)
    return np.linalg.norm(d[:3]) < tol and np.linalg.norm(d[3:]) < tol


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
