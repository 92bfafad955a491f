import numpy as np
import pytest

from splat4d.core import Camera
from splat4d.synth import dynamic_spec, generate, static_spec


def pinhole(f=100.0, c=50.0, size=100, rotation=None, translation=None, t=0.0):
    return Camera(np.eye(3) if rotation is None else rotation,
                  np.zeros(3) if translation is None else translation,
                  f, f, c, c, size, size, t)


@pytest.fixture
def cam100():
    return pinhole()


@pytest.fixture(scope="session")
def small_dynamic():
    return generate(dynamic_spec(seed=1, resolution=(24, 24), n_frames=3, n_tracks=64))


@pytest.fixture(scope="session")
def small_static():
    return generate(static_spec(seed=1, resolution=(24, 24), n_frames=3, n_tracks=64))


ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion, printed at exit."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
