import numpy as np
import pytest
from hypothesis import settings

from rockssl.voxel import SynthSpec, Volume3D, generate_synthetic

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_volume():
    vol, _ = generate_synthetic(SynthSpec((16, 16, 16), 1.0, 0.3, seed=3))
    return vol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def binary_volume(arr) -> Volume3D:
    return Volume3D(np.asarray(arr, dtype=np.float32), kind="binary")


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
