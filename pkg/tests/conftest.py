import numpy as np
import pytest

from miotsr.imageio import Image
from miotsr.synth import scene


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def photo():
    """A 96x64 synthetic RGB scene."""
    return scene(64, 96, 7)


def random_image(rng, h, w, channels=3):
    planes = rng.integers(0, 256, (channels, h, w), dtype=np.uint8)
    return Image(planes, "RGB" if channels == 3 else "Gray")


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Lines appended here are echoed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
