import numpy as np
import pytest

from prepattack.imagecore import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def random_image(rng, size, channels=1):
    return rng.random((size, size, channels))


def on_grid(rng, shape):
    """Random image on the 8-bit grid."""
    return rng.integers(0, 256, size=shape) / 255.0


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
