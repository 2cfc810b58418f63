import numpy as np
import pytest

from elder import gradcheck as gc
from elder import network as nw

TINY = nw.ArchConfig(num_scales=2, residual_blocks_per_scale=1, base_channels=2, kernel_size=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return TINY


@pytest.fixture
def tiny_weights():
    return gc.tiny_weights(0)


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)``; printed in the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} -- {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
