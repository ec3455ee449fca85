import numpy as np
import pytest

from rifcn.model import ForwardStreamSpec, build_model

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    spec = ForwardStreamSpec(levels=2, block_widths=(4, 8, 16), in_channels=3)
    return build_model(spec, 3, seed=7, dtype=np.float64)


def central_diff(f, arr, idx, h=1e-5):
    orig = arr[idx]
    arr[idx] = orig + h
    fp = f()
    arr[idx] = orig - h
    fm = f()
    arr[idx] = orig
    return (fp - fm) / (2 * h)


def rel_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
