import numpy as np
import pytest

from npusr.ops import ConvSpec, Activation
from npusr.tensor import TensorF32


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, h, w, c, lo=0.0, hi=255.0):
    return TensorF32(rng.uniform(lo, hi, size=(h, w, c)).astype(np.float32))


def rand_spec(rng, k, cin, cout, act=Activation(), bias=True, scale=None):
    std = scale if scale is not None else np.sqrt(2.0 / (k * k * cin))
    w = rng.normal(0, std, size=(cout, k, k, cin))
    b = rng.uniform(-1, 1, size=cout) if bias else np.zeros(cout)
    return ConvSpec(w, b, act)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
