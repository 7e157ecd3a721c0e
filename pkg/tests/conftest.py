import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from shapediff import kernels  # noqa: E402

BACKENDS = [False, True] if kernels.HAVE_NUMBA else [False]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=BACKENDS, ids=lambda b: "numba" if b else "numpy")
def use_numba(request):
    return request.param


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
