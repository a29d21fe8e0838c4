import numpy as np
import pytest

from mamba2d import tensor as T

ACCEPTANCE_RESULTS = {}


@pytest.fixture(autouse=True)
def _f64_default():
    T.set_default_dtype("f64")
    yield
    T.set_default_dtype("f64")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        status, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:>2}: {status}  {detail}")
