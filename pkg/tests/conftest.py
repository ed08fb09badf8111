import numpy as np
import pytest

from tokencompress.numeric import LinearMap, Mlp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def affine(weight, bias=None):
    w = np.asarray(weight, dtype=float)
    b = None if bias is None else np.asarray(bias, dtype=float)
    return LinearMap(w, b)


def single_layer(weight, bias=None):
    return Mlp([affine(weight, bias)])


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
