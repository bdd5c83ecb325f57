import sys

import numpy as np
import pytest

from finegrain.numerics import gradients_close, max_relative_error

SEEDS = list(range(10))


def assert_grad_close(analytic, numeric, what=""):
    assert gradients_close(analytic, numeric), (
        f"{what}: max relative error {max_relative_error(analytic, numeric):.3e}"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
