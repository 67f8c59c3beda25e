import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[True, False], ids=["compiled", "numpy"])
def kernel_mode(request):
    from takunet import ops

    ops.use_compiled_kernels(request.param)
    yield request.param
    ops.use_compiled_kernels(True)


_NOTES = []


@pytest.fixture
def acceptance_log():
    """Lines printed in the terminal summary; for measurements that are reported, not asserted."""
    return _NOTES.append


def pytest_terminal_summary(terminalreporter):
    if _NOTES:
        terminalreporter.section("acceptance measurements")
        for line in _NOTES:
            terminalreporter.write_line(line)
