import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from zamba import tensor as tn

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def fp64():
    prev = tn.get_default_dtype()
    tn.set_default_dtype(np.float64)
    yield
    tn.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
