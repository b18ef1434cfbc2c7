import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from regime_mp.chain import RegimeGenerator

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def two_regime():
    return RegimeGenerator([[-1.0, 1.0], [2.0, -2.0]])


@pytest.fixture
def three_regime():
    return RegimeGenerator([[-1.5, 1.0, 0.5], [0.7, -1.0, 0.3], [0.2, 1.8, -2.0]])


def rms(a):
    return float(np.sqrt(np.mean(np.square(a))))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
