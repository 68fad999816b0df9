import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lowrank_vcm.basis import DensityMeasure

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def sine_measure():
    """dmu = (1 + 0.5 sin 2 pi t) dt, bounded by g1 = 0.5 and g2 = 1.5."""
    return DensityMeasure.weighted(lambda t: 1.0 + 0.5 * np.sin(2 * math.pi * np.asarray(t)),
                                   0.5, 1.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
