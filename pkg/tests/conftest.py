import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from teakit.data import from_arrays

settings.register_profile("teakit", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("teakit")

ACCEPTANCE_LINES = []


def random_dataset(rng, n=40, q=2, p=3, pop_max=50, shift=1.0):
    t1 = rng.normal(size=(n, q))
    t2 = t1 + rng.uniform(0, shift, size=(n, q))
    x = rng.normal(size=(n, p))
    pop = rng.integers(1, pop_max + 1, size=n)
    y = rng.poisson(0.3 * pop)
    return from_arrays(t1, t2, x, y, pop)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
