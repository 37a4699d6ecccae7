import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bfftraj import bench
from bfftraj.gridworld import OccupancyGrid, generate_city_grid

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def city_grid():
    return generate_city_grid(7)


@pytest.fixture(scope="session")
def desk():
    return bench.desk_grid()


@pytest.fixture(scope="session")
def small_city():
    """A jittered 48 x 48 city; buildings are irregular enough to hit corners."""
    return generate_city_grid(11, 48, 48, 1.0, bench.BlockSpec(9, 7, 5), jitter=2)


def open_grid(n=40, border=True):
    blocked = np.zeros((n, n), dtype=bool)
    if border:
        blocked[0, :] = blocked[-1, :] = blocked[:, 0] = blocked[:, -1] = True
    return OccupancyGrid(blocked)


# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
