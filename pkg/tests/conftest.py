import os

import numpy as np
import pytest

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from jumpbsde.levy import build_partition, power_law_measure  # noqa: E402
from jumpbsde.models import martingale_model  # noqa: E402
from jumpbsde.paths import TimeGrid  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or training checks")


@pytest.fixture(scope="session")
def measure05():
    # alpha = 0.5 power law on [-1, 1]
    return power_law_measure(0.5, 1.0, 1.0)


@pytest.fixture(scope="session")
def partition05(measure05):
    return build_partition(measure05, 0.05, 0.5)


@pytest.fixture(scope="session")
def martingale():
    return martingale_model(sigma=0.3, zeta=1)


@pytest.fixture
def grid4():
    return TimeGrid.uniform(1.0, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
