import numpy as np
import pytest

from smpjump.noise import (Brownian, CompensatedPoisson, DoublyStochasticPoisson, IntensityDriver,
                           MarkSpace, TimeGrid, sample_ensemble)


@pytest.fixture(scope="session")
def grid16():
    return TimeGrid(1.0, 16)


@pytest.fixture(scope="session")
def brownian16(grid16):
    return sample_ensemble(Brownian(), grid16, MarkSpace.singleton(), 20_000, seed=11)


@pytest.fixture(scope="session")
def poisson16(grid16):
    return sample_ensemble(CompensatedPoisson(2.0), grid16, MarkSpace.singleton(), 20_000, seed=12)


@pytest.fixture(scope="session")
def cox16(grid16):
    drivers = (IntensityDriver(1.0, 1.0, 1.0, 0.5), IntensityDriver(0.5, 0.5, 1.0, 0.5))
    return sample_ensemble(DoublyStochasticPoisson(drivers), grid16, MarkSpace.numbered(2), 8_000, seed=13)


def zscore(samples, target=0.0):
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    return (samples.mean() - target) / se


# acceptance criterion -> (title, passed); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    def record(number, title, passed):
        ACCEPTANCE[number] = (title, bool(passed))
        print(f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}")
