import numpy as np
import pytest

from mfot import lq_oracle, problems


@pytest.fixture(scope="session")
def lq1():
    return problems.lq_test_1()


@pytest.fixture(scope="session")
def lq2():
    return problems.lq_test_2()


@pytest.fixture(scope="session")
def lq1_solution(lq1):
    return lq_oracle.solve_lq(lq1)


@pytest.fixture(scope="session")
def lq2_solution(lq2):
    return lq_oracle.solve_lq(lq2)


@pytest.fixture
def rng_np():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Echo the one-line acceptance verdicts after the run."""
    try:
        from test_acceptance import CRITERION_LINES
    except ImportError:
        return
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
