import numpy as np
import pytest

from pathwise_hedge.enhancement import LocalVolSpec
from pathwise_hedge.pde import ClosedFormBS, PayoffSpec, SchemeParams, solve

R, T, S0, K, SIGMA = 0.05, 1.0, 100.0, 100.0, 0.2

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def bs_call():
    """Constant-vol call on a 400 x 400 grid."""
    return solve(PayoffSpec("call", K=K), LocalVolSpec("black_scholes", sigma=SIGMA), R, T,
                 SchemeParams(400, 400))


@pytest.fixture(scope="session")
def bs_call_exact():
    return ClosedFormBS(PayoffSpec("call", K=K), SIGMA, R, T)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
