import numpy as np
import pytest

from defpinn.geometry import TrapezoidParams
from defpinn.losses import LdGParams


@pytest.fixture
def trap():
    return TrapezoidParams(d=0.06)


@pytest.fixture
def ldg():
    return LdGParams(epsilon=0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def oracle_set():
    """The six reference states at the default resolution (computed once per session)."""
    from defpinn.oracle import OracleConfig, find_all
    return find_all(OracleConfig())


# one summary line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
