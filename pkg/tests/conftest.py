import pytest

from hjbnonunique import dp
from hjbnonunique.model import approx

# lines recorded by the acceptance module, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def dp_levels():
    """Convergence study of the original model on the three default levels."""
    grids = [dp.GridSpec.aligned(nt, nv) for nt, nv in dp.DEFAULT_LEVELS]
    return dp.convergence_study(grids, keep_fields=True)


@pytest.fixture(scope="session")
def approx10_fine():
    nt, nv = dp.DEFAULT_LEVELS[-1]
    return dp.solve_dp(dp.GridSpec.aligned(nt, nv), approx(10))


@pytest.fixture(scope="session")
def coarse_field():
    nt, nv = dp.DEFAULT_LEVELS[0]
    return dp.solve_dp(dp.GridSpec.aligned(nt, nv))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
