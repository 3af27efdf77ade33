import pytest

from gridtopo.action_space import enumerate_node_splits
from gridtopo.chronics import nominal_snapshot
from gridtopo.environment import EnvConfig, GridEnv
from gridtopo.grid_model import reference_grid

# test name -> (verdict, what the test printed)
_ACCEPTANCE: dict[str, tuple[str, list[str]]] = {}


@pytest.fixture(scope="session")
def grid():
    return reference_grid()


@pytest.fixture(scope="session")
def catalog(grid):
    return enumerate_node_splits(grid)


@pytest.fixture(scope="session")
def snapshot(grid):
    return nominal_snapshot(grid)


@pytest.fixture
def env(grid, catalog):
    return GridEnv(grid, EnvConfig(), catalog=catalog)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        printed = [ln.strip() for ln in report.capstdout.splitlines() if ln.strip()]
        _ACCEPTANCE[name] = ("PASS" if report.outcome == "passed" else report.outcome.upper(), printed)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, printed = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status:7s} {name}")
        for line in printed:
            terminalreporter.write_line(f"        {line}")
