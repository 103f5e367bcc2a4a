import pytest

from ezinvest import (
    ConstantParams,
    EZPreferences,
    HestonParams,
    KimOmbergParams,
    SolverConfig,
    make_grid,
    make_model,
    solve_value_pde,
)


@pytest.fixture(scope="session")
def ez():
    return EZPreferences(gamma=5.0, psi=1.5, delta=0.08)


@pytest.fixture(scope="session")
def heston():
    return make_model(HestonParams())


@pytest.fixture(scope="session")
def kim_omberg():
    return make_model(KimOmbergParams())


@pytest.fixture(scope="session")
def constant():
    return make_model(ConstantParams())


@pytest.fixture(scope="session")
def heston_solution(heston, ez):
    """Reference configuration, T=10, at the default resolution."""
    cfg = SolverConfig()
    grid = make_grid(heston, 10.0, cfg)
    return grid, solve_value_pde(heston, ez, grid, cfg)


@pytest.fixture(scope="session")
def heston_small(heston, ez):
    """Shorter horizon, coarser grid: cheap surface for path-level tests."""
    cfg = SolverConfig(n_x=200, steps_per_unit=100)
    grid = make_grid(heston, 2.0, cfg)
    return grid, solve_value_pde(heston, ez, grid, cfg)


# one line per acceptance criterion, echoed after the run even when output is captured
_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    def record(line):
        print(line)
        _ACCEPTANCE_LINES.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
