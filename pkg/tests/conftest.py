import numpy as np
import pytest

from dilo.data import compose_mixture_dataset, strip_actions
from dilo.envs import default_policies, make_env


@pytest.fixture(scope="session")
def grid():
    return make_env("gridworld")


@pytest.fixture(scope="session")
def grid_data(grid):
    """(offline with actions, observation-only expert) on the default gridworld."""
    expert, behavior = default_policies(grid)
    offline = compose_mixture_dataset(grid, expert, behavior, 3, 6, 12, seed=0)
    demos = compose_mixture_dataset(grid, expert, behavior, 2, 0, 12, seed=1)
    return offline, strip_actions(demos)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
