import numpy as np
import pytest

from metahunt.function_space import EvalGrid
from metahunt.simulation import paper_basis


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo runs taking minutes")


@pytest.fixture
def normal_grid():
    rng = np.random.default_rng(11)
    return EvalGrid.uniform(rng.normal(0.0, 5.0, size=1000))


def noiseless_hull(grid, m=100, seed=0, K=4):
    """The true bases as pure studies followed by interior Dirichlet mixtures."""
    rng = np.random.default_rng(seed)
    G = paper_basis(grid.x)[:K]
    P = np.vstack([np.eye(K), rng.dirichlet(np.ones(K), size=m - K)])
    return P @ G, P, G


@pytest.fixture
def hull_data(normal_grid):
    return noiseless_hull(normal_grid)
