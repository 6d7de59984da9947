import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.config import SolveConfig
from app.processors.concentration import autonomous_ground_state
from app.processors.energy import Nonlinearity, Potential, Problem
from app.processors.fields import GridSpec, RadialGrid, gaussian
from app.processors.optimizer import minimize
from app.processors.potential import KernelPlan

MU = 4.0


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full descents and eigen-solves on 3D grids")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(16, 6.0)


@pytest.fixture(scope="session")
def small_plan(small_grid):
    return KernelPlan.build(small_grid)


@pytest.fixture(scope="session")
def solve_grid():
    # e^{-sqrt(MU) L} stays below the residual tolerance
    return GridSpec(40, 10.0)


@pytest.fixture(scope="session")
def solve_plan(solve_grid):
    return KernelPlan.build(solve_grid)


@pytest.fixture(scope="session")
def solver_cfg():
    # coarse grids leave spectral ripples of relative size ~1e-4 in the tails
    return SolveConfig(tol_residual=1e-8, sign_tol=1e-3)


@pytest.fixture(scope="session")
def constant_problem(solve_grid, solve_plan):
    return Problem(solve_grid, Potential.constant(MU), eps=1.0, f=Nonlinearity(), c=1.0, plan=solve_plan)


@pytest.fixture(scope="session")
def radial_grid():
    return RadialGrid(800, 16.0)


@pytest.fixture(scope="session")
def ground_state(radial_grid, solver_cfg):
    return autonomous_ground_state(MU, Nonlinearity(), 1.0, radial_grid, solver_cfg)


@pytest.fixture(scope="session")
def ground_record(constant_problem, solver_cfg):
    return minimize(constant_problem, gaussian(constant_problem.grid, width=1.0), solver_cfg)
