"""Desk-scale experiment presets shared by the CLI, the acceptance suite and
the long ensemble runs (so that their checkpoint caches coincide)."""

from __future__ import annotations

from .kernel import TestFunction
from .noise import GridSpec
from .solver import SolverConfig, auto_dt, sigma_from_spec

L = 8.0
N = 256
T = 0.5
EPS_LIST = (0.4, 0.2, 0.1)
TIMES = (0.25, 0.5)
G_SCALE = 0.5
SEED = 20240611
# h = L/N = eps/3.2 at eps = 0.1: the 4-points-per-eps rule is relaxed to 3
MIN_POINTS_PER_EPS = 3.0

CASES = {
    "linear": {"sigma": "linear", "beta": 1.0},
    "saturating": {"sigma": "saturating", "beta": 0.5},
}


def desk_config(case: str, eps: float, *, n: int = N, L_side: float = L,
                horizon: float = T) -> SolverConfig:
    spec = CASES[case]
    grid = GridSpec(L_side, n, auto_dt(horizon, eps), MIN_POINTS_PER_EPS)
    return SolverConfig(spec["beta"], eps, sigma_from_spec(spec["sigma"]), grid, horizon)


def desk_test_function() -> TestFunction:
    return TestFunction.heat_gaussian(G_SCALE)
