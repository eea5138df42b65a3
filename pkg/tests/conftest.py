from __future__ import annotations

import numpy as np
import pytest

from mckvlq.cone_qp import ConeProblem, solve_cone_projection
from mckvlq.finance import MarketParams, to_lq
from mckvlq.ode_engine import LQParams, solve_p_system


def random_cone_problem(rng: np.random.Generator, m: int) -> ConeProblem:
    """Well-conditioned ``D`` and a nonnegative ``B`` with some exact zeros."""
    D = np.eye(m) + 0.3 * rng.standard_normal((m, m))
    B = rng.uniform(0.0, 1.0, m)
    B[rng.uniform(size=m) < 0.2] = 0.0
    return ConeProblem(D, B)


def random_lq(rng: np.random.Generator, m: int | None = None, **over) -> LQParams:
    """Admissible parameters drawn from modest ranges."""
    if m is None:
        m = int(rng.integers(1, 4))
    cp = random_cone_problem(rng, m)
    Q1 = rng.uniform(0, 1)
    G1 = rng.uniform(0.2, 2)
    kw = dict(
        A=rng.uniform(0, 0.5), Abar=rng.uniform(0, 0.5), B=cp.B, b0=rng.uniform(-0.5, 0.5),
        D=cp.D, Q1=Q1, Q2=rng.uniform(-Q1, 1), Q3=-rng.uniform(0, 1),
        G1=G1, G2=rng.uniform(-G1, 1), G3=-rng.uniform(0, 1), T=rng.uniform(0.5, 2),
    )
    kw.update(over)
    return LQParams(**kw)


def solved(params: LQParams, steps: int = 2048):
    cone = solve_cone_projection(params.cone_problem())
    return cone, solve_p_system(params, cone.theta_norm_sq, steps=steps)


# Two-control problem with both switching regions on the default sweep grid.
PI12 = LQParams(
    A=0.3, Abar=0.2, B=[0.5, 0.2], b0=0.3, D=[[1.0, 0.3], [0.0, 1.2]],
    Q1=0.5, Q2=0.2, Q3=-0.4, G1=1.0, G2=0.5, G3=-0.7, T=1.0,
)
# Same data with vanishing b0 and G3 (switch value proportional to the mean).
PI12_PLAIN = LQParams(
    A=0.3, Abar=0.2, B=[0.5, 0.2], b0=0.0, D=[[1.0, 0.3], [0.0, 1.2]],
    Q1=0.5, Q2=-0.5, Q3=0.0, G1=1.0, G2=0.5, G3=0.0, T=1.0,
)

SINGLE_STOCK = MarketParams(r=0.06, b=[0.12], sigma=[[0.15]], alpha=1.0, beta=1.0,
                            gamma=0.0, kappa=0.0, X0=1.0, T=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def single_stock():
    lq = to_lq(SINGLE_STOCK)
    cone, ps = solved(lq)
    return SINGLE_STOCK, lq, cone, ps
