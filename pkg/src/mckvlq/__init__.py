"""Constrained mean-field linear-quadratic control with a cone-restricted control.

Modules
-------
cone_qp
    Nonnegative-orthant projection and the control subproblem.
ode_engine
    Backward RK4 for the coefficient ODE systems and their closed forms.
lq_solver
    Value function, feedback law and HJB residual checks.
particle_sim
    Interacting-particle Monte Carlo of the controlled dynamics.
finance
    Mean-variance portfolio selection without short selling.
cli
    Command-line front end (``mckvlq``).
"""

from __future__ import annotations

from .cone_qp import (
    ConeProblem,
    ConeSolution,
    brute_force_cone_min,
    minimize_h,
    solve_cone_projection,
    verify_kkt,
)
from .errors import (
    DomainError,
    FiniteEscapeError,
    InvalidInputError,
    InvariantViolationError,
    MckvlqError,
    NonConvergenceError,
    NumericFailure,
    ResourceError,
)
from .finance import MarketParams, efficient_solution, to_lq
from .lq_solver import MeasureState, Region, hjb_residual, optimal_control, value
from .ode_engine import LQParams, PSystem, solve_p_system
from .particle_sim import SimConfig, SimResult, empirical_cost, mean_ode, simulate

__version__ = "0.1.0"

__all__ = [
    "ConeProblem", "ConeSolution", "brute_force_cone_min", "minimize_h",
    "solve_cone_projection", "verify_kkt",
    "DomainError", "FiniteEscapeError", "InvalidInputError", "InvariantViolationError",
    "MckvlqError", "NonConvergenceError", "NumericFailure", "ResourceError",
    "MarketParams", "efficient_solution", "to_lq",
    "MeasureState", "Region", "hjb_residual", "optimal_control", "value",
    "LQParams", "PSystem", "solve_p_system",
    "SimConfig", "SimResult", "empirical_cost", "mean_ode", "simulate",
]
