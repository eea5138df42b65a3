"""Mean-variance portfolio selection without short selling.

Wealth follows ``dX = (r X + (b - r 1).u) dt + sum_j (sigma^T u)_j dW^j`` with
the risky positions ``u >= 0``. The criterion

    alpha Var X(T) - beta E X(T) + E int (gamma X^2 - gamma (E X)^2 - kappa X) dt

maps onto :class:`~mckvlq.ode_engine.LQParams` with ``Q1 + Q2 = G1 + G2 = 0``,
so ``P2`` vanishes and every coefficient has a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import _io
from .cone_qp import ConeSolution, solve_cone_projection
from .errors import InvalidInputError
from .lq_solver import MeasureState
from .ode_engine import LQParams, _phi

QUAD_TOL = 1e-12


@dataclass(frozen=True)
class MarketParams:
    r: float
    b: np.ndarray
    sigma: np.ndarray
    alpha: float
    beta: float
    gamma: float
    kappa: float
    X0: float
    T: float
    delta: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=float)).ravel())
        object.__setattr__(self, "sigma", np.atleast_2d(np.asarray(self.sigma, dtype=float)))
        for name in ("r", "alpha", "beta", "gamma", "kappa", "X0", "T", "delta"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def m(self) -> int:
        return self.b.size

    def violations(self) -> list[str]:
        v = []
        m = self.m
        if self.sigma.shape != (m, m):
            v.append(f"sigma must be {m}x{m}")
            return v
        if not np.all(np.isfinite(self.sigma)) or not np.all(np.isfinite(self.b)):
            v.append("b and sigma must be finite")
            return v
        if not self.r >= 0:
            v.append("r >= 0")
        if not self.alpha > 0:
            v.append("alpha > 0")
        for name in ("beta", "gamma", "kappa"):
            if not getattr(self, name) >= 0:
                v.append(f"{name} >= 0")
        if not self.T > 0:
            v.append("T > 0")
        if np.any(self.b < self.r):
            v.append("b_i >= r for every stock")
        lam = np.linalg.eigvalsh(self.sigma @ self.sigma.T)
        if not lam.min() >= self.delta:
            v.append(f"sigma sigma^T >= delta I (min eigenvalue {lam.min():.3g} < {self.delta:g})")
        return v

    def validate(self) -> "MarketParams":
        problems = self.violations()
        if problems:
            raise InvalidInputError("MarketParams invariant(s) violated: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {
            "r": self.r, "b": self.b.tolist(), "sigma": self.sigma.tolist(),
            "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
            "kappa": self.kappa, "X0": self.X0, "T": self.T, "delta": self.delta,
        }


def to_lq(mp: MarketParams) -> LQParams:
    """Embed the market problem; row ``j`` of ``D`` is column ``j`` of ``sigma``."""
    mp.validate()
    return LQParams(
        A=mp.r, Abar=0.0, B=mp.b - mp.r, b0=0.0, D=mp.sigma.T.copy(),
        Q1=mp.gamma, Q2=-mp.gamma, Q3=-mp.kappa,
        G1=mp.alpha, G2=-mp.alpha, G3=-mp.beta, T=mp.T, t0=0.0,
    )


def relative_risk(mp: MarketParams) -> tuple[np.ndarray, ConeSolution]:
    """``theta = sigma^{-1}(b - r 1)`` and the projection giving ``thetabar``."""
    try:
        theta = np.linalg.solve(mp.sigma, mp.b - mp.r)
    except np.linalg.LinAlgError as exc:
        raise InvalidInputError("sigma is singular") from exc
    return theta, solve_cone_projection(to_lq(mp).cone_problem())


def _p1(mp: MarketParams, t):
    tau = mp.T - np.asarray(t, dtype=float)
    return mp.alpha * np.exp(2 * mp.r * tau) + mp.gamma * _phi(2 * mp.r, tau)


def _p3(mp: MarketParams, t):
    tau = mp.T - np.asarray(t, dtype=float)
    return -mp.beta * np.exp(mp.r * tau) - mp.kappa * _phi(mp.r, tau)


def _quad(f, a: float, b: float) -> float:
    if b <= a:
        return 0.0
    val, _ = integrate.quad(f, a, b, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
    return float(val)


def closed_form_Ps(mp: MarketParams, t: float, cone: ConeSolution | None = None):
    """``(P1, P2, P3, P4)`` at ``t``; ``P4`` by adaptive quadrature."""
    if cone is None:
        cone = relative_risk(mp)[1]
    t = float(t)
    integral = _quad(lambda s: _p3(mp, s) ** 2 / _p1(mp, s), t, mp.T)
    P4 = -0.25 * cone.theta_norm_sq * integral
    return float(_p1(mp, t)), 0.0, float(_p3(mp, t)), P4


def mv_value(t: float, state: MeasureState, mp: MarketParams,
             cone: ConeSolution | None = None) -> float:
    P1, _, P3, P4 = closed_form_Ps(mp, t, cone)
    return P1 * state.variance + P3 * state.mean + P4


def _gain(mp: MarketParams, t):
    """``-P3 / (2 P1)``, nonnegative by construction."""
    return -_p3(mp, t) / (2 * _p1(mp, t))


def mv_strategy(t: float, mp: MarketParams, cone: ConeSolution | None = None) -> np.ndarray:
    """Dollar amounts in the stocks at ``t``: ``(sigma^T)^{-1} thetabar * (-P3 / (2 P1))``.

    ``(sigma^T)^{-1} thetabar`` is the cone multiplier ``nubar``; for
    symmetric ``sigma`` it equals ``sigma^{-1} thetabar``.
    """
    if cone is None:
        cone = relative_risk(mp)[1]
    return cone.nubar * float(_gain(mp, t))


def drift_rate(t, mp: MarketParams, cone: ConeSolution):
    """``p(t) = B . u*(t)``, the control's contribution to the mean drift."""
    return float((mp.b - mp.r) @ cone.nubar) * _gain(mp, t)


def capital_market_line(mp: MarketParams, cone: ConeSolution | None = None) -> tuple[float, float]:
    """Bounds on ``E X(T)``: all-bond wealth below, the optimal policy's mean above."""
    if cone is None:
        cone = relative_risk(mp)[1]
    growth = np.exp(mp.r * mp.T)
    extra = _quad(lambda z: drift_rate(z, mp, cone) * np.exp(-mp.r * z), 0.0, mp.T)
    return float(growth * mp.X0), float(growth * (mp.X0 + extra))


@dataclass(frozen=True)
class EfficientSolution:
    mp: MarketParams
    cone: ConeSolution
    value0: float
    cml_lower: float
    cml_upper: float
    times: np.ndarray
    p_path: np.ndarray

    def strategy(self, t: float) -> np.ndarray:
        return mv_strategy(t, self.mp, self.cone)

    def strategy_rows(self):
        for t in self.times:
            yield (t, *self.strategy(t))

    def write(self, out_dir, strategy_name: str = "strategy.csv") -> dict:
        from pathlib import Path

        out_dir = Path(out_dir)
        path = _io.write_csv(
            out_dir / strategy_name,
            ["t"] + [f"u{i + 1}" for i in range(self.mp.m)],
            self.strategy_rows(),
        )
        report = {
            "value0": self.value0,
            "cml": [self.cml_lower, self.cml_upper],
            "strategy_csv_path": path.name,
        }
        _io.write_json(out_dir / "efficient.json", report)
        return report


def efficient_solution(mp: MarketParams, n_points: int = 2049) -> EfficientSolution:
    """Value at ``(0, delta_X0)``, capital market line and the strategy path."""
    _, cone = relative_risk(mp)
    lower, upper = capital_market_line(mp, cone)
    times = np.linspace(0.0, mp.T, n_points)
    return EfficientSolution(
        mp=mp, cone=cone,
        value0=mv_value(0.0, MeasureState.dirac(mp.X0), mp, cone),
        cml_lower=lower, cml_upper=upper, times=times,
        p_path=np.asarray(drift_rate(times, mp, cone), dtype=float),
    )
