"""Backward integration of the coefficient ODEs of the quadratic value ansatz.

The value function is sought as ``Var * P1 + P2 * mean**2 + P3 * mean + P4``.
Two quadruples are integrated backward from ``T``:

* ``P``  -- the regime where the constrained control is active
  (``P2`` obeys a Riccati equation driven by ``|thetabar|**2 / P1``);
* ``Pt`` -- the regime where the control is switched off (all linear).

The system is lower triangular (``P1`` feeds ``P2``, both feed ``P3``, and
``P1, P3`` feed ``P4``), so a single RK4 sweep over the stacked state solves
the members in dependency order.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import integrate

from . import _io
from .cone_qp import ConeProblem
from .errors import (
    DomainError,
    FiniteEscapeError,
    InvalidInputError,
    InvariantViolationError,
)

DEFAULT_STEPS = 2048
ESCAPE_GUARD = 1e12
ETA_ZERO = 1e-12
_EXACT = 1e-14


def _phi(k: float, tau):
    """``(exp(k tau) - 1) / k`` with the ``k -> 0`` limit ``tau``."""
    if k == 0.0:
        return np.asarray(tau, dtype=float) * 1.0
    return np.expm1(k * np.asarray(tau, dtype=float)) / k


@dataclass(frozen=True)
class LQParams:
    """Coefficients of the scalar-state McKean-Vlasov LQ problem.

    Dynamics ``dX = (A X + Abar E[X] + B.u + b0) ds + sum_j (D u)_j dW^j`` and
    cost ``E[G1 X_T^2 + G2 (E X_T)^2 + G3 X_T + int Q1 X^2 + Q2 (E X)^2 + Q3 X ds]``.
    Construction only normalizes shapes; call :meth:`validate` for the
    invariants.
    """

    A: float
    Abar: float
    B: np.ndarray
    b0: float
    D: np.ndarray
    Q1: float
    Q2: float
    Q3: float
    G1: float
    G2: float
    G3: float
    T: float
    t0: float = 0.0

    def __post_init__(self):
        B = np.atleast_1d(np.asarray(self.B, dtype=float)).ravel()
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "D", D)
        for name in ("A", "Abar", "b0", "Q1", "Q2", "Q3", "G1", "G2", "G3", "T", "t0"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def m(self) -> int:
        return self.B.size

    @property
    def c(self) -> float:
        """Mean drift ``A + Abar``."""
        return self.A + self.Abar

    def violations(self) -> list[str]:
        v = []
        scalars = [self.A, self.Abar, self.b0, self.Q1, self.Q2, self.Q3,
                   self.G1, self.G2, self.G3, self.T, self.t0]
        if not all(np.isfinite(scalars)):
            v.append("all coefficients must be finite")
        if not self.G1 > 0:
            v.append("G1 > 0")
        if not self.G1 + self.G2 >= 0:
            v.append("G1 + G2 >= 0")
        if not self.Q1 >= 0:
            v.append("Q1 >= 0")
        if not self.Q1 + self.Q2 >= 0:
            v.append("Q1 + Q2 >= 0")
        if not self.Q3 <= 0:
            v.append("Q3 <= 0")
        if not self.A >= 0:
            v.append("A >= 0")
        if not self.Abar >= 0:
            v.append("Abar >= 0")
        if not 0 <= self.t0 < self.T:
            v.append("0 <= t0 < T")
        return v

    def validate(self) -> "LQParams":
        problems = self.violations()
        if problems:
            raise InvalidInputError("LQParams invariant(s) violated: " + "; ".join(problems))
        self.cone_problem()
        return self

    def cone_problem(self) -> ConeProblem:
        return ConeProblem(self.D, self.B)

    def to_dict(self) -> dict:
        return {
            "A": self.A, "Abar": self.Abar, "B": self.B.tolist(), "b0": self.b0,
            "D": self.D.tolist(), "Q1": self.Q1, "Q2": self.Q2, "Q3": self.Q3,
            "G1": self.G1, "G2": self.G2, "G3": self.G3, "T": self.T, "t0": self.t0,
        }


def rhs(params: LQParams, theta_norm_sq: float, y: np.ndarray) -> np.ndarray:
    """Time derivatives of ``(P1..P4, Pt1..Pt4)``.

    ``y`` may carry extra leading axes; the last axis has length 8.
    """
    y = np.asarray(y, dtype=float)
    P1, P2, P3, _, Pt1, Pt2, Pt3, _ = np.moveaxis(y, -1, 0)
    A, c, b0 = params.A, params.c, params.b0
    q12 = params.Q1 + params.Q2
    k = theta_norm_sq / P1
    out = np.empty_like(y)
    out[..., 0] = -2 * A * P1 - params.Q1
    out[..., 1] = k * P2**2 - 2 * c * P2 - q12
    out[..., 2] = -(c - k * P2) * P3 - 2 * b0 * P2 - params.Q3
    out[..., 3] = -b0 * P3 + 0.25 * k * P3**2
    out[..., 4] = -2 * A * Pt1 - params.Q1
    out[..., 5] = -2 * c * Pt2 - q12
    out[..., 6] = -c * Pt3 - 2 * b0 * Pt2 - params.Q3
    out[..., 7] = -b0 * Pt3
    return out


def _float_rhs(params: LQParams, theta_norm_sq: float):
    """Same right-hand side as :func:`rhs` on plain floats (the RK4 hot loop)."""
    A, c, b0 = params.A, params.c, params.b0
    Q1, Q3, q12 = params.Q1, params.Q3, params.Q1 + params.Q2

    def f(y):
        P1, P2, P3, _, R1, R2, R3, _ = y
        k = theta_norm_sq / P1
        return [
            -2 * A * P1 - Q1,
            k * P2 * P2 - 2 * c * P2 - q12,
            -(c - k * P2) * P3 - 2 * b0 * P2 - Q3,
            -b0 * P3 + 0.25 * k * P3 * P3,
            -2 * A * R1 - Q1,
            -2 * c * R2 - q12,
            -c * R3 - 2 * b0 * R2 - Q3,
            -b0 * R3,
        ]

    return f


def terminal_state(params: LQParams) -> np.ndarray:
    term = [params.G1, params.G1 + params.G2, params.G3, 0.0]
    return np.array(term + term)


@dataclass(frozen=True)
class PSystem:
    """Both coefficient quadruples on a uniform grid ``t0 = tau_0 < ... < tau_K = T``.

    ``P`` and ``Pt`` have shape ``(K + 1, 4)``; ``dP`` and ``dPt`` hold the
    right-hand sides at the nodes. ``eta = P3 / P2`` is NaN where
    ``|P2| < 1e-12``.
    """

    grid: np.ndarray
    P: np.ndarray
    Pt: np.ndarray
    dP: np.ndarray
    dPt: np.ndarray
    theta_norm_sq: float
    params: LQParams = field(repr=False)
    eta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P2, P3 = self.P[:, 1], self.P[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            eta = np.where(np.abs(P2) >= ETA_ZERO, P3 / P2, np.nan)
        object.__setattr__(self, "eta", eta)

    @property
    def steps(self) -> int:
        return self.grid.size - 1

    @property
    def t0(self) -> float:
        return float(self.grid[0])

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    def state_at(self, t: float) -> np.ndarray:
        """Linearly interpolated ``(P1..P4, Pt1..Pt4)`` at time ``t``."""
        t = float(t)
        if not self.t0 - 1e-12 <= t <= self.T + 1e-12:
            raise DomainError(f"t = {t} outside [{self.t0}, {self.T}]")
        t = min(max(t, self.t0), self.T)
        h = (self.T - self.t0) / self.steps
        k = min(int((t - self.t0) / h), self.steps - 1)
        w = (t - self.grid[k]) / (self.grid[k + 1] - self.grid[k])
        lo = np.concatenate([self.P[k], self.Pt[k]])
        hi = np.concatenate([self.P[k + 1], self.Pt[k + 1]])
        if w <= 0.0:
            return lo
        if w >= 1.0:
            return hi
        return (1.0 - w) * lo + w * hi

    def quadruple(self, t: float, tilde: bool = False) -> np.ndarray:
        y = self.state_at(t)
        return y[4:] if tilde else y[:4]

    def to_rows(self):
        for i, t in enumerate(self.grid):
            yield (t, *self.P[i], *self.Pt[i], self.eta[i])

    def to_csv(self, path):
        header = ["t", "P1", "P2", "P3", "P4", "Pt1", "Pt2", "Pt3", "Pt4", "eta"]
        return _io.write_csv(path, header, self.to_rows())


for _i in range(4):
    setattr(PSystem, f"P{_i + 1}", property(lambda self, i=_i: self.P[:, i]))
    setattr(PSystem, f"Pt{_i + 1}", property(lambda self, i=_i: self.Pt[:, i]))
    setattr(PSystem, f"dP{_i + 1}", property(lambda self, i=_i: self.dP[:, i]))
    setattr(PSystem, f"dPt{_i + 1}", property(lambda self, i=_i: self.dPt[:, i]))
del _i


def solve_p_system(
    params: LQParams,
    theta_norm_sq: float,
    steps: int = DEFAULT_STEPS,
    check: bool = True,
) -> PSystem:
    """Integrate both quadruples backward from ``T`` with classic RK4.

    Parameters
    ----------
    params : LQParams
    theta_norm_sq : float
        ``|thetabar|**2`` from the cone projection.
    steps : int
        Number of uniform steps on ``[t0, T]`` (at least 16).
    check : bool
        Validate ``params`` first. Disable only to explore parameters outside
        the admissible set (e.g. to provoke a finite escape).

    Raises
    ------
    FiniteEscapeError
        ``|P2|`` exceeded ``1e12`` (or became non-finite) before ``t0``.
    InvariantViolationError
        ``P1`` is not strictly positive somewhere on the grid.
    """
    if check:
        params.validate()
    if steps < 16:
        raise InvalidInputError(f"steps must be >= 16, got {steps}")
    if not theta_norm_sq >= 0:
        raise InvalidInputError(f"theta_norm_sq must be >= 0, got {theta_norm_sq}")
    theta_norm_sq = float(theta_norm_sq)
    grid = np.linspace(params.t0, params.T, steps + 1)
    h = -(params.T - params.t0) / steps
    Y = np.empty((steps + 1, 8))
    Y[-1] = terminal_state(params)
    f = _float_rhs(params, theta_norm_sq)
    y = Y[-1].tolist()
    k = steps
    try:
        for k in range(steps, 0, -1):
            k1 = f(y)
            k2 = f([a + 0.5 * h * b for a, b in zip(y, k1)])
            k3 = f([a + 0.5 * h * b for a, b in zip(y, k2)])
            k4 = f([a + h * b for a, b in zip(y, k3)])
            y = [a + (h / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
                 for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)]
            if not all(math.isfinite(v) for v in y) or abs(y[1]) > ESCAPE_GUARD:
                raise OverflowError
            Y[k - 1] = y
    except (OverflowError, ZeroDivisionError):
        raise FiniteEscapeError(
            f"P2 escaped |P2| > {ESCAPE_GUARD:g} near t = {grid[k - 1]:.6g} "
            "(finite escape, or a step too large for the Riccati stiffness)",
            escape_time=float(grid[k - 1]),
        ) from None
    if np.any(Y[:, 0] <= 0):
        bad = grid[np.argmax(Y[:, 0] <= 0)]
        raise InvariantViolationError(f"P1 <= 0 at t = {bad:.6g}")
    dY = rhs(params, theta_norm_sq, Y)
    return PSystem(
        grid=grid, P=Y[:, :4].copy(), Pt=Y[:, 4:].copy(),
        dP=dY[:, :4].copy(), dPt=dY[:, 4:].copy(),
        theta_norm_sq=theta_norm_sq, params=params,
    )


def closed_form_P1(params: LQParams, t):
    """``G1 exp(2A(T-t)) + Q1 (exp(2A(T-t)) - 1) / (2A)``; linear limit at ``A = 0``."""
    tau = params.T - np.asarray(t, dtype=float)
    return params.G1 * np.exp(2 * params.A * tau) + params.Q1 * _phi(2 * params.A, tau)


def closed_form_tilde_P2(params: LQParams, t):
    """Explicit solution of the linear ``Pt2`` equation."""
    tau = params.T - np.asarray(t, dtype=float)
    c = params.c
    return ((params.G1 + params.G2) * np.exp(2 * c * tau)
            + (params.Q1 + params.Q2) * _phi(2 * c, tau))


def closed_form_tilde_P3(params: LQParams, t):
    """Explicit solution of the linear ``Pt3`` equation driven by ``Pt2``."""
    tau = params.T - np.asarray(t, dtype=float)
    c = params.c
    g12, q12 = params.G1 + params.G2, params.Q1 + params.Q2
    e, ph = np.exp(c * tau), _phi(c, tau)
    return (params.G3 * e
            + 2 * params.b0 * (g12 * e * ph + 0.5 * q12 * ph**2)
            + params.Q3 * ph)


def _require_q_identity(params: LQParams):
    if abs(params.Q3) > _EXACT or abs(params.Q1 + params.Q2) > _EXACT:
        raise DomainError(
            "closed form requires Q3 = 0 and Q1 + Q2 = 0, got "
            f"Q3 = {params.Q3}, Q1 + Q2 = {params.Q1 + params.Q2}"
        )


def closed_form_eta(params: LQParams, t):
    """Ratio ``P3 / P2`` (equal to ``Pt3 / Pt2``) when ``Q3 = Q1 + Q2 = 0``."""
    _require_q_identity(params)
    g12 = params.G1 + params.G2
    if g12 == 0:
        raise DomainError("closed-form eta requires G1 + G2 != 0")
    tau = params.T - np.asarray(t, dtype=float)
    c = params.c
    return params.G3 / g12 * np.exp(-c * tau) + 2 * params.b0 * _phi(-c, tau)


class BernoulliP2(NamedTuple):
    P2: float
    Pt2: float
    displayed_P2: float

    @property
    def deviation(self) -> float:
        """Exact minus the constant-``P1`` shortcut formula."""
        return self.P2 - self.displayed_P2


def closed_form_bernoulli_P2(params: LQParams, theta_norm_sq: float, t: float) -> BernoulliP2:
    """``P2`` and ``Pt2`` when the Riccati equation reduces to a Bernoulli equation.

    With ``Q1 + Q2 = 0`` the reciprocal ``y = 1 / P2`` solves a linear ODE:

        1 / P2(t) = exp(-2c(T-t)) / (G1+G2)
                    + |thetabar|^2 * int_t^T exp(-2c(s-t)) / P1(s) ds,

    ``c = A + Abar``, evaluated here by adaptive quadrature. ``displayed_P2``
    is the shortcut that freezes ``P1`` at ``P1(t)`` inside the integral;
    it coincides with ``P2`` only when ``P1`` is constant.
    """
    _require_q_identity(params)
    g12 = params.G1 + params.G2
    bad = []
    if not g12 > 0:
        bad.append("G1 + G2 > 0")
    if params.Q1 < 0:
        bad.append("Q1 >= 0")
    if params.b0 < 0:
        bad.append("b0 >= 0")
    if params.G3 > 0:
        bad.append("G3 <= 0")
    if params.A < 0:
        bad.append("A >= 0")
    if bad:
        raise DomainError("Bernoulli closed form requires " + ", ".join(bad))
    t = float(t)
    tau = params.T - t
    c = params.c
    integral, _ = integrate.quad(
        lambda s: np.exp(-2 * c * (s - t)) / closed_form_P1(params, s),
        t, params.T, epsabs=1e-14, epsrel=1e-13, limit=200,
    )
    decay = np.exp(-2 * c * tau)
    P2 = 1.0 / (decay / g12 + theta_norm_sq * integral)
    shortcut = _phi(-2 * c, tau) / closed_form_P1(params, t)
    displayed = 1.0 / (decay / g12 + theta_norm_sq * float(shortcut))
    Pt2 = g12 * np.exp(2 * c * tau)
    return BernoulliP2(float(P2), float(Pt2), float(displayed))


@dataclass(frozen=True)
class ComparisonReport:
    """Grid-wise check of ``0 < P1 = Pt1``, ``P2 <= Pt2``, ``P4 <= Pt4``."""

    p1_mismatch: float
    p1_min: float
    p2_excess: float
    p4_excess: float
    hypotheses_hold: bool

    def passed(self, slack: float = 1e-7) -> bool:
        return (self.p1_min > 0 and self.p1_mismatch <= slack
                and self.p2_excess <= slack and self.p4_excess <= slack)


def check_comparison(ps: PSystem, params: LQParams) -> ComparisonReport:
    """Largest violations of the comparison inequalities over the grid.

    ``hypotheses_hold`` reports ``Q1 >= 0, G3 <= 0, A >= 0``; they are not
    enforced.
    """
    return ComparisonReport(
        p1_mismatch=float(np.max(np.abs(ps.P[:, 0] - ps.Pt[:, 0]))),
        p1_min=float(np.min(ps.P[:, 0])),
        p2_excess=float(np.max(ps.P[:, 1] - ps.Pt[:, 1])),
        p4_excess=float(np.max(ps.P[:, 3] - ps.Pt[:, 3])),
        hypotheses_hold=bool(params.Q1 >= 0 and params.G3 <= 0 and params.A >= 0),
    )
