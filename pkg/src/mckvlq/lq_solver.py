"""Value function, feedback law and HJB verification for the constrained problem.

Given a solved :class:`~mckvlq.ode_engine.PSystem` and the cone projection,
the state space ``(t, mu)`` splits by the sign of the switching value

    s(t, mean) = (2 P2(t) mean + P3(t)) / (2 P1(t)):

``Pi1`` (``s < 0``, control active, value from ``P``), ``Pi2`` (``s > 0``,
control off, value from ``Pt``) and the switching curve ``Pi3`` (``s = 0``,
widened to a dead band ``|s| <= tau``). On ``Pi3`` the value is reported as
``min(V1, V2)`` and flagged as conjectural.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import _io
from .cone_qp import ConeSolution, minimize_h
from .errors import DomainError, InvalidInputError
from .ode_engine import LQParams, PSystem, rhs

DEAD_BAND = 1e-9


@dataclass(frozen=True)
class MeasureState:
    """A law on the real line through its first two moments.

    ``sample`` optionally carries an empirical representation; its population
    moments must match ``mean`` and ``variance``.
    """

    mean: float
    variance: float
    sample: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mean", float(self.mean))
        object.__setattr__(self, "variance", float(self.variance))
        if not self.variance >= 0:
            raise InvalidInputError(f"variance must be >= 0, got {self.variance}")
        if self.sample is not None:
            xs = np.asarray(self.sample, dtype=float).ravel()
            object.__setattr__(self, "sample", xs)
            tol = 1e-12 * max(1.0, abs(self.mean), self.variance)
            if abs(xs.mean() - self.mean) > tol or abs(xs.var() - self.variance) > tol:
                raise InvalidInputError("sample moments disagree with (mean, variance)")

    @classmethod
    def dirac(cls, x: float) -> "MeasureState":
        return cls(x, 0.0)

    @classmethod
    def from_sample(cls, xs) -> "MeasureState":
        xs = np.asarray(xs, dtype=float).ravel()
        return cls(xs.mean(), xs.var(), sample=xs)


class Region(str, enum.Enum):
    PI1 = "Pi1"
    PI2 = "Pi2"
    PI3 = "Pi3"


@dataclass(frozen=True)
class RegionTag:
    region: Region
    switch_value: float


def switch_value(quad, mean: float) -> float:
    P1, P2, P3 = quad[0], quad[1], quad[2]
    return (2 * P2 * mean + P3) / (2 * P1)


def classify_region(t: float, mean: float, ps: PSystem, tau: float = DEAD_BAND) -> RegionTag:
    if tau < 0:
        raise InvalidInputError(f"dead band must be >= 0, got {tau}")
    sv = switch_value(ps.quadruple(t), mean)
    if sv < -tau:
        region = Region.PI1
    elif sv > tau:
        region = Region.PI2
    else:
        region = Region.PI3
    return RegionTag(region, float(sv))


def _quadratic(quad, state: MeasureState) -> float:
    P1, P2, P3, P4 = quad
    return float(state.variance * P1 + P2 * state.mean**2 + P3 * state.mean + P4)


@dataclass(frozen=True)
class ValueResult:
    v: float
    region: RegionTag
    v_other: float | None = None
    conjectural: bool = False
    uses_tilde: bool = False


def value(t: float, state: MeasureState, ps: PSystem, tau: float = DEAD_BAND) -> ValueResult:
    """Piecewise value ``V1`` on ``Pi1``, ``V2`` on ``Pi2``, ``min(V1, V2)`` on ``Pi3``."""
    tag = classify_region(t, state.mean, ps, tau)
    y = ps.state_at(t)
    v1, v2 = _quadratic(y[:4], state), _quadratic(y[4:], state)
    if tag.region is Region.PI1:
        return ValueResult(v1, tag)
    if tag.region is Region.PI2:
        return ValueResult(v2, tag, uses_tilde=True)
    if v2 < v1:
        return ValueResult(v2, tag, v_other=v1, conjectural=True, uses_tilde=True)
    return ValueResult(v1, tag, v_other=v2, conjectural=True)


def optimal_control(
    t: float, mean: float, ps: PSystem, cone: ConeSolution, tau: float = DEAD_BAND
) -> np.ndarray:
    """Feedback ``-D^{-1} thetabar * s(t, mean)`` on ``Pi1``, zero elsewhere."""
    tag = classify_region(t, mean, ps, tau)
    if tag.region is Region.PI1:
        return -tag.switch_value * cone.nubar
    return np.zeros_like(cone.nubar)


def lions_derivatives(
    t: float, x, state: MeasureState, ps: PSystem, tau: float = DEAD_BAND
) -> tuple[np.ndarray, float]:
    """``d_mu V(t, mu)(x)`` and ``d_x d_mu V`` for the quadruple selected by :func:`value`."""
    res = value(t, state, ps, tau)
    P1, P2, P3, _ = ps.quadruple(t, tilde=res.uses_tilde)
    x = np.asarray(x, dtype=float)
    dmu = 2 * P1 * (x - state.mean) + 2 * P2 * state.mean + P3
    return dmu, float(2 * P1)


def lifted_value(t: float, sample, ps: PSystem, tau: float = DEAD_BAND) -> float:
    """Value of the empirical law of ``sample`` (lift to random variables)."""
    return value(t, MeasureState.from_sample(sample), ps, tau).v


def hamiltonian(params: LQParams, x, u, state: MeasureState, p, q_factor: float):
    """``f(x, mu, u) + b(x, mu, u) p + q_factor / 2 * u^T D^T D u``.

    ``q_factor`` is ``d_x d_mu V``; contracting ``Q = q_factor * D u`` with
    ``sigma = D u`` gives the trace term. ``x`` and ``p`` broadcast.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    mbar = state.mean
    f = params.Q1 * x**2 + params.Q2 * mbar**2 + params.Q3 * x
    b = params.A * x + params.Abar * mbar + float(params.B @ u) + params.b0
    Du = params.D @ u
    return f + b * np.asarray(p, dtype=float) + 0.5 * q_factor * float(Du @ Du)


def expected_hamiltonian(params: LQParams, u, state: MeasureState, quad) -> float:
    """``E[H(xi, u, mu, d_mu V(xi), d_x d_mu V)]`` for ``xi ~ mu``.

    ``H`` is quadratic in ``xi``, so the symmetric two-point rule
    ``mean +- sqrt(Var)`` is exact.
    """
    P1, P2, P3, _ = quad
    sd = np.sqrt(state.variance)
    xs = np.array([state.mean - sd, state.mean + sd])
    p = 2 * P1 * (xs - state.mean) + 2 * P2 * state.mean + P3
    return float(np.mean(hamiltonian(params, xs, u, state, p, 2 * P1)))


def hjb_residual(
    t: float,
    state: MeasureState,
    ps: PSystem,
    cone: ConeSolution,
    tau: float = DEAD_BAND,
    derivative: str = "rhs",
) -> float:
    """Residual ``d_t V + inf_{u >= 0} E[H]`` of the HJB equation at ``(t, mu)``.

    The quadruple follows :func:`value`. The infimum uses :func:`minimize_h`
    with ``alpha = -(2 P2 mean + P3) / (2 P1)`` for that quadruple, and the
    expectation is exact (see :func:`expected_hamiltonian`). Time derivatives
    come from the ODE right-hand sides at the interpolated state
    (``derivative="rhs"``) or from fourth-order finite differences of the
    computed trajectories (``derivative="fd"``).

    Raises
    ------
    DomainError
        At ``t = T``, where the terminal condition replaces the equation.
    """
    params = ps.params
    if t >= ps.T - 1e-12 * max(1.0, abs(ps.T)):
        raise DomainError("HJB residual is not defined at t = T; check terminal conditions")
    res = value(t, state, ps, tau)
    y = ps.state_at(t)
    sl = slice(4, 8) if res.uses_tilde else slice(0, 4)
    quad = y[sl]
    if derivative == "rhs":
        dq = rhs(params, ps.theta_norm_sq, y)[sl]
    elif derivative == "fd":
        dq = _interp_rows(ps, fd_derivatives(ps), t)[sl]
    else:
        raise InvalidInputError(f"derivative must be 'rhs' or 'fd', got {derivative!r}")
    dtV = state.variance * dq[0] + dq[1] * state.mean**2 + dq[2] * state.mean + dq[3]
    alpha = -switch_value(quad, state.mean)
    u, _ = minimize_h(params.cone_problem(), alpha, cone)
    return float(dtV + expected_hamiltonian(params, u, state, quad))


def fd_derivatives(ps: PSystem) -> np.ndarray:
    """Fourth-order finite-difference time derivatives of ``(P, Pt)`` on the grid."""
    Y = np.hstack([ps.P, ps.Pt])
    h = (ps.T - ps.t0) / ps.steps
    d = np.empty_like(Y)
    d[2:-2] = (-Y[4:] + 8 * Y[3:-1] - 8 * Y[1:-3] + Y[:-4]) / (12 * h)
    d[0] = (-25 * Y[0] + 48 * Y[1] - 36 * Y[2] + 16 * Y[3] - 3 * Y[4]) / (12 * h)
    d[1] = (-3 * Y[0] - 10 * Y[1] + 18 * Y[2] - 6 * Y[3] + Y[4]) / (12 * h)
    d[-1] = (25 * Y[-1] - 48 * Y[-2] + 36 * Y[-3] - 16 * Y[-4] + 3 * Y[-5]) / (12 * h)
    d[-2] = (3 * Y[-1] + 10 * Y[-2] - 18 * Y[-3] + 6 * Y[-4] - Y[-5]) / (12 * h)
    return d


def _interp_rows(ps: PSystem, rows: np.ndarray, t: float) -> np.ndarray:
    return np.array([np.interp(t, ps.grid, rows[:, j]) for j in range(rows.shape[1])])


@dataclass
class HJBSweep:
    """Residuals on a ``(t, mean, var)`` grid with ``Pi3`` points skipped."""

    rows: list[tuple]
    m: int
    skipped: int = 0

    @property
    def residuals(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows])

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.residuals), initial=0.0))

    @property
    def argmax(self) -> tuple | None:
        if not self.rows:
            return None
        r = self.rows[int(np.argmax(np.abs(self.residuals)))]
        return r[0], r[1], r[2]

    def to_csv(self, path):
        header = ["t", "mean", "var", "region", "residual"]
        header += [f"u{i + 1}" for i in range(self.m)] + ["V"]
        rows = ((t, mu, var, reg, res, *u, v) for t, mu, var, reg, res, u, v in self.rows)
        return _io.write_csv(path, header, rows)


def hjb_sweep(
    ps: PSystem,
    cone: ConeSolution,
    times,
    means,
    variances=(0.0, 1.0, 10.0),
    tau: float = DEAD_BAND,
    derivative: str = "rhs",
) -> HJBSweep:
    rows, skipped = [], 0
    for var in variances:
        for t in times:
            for mu in means:
                state = MeasureState(mu, var)
                tag = classify_region(t, mu, ps, tau)
                if tag.region is Region.PI3:
                    skipped += 1
                    continue
                r = hjb_residual(t, state, ps, cone, tau, derivative)
                u = optimal_control(t, mu, ps, cone, tau)
                v = value(t, state, ps, tau).v
                rows.append((float(t), float(mu), float(var), tag.region.value, r,
                             tuple(float(x) for x in u), v))
    return HJBSweep(rows, cone.nubar.size, skipped)


def default_sweep_axes(ps: PSystem, n_t: int = 50, n_mean: int = 50,
                       mean_range: tuple[float, float] = (-5.0, 5.0)):
    """``n_t`` times in ``[t0, T)`` and ``n_mean`` evenly spaced means."""
    times = np.linspace(ps.t0, ps.T, n_t + 1)[:-1]
    means = np.linspace(mean_range[0], mean_range[1], n_mean)
    return times, means
