"""Nonnegative-orthant quadratic programs behind the constrained feedback law.

Two problems share the same data ``(D, B)``:

* the projection ``s(z) = 1/2 |(D^T)^{-1} z + (D^T)^{-1} B|^2`` over ``z >= 0``,
  whose minimizer ``zbar`` defines the direction
  ``thetabar = (D^T)^{-1} (zbar + B)`` and multiplier
  ``nubar = (D^T D)^{-1} (zbar + B) = D^{-1} thetabar``;
* the control subproblem ``h(z) = 1/2 z^T D^T D z - alpha B.z`` over ``z >= 0``,
  solved in closed form from the projection: ``u* = alpha * nubar`` for
  ``alpha > 0`` and ``u* = 0`` otherwise.

The projection is solved by a primal active-set method, and
:func:`brute_force_cone_min` provides an exhaustive-grid oracle for tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import InvalidInputError, NonConvergenceError, ResourceError

KKT_TOL = 1e-8
MAX_GRID_POINTS = 50_000_000
PIVOT_RTOL = 1e-7


@dataclass(frozen=True)
class ConeProblem:
    """Data ``(D, B)`` of the cone-constrained quadratics.

    Parameters
    ----------
    D : array_like, shape (m, m)
        Diffusion loading; row ``j`` multiplies the control in front of ``dW^j``.
    B : array_like, shape (m,)
        Drift loading of the control. Must be componentwise nonnegative.
    """

    D: np.ndarray
    B: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        B = np.atleast_1d(np.asarray(self.B, dtype=float)).ravel()
        m = B.size
        if D.shape != (m, m):
            raise InvalidInputError(
                f"D must be {m}x{m} to match B of length {m}, got shape {D.shape}"
            )
        if not (np.all(np.isfinite(D)) and np.all(np.isfinite(B))):
            raise InvalidInputError("D and B must be finite")
        if np.any(B < 0):
            raise InvalidInputError(f"B must be componentwise >= 0, got {B.tolist()}")
        msg = "Cholesky factorization of D^T D failed: D^T D is not positive definite"
        try:
            chol = np.linalg.cholesky(D.T @ D)
        except np.linalg.LinAlgError as exc:
            raise InvalidInputError(msg) from exc
        # rounding turns a zero pivot into ~sqrt(eps); treat that as singular too
        diag = np.abs(np.diag(chol))
        if not np.all(np.isfinite(chol)) or diag.min() <= PIVOT_RTOL * diag.max():
            raise InvalidInputError(msg)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "chol", chol)

    @property
    def m(self) -> int:
        return self.B.size

    @property
    def gram(self) -> np.ndarray:
        """``D^T D``."""
        return self.D.T @ self.D

    def gram_solve(self, v) -> np.ndarray:
        """Return ``(D^T D)^{-1} v`` through the stored Cholesky factor."""
        y = np.linalg.solve(self.chol, v)
        return np.linalg.solve(self.chol.T, y)

    def s(self, z) -> float:
        """Projection objective ``1/2 |(D^T)^{-1}(z + B)|^2``."""
        w = np.linalg.solve(self.D.T, np.asarray(z, dtype=float) + self.B)
        return 0.5 * float(w @ w)

    def h(self, z, alpha: float) -> float:
        """Control objective ``1/2 z^T D^T D z - alpha B.z``."""
        z = np.asarray(z, dtype=float)
        Dz = self.D @ z
        return 0.5 * float(Dz @ Dz) - alpha * float(self.B @ z)


@dataclass(frozen=True)
class ConeSolution:
    zbar: np.ndarray
    nubar: np.ndarray
    thetabar: np.ndarray
    s_min: float
    theta_norm_sq: float
    iterations: int = 0

    @property
    def direction(self) -> np.ndarray:
        """Feedback direction ``D^{-1} thetabar`` (equal to ``nubar``)."""
        return self.nubar


def _finish(problem: ConeProblem, z: np.ndarray, iterations: int) -> ConeSolution:
    w = z + problem.B
    theta = np.linalg.solve(problem.D.T, w)
    nu = problem.gram_solve(w)
    nu[z > 0] = 0.0  # complementarity holds exactly on the released bounds
    nsq = float(theta @ theta)
    return ConeSolution(
        zbar=z, nubar=nu, thetabar=theta, s_min=0.5 * nsq, theta_norm_sq=nsq,
        iterations=iterations,
    )


def solve_cone_projection(
    problem: ConeProblem, max_iter: int | None = None, tol: float = 1e-13
) -> ConeSolution:
    """Minimize ``s(z)`` over the nonnegative orthant.

    Primal active-set iteration on the bound constraints ``z_i >= 0``,
    warm-started from the unconstrained stationary point ``-B`` clipped to the
    cone. Each iteration either releases the bound with the most negative
    multiplier or takes a (possibly blocked) step to the minimizer on the
    current free set.

    Parameters
    ----------
    problem : ConeProblem
    max_iter : int, optional
        Iteration cap, ``3 * m`` by default.
    tol : float
        Threshold below which a step, or a negative multiplier, is treated as zero.

    Returns
    -------
    ConeSolution

    Raises
    ------
    NonConvergenceError
        If the cap is reached. ``best`` carries the last iterate as a
        :class:`ConeSolution`.
    """
    m = problem.m
    if max_iter is None:
        max_iter = 3 * m
    C = np.linalg.solve(problem.D.T, np.eye(m))  # (D^T)^{-1}
    d = -C @ problem.B
    H = C.T @ C
    z = np.maximum(-problem.B, 0.0)
    active = z <= 0.0
    scale = max(1.0, float(np.max(np.abs(problem.B), initial=0.0)))

    for it in range(1, max_iter + 1):
        free = ~active
        target = np.zeros(m)
        if free.any():
            target[free] = np.linalg.lstsq(C[:, free], d, rcond=None)[0]
        p = target - z
        if np.max(np.abs(p), initial=0.0) <= tol * scale:
            grad = H @ (z + problem.B)
            lam = np.where(active, grad, np.inf)
            j = int(np.argmin(lam))
            if not active.any() or lam[j] >= -tol * scale:
                return _finish(problem, z, it)
            active[j] = False
            continue
        step, block = 1.0, -1
        for i in np.flatnonzero(free & (p < 0)):
            ratio = -z[i] / p[i]
            if ratio < step:
                step, block = ratio, i
        z = z + step * p
        if block >= 0:
            z[block] = 0.0
            active[block] = True
        z[active] = 0.0

    raise NonConvergenceError(
        f"active-set iteration did not converge within {max_iter} iterations",
        best=_finish(problem, z, max_iter),
    )


def minimize_h(
    problem: ConeProblem, alpha: float, solution: ConeSolution | None = None
) -> tuple[np.ndarray, float]:
    """Minimize ``h(z) = 1/2 z^T D^T D z - alpha B.z`` over ``z >= 0``.

    For ``alpha > 0`` the minimizer is ``alpha * D^{-1} thetabar`` with value
    ``-alpha**2 |thetabar|**2 / 2``. For ``alpha <= 0`` the objective is
    nonnegative on the cone and vanishes at the origin, so ``(0, 0.0)`` is
    returned.
    """
    if alpha <= 0:
        return np.zeros(problem.m), 0.0
    if solution is None:
        solution = solve_cone_projection(problem)
    return alpha * solution.nubar, -0.5 * alpha**2 * solution.theta_norm_sq


def brute_force_cone_min(
    problem: ConeProblem, alpha: float, grid_spec
) -> tuple[np.ndarray, float]:
    """Exhaustive grid minimization of ``h`` on ``[lo, hi]^m``.

    ``grid_spec`` is ``(hi, step)`` or ``(lo, hi, step)``; ``lo`` defaults to 0.
    Test oracle only: cost grows as ``((hi - lo) / step + 1) ** m``.
    """
    if len(grid_spec) == 2:
        lo, (hi, step) = 0.0, grid_spec
    else:
        lo, hi, step = grid_spec
    if not (np.isfinite(lo) and np.isfinite(hi) and step > 0 and hi >= lo >= 0):
        raise InvalidInputError(f"invalid grid specification {grid_spec!r}")
    m = problem.m
    if m > 4:
        raise ResourceError(f"brute-force oracle supports m <= 4, got m = {m}")
    axis = lo + step * np.arange(int(np.floor((hi - lo) / step + 1e-9)) + 1)
    if float(axis.size) ** m > MAX_GRID_POINTS:
        raise ResourceError(
            f"grid of {axis.size}^{m} points exceeds the cap of {MAX_GRID_POINTS}"
        )
    M = problem.gram
    best_val, best_z = np.inf, None
    # Loop over the first coordinate; vectorize over the rest.
    if m == 1:
        rest = np.zeros((1, 0))
    else:
        rest = np.array(list(product(axis, repeat=m - 1)))
    for z0 in axis:
        Z = np.column_stack([np.full(rest.shape[0], z0), rest])
        vals = 0.5 * np.einsum("ij,jk,ik->i", Z, M, Z) - alpha * (Z @ problem.B)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best_z = float(vals[k]), Z[k].copy()
    return best_z, best_val


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    primal_feasibility: float
    dual_feasibility: float
    complementarity: float
    tol: float

    @property
    def residuals(self) -> dict[str, float]:
        return {
            "stationarity": self.stationarity,
            "primal_feasibility": self.primal_feasibility,
            "dual_feasibility": self.dual_feasibility,
            "complementarity": self.complementarity,
        }

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.residuals.items() if not v <= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed


def verify_kkt(problem: ConeProblem, sol: ConeSolution, tol: float = KKT_TOL) -> KKTReport:
    """Residuals of the Kuhn-Tucker system for the projection.

    Checks ``nu = (D^T D)^{-1}(z + B)``, ``z >= 0``, ``nu >= 0`` and
    ``nu_i z_i = 0`` (max over components).
    """
    z = np.asarray(sol.zbar, dtype=float)
    nu = np.asarray(sol.nubar, dtype=float)
    grad = problem.gram_solve(z + problem.B)
    return KKTReport(
        stationarity=float(np.max(np.abs(nu - grad), initial=0.0)),
        primal_feasibility=float(max(0.0, -np.min(z, initial=0.0))),
        dual_feasibility=float(max(0.0, -np.min(nu, initial=0.0))),
        complementarity=float(np.max(np.abs(nu * z), initial=0.0)),
        tol=tol,
    )
