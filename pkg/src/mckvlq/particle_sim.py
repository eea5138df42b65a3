"""Interacting-particle Monte Carlo for the controlled McKean-Vlasov dynamics.

``N`` particles share the feedback ``u(t, mean)`` and, through ``Abar``, the
empirical mean of the cloud (or, in ``deterministic`` mode, the mean ODE).
Each step uses the exponential Euler-Maruyama update

    X' = e^{A h} X + (e^{c h} - e^{A h}) mean + phi(c, h) (B.u + b0)
         + sqrt(phi(2A, h)) (D u) . Z,        c = A + Abar,

which is exact for the linear part with the control frozen over the step.

Reproducibility: particles are split into fixed-size chunks, each with its
own Philox stream keyed by ``(seed, chunk)``. Chunk results are reduced in
chunk order, so output is bit-identical for any number of worker threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import _io
from .cone_qp import ConeSolution
from .errors import InvalidInputError, NumericFailure
from .lq_solver import DEAD_BAND, optimal_control
from .ode_engine import LQParams, PSystem, _phi

Policy = Callable[[float, float], np.ndarray]
THREADS_ENV = "MCKVLQ_THREADS"


def zero_policy(m: int) -> Policy:
    zero = np.zeros(m)
    return lambda t, mean: zero


def optimal_policy(ps: PSystem, cone: ConeSolution, tau: float = DEAD_BAND) -> Policy:
    return lambda t, mean: optimal_control(t, mean, ps, cone, tau)


def scaled_policy(base: Policy, factor: float) -> Policy:
    return lambda t, mean: factor * np.asarray(base(t, mean))


def resolve_policy(spec: Union[str, Policy, None], ps: PSystem, cone: ConeSolution,
                   tau: float = DEAD_BAND) -> Policy:
    """``"optimal"``, ``"zero"``, ``"scaled:<factor>"`` or a callable."""
    if callable(spec):
        return spec
    if spec is None or spec == "optimal":
        return optimal_policy(ps, cone, tau)
    if spec == "zero":
        return zero_policy(cone.nubar.size)
    if isinstance(spec, str) and spec.startswith("scaled:"):
        try:
            factor = float(spec.split(":", 1)[1])
        except ValueError:
            raise InvalidInputError(f"bad policy factor in {spec!r}") from None
        return scaled_policy(optimal_policy(ps, cone, tau), factor)
    raise InvalidInputError(f"unknown policy {spec!r}; use optimal, zero or scaled:<factor>")


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class SimConfig:
    n_particles: int
    dt: float
    seed: int
    mean_mode: str = "empirical"
    policy: Union[str, Policy, None] = "optimal"
    x0: float = 0.0
    x0_var: float = 0.0
    n_batches: int = 16
    chunk_size: int = 16384
    threads: int | None = None

    def __post_init__(self):
        if self.mean_mode not in ("empirical", "deterministic"):
            raise InvalidInputError(f"mean_mode must be empirical or deterministic, got {self.mean_mode!r}")
        if self.n_particles < 1 or (self.mean_mode == "empirical" and self.n_particles < 2):
            raise InvalidInputError("empirical mode needs at least 2 particles")
        if not self.dt > 0:
            raise InvalidInputError(f"dt must be > 0, got {self.dt}")
        if not self.x0_var >= 0:
            raise InvalidInputError(f"x0_var must be >= 0, got {self.x0_var}")
        if not 2 <= self.n_batches <= self.n_particles:
            raise InvalidInputError("need 2 <= n_batches <= n_particles")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInputError("seed must be a 64-bit unsigned integer")

    def n_steps(self, params: LQParams) -> int:
        span = params.T - params.t0
        k = int(round(span / self.dt))
        if k < 1 or abs(k * self.dt - span) > 1e-12 * max(1.0, span):
            raise InvalidInputError(f"dt = {self.dt} does not divide T - t0 = {span}")
        return k

    def to_dict(self) -> dict:
        pol = self.policy if isinstance(self.policy, str) or self.policy is None else "callable"
        return {
            "n_particles": self.n_particles, "dt": self.dt, "seed": int(self.seed),
            "mean_mode": self.mean_mode, "policy": pol, "x0": self.x0,
            "x0_var": self.x0_var, "n_batches": self.n_batches,
            "chunk_size": self.chunk_size,
        }


@dataclass(frozen=True)
class MomentPaths:
    """Per-batch moments on the time grid; ``mean`` and ``var`` have shape ``(K+1, n_batches)``."""

    times: np.ndarray
    counts: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    mode: str = "empirical"

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.counts / self.counts.sum()
        mu = self.mean @ w
        var = (self.var + (self.mean - mu[:, None]) ** 2) @ w
        return mu, var


def _cost_from_moments(times, mean, var, params: LQParams) -> np.ndarray:
    """Cost functional for moment paths; leading axis is time, trailing broadcast."""
    sq = mean**2
    terminal = params.G1 * var[-1] + (params.G1 + params.G2) * sq[-1] + params.G3 * mean[-1]
    running = params.Q1 * var + (params.Q1 + params.Q2) * sq + params.Q3 * mean
    if times.size > 1:
        dt = np.diff(times)
        running_int = np.tensordot(dt, 0.5 * (running[1:] + running[:-1]), axes=(0, 0))
    else:
        running_int = 0.0 * terminal
    return terminal + running_int


def empirical_cost(paths: MomentPaths, params: LQParams) -> tuple[float, float]:
    """Estimate of the cost and its batch-means standard error.

    ``Var`` and the squared means enter nonlinearly, so the error is taken
    from the spread of the cost evaluated batch by batch.
    """
    mu, var = paths.pooled()
    J = float(_cost_from_moments(paths.times, mu, var, params))
    Jb = _cost_from_moments(paths.times, paths.mean, paths.var, params)
    nb = Jb.size
    stderr = float(np.std(Jb, ddof=1) / np.sqrt(nb)) if nb > 1 else float("nan")
    return J, stderr


@dataclass(frozen=True)
class SimResult:
    times: np.ndarray
    mean_path: np.ndarray
    var_path: np.ndarray
    cost_estimate: float
    cost_stderr: float
    terminal_mean: float
    terminal_var: float
    terminal_mean_stderr: float
    terminal_var_stderr: float
    stderr_reliable: bool
    paths: MomentPaths = field(repr=False)
    config: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {
            "J": self.cost_estimate,
            "stderr": self.cost_stderr,
            "stderr_reliable": self.stderr_reliable,
            "terminal_mean": self.terminal_mean,
            "terminal_mean_stderr": self.terminal_mean_stderr,
            "terminal_var": self.terminal_var,
            "terminal_var_stderr": self.terminal_var_stderr,
            "config": self.config,
        }

    def to_csv(self, path):
        return _io.write_csv(path, ["t", "mean", "var"],
                             zip(self.times, self.mean_path, self.var_path))

    def to_json(self, path, extra: dict | None = None):
        data = self.summary()
        if extra:
            data.update(extra)
        return _io.write_json(path, data)


class _Chunk:
    __slots__ = ("x", "batch", "rng")

    def __init__(self, x, batch, rng):
        self.x, self.batch, self.rng = x, batch, rng


def _make_chunks(cfg: SimConfig, m: int) -> list[_Chunk]:
    n = cfg.n_particles
    chunks = []
    for ci, start in enumerate(range(0, n, cfg.chunk_size)):
        stop = min(start + cfg.chunk_size, n)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(cfg.seed), spawn_key=(ci,))))
        idx = np.arange(start, stop)
        if cfg.x0_var > 0:
            x = cfg.x0 + np.sqrt(cfg.x0_var) * rng.standard_normal(stop - start)
        else:
            x = np.full(stop - start, float(cfg.x0))
        chunks.append(_Chunk(x, (idx * cfg.n_batches) // n, rng))
    return chunks


def simulate(params: LQParams, ps: PSystem, cone: ConeSolution, cfg: SimConfig,
             tau: float = DEAD_BAND) -> SimResult:
    """Run the particle system from ``t0`` to ``T`` and estimate the cost.

    Raises
    ------
    NumericFailure
        A particle state became non-finite; the message names the step.
    """
    m = params.m
    K = cfg.n_steps(params)
    h = (params.T - params.t0) / K
    times = params.t0 + h * np.arange(K + 1)
    times[-1] = params.T
    policy = resolve_policy(cfg.policy, ps, cone, tau)
    nb = cfg.n_batches
    threads = cfg.threads or default_threads()

    A, c = params.A, params.c
    eA, eC = np.exp(A * h), np.exp(c * h)
    phi_c = float(_phi(c, h))
    noise_sd = np.sqrt(float(_phi(2 * A, h)))

    chunks = _make_chunks(cfg, m)
    counts = np.zeros(nb)
    for ch in chunks:
        counts += np.bincount(ch.batch, minlength=nb)
    mean_b = np.empty((K + 1, nb))
    var_b = np.empty((K + 1, nb))

    def moments():
        # two passes (batch means, then centered squares) keep degenerate laws exact
        s1 = np.zeros(nb)
        for ch in chunks:
            s1 += np.bincount(ch.batch, weights=ch.x, minlength=nb)
        mb = s1 / counts
        s2 = np.zeros(nb)
        for ch in chunks:
            d = ch.x - mb[ch.batch]
            s2 += np.bincount(ch.batch, weights=d * d, minlength=nb)
        return mb, s2 / counts

    mean_b[0], var_b[0] = moments()
    det_mean = float(cfg.x0)

    def step_chunk(ch: _Chunk, drift_shift: float, loading: np.ndarray):
        z = ch.rng.standard_normal((ch.x.size, m))
        with np.errstate(over="ignore", invalid="ignore"):  # caught after the step
            ch.x = eA * ch.x + drift_shift + noise_sd * (z @ loading)

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for k in range(K):
            t = times[k]
            if cfg.mean_mode == "empirical":
                mu = float(mean_b[k] @ (counts / counts.sum()))
            else:
                mu = det_mean
            u = np.asarray(policy(t, mu), dtype=float)
            forcing = float(params.B @ u) + params.b0
            shift = (eC - eA) * mu + phi_c * forcing
            loading = params.D @ u
            if pool is None:
                for ch in chunks:
                    step_chunk(ch, shift, loading)
            else:
                list(pool.map(lambda ch: step_chunk(ch, shift, loading), chunks))
            if cfg.mean_mode == "deterministic":
                det_mean = eC * det_mean + phi_c * forcing
            with np.errstate(over="ignore", invalid="ignore"):
                mean_b[k + 1], var_b[k + 1] = moments()
            if not (np.all(np.isfinite(mean_b[k + 1])) and np.all(np.isfinite(var_b[k + 1]))):
                raise NumericFailure(f"non-finite particle state at step {k + 1} (t = {times[k + 1]:.6g})")
    finally:
        if pool is not None:
            pool.shutdown()

    paths = MomentPaths(times, counts, mean_b, var_b, cfg.mean_mode)
    J, se = empirical_cost(paths, params)
    mu, var = paths.pooled()
    sqn = np.sqrt(nb)
    return SimResult(
        times=times, mean_path=mu, var_path=var,
        cost_estimate=J, cost_stderr=se,
        terminal_mean=float(mu[-1]), terminal_var=float(var[-1]),
        terminal_mean_stderr=float(np.std(mean_b[-1], ddof=1) / sqn),
        terminal_var_stderr=float(np.std(var_b[-1], ddof=1) / sqn),
        stderr_reliable=not (cfg.mean_mode == "empirical" and cfg.n_particles < 32),
        paths=paths, config=cfg.to_dict(),
    )


def mean_ode(params: LQParams, ps: PSystem, cone: ConeSolution, x0: float,
             policy: Union[str, Policy, None] = "optimal",
             tau: float = DEAD_BAND) -> tuple[np.ndarray, np.ndarray]:
    """RK4 solution of ``d mean = ((A + Abar) mean + B.u(t, mean) + b0) dt`` on ``ps.grid``."""
    pol = resolve_policy(policy, ps, cone, tau)
    B, c, b0 = params.B, params.c, params.b0

    def f(t, x):
        return c * x + float(B @ pol(t, x)) + b0

    grid = ps.grid
    out = np.empty(grid.size)
    out[0] = x = float(x0)
    for k in range(grid.size - 1):
        t, hk = grid[k], grid[k + 1] - grid[k]
        k1 = f(t, x)
        k2 = f(t + hk / 2, x + hk / 2 * k1)
        k3 = f(t + hk / 2, x + hk / 2 * k2)
        k4 = f(t + hk, x + hk * k3)
        x = x + hk / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = x
    return grid.copy(), out
