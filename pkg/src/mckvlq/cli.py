"""Command-line front end: ``mckvlq {solve, hjb-check, simulate, coneqp}``.

Problem files are TOML documents::

    kind = "finance"            # or "lq"

    [parameters]                # MarketParams or LQParams fields
    r = 0.06
    b = [0.12]
    sigma = [[0.15]]
    alpha = 1.0
    beta = 1.0
    gamma = 0.0
    kappa = 0.0
    X0 = 1.0
    T = 1.0

    [numerics]                  # all optional
    steps = 2048
    particles = 10000
    seed = 20240611

    [simulation]                # all optional
    policy = "optimal"

Unknown keys are rejected. Exit codes: 0 ok, 1 check failed, 2 invalid
input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import _io
from .cone_qp import ConeProblem, solve_cone_projection, verify_kkt
from .errors import InvalidInputError, MckvlqError, NumericFailure
from .finance import MarketParams, capital_market_line, efficient_solution, to_lq
from .lq_solver import (
    DEAD_BAND,
    MeasureState,
    Region,
    classify_region,
    default_sweep_axes,
    hjb_sweep,
    optimal_control,
    value,
)
from .ode_engine import DEFAULT_STEPS, LQParams, solve_p_system
from .particle_sim import SimConfig, simulate

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3

LQ_KEYS = {"A", "Abar", "B", "b0", "D", "Q1", "Q2", "Q3", "G1", "G2", "G3", "T", "t0"}
LQ_OPTIONAL = {"t0": 0.0, "b0": 0.0, "Abar": 0.0, "Q2": 0.0, "Q3": 0.0, "G2": 0.0, "G3": 0.0}
FINANCE_KEYS = {"r", "b", "sigma", "alpha", "beta", "gamma", "kappa", "X0", "T", "delta"}
FINANCE_OPTIONAL = {"beta": 0.0, "gamma": 0.0, "kappa": 0.0, "delta": 1e-10}
NUMERICS = {
    "steps": DEFAULT_STEPS, "particles": 10_000, "dt": None, "seed": 0,
    "tolerance": 1e-6, "dead_band": DEAD_BAND,
}
SIMULATION = {"policy": "optimal", "mean_mode": "empirical", "x0": None, "x0_var": 0.0,
              "batches": 16}
HJB = {"n_t": 50, "n_mean": 50, "mean_min": -5.0, "mean_max": 5.0,
       "variances": [0.0, 1.0, 10.0], "derivative": "rhs"}
TOP_LEVEL = {"kind", "parameters", "numerics", "simulation", "hjb", "probes"}
PROBE_KEYS = {"t", "mean", "var"}


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_keys(section: str, data: dict, allowed: set):
    if not isinstance(data, dict):
        raise InvalidInputError(f"[{section}] must be a table")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise InvalidInputError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _numeric_array(name: str, value, ndim: int):
    arr = np.asarray(value, dtype=object)
    if arr.ndim != ndim or arr.size == 0 or not all(_is_number(v) for v in arr.ravel()):
        raise InvalidInputError(f"parameter {name!r} must be a {ndim}-d array of numbers")
    return [float(v) for v in value] if ndim == 1 else [[float(v) for v in row] for row in value]


def _merge(section: str, given: dict, defaults: dict) -> dict:
    _check_keys(section, given, set(defaults))
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class ProblemFile:
    """A validated problem document; :meth:`to_dict` echoes it losslessly."""

    kind: str
    parameters: dict
    numerics: dict = field(default_factory=lambda: dict(NUMERICS))
    simulation: dict = field(default_factory=lambda: dict(SIMULATION))
    hjb: dict = field(default_factory=lambda: copy.deepcopy(HJB))
    probes: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemFile":
        _check_keys("top level", data, TOP_LEVEL)
        kind = data.get("kind")
        if kind not in ("lq", "finance"):
            raise InvalidInputError(f"kind must be 'lq' or 'finance', got {kind!r}")
        params = data.get("parameters")
        if params is None:
            raise InvalidInputError("missing [parameters] table")
        keys, optional = (LQ_KEYS, LQ_OPTIONAL) if kind == "lq" else (FINANCE_KEYS, FINANCE_OPTIONAL)
        _check_keys("parameters", params, keys)
        missing = sorted(keys - set(params) - set(optional))
        if missing:
            raise InvalidInputError(f"missing parameter(s): {', '.join(missing)}")
        parameters = dict(optional)
        for k, v in params.items():
            if k in ("B", "b"):
                parameters[k] = _numeric_array(k, v, 1)
            elif k in ("D", "sigma"):
                parameters[k] = _numeric_array(k, v, 2)
            elif _is_number(v):
                parameters[k] = float(v)
            else:
                raise InvalidInputError(f"parameter {k!r} must be a number")
        numerics = _merge("numerics", data.get("numerics", {}), NUMERICS)
        simulation = _merge("simulation", data.get("simulation", {}), SIMULATION)
        hjb = _merge("hjb", data.get("hjb", {}), copy.deepcopy(HJB))
        probes = data.get("probes", [])
        if not isinstance(probes, list):
            raise InvalidInputError("probes must be an array of tables")
        clean_probes = []
        for i, p in enumerate(probes):
            _check_keys(f"probes[{i}]", p, PROBE_KEYS)
            if not all(_is_number(p.get(k)) for k in PROBE_KEYS):
                raise InvalidInputError(f"probes[{i}] needs numeric t, mean and var")
            clean_probes.append({k: float(p[k]) for k in sorted(PROBE_KEYS)})
        pf = cls(kind, parameters, numerics, simulation, hjb, clean_probes)
        pf.validate()
        return pf

    @classmethod
    def load(cls, path) -> "ProblemFile":
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except OSError as exc:
            raise InvalidInputError(f"cannot read {path}: {exc.strerror}") from exc
        except tomli.TOMLDecodeError as exc:
            raise InvalidInputError(f"malformed problem file {path}: {exc}") from exc
        return cls.from_dict(data)

    def validate(self):
        n = self.numerics
        for key in ("steps", "particles", "seed"):
            if not isinstance(n[key], int) or isinstance(n[key], bool):
                raise InvalidInputError(f"numerics.{key} must be an integer")
        if n["steps"] < 16:
            raise InvalidInputError("numerics.steps must be >= 16")
        if not 0 <= n["seed"] < 2**64:
            raise InvalidInputError("numerics.seed must be a 64-bit unsigned integer")
        if n["dt"] is not None and not (_is_number(n["dt"]) and n["dt"] > 0):
            raise InvalidInputError("numerics.dt must be a positive number")
        for key in ("tolerance", "dead_band"):
            if not (_is_number(n[key]) and n[key] >= 0):
                raise InvalidInputError(f"numerics.{key} must be a nonnegative number")
        s = self.simulation
        if s["mean_mode"] not in ("empirical", "deterministic"):
            raise InvalidInputError("simulation.mean_mode must be 'empirical' or 'deterministic'")
        if not isinstance(s["policy"], str):
            raise InvalidInputError("simulation.policy must be a string")
        h = self.hjb
        if h["derivative"] not in ("rhs", "fd"):
            raise InvalidInputError("hjb.derivative must be 'rhs' or 'fd'")
        self.lq_params()

    def market(self) -> MarketParams:
        return MarketParams(**self.parameters).validate()

    def lq_params(self) -> LQParams:
        if self.kind == "finance":
            return to_lq(self.market())
        return LQParams(**self.parameters).validate()

    def initial_mean(self) -> float:
        x0 = self.simulation["x0"]
        if x0 is not None:
            return float(x0)
        return float(self.parameters["X0"]) if self.kind == "finance" else 0.0

    def resolved_probes(self) -> list[dict]:
        if self.probes:
            return self.probes
        t0 = self.parameters.get("t0", 0.0)
        return [{"mean": self.initial_mean(), "t": t0, "var": float(self.simulation["x0_var"])}]

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "parameters": copy.deepcopy(self.parameters),
            "numerics": dict(self.numerics),
            "simulation": dict(self.simulation),
            "hjb": copy.deepcopy(self.hjb),
            "probes": copy.deepcopy(self.probes),
        }
        return out


def _apply_overrides(pf: ProblemFile, args) -> ProblemFile:
    n = pf.numerics
    for key in ("steps", "particles", "dt", "seed", "tolerance", "dead_band"):
        v = getattr(args, key, None)
        if v is not None:
            n[key] = v
    if getattr(args, "policy", None) is not None:
        pf.simulation["policy"] = args.policy
    pf.validate()
    return pf


def _solve(pf: ProblemFile):
    params = pf.lq_params()
    cone = solve_cone_projection(params.cone_problem())
    ps = solve_p_system(params, cone.theta_norm_sq, steps=pf.numerics["steps"])
    return params, cone, ps


def _write_table(out: Path, stem: str, header, rows, fmt: str) -> str:
    rows = list(rows)
    if fmt == "json":
        path = out / f"{stem}.json"
        _io.write_json(path, {"columns": list(header), "rows": [list(r) for r in rows]})
    else:
        path = out / f"{stem}.csv"
        _io.write_csv(path, header, rows)
    return path.name


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidInputError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def cmd_solve(args) -> int:
    pf = _apply_overrides(ProblemFile.load(args.config), args)
    out = _out_dir(args)
    params, cone, ps = _solve(pf)
    tau = pf.numerics["dead_band"]
    header = ["t", "P1", "P2", "P3", "P4", "Pt1", "Pt2", "Pt3", "Pt4", "eta"]
    table = _write_table(out, "psystem", header, ps.to_rows(), args.format)

    probes = []
    for p in pf.resolved_probes():
        res = value(p["t"], MeasureState(p["mean"], p["var"]), ps, tau)
        probes.append({
            "t": p["t"], "mean": p["mean"], "var": p["var"], "value": res.v,
            "region": res.region.region.value, "switch_value": res.region.switch_value,
            "conjectural": res.conjectural, "uses_tilde": res.uses_tilde,
            "control": optimal_control(p["t"], p["mean"], ps, cone, tau),
        })
    # control and region along the whole grid at each probe mean
    regions, u_max = set(), 0.0
    for p in probes:
        for t in ps.grid:
            regions.add(classify_region(t, p["mean"], ps, tau).region.value)
            u_max = max(u_max, float(np.max(np.abs(optimal_control(t, p["mean"], ps, cone, tau)))))
    report = {
        "kind": pf.kind,
        "steps": ps.steps,
        "thetabar": cone.thetabar, "theta_norm_sq": cone.theta_norm_sq,
        "nubar": cone.nubar, "zbar": cone.zbar,
        "terminal_row": ps.P[-1], "initial_row": ps.P[0], "initial_row_tilde": ps.Pt[0],
        "probes": probes,
        "grid_regions": sorted(regions),
        "grid_max_abs_control": u_max,
        "psystem_path": table,
        "config": pf.to_dict(),
    }
    if pf.kind == "finance":
        eff = efficient_solution(pf.market(), n_points=ps.steps + 1)
        if args.format == "json":
            header = ["t"] + [f"u{i + 1}" for i in range(eff.mp.m)]
            name = _write_table(out, "strategy", header, eff.strategy_rows(), "json")
            eff_report = {"value0": eff.value0, "cml": [eff.cml_lower, eff.cml_upper],
                          "strategy_csv_path": name}
            _io.write_json(out / "efficient.json", eff_report)
        else:
            eff_report = eff.write(out)
        report["efficient"] = eff_report
    _io.write_json(out / "solution.json", report)
    print(_io.dumps_json({"solution": "solution.json", "psystem": table}), end="")
    return EXIT_OK


def cmd_hjb_check(args) -> int:
    pf = _apply_overrides(ProblemFile.load(args.config), args)
    for key in ("n_t", "n_mean"):
        v = getattr(args, key, None)
        if v is not None:
            pf.hjb[key] = v
    out = _out_dir(args)
    params, cone, ps = _solve(pf)
    h = pf.hjb
    times, means = default_sweep_axes(ps, h["n_t"], h["n_mean"], (h["mean_min"], h["mean_max"]))
    sweep = hjb_sweep(ps, cone, times, means, h["variances"], pf.numerics["dead_band"],
                      h["derivative"])
    header = ["t", "mean", "var", "region", "residual"]
    header += [f"u{i + 1}" for i in range(sweep.m)] + ["V"]
    rows = ((t, mu, var, reg, res, *u, v) for t, mu, var, reg, res, u, v in sweep.rows)
    table = _write_table(out, "residuals", header, rows, args.format)
    tol = pf.numerics["tolerance"]
    ok = sweep.max_abs <= tol
    counts = {r.value: 0 for r in Region}
    for row in sweep.rows:
        counts[row[3]] += 1
    counts[Region.PI3.value] = sweep.skipped
    summary = {
        "max_abs_residual": sweep.max_abs, "argmax": sweep.argmax, "tolerance": tol,
        "passed": ok, "rows": len(sweep.rows), "skipped_dead_band": sweep.skipped,
        "region_counts": counts, "residuals_path": table,
    }
    print(_io.dumps_json(summary), end="")
    if not ok:
        t, mu, var = sweep.argmax
        print(f"hjb-check failed: max |residual| = {sweep.max_abs:.3e} > {tol:.3e} "
              f"at t = {t:.6g}, mean = {mu:.6g}, var = {var:.6g}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _within(a: float, b: float, se: float, k: float = 3.0) -> bool:
    """``|a - b| <= k se`` with a rounding floor for degenerate (zero-noise) runs."""
    return abs(a - b) <= max(k * se, 1e-12 * max(1.0, abs(a), abs(b)))


def cmd_simulate(args) -> int:
    pf = _apply_overrides(ProblemFile.load(args.config), args)
    out = _out_dir(args)
    params, cone, ps = _solve(pf)
    n, s = pf.numerics, pf.simulation
    dt = n["dt"] if n["dt"] is not None else (params.T - params.t0) / n["steps"]
    x0 = pf.initial_mean()
    cfg = SimConfig(
        n_particles=n["particles"], dt=dt, seed=n["seed"], mean_mode=s["mean_mode"],
        policy=s["policy"], x0=x0, x0_var=s["x0_var"], n_batches=s["batches"],
    )
    res = simulate(params, ps, cone, cfg, tau=n["dead_band"])
    table = _write_table(out, "paths", ["t", "mean", "var"],
                         zip(res.times, res.mean_path, res.var_path), args.format)
    V = value(params.t0, MeasureState(x0, s["x0_var"]), ps, n["dead_band"]).v
    se = res.cost_stderr
    comparison = {
        "value": V,
        "J_minus_value": res.cost_estimate - V,
        "within_3_stderr": _within(res.cost_estimate, V, se),
        "not_below_value": res.cost_estimate >= V - max(3 * se, 1e-12 * max(1.0, abs(V))),
    }
    summary = res.summary()
    summary.update({"value_comparison": comparison, "paths_path": table,
                    "problem": pf.to_dict()})
    if pf.kind == "finance":
        lower, upper = capital_market_line(pf.market(), cone)
        m, mse = res.terminal_mean, res.terminal_mean_stderr
        floor = 1e-12 * max(1.0, abs(m))
        summary["cml"] = {
            "lower": lower, "upper": upper,
            "contained": lower - max(3 * mse, floor) <= m <= upper + max(3 * mse, floor),
            "at_lower": _within(m, lower, mse),
        }
    _io.write_json(out / "summary.json", summary)
    print(_io.dumps_json({"J": res.cost_estimate, "stderr": se, "summary": "summary.json"}), end="")
    return EXIT_OK


def _parse_matrix(text: str) -> list:
    try:
        return [[float(x) for x in row.split(",")] for row in text.split(";")]
    except ValueError:
        raise InvalidInputError(f"cannot parse matrix {text!r}; use '1,0;0,1'") from None


def cmd_coneqp(args) -> int:
    if args.config is not None:
        pf = ProblemFile.load(args.config)
        lq = pf.lq_params()
        D, B = lq.D, lq.B
    else:
        if args.D is None or args.B is None:
            raise InvalidInputError("coneqp needs --D and --B, or --config")
        D = _parse_matrix(args.D)
        B = _parse_matrix(args.B)
        if len(B) != 1:
            raise InvalidInputError("--B must be a single row, e.g. '0.5,0.2'")
        B = B[0]
        if any(len(row) != len(D[0]) for row in D):
            raise InvalidInputError("rows of --D must have equal length")
    problem = ConeProblem(D, B)
    sol = solve_cone_projection(problem)
    kkt = verify_kkt(problem, sol, args.tolerance if args.tolerance is not None else 1e-8)
    report = {
        "zbar": sol.zbar, "nubar": sol.nubar, "thetabar": sol.thetabar,
        "theta_norm_sq": sol.theta_norm_sq, "s_min": sol.s_min, "iterations": sol.iterations,
        "kkt": kkt.residuals, "kkt_passed": kkt.passed,
    }
    print(_io.dumps_json(report), end="")
    if args.out is not None:
        _io.write_json(_out_dir(args) / "coneqp.json", report)
    return EXIT_OK if kkt.passed else EXIT_CHECK_FAILED


def _policy_arg(text: str) -> str:
    if text in ("optimal", "zero"):
        return text
    if text.startswith("scaled:"):
        try:
            f = float(text.split(":", 1)[1])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad scale factor in {text!r}") from None
        if not math.isfinite(f) or f < 0:
            raise argparse.ArgumentTypeError("scale factor must be finite and >= 0")
        return text
    raise argparse.ArgumentTypeError("policy must be optimal, zero or scaled:<factor>")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mckvlq", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML problem file")
        p.add_argument("--out", default="." if config_required else None, help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv",
                       help="format of tabular outputs")
        p.add_argument("--tolerance", type=float, help="residual and KKT tolerance")

    def numerics(p):
        p.add_argument("--steps", type=int, help="RK4 steps on [t0, T]")
        p.add_argument("--dead-band", dest="dead_band", type=float,
                       help="half-width of the switching-curve band")

    p = sub.add_parser("solve", help="solve the coefficient ODEs and report values")
    common(p)
    numerics(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("hjb-check", help="sweep HJB residuals on a (t, mean, var) grid")
    common(p)
    numerics(p)
    p.add_argument("--n-t", dest="n_t", type=int, help="number of sweep times")
    p.add_argument("--n-mean", dest="n_mean", type=int, help="number of sweep means")
    p.set_defaults(func=cmd_hjb_check)

    p = sub.add_parser("simulate", help="Monte Carlo particle simulation")
    common(p)
    numerics(p)
    p.add_argument("--particles", type=int, help="number of particles")
    p.add_argument("--dt", type=float, help="time step, must divide T - t0")
    p.add_argument("--seed", type=int, help="base seed of the noise streams")
    p.add_argument("--policy", type=_policy_arg, help="optimal, zero or scaled:<factor>")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("coneqp", help="project onto the nonnegative cone and print JSON")
    common(p, config_required=False)
    p.add_argument("--D", help="matrix rows separated by ';', entries by ','")
    p.add_argument("--B", help="comma-separated vector")
    p.set_defaults(func=cmd_coneqp)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MckvlqError, np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
