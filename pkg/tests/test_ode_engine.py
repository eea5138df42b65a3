from __future__ import annotations

import re

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.integrate import cumulative_trapezoid, solve_ivp

from conftest import PI12, random_lq, solved
from mckvlq.errors import DomainError, FiniteEscapeError, InvalidInputError
from mckvlq.ode_engine import (
    LQParams,
    check_comparison,
    closed_form_bernoulli_P2,
    closed_form_eta,
    closed_form_P1,
    closed_form_tilde_P2,
    closed_form_tilde_P3,
    solve_p_system,
)


def ivp_oracle(p: LQParams, th2: float, grid: np.ndarray) -> np.ndarray:
    """High-accuracy adaptive integration of both quadruples, rows on ``grid``."""

    def f(t, y):
        P1, P2, P3, _, R1, R2, R3, _ = y
        c = p.A + p.Abar
        return [
            -2 * p.A * P1 - p.Q1,
            th2 / P1 * P2**2 - 2 * c * P2 - p.Q1 - p.Q2,
            -(c - th2 / P1 * P2) * P3 - 2 * p.b0 * P2 - p.Q3,
            -p.b0 * P3 + th2 * P3**2 / (4 * P1),
            -2 * p.A * R1 - p.Q1,
            -2 * c * R2 - p.Q1 - p.Q2,
            -c * R3 - 2 * p.b0 * R2 - p.Q3,
            -p.b0 * R3,
        ]

    yT = [p.G1, p.G1 + p.G2, p.G3, 0.0] * 2
    sol = solve_ivp(f, (p.T, p.t0), yT, method="DOP853", t_eval=grid[::-1],
                    rtol=1e-13, atol=1e-14)
    return sol.y.T[::-1]


def simple(**kw) -> LQParams:
    base = dict(A=0.5, Abar=0.1, B=[0.4], b0=0.0, D=[[1.0]], Q1=0.0, Q2=0.0, Q3=0.0,
                G1=1.0, G2=0.0, G3=0.0, T=1.0)
    base.update(kw)
    return LQParams(**base)


class TestLQParams:
    @pytest.mark.parametrize("field,val,msg", [
        ("G1", 0.0, "G1 > 0"), ("G2", -2.0, "G1 + G2"), ("Q1", -0.1, "Q1 >= 0"),
        ("Q2", -1.0, "Q1 + Q2"), ("Q3", 0.1, "Q3 <= 0"), ("A", -0.1, "A >= 0"),
        ("Abar", -0.1, "Abar >= 0"), ("t0", 1.0, "t0 < T"),
    ])
    def test_each_invariant_named(self, field, val, msg):
        with pytest.raises(InvalidInputError, match=re.escape(msg)):
            simple(**{field: val}).validate()

    def test_negative_B_rejected(self):
        with pytest.raises(InvalidInputError):
            simple(B=[-0.1]).validate()

    def test_to_dict_roundtrip(self):
        assert LQParams(**PI12.to_dict()).to_dict() == PI12.to_dict()


class TestSolvePSystem:
    def test_terminal_row_exact(self):
        ps = solve_p_system(PI12, 0.3)
        assert_array_equal(ps.P[-1], [1.0, 1.5, -0.7, 0.0])
        assert_array_equal(ps.Pt[-1], [1.0, 1.5, -0.7, 0.0])
        assert ps.grid[-1] == PI12.T and ps.grid[0] == PI12.t0
        assert ps.steps == 2048

    def test_P1_example(self):
        ps = solve_p_system(simple(), 0.16)
        assert ps.P1[0] == pytest.approx(np.e, abs=1e-12)

    def test_P2_vanishes_under_identities(self):
        ps = solve_p_system(simple(Q1=0.3, Q2=-0.3, G2=-1.0, G3=-0.5), 0.16)
        assert_array_equal(ps.P2, 0.0)
        assert_array_equal(ps.Pt2, 0.0)

    def test_zero_theta_systems_coincide(self):
        ps = solve_p_system(PI12, 0.0)
        assert_allclose(ps.P, ps.Pt, rtol=0, atol=0)

    def test_matches_adaptive_oracle(self, rng):
        for _ in range(20):
            p = random_lq(rng)
            cone, ps = solved(p)
            ref = ivp_oracle(p, cone.theta_norm_sq, ps.grid)
            assert_allclose(np.hstack([ps.P, ps.Pt]), ref, rtol=1e-9, atol=1e-10)

    def test_stored_derivatives_are_rhs(self):
        cone, ps = solved(PI12)
        fd = np.gradient(ps.P, ps.grid, axis=0, edge_order=2)
        assert_allclose(ps.dP[1:-1], fd[1:-1], atol=1e-5)

    def test_rk4_fourth_order(self):
        # coarse grids so truncation error dominates rounding
        p = PI12
        th2 = 1.2
        ref = solve_p_system(p, th2, steps=320)
        errs = []
        for n in (16, 32):
            ps = solve_p_system(p, th2, steps=n)
            idx = np.arange(n + 1) * (320 // n)
            errs.append(np.max(np.abs(np.hstack([ps.P, ps.Pt]) - np.hstack([ref.P, ref.Pt])[idx])))
        assert errs[0] / errs[1] >= 8.0

    def test_steps_lower_bound(self):
        with pytest.raises(InvalidInputError, match="16"):
            solve_p_system(PI12, 0.1, steps=8)

    def test_negative_theta_rejected(self):
        with pytest.raises(InvalidInputError):
            solve_p_system(PI12, -1.0)

    def test_finite_escape_reports_time(self):
        # G1 + G2 < 0 drives the Riccati term through a pole
        p = simple(G2=-3.0, Q1=0.0, T=5.0)
        with pytest.raises(FiniteEscapeError) as info:
            solve_p_system(p, 50.0, check=False)
        assert p.t0 <= info.value.escape_time < p.T

    def test_p4_trapezoid_consistency(self):
        cone, ps = solved(PI12)
        # P4(t) = int_T^t P4'(s) ds on the reversed grid
        P4_trap = cumulative_trapezoid(ps.dP4[::-1], ps.grid[::-1], initial=0.0)[::-1]
        assert np.max(np.abs(P4_trap - ps.P4)) <= 1e-7

    def test_eta_nan_where_P2_vanishes(self):
        ps = solve_p_system(simple(G2=-1.0, G3=-0.5), 0.16)
        assert np.all(np.isnan(ps.eta))

    def test_state_at_interpolates_and_guards(self):
        cone, ps = solved(PI12)
        mid = 0.5 * (ps.grid[10] + ps.grid[11])
        assert_allclose(ps.state_at(mid)[:4], 0.5 * (ps.P[10] + ps.P[11]))
        assert_array_equal(ps.state_at(ps.grid[7])[:4], ps.P[7])
        with pytest.raises(DomainError):
            ps.state_at(PI12.T + 0.1)

    def test_csv(self, tmp_path):
        cone, ps = solved(PI12, steps=64)
        path = ps.to_csv(tmp_path / "ps.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "t,P1,P2,P3,P4,Pt1,Pt2,Pt3,Pt4,eta"
        assert len(lines) == 66
        assert b"\r" not in path.read_bytes()


class TestClosedForms:
    def test_P1_examples(self):
        assert closed_form_P1(simple(), simple().T) == 1.0
        assert closed_form_P1(simple(A=0.0, Q1=2.0), 0.5) == pytest.approx(2.0)
        assert closed_form_P1(simple(Q1=1.0), 0.0) == pytest.approx(2 * np.e - 1, rel=1e-14)

    def test_P1_tilde_P2_tilde_P3_match_grid(self, rng):
        for _ in range(25):
            p = random_lq(rng)
            cone, ps = solved(p)
            assert np.max(np.abs(ps.P1 - closed_form_P1(p, ps.grid))) <= 1e-6
            assert np.max(np.abs(ps.Pt2 - closed_form_tilde_P2(p, ps.grid))) <= 1e-8
            assert np.max(np.abs(ps.Pt3 - closed_form_tilde_P3(p, ps.grid))) <= 1e-8

    def test_tilde_P2_zero_drift_limit(self):
        p = simple(A=0.0, Abar=0.0, Q1=0.4, Q2=0.1, G2=0.5)
        assert closed_form_tilde_P2(p, 0.0) == pytest.approx(1.5 + 0.5 * 1.0)

    def test_eta_terminal_and_examples(self):
        p = simple(A=0.2, Abar=0.1, G1=1.5, G2=0.5, G3=-1.0, b0=0.1)
        assert closed_form_eta(p, p.T) == pytest.approx(-0.5)
        # value frozen from direct quadrature of eta' = c eta - 2 b0
        assert closed_form_eta(p, 0.0) == pytest.approx(-0.197621257, abs=1e-9)
        p0 = simple(A=0.2, Abar=0.1, G1=1.5, G2=0.5, G3=-1.0)
        assert closed_form_eta(p0, 0.0) == pytest.approx(-0.5 * np.exp(-0.3))

    def test_eta_ode_oracle(self):
        p = simple(A=0.2, Abar=0.1, G1=1.5, G2=0.5, G3=-1.0, b0=0.1)
        sol = solve_ivp(lambda t, y: [p.c * y[0] - 2 * p.b0], (1.0, 0.0), [-0.5],
                        rtol=1e-12, atol=1e-14)
        assert closed_form_eta(p, 0.0) == pytest.approx(sol.y[0, -1], abs=1e-10)

    def test_eta_zero_drift_limit(self):
        p = simple(A=0.0, Abar=0.0, G1=1.5, G2=0.5, G3=-1.0, b0=0.1)
        assert closed_form_eta(p, 0.25) == pytest.approx(-0.5 + 0.2 * 0.75)

    def test_eta_matches_ratios_on_grid(self, rng):
        for _ in range(20):
            p = random_lq(rng)
            p = LQParams(**{**p.to_dict(), "Q2": -p.Q1, "Q3": 0.0})
            cone, ps = solved(p)
            eta = closed_form_eta(p, ps.grid)
            assert np.nanmax(np.abs(ps.P3 / ps.P2 - eta)) <= 1e-6
            assert np.nanmax(np.abs(ps.Pt3 / ps.Pt2 - eta)) <= 1e-6

    def test_eta_domain(self):
        with pytest.raises(DomainError, match="Q3 = 0"):
            closed_form_eta(simple(Q3=-0.1), 0.0)
        with pytest.raises(DomainError, match="G1 \\+ G2"):
            closed_form_eta(simple(G2=-1.0), 0.0)


class TestBernoulli:
    def test_example_matches_rk4(self):
        p = simple(G1=2.0, G2=-1.0)
        ps = solve_p_system(p, 0.16)
        b = closed_form_bernoulli_P2(p, 0.16, 0.0)
        assert b.P2 == pytest.approx(ps.P2[0], abs=1e-10)
        assert b.P2 == pytest.approx(3.0500051, abs=1e-7)
        assert b.Pt2 == pytest.approx(np.exp(1.2))
        # the frozen-P1 shortcut is visibly off
        assert b.displayed_P2 == pytest.approx(3.14137, abs=1e-5)
        assert abs(b.deviation) > 0.05

    def test_constant_P1_shortcut_exact(self):
        p = simple(A=0.0, Abar=0.3, G1=1.0, G2=0.5)
        b = closed_form_bernoulli_P2(p, 0.4, 0.2)
        assert b.deviation == pytest.approx(0.0, abs=1e-12)

    def test_zero_theta_and_terminal(self):
        p = simple(G2=0.5)
        b = closed_form_bernoulli_P2(p, 0.0, 0.3)
        assert b.P2 == pytest.approx(b.Pt2, rel=1e-13)
        bT = closed_form_bernoulli_P2(p, 0.16, p.T)
        assert bT.P2 == bT.Pt2 == 1.5

    @pytest.mark.parametrize("over", [dict(Q3=-0.1), dict(G2=-1.0), dict(b0=-0.1), dict(G3=0.5)])
    def test_domain(self, over):
        with pytest.raises(DomainError):
            closed_form_bernoulli_P2(simple(**over), 0.16, 0.0)


class TestComparison:
    def test_zero_theta_equality(self):
        ps = solve_p_system(PI12, 0.0)
        rep = check_comparison(ps, PI12)
        assert rep.p1_mismatch == 0 and rep.p2_excess == 0 and rep.p4_excess == 0
        assert rep.passed()

    def test_random_instances(self, rng):
        for _ in range(100):
            p = random_lq(rng)
            cone, ps = solved(p)
            rep = check_comparison(ps, p)
            assert rep.hypotheses_hold
            assert rep.passed(1e-7), rep

    def test_finance_P2_zero(self):
        from conftest import SINGLE_STOCK
        from mckvlq.finance import to_lq

        p = to_lq(SINGLE_STOCK)
        cone, ps = solved(p)
        assert_array_equal(ps.P2, 0.0)
        assert_array_equal(ps.Pt2, 0.0)
