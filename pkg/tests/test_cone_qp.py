from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.optimize import nnls

from conftest import random_cone_problem
from mckvlq.cone_qp import (
    ConeProblem,
    ConeSolution,
    KKT_TOL,
    brute_force_cone_min,
    minimize_h,
    solve_cone_projection,
    verify_kkt,
)
from mckvlq.errors import InvalidInputError, NonConvergenceError, ResourceError


def nnls_oracle(problem: ConeProblem) -> np.ndarray:
    """``argmin_{z >= 0} |C z + C B|`` with ``C = (D^T)^{-1}`` via Lawson-Hanson."""
    C = np.linalg.inv(problem.D.T)
    z, _ = nnls(C, -C @ problem.B)
    return z


class TestConeProblem:
    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError, match="must be 2x2"):
            ConeProblem(np.eye(3), [1.0, 2.0])

    def test_negative_B(self):
        with pytest.raises(InvalidInputError, match=">= 0"):
            ConeProblem(np.eye(2), [1.0, -0.1])

    @pytest.mark.parametrize("D", [[[1.0, 1.0], [1.0, 1.0]], [[0.0, 0.0], [0.0, 1.0]]])
    def test_singular_gram_names_cholesky(self, D):
        with pytest.raises(InvalidInputError, match="Cholesky"):
            ConeProblem(D, [1.0, 1.0])

    def test_non_finite(self):
        with pytest.raises(InvalidInputError, match="finite"):
            ConeProblem([[np.nan]], [1.0])

    def test_objectives(self):
        p = ConeProblem([[2.0]], [1.0])
        assert p.s([0.0]) == pytest.approx(0.125)
        assert p.h([1.0], 2.0) == pytest.approx(0.5 * 4 - 2.0)


class TestProjectionExamples:
    def test_identity_zero_B(self):
        sol = solve_cone_projection(ConeProblem(np.eye(1), [0.0]))
        assert_array_equal(sol.zbar, [0.0])
        assert_array_equal(sol.thetabar, [0.0])
        assert sol.s_min == 0.0

    def test_scalar(self):
        sol = solve_cone_projection(ConeProblem([[2.0]], [1.0]))
        assert_allclose(sol.zbar, [0.0])
        assert_allclose(sol.thetabar, [0.5])
        assert sol.s_min == pytest.approx(0.125)
        # 1-d grid scan of s over [0, 10]
        zs = np.linspace(0, 10, 10001)
        vals = 0.5 * ((zs + 1.0) / 2.0) ** 2
        assert zs[int(np.argmin(vals))] == 0.0
        assert vals.min() == pytest.approx(sol.s_min)

    def test_identity_two(self):
        sol = solve_cone_projection(ConeProblem(np.eye(2), [1.0, 2.0]))
        assert_allclose(sol.zbar, [0.0, 0.0])
        assert_allclose(sol.thetabar, [1.0, 2.0])
        assert_allclose(sol.nubar, [1.0, 2.0])

    def test_active_constraint(self):
        # (D^T D)^{-1} B has a negative entry, so the origin is not optimal.
        D = np.array([[1.0, 0.0], [0.9, 0.5]])
        p = ConeProblem(D, [1.0, 0.1])
        assert np.any(p.gram_solve(p.B) < 0)
        sol = solve_cone_projection(p)
        assert sol.zbar.max() > 0
        assert verify_kkt(p, sol, 1e-12).passed
        assert_allclose(sol.zbar, nnls_oracle(p), atol=1e-12)

    def test_all_active_set_enumeration(self):
        # brute force over the 2^m active sets: the feasible KKT point is unique
        D = np.array([[1.0, 0.2, 0.0], [0.8, 0.6, 0.1], [0.0, 0.7, 0.9]])
        p = ConeProblem(D, [0.3, 0.0, 0.4])
        C = np.linalg.inv(D.T)
        kkt_points = []
        for mask in range(8):
            free = np.array([(mask >> i) & 1 for i in range(3)], dtype=bool)
            z = np.zeros(3)
            if free.any():
                z[free] = np.linalg.lstsq(C[:, free], -C @ p.B, rcond=None)[0]
            nu = p.gram_solve(z + p.B)
            if z.min() >= -1e-12 and nu.min() >= -1e-12 and np.abs(nu * z).max() < 1e-12:
                kkt_points.append(z)
        assert len(kkt_points) >= 1
        for z in kkt_points:
            assert_allclose(z, solve_cone_projection(p).zbar, atol=1e-12)

    def test_nonconvergence_carries_best(self):
        D = np.array([[1.0, 0.0], [0.9, 0.5]])
        p = ConeProblem(D, [1.0, 0.1])
        with pytest.raises(NonConvergenceError) as info:
            solve_cone_projection(p, max_iter=1)
        assert isinstance(info.value.best, ConeSolution)

    def test_zero_B_gives_zero(self, rng):
        for m in (1, 2, 3, 4):
            p = ConeProblem(np.eye(m) + 0.3 * rng.standard_normal((m, m)), np.zeros(m))
            sol = solve_cone_projection(p)
            assert_array_equal(sol.zbar, 0.0)
            assert_array_equal(sol.thetabar, 0.0)
            for alpha in (-1.0, 0.0, 2.0):
                u, hmin = minimize_h(p, alpha, sol)
                assert_array_equal(u, 0.0)
                assert hmin == 0.0


class TestProjectionProperties:
    def test_matches_nnls_on_random_instances(self, rng):
        for _ in range(400):
            p = random_cone_problem(rng, int(rng.integers(1, 7)))
            sol = solve_cone_projection(p)
            assert_allclose(sol.zbar, nnls_oracle(p), atol=1e-10)
            assert verify_kkt(p, sol, KKT_TOL).passed
            assert sol.iterations <= 3 * p.m

    def test_direction_is_admissible(self, rng):
        for _ in range(200):
            p = random_cone_problem(rng, int(rng.integers(1, 5)))
            sol = solve_cone_projection(p)
            assert sol.direction.min() >= -1e-12
            assert_allclose(sol.nubar, np.linalg.solve(p.D, sol.thetabar), atol=1e-12)
            assert sol.theta_norm_sq == pytest.approx(float(p.B @ sol.nubar), rel=1e-12, abs=1e-15)

    def test_optimal_on_grid(self):
        p = ConeProblem([[1.0, 0.3], [0.0, 1.0]], [0.5, 0.2])
        sol = solve_cone_projection(p)
        axis = np.linspace(0, 2, 81)
        vals = [p.s([a, b]) for a in axis for b in axis]
        assert sol.s_min <= min(vals) + 1e-15

    @settings(max_examples=60, deadline=None)
    @given(
        m=st.integers(1, 4),
        seed=st.integers(0, 2**32 - 1),
        scale=st.floats(0.01, 100.0),
    )
    def test_positive_scaling_of_B(self, m, seed, scale):
        # s is homogeneous in (z, B): zbar(cB) = c zbar(B)
        p = random_cone_problem(np.random.default_rng(seed), m)
        a = solve_cone_projection(p)
        b = solve_cone_projection(ConeProblem(p.D, scale * p.B))
        assert_allclose(b.zbar, scale * a.zbar, rtol=1e-9, atol=1e-12 * scale)
        assert_allclose(b.theta_norm_sq, scale**2 * a.theta_norm_sq, rtol=1e-9, atol=1e-15)


class TestMinimizeH:
    @pytest.mark.parametrize("alpha", [-1.0, 0.0])
    def test_nonpositive_alpha(self, alpha, rng):
        p = random_cone_problem(rng, 3)
        u, hmin = minimize_h(p, alpha)
        assert_array_equal(u, 0.0)
        assert hmin == 0.0

    def test_unit_example(self):
        u, hmin = minimize_h(ConeProblem(np.eye(2), [1.0, 0.0]), 1.0)
        assert_allclose(u, [1.0, 0.0])
        assert hmin == pytest.approx(-0.5)
        ub, hb = brute_force_cone_min(ConeProblem(np.eye(2), [1.0, 0.0]), 1.0, (3.0, 0.01))
        assert_allclose(ub, u, atol=0.02)

    def test_scaling_covariance(self, rng):
        for _ in range(30):
            p = random_cone_problem(rng, int(rng.integers(1, 5)))
            sol = solve_cone_projection(p)
            u1, h1 = minimize_h(p, 0.7, sol)
            for c in (0.5, 3.0, 11.0):
                uc, hc = minimize_h(p, 0.7 * c, sol)
                assert_allclose(uc, c * u1, rtol=1e-14)
                assert hc == pytest.approx(c**2 * h1, rel=1e-14)

    def test_value_is_objective_at_argmin(self, rng):
        for _ in range(30):
            p = random_cone_problem(rng, int(rng.integers(1, 5)))
            u, hmin = minimize_h(p, 1.3)
            assert p.h(u, 1.3) == pytest.approx(hmin, rel=1e-10, abs=1e-14)

    def test_not_beaten_by_random_feasible_points(self, rng):
        p = random_cone_problem(rng, 3)
        u, hmin = minimize_h(p, 2.0)
        Z = rng.uniform(0, 3, (5000, 3))
        assert min(p.h(z, 2.0) for z in Z) >= hmin - 1e-12


class TestBruteForce:
    def test_scalar_example(self):
        u, h = brute_force_cone_min(ConeProblem(np.eye(1), [1.0]), 1.0, (4.0, 1e-3))
        assert u[0] == pytest.approx(1.0, abs=1e-9)
        assert h == pytest.approx(-0.5)

    def test_negative_alpha(self):
        u, h = brute_force_cone_min(ConeProblem(np.eye(2), [1.0, 1.0]), -2.0, (2.0, 0.1))
        assert_array_equal(u, 0.0)
        assert h == 0.0

    def test_two_dim_example(self):
        p = ConeProblem([[1.0, 0.3], [0.0, 1.0]], [0.5, 0.2])
        step = 0.005
        ub, _ = brute_force_cone_min(p, 1.0, (2.0, step))
        u, _ = minimize_h(p, 1.0)
        assert np.max(np.abs(ub - u)) <= 2 * step

    def test_lower_bound_form(self):
        u, _ = brute_force_cone_min(ConeProblem(np.eye(1), [1.0]), 1.0, (0.5, 2.0, 0.5))
        assert u[0] == 1.0

    def test_resource_caps(self):
        with pytest.raises(ResourceError):
            brute_force_cone_min(ConeProblem(np.eye(5), np.ones(5)), 1.0, (1.0, 0.5))
        with pytest.raises(ResourceError):
            brute_force_cone_min(ConeProblem(np.eye(4), np.ones(4)), 1.0, (10.0, 0.01))

    def test_bad_grid(self):
        with pytest.raises(InvalidInputError):
            brute_force_cone_min(ConeProblem(np.eye(1), [1.0]), 1.0, (1.0, -0.1))


class TestKKT:
    def test_exact_solution_passes_tight(self):
        p = ConeProblem([[2.0]], [1.0])
        assert verify_kkt(p, solve_cone_projection(p), 1e-10).passed

    def test_perturbed_zero_coordinate_flags_complementarity(self):
        p = ConeProblem(np.eye(2), [1.0, 2.0])
        sol = solve_cone_projection(p)
        bad = ConeSolution(sol.zbar + np.array([1e-3, 0.0]), sol.nubar, sol.thetabar,
                           sol.s_min, sol.theta_norm_sq)
        report = verify_kkt(p, bad, 1e-8)
        assert "complementarity" in report.failed
        assert not report.passed

    def test_negative_multiplier_flagged(self):
        p = ConeProblem(np.eye(1), [1.0])
        bad = ConeSolution(np.array([0.0]), np.array([-1.0]), np.array([-1.0]), 0.5, 1.0)
        assert "dual_feasibility" in verify_kkt(p, bad).failed
