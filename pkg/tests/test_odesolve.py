import unittest

import numpy as np
import pytest
from scipy import optimize

from ppgm.core import CoefficientPath, ConstraintSet, LQSpec, TimeGrid
from ppgm.errors import NumericError, SingularRiccatiError, SpecificationError, UsageError
from ppgm.experiments.builtins import load_builtin
from ppgm.lqpgm import initial_alpha, lq_pgm_step
from ppgm.odesolve import (
    feedback_cost,
    nonneg_qp_min,
    rk4_backward,
    solve_a_ode,
    solve_cone_reference,
    solve_cost_lyapunov,
    solve_riccati,
)


class TestRk4Backward(unittest.TestCase):
    def test_linear_scalar_equation(self):
        # Arrange: dM/dt = -M with M(T) = 1 gives M(0) = e^T
        grid = TimeGrid(10, 1.0)

        # Act
        solution = rk4_backward(lambda t, M, i: -M, 1.0, grid)

        # Assert
        self.assertAlmostEqual(solution.at(0)[0, 0], np.e, delta=1e-5)
        self.assertEqual(solution.values.shape, (11, 1, 1))

    def test_substeps_improve_accuracy(self):
        grid = TimeGrid(4, 2.0)
        coarse = rk4_backward(lambda t, M, i: -M, 1.0, grid, substeps=1).at(0)[0, 0]
        fine = rk4_backward(lambda t, M, i: -M, 1.0, grid, substeps=10).at(0)[0, 0]
        self.assertLess(abs(fine - np.e**2), abs(coarse - np.e**2))

    def test_exponential_at_fine_step(self):
        solution = rk4_backward(lambda t, M, i: -M, 1.0, TimeGrid(100, 1.0))
        self.assertAlmostEqual(solution.at(0)[0, 0], np.e, delta=1e-6)

    def test_halving_the_step_gives_fourth_order_error_ratio(self):
        # Arrange
        def error(N):
            return abs(rk4_backward(lambda t, M, i: -M, 1.0, TimeGrid(N, 1.0)).at(0)[0, 0] - np.e)

        # Act
        ratio = error(10) / error(20)

        # Assert
        self.assertGreater(ratio, 14.0)
        self.assertLess(ratio, 17.0)

    def test_zero_rhs_keeps_terminal_value(self):
        terminal = np.array([[2.0, 0.5], [0.5, 1.0]])
        solution = rk4_backward(lambda t, M, i: np.zeros_like(M), terminal, TimeGrid(5, 1.0))
        for i in range(6):
            np.testing.assert_array_equal(solution.at(i), terminal)

    def test_blow_up_raises(self):
        with self.assertRaises(NumericError):
            rk4_backward(lambda t, M, i: M * 1e200, 1.0, TimeGrid(10, 1.0))


class TestRiccati(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.spec = load_builtin("std-lq").spec
        cls.riccati = solve_riccati(cls.spec)

    def test_grid_fixed_point_is_left_unchanged_by_one_step(self):
        # Act
        stepped = lq_pgm_step(self.spec, self.riccati.alpha_grid, tau=0.5)

        # Assert
        np.testing.assert_allclose(stepped.values, self.riccati.alpha_grid.values, atol=1e-8)

    def test_grid_fixed_point_close_to_continuous_feedback(self):
        diff = np.max(np.abs(self.riccati.alpha_grid.values - self.riccati.alpha_star.values))
        self.assertLess(diff, 0.05)

    def test_value_matches_riccati_coefficient(self):
        # Arrange
        x0 = self.spec.x0
        from_riccati = 0.5 * x0 @ self.riccati.a_star.at(0) @ x0

        # Act
        value = self.riccati.value(x0)[0]

        # Assert
        self.assertAlmostEqual(value, from_riccati, delta=1e-2 * abs(from_riccati))

    def test_optimal_feedback_beats_random_feedback(self):
        alpha = initial_alpha(self.spec, seed=7)
        self.assertLessEqual(feedback_cost(self.spec, self.riccati.alpha_star), feedback_cost(self.spec, alpha) + 1e-9)

    def test_lyapunov_of_zero_feedback_is_symmetric(self):
        zero = initial_alpha(self.spec, 0)
        zero = type(zero)(zero.grid, np.zeros_like(zero.values))
        P = solve_cost_lyapunov(self.spec, zero)
        np.testing.assert_allclose(P.at(0), P.at(0).T, atol=1e-12)
        np.testing.assert_allclose(P.at(self.spec.grid.N), self.spec.G)

    def test_a_ode_rejects_feedback_on_other_grid(self):
        alpha = initial_alpha(self.spec.with_grid(TimeGrid(10, 1.0)), 0)
        with self.assertRaises(SpecificationError):
            solve_a_ode(self.spec, alpha)


def _scalar_spec(**coefficients):
    data = {"A": 0.0, "B": 1.0, "C": 0.0, "D": 0.0, "Q": 0.0, "R": 1.0, "S": 0.0, "G": 1.0}
    data.update(coefficients)
    N = data.pop("N", 100)
    return LQSpec.build(**data, x0=[1.0], N=N)


class TestScalarOracles(unittest.TestCase):
    def test_riccati_matches_closed_form(self):
        # Arrange: a*_t = rg / (r + g(T - t)) with r = g = T = 1
        spec = _scalar_spec(N=1000)
        expected = 1.0 / (2.0 - spec.grid.nodes)

        # Act
        riccati = solve_riccati(spec)

        # Assert
        self.assertAlmostEqual(riccati.a_star.at(0)[0, 0], 0.5, delta=1e-8)
        np.testing.assert_allclose(riccati.a_star.values[:, 0, 0], expected, atol=1e-8)
        self.assertAlmostEqual(riccati.alpha_star.at(0)[0, 0], -0.5, delta=1e-8)

    def test_a_ode_with_zero_feedback_integrates_running_cost(self):
        # Arrange: ȧ = -Q with a_T = G gives a_0 = G + TQ
        spec = _scalar_spec(Q=2.0)
        alpha = CoefficientPath.zeros(spec.grid, 1, 1)

        # Act
        a = solve_a_ode(spec, alpha)

        # Assert
        self.assertAlmostEqual(a.at(0)[0, 0], 3.0, places=12)
        self.assertAlmostEqual(a.at(50)[0, 0], 2.0, places=12)

    def test_a_ode_without_running_cost_stays_at_terminal_value(self):
        spec = _scalar_spec(G=1.7)
        a = solve_a_ode(spec, CoefficientPath.zeros(spec.grid, 1, 1))
        np.testing.assert_allclose(a.values[:, 0, 0], 1.7, atol=1e-14)

    def test_zero_costs_give_zero_lyapunov_solution(self):
        spec = _scalar_spec(R=0.0, G=0.0)
        alpha = CoefficientPath.constant(spec.grid, np.array([[-0.3]]))
        P = solve_cost_lyapunov(spec, alpha)
        np.testing.assert_array_equal(P.values, np.zeros_like(P.values))
        self.assertEqual(feedback_cost(spec, alpha), 0.0)


class TestAdjointOde(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(11)
        cls.dynamics = {name: 0.3 * rng.normal(size=(2, 2)) for name in ("A", "B", "C", "D")}
        cls.costs = []
        for _ in range(2):
            Q0, G0 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
            cls.costs.append({"Q": Q0 + Q0.T, "S": rng.normal(size=(2, 2)), "G": G0 + G0.T})
        cls.gain = rng.normal(size=(2, 2))

    def _solve(self, Q, S, G):
        spec = LQSpec.build(**self.dynamics, Q=Q, R=np.eye(2), S=S, G=G, x0=np.ones(2), N=50)
        return solve_a_ode(spec, CoefficientPath.constant(spec.grid, self.gain)).values

    def test_superposition_in_running_and_terminal_costs(self):
        # Arrange
        first, second = self.costs
        both = {key: first[key] + second[key] for key in first}

        # Act
        combined = self._solve(**both)
        separate = self._solve(**first) + self._solve(**second)

        # Assert
        np.testing.assert_allclose(combined, separate, atol=1e-10)

    def test_scaling_the_costs_scales_the_solution(self):
        first = self.costs[0]
        scaled = self._solve(**{key: 2.5 * value for key, value in first.items()})
        np.testing.assert_allclose(scaled, 2.5 * self._solve(**first), atol=1e-10)

    def test_matches_integration_on_a_finer_grid(self):
        # Arrange
        spec = load_builtin("std-lq").spec
        fine_spec = spec.with_grid(TimeGrid(1000, 1.0))

        # Act
        coarse = solve_a_ode(spec, CoefficientPath.zeros(spec.grid, spec.m, spec.n))
        fine = solve_a_ode(fine_spec, CoefficientPath.zeros(fine_spec.grid, spec.m, spec.n))

        # Assert
        self.assertLess(np.max(np.abs(coarse.values - fine.values[::10])), 1e-6)


class TestNonnegQp(unittest.TestCase):
    def test_nonnegative_linear_term_gives_zero(self):
        xi, value = nonneg_qp_min(np.eye(3), np.array([0.0, 1.0, 2.0]))
        np.testing.assert_array_equal(xi, np.zeros(3))
        self.assertEqual(value, 0.0)

    def test_simple_active_set(self):
        # Arrange: min |ξ|² + 2ξ'q over ξ >= 0 with q = (-1, 2)
        q = np.array([-1.0, 2.0])

        # Act
        xi, value = nonneg_qp_min(np.eye(2), q)

        # Assert
        np.testing.assert_allclose(xi, [1.0, 0.0])
        self.assertAlmostEqual(value, -1.0)

    def test_matches_bounded_solver(self):
        # Arrange
        rng = np.random.default_rng(5)
        L = rng.normal(size=(4, 4))
        M = L @ L.T + 0.5 * np.eye(4)
        q = rng.normal(size=4)

        # Act
        xi, value = nonneg_qp_min(M, q)
        reference = optimize.minimize(
            lambda v: v @ M @ v + 2 * v @ q,
            np.zeros(4),
            jac=lambda v: 2 * M @ v + 2 * q,
            bounds=[(0, None)] * 4,
            method="L-BFGS-B",
            options={"ftol": 1e-15, "gtol": 1e-12},
        )

        # Assert
        self.assertTrue(np.all(xi >= 0))
        self.assertLessEqual(value, reference.fun + 1e-9)
        self.assertAlmostEqual(value, reference.fun, delta=1e-6)
        np.testing.assert_allclose(xi, reference.x, atol=1e-3)

    def test_matches_projected_gradient_in_five_dimensions(self):
        # Arrange
        rng = np.random.default_rng(8)
        L = rng.normal(size=(5, 5))
        M = 0.2 * L @ L.T + np.eye(5)
        q = rng.normal(size=5)
        step = 1.0 / np.linalg.eigvalsh(M)[-1]
        oracle = np.zeros(5)
        for _ in range(5000):
            oracle = np.maximum(oracle - step * (M @ oracle + q), 0.0)

        # Act
        xi, value = nonneg_qp_min(M, q)

        # Assert
        np.testing.assert_allclose(xi, oracle, atol=1e-10)
        self.assertAlmostEqual(value, oracle @ M @ oracle + 2 * oracle @ q, delta=1e-10)
        gradient = M @ xi + q
        self.assertTrue(np.all(xi >= 0.0))
        self.assertTrue(np.all(gradient >= -1e-10))
        np.testing.assert_allclose(xi * gradient, 0.0, atol=1e-10)

    def test_input_checks(self):
        with self.assertRaises(UsageError):
            nonneg_qp_min(np.eye(21), np.ones(21))
        with self.assertRaises(SpecificationError):
            nonneg_qp_min(np.eye(2), np.ones(3))
        with self.assertRaises(SpecificationError):
            nonneg_qp_min(-np.eye(2), -np.ones(2))


class TestConeReference(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.spec = load_builtin("cone-lq").spec
        cls.cone = solve_cone_reference(cls.spec)

    def test_controls_are_feasible(self):
        xs = np.linspace(-5, 5, 11)
        for t in (0.0, 0.5, 0.99):
            controls = self.cone.control(t, xs)
            self.assertEqual(controls.shape, (11, 5))
            self.assertTrue(np.all(controls >= 0.0))

    def test_constrained_value_not_below_unconstrained(self):
        # Arrange
        free = solve_riccati(self.spec.with_constraint(ConstraintSet.free()))
        xs = np.linspace(-10, 10, 21)

        # Act
        constrained = self.cone.value(xs, 0)
        unconstrained = 0.5 * free.a_star.at(0)[0, 0] * xs**2

        # Assert
        self.assertTrue(np.all(constrained >= unconstrained - 1e-6 * (1.0 + np.abs(unconstrained))))

    def test_every_node_satisfies_kkt(self):
        spec = self.spec
        for i in range(spec.grid.N + 1):
            b, d, c = spec.B.at(i)[0], spec.D.at(i)[0], spec.C.at(i)[0, 0]
            branches = ((1.0, self.cone.p_plus[i], self.cone.xi_plus[i]), (-1.0, self.cone.p_minus[i], self.cone.xi_minus[i]))
            for sign, P, xi in branches:
                M = 0.5 * spec.R.at(i) + P * np.outer(d, d)
                q = sign * (P * b + P * c * d + 0.5 * spec.S.at(i)[:, 0])
                gradient = M @ xi + q
                self.assertTrue(np.all(xi >= 0.0), msg=f"node {i}")
                self.assertTrue(np.all(gradient >= -1e-9), msg=f"node {i}")
                self.assertLessEqual(float(np.max(np.abs(xi * gradient))), 1e-9, msg=f"node {i}")

    def test_value_stays_convex_and_nonnegative(self):
        # Arrange
        xs = np.linspace(-5, 5, 41)

        # Act
        values = self.cone.value(xs)

        # Assert
        self.assertTrue(np.all(np.diff(values, 2) >= -1e-8))
        self.assertTrue(np.all(self.cone.p_plus >= 0.0))
        self.assertTrue(np.all(self.cone.p_minus >= 0.0))

    def test_terminal_branches_start_at_half_terminal_cost(self):
        self.assertAlmostEqual(self.cone.p_plus[-1], 0.5 * self.spec.G[0, 0])
        self.assertAlmostEqual(self.cone.p_minus[-1], 0.5 * self.spec.G[0, 0])

    def test_value_vanishes_at_origin(self):
        self.assertEqual(float(self.cone.value(np.array([0.0]))[0]), 0.0)


def test_cone_reference_requires_scalar_state():
    with pytest.raises(SpecificationError):
        solve_cone_reference(load_builtin("std-lq").spec.with_constraint(ConstraintSet.positive_cone()))


def test_cone_reference_requires_cone_constraint():
    with pytest.raises(SpecificationError):
        solve_cone_reference(load_builtin("nonconvex-lq").spec)


def test_singular_gain_raises_for_degenerate_problem():
    spec = LQSpec.build(A=0.0, B=1.0, C=0.0, D=0.0, Q=0.0, R=0.0, S=0.0, G=1.0, x0=[1.0], N=10)
    with pytest.raises(SingularRiccatiError):
        solve_riccati(spec)


def test_cone_reference_without_control_effect_is_constant():
    # Arrange: no drift, diffusion or cost coupling, so controls only add cost
    spec = LQSpec.build(
        A=0.0, B=np.zeros((1, 2)), C=0.0, D=np.zeros((1, 2)), Q=0.0, R=np.eye(2), S=np.zeros((2, 1)), G=2.0,
        x0=[1.0], N=20, constraint=ConstraintSet.positive_cone(),
    )

    # Act
    cone = solve_cone_reference(spec)

    # Assert
    np.testing.assert_array_equal(cone.p_plus, np.ones(21))
    np.testing.assert_array_equal(cone.p_minus, np.ones(21))
    np.testing.assert_array_equal(cone.xi_plus, np.zeros((21, 2)))
    np.testing.assert_array_equal(cone.xi_minus, np.zeros((21, 2)))
