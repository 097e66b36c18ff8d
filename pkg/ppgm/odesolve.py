"""
Backward matrix ODEs for LQ problems.

All systems are integrated with fixed-step classical RK4 from t_N down to t_0.
Control coefficients are held constant on each control interval [t_i, t_{i+1}),
and every control interval is split into ODE_SUBSTEPS RK4 steps.
"""

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import structlog

from .core import CoefficientPath, ConstraintKind
from .errors import NumericError, SingularRiccatiError, SpecificationError, UsageError

log = structlog.get_logger()

ODE_SUBSTEPS = 10
QP_MAX_DIM = 20
KKT_TOL = 1e-10
GRID_FIXED_POINT_TOL = 1e-14
GRID_FIXED_POINT_MAX_ITER = 100


@dataclass(frozen=True, eq=False)
class MatrixOdeSolution:
    grid: object
    values: np.ndarray

    def at(self, i):
        return self.values[i]

    def at_time(self, t):
        return self.values[self.grid.index_of(t)]

    def quadratic_value(self, x, i=0):
        """½ x'Mx with the symmetric part of the node-i matrix; x may be a batch."""
        sym = 0.5 * (self.values[i] + self.values[i].T)
        x = np.atleast_2d(x)
        return 0.5 * np.einsum("ki,ij,kj->k", x, sym, x)


def _rk4_interval(rhs, M, t_end, dt, substeps, i):
    """Integrate backward over one control interval ending at t_end."""
    h = dt / substeps
    t = t_end
    for _ in range(substeps):
        k1 = rhs(t, M, i)
        k2 = rhs(t - 0.5 * h, M - 0.5 * h * k1, i)
        k3 = rhs(t - 0.5 * h, M - 0.5 * h * k2, i)
        k4 = rhs(t - h, M - h * k3, i)
        M = M - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t -= h
    return M


def rk4_backward(rhs, terminal, grid, substeps=1):
    """
    Integrate dM/dt = rhs(t, M, i) backward from M(T) = terminal.

    ``i`` is the control interval the stage belongs to, so callers can hold
    piecewise-constant coefficients fixed over a whole RK4 step.
    """
    terminal = np.atleast_2d(np.asarray(terminal, dtype=float))
    values = np.empty((grid.N + 1, *terminal.shape))
    values[grid.N] = terminal
    M = terminal.copy()
    for i in range(grid.N - 1, -1, -1):
        M = _rk4_interval(rhs, M, grid.nodes[i + 1], grid.dt, substeps, i)
        if not np.all(np.isfinite(M)):
            raise NumericError("ODE solution blew up", node=i, t=float(grid.nodes[i]))
        values[i] = M
    return MatrixOdeSolution(grid, values)


def _check_alpha(spec, alpha):
    if alpha.grid != spec.grid:
        raise SpecificationError("Feedback path lives on a different grid", alpha_N=alpha.grid.N, spec_N=spec.grid.N)
    if (alpha.rows, alpha.cols) != (spec.m, spec.n):
        raise SpecificationError("Feedback path has the wrong shape", expected=(spec.m, spec.n), got=(alpha.rows, alpha.cols))


def _a_ode_rhs(spec, alpha):
    def rhs(t, a, i):
        A, B, C, D = spec.A.at(i), spec.B.at(i), spec.C.at(i), spec.D.at(i)
        al = alpha.at(i)
        return -(a @ (A + B @ al) + A.T @ a + C.T @ a @ (C + D @ al) + spec.Q.at(i) + spec.S.at(i).T @ al)

    return rhs


def solve_a_ode(spec, alpha, substeps=ODE_SUBSTEPS):
    """Adjoint coefficient a of a linear feedback u = αx, so that Y = aX along the state."""
    _check_alpha(spec, alpha)
    return rk4_backward(_a_ode_rhs(spec, alpha), spec.G, spec.grid, substeps)


def feedback_from_value(spec, a, i):
    """α(a) = -(R + D'aD)^{-1}(B'a + D'aC + S) with coefficients of node i."""
    B, C, D = spec.B.at(i), spec.C.at(i), spec.D.at(i)
    gain = spec.R.at(i) + D.T @ a @ D
    try:
        alpha = -np.linalg.solve(gain, B.T @ a + D.T @ a @ C + spec.S.at(i))
    except np.linalg.LinAlgError as e:
        raise SingularRiccatiError("R + D'aD is not invertible", node=i) from e
    if not np.all(np.isfinite(alpha)):
        raise SingularRiccatiError("R + D'aD is numerically singular", node=i)
    return alpha


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    a_star: MatrixOdeSolution
    alpha_star: CoefficientPath
    value_coeff: MatrixOdeSolution
    alpha_grid: CoefficientPath
    a_grid: MatrixOdeSolution

    def value(self, x):
        return self.value_coeff.quadratic_value(x, 0)


def _grid_fixed_point(spec, substeps):
    grid = spec.grid
    alpha = np.empty((grid.N + 1, spec.m, spec.n))
    alpha[grid.N] = feedback_from_value(spec, spec.G, grid.N)
    a_next = spec.G
    for i in range(grid.N - 1, -1, -1):
        al = feedback_from_value(spec, a_next, i)
        for _ in range(GRID_FIXED_POINT_MAX_ITER):
            path = _FrozenAlpha(al)
            a_i = _rk4_interval(_a_ode_rhs(spec, path), a_next, grid.nodes[i + 1], grid.dt, substeps, i)
            al_new = feedback_from_value(spec, a_i, i)
            change = float(np.max(np.abs(al_new - al)))
            al = al_new
            if change <= GRID_FIXED_POINT_TOL * max(1.0, float(np.max(np.abs(al)))):
                break
        alpha[i] = al
        a_next = _rk4_interval(_a_ode_rhs(spec, _FrozenAlpha(al)), a_next, grid.nodes[i + 1], grid.dt, substeps, i)
    return CoefficientPath(grid, alpha)


class _FrozenAlpha:
    def __init__(self, matrix):
        self.matrix = matrix

    def at(self, i):
        return self.matrix


def solve_riccati(spec, substeps=ODE_SUBSTEPS):
    """
    Optimal LQ feedback from the backward Riccati equation.

    Also returns the cost coefficient of the optimal feedback (through the
    Lyapunov equation) and the exact fixed point of the discrete
    policy-gradient map on the spec's grid.
    """

    def rhs(t, a, i):
        A, B, C, D = spec.A.at(i), spec.B.at(i), spec.C.at(i), spec.D.at(i)
        al = feedback_from_value(spec, a, i)
        return -(a @ A + A.T @ a + C.T @ a @ C + spec.Q.at(i) + (a @ B + C.T @ a @ D + spec.S.at(i).T) @ al)

    a_star = rk4_backward(rhs, spec.G, spec.grid, substeps)
    alpha_star = CoefficientPath(
        spec.grid, np.stack([feedback_from_value(spec, a_star.at(i), i) for i in range(spec.grid.N + 1)])
    )
    value_coeff = solve_cost_lyapunov(spec, alpha_star, substeps)
    alpha_grid = _grid_fixed_point(spec, substeps)
    a_grid = solve_a_ode(spec, alpha_grid, substeps)
    log.debug("Riccati equation solved", problem=spec.name, a0_norm=float(np.max(np.abs(a_star.at(0)))))
    return RiccatiSolution(
        a_star=a_star, alpha_star=alpha_star, value_coeff=value_coeff, alpha_grid=alpha_grid, a_grid=a_grid
    )


def solve_cost_lyapunov(spec, alpha, substeps=ODE_SUBSTEPS):
    """Cost coefficient P of the feedback u = αx; the expected cost from x is ½x'P_0x."""
    _check_alpha(spec, alpha)

    def rhs(t, P, i):
        al = alpha.at(i)
        Aa = spec.A.at(i) + spec.B.at(i) @ al
        Ca = spec.C.at(i) + spec.D.at(i) @ al
        SA = spec.S.at(i).T @ al
        return -(P @ Aa + Aa.T @ P + Ca.T @ P @ Ca + spec.Q.at(i) + SA + SA.T + al.T @ spec.R.at(i) @ al)

    return rk4_backward(rhs, spec.G, spec.grid, substeps)


def feedback_cost(spec, alpha, substeps=ODE_SUBSTEPS):
    return float(solve_cost_lyapunov(spec, alpha, substeps).quadratic_value(spec.x0)[0])


def nonneg_qp_min(M, q, tol=KKT_TOL):
    """
    Exact minimizer of ξ'Mξ + 2ξ'q over ξ >= 0.

    Enumerates every support set, solves the reduced stationarity system and
    keeps the first candidate satisfying the KKT conditions.

    Returns:
        tuple: (xi, min_value)
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    m = q.shape[0]
    if m > QP_MAX_DIM:
        raise UsageError("Active-set enumeration is limited in size", m=m, max_dim=QP_MAX_DIM)
    if M.shape != (m, m):
        raise SpecificationError("QP matrix and vector disagree in size", M=M.shape, q=q.shape)
    try:
        scipy.linalg.cho_factor(0.5 * (M + M.T))
    except scipy.linalg.LinAlgError as e:
        raise SpecificationError("QP matrix is not positive definite") from e

    if np.all(q >= 0):
        return np.zeros(m), 0.0
    for support in itertools.chain.from_iterable(itertools.combinations(range(m), k) for k in range(m, 0, -1)):
        idx = list(support)
        xi = np.zeros(m)
        xi[idx] = -np.linalg.solve(M[np.ix_(idx, idx)], q[idx])
        if np.any(xi[idx] < -tol):
            continue
        grad = M @ xi + q
        off = np.setdiff1d(np.arange(m), idx)
        if off.size and np.any(grad[off] < -tol):
            continue
        xi = np.maximum(xi, 0.0)
        return xi, float(xi @ M @ xi + 2.0 * xi @ q)
    raise NumericError("No support set satisfied the KKT conditions", m=m)


@dataclass(frozen=True, eq=False)
class ConeReference:
    grid: object
    p_plus: np.ndarray
    p_minus: np.ndarray
    xi_plus: np.ndarray
    xi_minus: np.ndarray

    def control(self, t, x):
        i = self.grid.index_of(t)
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        return np.maximum(x, 0.0) * self.xi_plus[i] + np.maximum(-x, 0.0) * self.xi_minus[i]

    def value(self, x, i=0):
        x = np.asarray(x, dtype=float)
        return self.p_plus[i] * np.maximum(x, 0.0) ** 2 + self.p_minus[i] * np.maximum(-x, 0.0) ** 2


def _cone_qp(spec, P, sign, i):
    A, B, C, D = spec.A.at(i), spec.B.at(i), spec.C.at(i), spec.D.at(i)
    b, d, c = B[0], D[0], C[0, 0]
    M = 0.5 * spec.R.at(i) + P * np.outer(d, d)
    q = sign * (P * b + P * c * d + 0.5 * spec.S.at(i)[:, 0])
    try:
        return nonneg_qp_min(M, q)
    except SpecificationError as e:
        raise SpecificationError("½R + D'PD lost positive definiteness", node=i, P=float(P)) from e


def solve_cone_reference(spec, substeps=ODE_SUBSTEPS):
    """
    Value and feedback of a scalar-state LQ problem with controls in the nonnegative orthant.

    The value is P+ x^2 on x > 0 and P- x^2 on x < 0; each branch follows its own
    backward ODE whose control term is a nonnegative QP solved at every RK stage.
    """
    if spec.n != 1:
        raise SpecificationError("Cone reference needs a scalar state", n=spec.n)
    if spec.constraint.kind is not ConstraintKind.POSITIVE_CONE:
        raise SpecificationError("Cone reference needs a positive-cone constraint", constraint=spec.constraint.kind.value)

    def branch(sign):
        def rhs(t, P, i):
            A, C = spec.A.at(i)[0, 0], spec.C.at(i)[0, 0]
            diffusion = 2.0 * A + C * C
            _, hmin = _cone_qp(spec, P[0, 0], sign, i)
            return -np.array([[diffusion * P[0, 0] + 0.5 * spec.Q.at(i)[0, 0] + hmin]])

        return rk4_backward(rhs, 0.5 * spec.G, spec.grid, substeps).values[:, 0, 0]

    p_plus, p_minus = branch(+1.0), branch(-1.0)
    nodes = range(spec.grid.N + 1)
    xi_plus = np.stack([_cone_qp(spec, p_plus[i], +1.0, i)[0] for i in nodes])
    xi_minus = np.stack([_cone_qp(spec, p_minus[i], -1.0, i)[0] for i in nodes])
    log.debug("Cone reference solved", problem=spec.name, p_plus0=float(p_plus[0]), p_minus0=float(p_minus[0]))
    return ConeReference(grid=spec.grid, p_plus=p_plus, p_minus=p_minus, xi_plus=xi_plus, xi_minus=xi_minus)
