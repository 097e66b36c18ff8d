"""
Problem specifications for linear-state stochastic control.

The state follows dX = (A X + B u) dt + (C X + D u) dW with a one-dimensional
Brownian motion. Coefficients are piecewise constant on a uniform time grid.
LQ problems carry quadratic costs ½x'Qx + x'S'u + ½u'Ru and ½x'Gx; general
problems carry arbitrary cost evaluators that work on batches of points.
"""

import enum
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
import structlog

from .errors import NumericError, SpecificationError

log = structlog.get_logger()

SYMMETRY_WARN_TOL = 1e-9
SYMMETRY_TOL = 1e-12
PD_TOL = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    N: int
    T: float

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise SpecificationError("Time grid needs a positive integer step count", N=self.N)
        if not np.isfinite(self.T) or self.T <= 0:
            raise SpecificationError("Time grid needs a positive finite horizon", T=self.T)

    @property
    def dt(self):
        return self.T / self.N

    @property
    def nodes(self):
        return np.arange(self.N + 1) * self.dt

    def index_of(self, t):
        """Index of the control interval [t_i, t_{i+1}) containing t, clipped to [0, N]."""
        i = int(np.floor(t / self.dt + 1e-9))
        return min(max(i, 0), self.N)

    def refine(self, factor):
        return TimeGrid(self.N * factor, self.T)


@dataclass(frozen=True, eq=False)
class CoefficientPath:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != self.grid.N + 1:
            raise SpecificationError(
                "Coefficient path must hold one matrix per grid node",
                shape=self.values.shape,
                nodes=self.grid.N + 1,
            )
        if not np.all(np.isfinite(self.values)):
            raise SpecificationError("Coefficient path has non-finite entries")

    @classmethod
    def constant(cls, grid, matrix):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(grid, np.repeat(matrix[None, :, :], grid.N + 1, axis=0))

    @classmethod
    def zeros(cls, grid, rows, cols):
        return cls(grid, np.zeros((grid.N + 1, rows, cols)))

    @property
    def rows(self):
        return self.values.shape[1]

    @property
    def cols(self):
        return self.values.shape[2]

    def at(self, i):
        return self.values[i]

    def at_time(self, t):
        return self.values[self.grid.index_of(t)]

    def resample(self, grid):
        if grid == self.grid:
            return self
        return CoefficientPath(grid, np.stack([self.at_time(t) for t in grid.nodes]))

    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    def is_constant(self):
        return bool(np.all(self.values == self.values[0]))


class ConstraintKind(enum.Enum):
    FREE = "free"
    POSITIVE_CONE = "positive-cone"
    BOX = "box"


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    kind: ConstraintKind = ConstraintKind.FREE
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        if self.kind is ConstraintKind.BOX:
            if self.lo is None or self.hi is None:
                raise SpecificationError("Box constraint needs both lo and hi")
            lo, hi = np.atleast_1d(self.lo), np.atleast_1d(self.hi)
            if lo.shape != hi.shape:
                raise SpecificationError("Box bounds differ in length", lo=lo.shape, hi=hi.shape)
            if np.any(lo > hi):
                raise SpecificationError("Box constraint is empty, lo exceeds hi somewhere")

    @classmethod
    def free(cls):
        return cls(ConstraintKind.FREE)

    @classmethod
    def positive_cone(cls):
        return cls(ConstraintKind.POSITIVE_CONE)

    @classmethod
    def box(cls, lo, hi):
        return cls(ConstraintKind.BOX, np.atleast_1d(np.asarray(lo, dtype=float)), np.atleast_1d(np.asarray(hi, dtype=float)))

    @property
    def dim(self):
        return None if self.lo is None else self.lo.shape[0]

    @property
    def is_free(self):
        return self.kind is ConstraintKind.FREE

    def contains(self, u, tol=1e-8):
        u = np.asarray(u, dtype=float)
        return bool(np.all(np.abs(prox_project(self, u) - u) <= tol))


def prox_project(c, u):
    """
    Euclidean projection onto the constraint set.

    Works on a single vector or on a batch with the control dimension last.
    """
    u = np.asarray(u, dtype=float)
    if c.dim is not None and (u.shape[-1] if u.ndim else 1) != c.dim:
        raise SpecificationError("Control dimension does not match the constraint set", expected=c.dim, got=u.shape)
    if c.kind is ConstraintKind.FREE:
        return u.copy()
    if c.kind is ConstraintKind.POSITIVE_CONE:
        return np.maximum(u, 0.0)
    return np.clip(u, c.lo, c.hi)


def _as_matrix(name, value, rows, cols):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(rows, cols)
    if arr.shape != (rows, cols):
        raise SpecificationError("Matrix has the wrong shape", matrix=name, expected=(rows, cols), got=arr.shape)
    return arr


def _symmetrized(name, values):
    asym = float(np.max(np.abs(values - np.swapaxes(values, -1, -2)))) if values.size else 0.0
    if asym > SYMMETRY_WARN_TOL:
        log.warning("Symmetrizing asymmetric cost matrix", matrix=name, asymmetry=asym)
    return 0.5 * (values + np.swapaxes(values, -1, -2))


def _path_from(name, value, grid, rows, cols):
    if isinstance(value, CoefficientPath):
        path = value.resample(grid)
        if (path.rows, path.cols) != (rows, cols):
            raise SpecificationError(
                "Coefficient path has the wrong shape", matrix=name, expected=(rows, cols), got=(path.rows, path.cols)
            )
        return path
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 3:
        return CoefficientPath(grid, arr).resample(grid)
    return CoefficientPath.constant(grid, _as_matrix(name, arr, rows, cols))


@dataclass(frozen=True)
class CostEvaluators:
    """
    Batched running and terminal cost evaluators.

    x has shape (M, n) and u has shape (M, m). f and g return (M,), the
    gradients return (M, n) or (M, m).
    """

    f: Callable
    fx: Callable
    fu: Callable
    g: Callable
    grad_g: Callable


@dataclass(frozen=True, eq=False)
class GeneralProblem:
    n: int
    m: int
    grid: TimeGrid
    A: CoefficientPath
    B: CoefficientPath
    C: CoefficientPath
    D: CoefficientPath
    x0: np.ndarray
    constraint: ConstraintSet
    cost: CostEvaluators
    name: str = "problem"

    @property
    def T(self):
        return self.grid.T

    def coefficients_at(self, t):
        return self.A.at_time(t), self.B.at_time(t), self.C.at_time(t), self.D.at_time(t)


@dataclass(frozen=True, eq=False)
class LQSpec:
    n: int
    m: int
    grid: TimeGrid
    A: CoefficientPath
    B: CoefficientPath
    C: CoefficientPath
    D: CoefficientPath
    Q: CoefficientPath
    R: CoefficientPath
    S: CoefficientPath
    G: np.ndarray
    x0: np.ndarray
    constraint: ConstraintSet = field(default_factory=ConstraintSet.free)
    name: str = "lq"

    def __post_init__(self):
        n, m = self.n, self.m
        expected = {
            "A": (n, n),
            "B": (n, m),
            "C": (n, n),
            "D": (n, m),
            "Q": (n, n),
            "R": (m, m),
            "S": (m, n),
        }
        for attr, shape in expected.items():
            path = getattr(self, attr)
            if path.grid != self.grid:
                raise SpecificationError("Coefficient path lives on a different grid", matrix=attr)
            if (path.rows, path.cols) != shape:
                raise SpecificationError("Coefficient path has the wrong shape", matrix=attr, expected=shape)
        if self.G.shape != (n, n) or self.x0.shape != (n,):
            raise SpecificationError("Terminal cost or start point has the wrong shape", G=self.G.shape, x0=self.x0.shape)
        for attr in ("Q", "R"):
            values = getattr(self, attr).values
            if np.max(np.abs(values - np.swapaxes(values, 1, 2))) > SYMMETRY_TOL:
                raise SpecificationError("Cost matrix is not symmetric", matrix=attr)
        if np.max(np.abs(self.G - self.G.T)) > SYMMETRY_TOL:
            raise SpecificationError("Cost matrix is not symmetric", matrix="G")
        if self.constraint.dim is not None and self.constraint.dim != m:
            raise SpecificationError("Constraint dimension differs from the control dimension", m=m)

    @classmethod
    def build(cls, *, A, B, C, D, Q, R, S, G, x0, T=1.0, N=100, constraint=None, name="lq"):
        """
        Build a spec from constant matrices, (N+1, r, c) arrays or CoefficientPaths.

        Q, R and G are symmetrized; vectors are reshaped by the dimensions of A and B.
        """
        grid = TimeGrid(N, float(T))
        A_arr = np.atleast_2d(np.asarray(A, dtype=float)) if not isinstance(A, CoefficientPath) else A.values[0]
        n = A_arr.shape[-1]
        B_arr = B.values[0] if isinstance(B, CoefficientPath) else np.asarray(B, dtype=float)
        if B_arr.ndim == 3:
            B_arr = B_arr[0]
        m = B_arr.size // n

        paths = {
            "A": _path_from("A", A, grid, n, n),
            "B": _path_from("B", B, grid, n, m),
            "C": _path_from("C", C, grid, n, n),
            "D": _path_from("D", D, grid, n, m),
            "S": _path_from("S", S, grid, m, n),
        }
        Q_path = _path_from("Q", Q, grid, n, n)
        R_path = _path_from("R", R, grid, m, m)
        paths["Q"] = CoefficientPath(grid, _symmetrized("Q", Q_path.values))
        paths["R"] = CoefficientPath(grid, _symmetrized("R", R_path.values))
        G_mat = _symmetrized("G", _as_matrix("G", G, n, n))
        x0_vec = np.asarray(x0, dtype=float).reshape(n)
        return cls(
            n=n,
            m=m,
            grid=grid,
            G=G_mat,
            x0=x0_vec,
            constraint=constraint or ConstraintSet.free(),
            name=name,
            **paths,
        )

    @property
    def T(self):
        return self.grid.T

    def with_grid(self, grid):
        if grid == self.grid:
            return self
        return LQSpec(
            n=self.n,
            m=self.m,
            grid=grid,
            A=self.A.resample(grid),
            B=self.B.resample(grid),
            C=self.C.resample(grid),
            D=self.D.resample(grid),
            Q=self.Q.resample(grid),
            R=self.R.resample(grid),
            S=self.S.resample(grid),
            G=self.G,
            x0=self.x0,
            constraint=self.constraint,
            name=self.name,
        )

    def with_constraint(self, constraint):
        return replace(self, constraint=constraint)

    def with_start(self, x0):
        return replace(self, x0=np.asarray(x0, dtype=float).reshape(self.n))

    def to_problem(self):
        Q, R, S, G = self.Q, self.R, self.S, self.G

        def f(t, x, u):
            Qt, Rt, St = Q.at_time(t), R.at_time(t), S.at_time(t)
            return (
                0.5 * np.einsum("ki,ij,kj->k", x, Qt, x)
                + np.einsum("ki,ji,kj->k", x, St, u)
                + 0.5 * np.einsum("ki,ij,kj->k", u, Rt, u)
            )

        def fx(t, x, u):
            return x @ Q.at_time(t) + u @ S.at_time(t)

        def fu(t, x, u):
            return x @ S.at_time(t).T + u @ R.at_time(t)

        def g(x):
            return 0.5 * np.einsum("ki,ij,kj->k", x, G, x)

        def grad_g(x):
            return x @ G

        return GeneralProblem(
            n=self.n,
            m=self.m,
            grid=self.grid,
            A=self.A,
            B=self.B,
            C=self.C,
            D=self.D,
            x0=self.x0,
            constraint=self.constraint,
            cost=CostEvaluators(f=f, fx=fx, fu=fu, g=g, grad_g=grad_g),
            name=self.name,
        )


def as_problem(prob):
    return prob.to_problem() if isinstance(prob, LQSpec) else prob


def hamiltonian_grad_u(prob, t, x, u, y, z):
    """
    Gradient in u of the Hamiltonian y'(Ax+Bu) + z'(Cx+Du) + f(t,x,u).

    Accepts single vectors or batches with a leading sample axis.
    """
    prob = as_problem(prob)
    single = np.ndim(x) == 1
    x, u, y, z = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (x, u, y, z))
    if x.shape[1] != prob.n or y.shape[1] != prob.n or z.shape[1] != prob.n or u.shape[1] != prob.m:
        raise SpecificationError("Hamiltonian inputs have mismatched dimensions", n=prob.n, m=prob.m)
    _, B, _, D = prob.coefficients_at(t)
    grad = y @ B + z @ D + prob.cost.fu(t, x, u)
    if not np.all(np.isfinite(grad)):
        raise NumericError("Hamiltonian gradient is not finite", t=t)
    return grad[0] if single else grad


def diffusion_matrices(A, B, C, D):
    """The matrices A + A' + C'C, B + C'D and D'D governing E|X_T|^2 growth."""
    return A + A.T + C.T @ C, B + C.T @ D, D.T @ D


class AssumptionCase(enum.Enum):
    STANDARD = "standard"
    SINGULAR_I = "singular-i"
    SINGULAR_II = "singular-ii"
    NOT_SATISFIED = "not-satisfied"


@dataclass(frozen=True, eq=False)
class AssumptionReport:
    case: AssumptionCase
    mu: float
    delta: float | None
    a_mat: np.ndarray
    b_mat: np.ndarray
    d_mat: np.ndarray
    min_eigens: dict
    b_vanishes: bool

    def as_dict(self):
        return {
            "case": self.case.value,
            "mu": self.mu,
            "delta": self.delta,
            "b_vanishes": self.b_vanishes,
            "min_eigens": {key: _finite_min(value) for key, value in self.min_eigens.items()},
        }


def _finite_min(values):
    finite = np.asarray(values, dtype=float)
    finite = finite[np.isfinite(finite)]
    return float(finite.min()) if finite.size else None


def _min_eig(matrix):
    return float(np.linalg.eigvalsh(0.5 * (matrix + matrix.T))[0])


def assumption_check(spec):
    """
    Classify an LQ spec as standard, singular (i)/(ii) or unsupported.

    Standard when R is uniformly positive definite. Otherwise singular when G is
    positive definite and, node by node, either A is positive definite with a
    positive Schur complement D - B'A^{-1}B, or A is positive semi-definite with
    D - B'B positive definite.
    """
    nodes = spec.grid.N + 1
    a_mat = np.empty((nodes, spec.n, spec.n))
    b_mat = np.empty((nodes, spec.n, spec.m))
    d_mat = np.empty((nodes, spec.m, spec.m))
    min_r = np.empty(nodes)
    min_a = np.empty(nodes)
    delta_i = np.full(nodes, np.nan)
    delta_ii = np.full(nodes, np.nan)

    for i in range(nodes):
        a_mat[i], b_mat[i], d_mat[i] = diffusion_matrices(spec.A.at(i), spec.B.at(i), spec.C.at(i), spec.D.at(i))
        min_r[i] = _min_eig(spec.R.at(i))
        min_a[i] = _min_eig(a_mat[i])
        if min_a[i] > PD_TOL:
            try:
                schur = d_mat[i] - b_mat[i].T @ np.linalg.solve(a_mat[i], b_mat[i])
                delta_i[i] = _min_eig(schur)
            except np.linalg.LinAlgError:
                log.debug("Diffusion matrix not invertible, falling through to case (ii)", node=i)
        if min_a[i] >= -PD_TOL:
            delta_ii[i] = _min_eig(d_mat[i] - b_mat[i].T @ b_mat[i])

    mu_r = float(np.min(min_r))
    mu_g = _min_eig(spec.G)
    b_vanishes = bool(np.max(np.abs(b_mat)) < PD_TOL)
    min_eigens = {"R": min_r, "G": np.array([mu_g]), "A": min_a, "schur_i": delta_i, "schur_ii": delta_ii}

    ok_i = np.nan_to_num(delta_i, nan=-np.inf) > 0
    ok_ii = np.nan_to_num(delta_ii, nan=-np.inf) > 0
    delta = None
    if mu_r > 0:
        case, mu = AssumptionCase.STANDARD, mu_r
    elif mu_g > 0 and np.all(ok_i):
        case, mu, delta = AssumptionCase.SINGULAR_I, mu_g, float(np.min(delta_i))
    elif mu_g > 0 and np.all(ok_i | ok_ii):
        case, mu = AssumptionCase.SINGULAR_II, mu_g
        delta = float(np.min(np.where(ok_i, delta_i, delta_ii)))
    else:
        case, mu = AssumptionCase.NOT_SATISFIED, max(mu_r, mu_g, 0.0)

    log.debug("Assumption check finished", problem=spec.name, case=case.value, mu=mu, delta=delta)
    return AssumptionReport(
        case=case,
        mu=mu,
        delta=delta,
        a_mat=a_mat,
        b_mat=b_mat,
        d_mat=d_mat,
        min_eigens=min_eigens,
        b_vanishes=b_vanishes,
    )
