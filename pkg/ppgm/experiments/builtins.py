"""
Compiled-in problems and the random LQ recipe used by the sensitivity sweeps.

Builtins without a stated start point use x0 = (1, ..., 1).
"""

from dataclasses import dataclass

import numpy as np
import structlog

from ..core import ConstraintKind, ConstraintSet, CostEvaluators, GeneralProblem, LQSpec, diffusion_matrices
from ..errors import SpecificationError

log = structlog.get_logger()

STD_LQ = {
    "A": [[0.041, 0.11], [-0.25, 0.099]],
    "B": [[-0.177, -0.204, -0.157], [0.077, 0.052, 0.019]],
    "C": [[0.04, 0.093], [-0.148, 0.189]],
    "D": [[-0.236, 0.085, 0.041], [0.029, -0.180, -0.151]],
    "Q": [[0.2, 0.2], [0.2, 0.2]],
    "R": [[1.217, 0.019, -0.236], [0.019, 0.809, 0.086], [-0.236, 0.086, 1.264]],
    "S": np.zeros((3, 2)).tolist(),
    "G": np.eye(2).tolist(),
}

SINGULAR_LQ = {
    "A": [[0.292, 0.11], [-0.25, 0.234]],
    "B": [[-0.177, -0.204], [-0.157, 0.077]],
    "C": [[0.052, 0.019], [0.04, 0.093]],
    "D": [[0.852, 0.189], [-0.236, 1.085]],
    "Q": np.zeros((2, 2)).tolist(),
    "R": np.zeros((2, 2)).tolist(),
    "S": np.zeros((2, 2)).tolist(),
    "G": [[1.376, 0.01], [0.01, 0.539]],
}

# Joint running-cost block [[Q, S'], [S, R]] of the scalar-state problems.
_SCALAR_COST_BLOCK = np.array(
    [
        [0.2, 0.335, -0.482, 0.25, 0.489, 0.248],
        [0.335, 0.868, 0.098, -0.147, 0.065, 0.084],
        [-0.482, 0.098, 0.839, 0.025, 0.007, 0.112],
        [0.25, -0.147, 0.025, 1.168, 0.173, 0.05],
        [0.489, 0.065, 0.007, 0.173, 0.82, 0.059],
        [0.248, 0.084, 0.112, 0.05, 0.059, 1.083],
    ]
)

NONCONVEX_LQ = {
    "A": [[0.083]],
    "B": [[0.22, -0.5, -0.198, -0.353, -0.408]],
    "C": [[-0.314]],
    "D": [[-0.154, -0.103, 0.039, 0.081, 0.185]],
    "Q": _SCALAR_COST_BLOCK[:1, :1].tolist(),
    "R": _SCALAR_COST_BLOCK[1:, 1:].tolist(),
    "S": _SCALAR_COST_BLOCK[1:, :1].tolist(),
    "G": [[0.78]],
}

COSINE_B = np.array([[0.013, 0.027, 0.062], [0.099, 0.126, -0.158], [0.057, 0.028, 0.02]])
COSINE_D = np.array([[1.346, -0.11, 0.126], [-0.134, 1.474, 0.153], [0.011, 0.064, 1.439]])

# Stability settings for the singular problem: fewer sub-steps, smaller rates, larger batch.
SINGULAR_PPGM_OVERRIDES = {
    "bsde_steps": 10,
    "control_steps": 10,
    "control_rate": 0.002,
    "bsde_rate": 0.005,
    "batch": 100,
    "outer_max": 500,
}


@dataclass(frozen=True, eq=False)
class ProblemBundle:
    """
    A resolved problem: the LQ spec carries the linear structure (and the costs
    when ``is_lq``); ``problem`` is what simulation and deep training use.
    """

    name: str
    spec: LQSpec
    problem: GeneralProblem
    is_lq: bool
    ppgm_overrides: dict

    @property
    def n(self):
        return self.spec.n

    @property
    def m(self):
        return self.spec.m


def _lq_bundle(name, data, steps, constraint=None, overrides=None):
    n = np.atleast_2d(data["A"]).shape[0]
    spec = LQSpec.build(**data, x0=np.ones(n), T=1.0, N=steps, constraint=constraint, name=name)
    return ProblemBundle(name=name, spec=spec, problem=spec.to_problem(), is_lq=True, ppgm_overrides=overrides or {})


def cosine_matrices():
    """Drift and diffusion making A + A' + C'C and B + C'D vanish identically."""
    D_inv = np.linalg.inv(COSINE_D)
    C = -(D_inv.T @ COSINE_B.T)
    A = -0.5 * COSINE_B @ D_inv @ D_inv.T @ COSINE_B.T
    return A, COSINE_B, C, COSINE_D


def cosine_cost_problem(steps=100):
    A, B, C, D = cosine_matrices()
    a_mat, b_mat, _ = diffusion_matrices(A, B, C, D)
    if max(np.max(np.abs(a_mat)), np.max(np.abs(b_mat))) > 1e-12:
        raise SpecificationError("Cosine-cost construction does not cancel the diffusion terms")
    n = m = 3
    # Linear structure only; R = Q = S = 0 and G = I mirror the terminal cost for the assumption report.
    spec = LQSpec.build(
        A=A, B=B, C=C, D=D, Q=np.zeros((n, n)), R=np.zeros((m, m)), S=np.zeros((m, n)), G=np.eye(n),
        x0=np.ones(n), T=1.0, N=steps, name="cosine-cost",
    )

    def f(t, x, u):
        return -np.sum(np.cos(u), axis=1)

    def fx(t, x, u):
        return np.zeros_like(x)

    def fu(t, x, u):
        return np.sin(u)

    def g(x):
        return 0.5 * np.sum(x * x, axis=1)

    def grad_g(x):
        return x.copy()

    problem = GeneralProblem(
        n=n,
        m=m,
        grid=spec.grid,
        A=spec.A,
        B=spec.B,
        C=spec.C,
        D=spec.D,
        x0=spec.x0,
        constraint=ConstraintSet.free(),
        cost=CostEvaluators(f=f, fx=fx, fu=fu, g=g, grad_g=grad_g),
        name="cosine-cost",
    )
    return ProblemBundle(name="cosine-cost", spec=spec, problem=problem, is_lq=False, ppgm_overrides={})


def cosine_optimal_value(x0, T=1.0):
    """v(0, x) = -mT + ½|x|² at the optimal control u = 0."""
    x0 = np.atleast_2d(x0)
    return -x0.shape[1] * T + 0.5 * np.sum(x0 * x0, axis=1)


def load_builtin(name, steps=100):
    if name == "std-lq":
        return _lq_bundle(name, STD_LQ, steps)
    if name == "singular-lq":
        return _lq_bundle(name, SINGULAR_LQ, steps, overrides=SINGULAR_PPGM_OVERRIDES)
    if name == "nonconvex-lq":
        return _lq_bundle(name, NONCONVEX_LQ, steps)
    if name == "cone-lq":
        return _lq_bundle(name, NONCONVEX_LQ, steps, constraint=ConstraintSet.positive_cone())
    if name == "cosine-cost":
        return cosine_cost_problem(steps)
    raise SpecificationError("Unknown builtin problem", name=name)


def generate_random_spec(n, seed, steps=100):
    """
    Random n = m LQ spec with coefficients scaled by 1/n.

    R is symmetrized as I + ½(R0 + R0') so it stays a valid quadratic form.
    """
    if n < 1:
        raise SpecificationError("Random spec needs n >= 1", n=n)
    rng = np.random.default_rng(seed)
    scale = 0.25 / n
    A, B, C, D = (rng.uniform(-scale, scale, size=(n, n)) for _ in range(4))
    G0 = rng.uniform(-0.5, 0.5, size=(n, n))
    S = rng.uniform(-0.5, 0.5, size=(n, n))
    R0 = rng.uniform(-0.5 / n, 0.5 / n, size=(n, n))
    return LQSpec.build(
        A=A,
        B=B,
        C=C,
        D=D,
        Q=np.full((n, n), 0.2),
        R=np.eye(n) + 0.5 * (R0 + R0.T),
        S=S,
        G=np.eye(n) + 0.5 * (G0 + G0.T),
        x0=np.ones(n),
        T=1.0,
        N=steps,
        name=f"random-n{n}-s{seed}",
    )


def inline_spec(inline, steps=100):
    kind = ConstraintKind(inline.constraint)
    if kind is ConstraintKind.BOX:
        constraint = ConstraintSet.box(inline.lo, inline.hi)
    elif kind is ConstraintKind.POSITIVE_CONE:
        constraint = ConstraintSet.positive_cone()
    else:
        constraint = ConstraintSet.free()
    spec = LQSpec.build(
        A=inline.A, B=inline.B, C=inline.C, D=inline.D, Q=inline.Q, R=inline.R, S=inline.S, G=inline.G,
        x0=inline.x0, T=inline.T, N=steps, constraint=constraint, name="inline",
    )
    return ProblemBundle(name="inline", spec=spec, problem=spec.to_problem(), is_lq=True, ppgm_overrides={})


def spec_to_dict(spec):
    """Plain-data view of a constant-coefficient spec, in the inline config layout."""
    return {
        "A": spec.A.at(0).tolist(),
        "B": spec.B.at(0).tolist(),
        "C": spec.C.at(0).tolist(),
        "D": spec.D.at(0).tolist(),
        "Q": spec.Q.at(0).tolist(),
        "R": spec.R.at(0).tolist(),
        "S": spec.S.at(0).tolist(),
        "G": spec.G.tolist(),
        "x0": spec.x0.tolist(),
        "T": spec.T,
        "constraint": spec.constraint.kind.value,
    }
