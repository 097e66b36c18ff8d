"""
Policy gradient iteration for unconstrained LQ problems.

Each step solves the linear a-ODE for the current feedback α and moves α along
the Hamiltonian gradient B'a + D'a(C + Dα) + Rα + S, node by node.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import structlog

from .core import CoefficientPath
from .errors import DivergenceError, UsageError
from .odesolve import ODE_SUBSTEPS, solve_a_ode

log = structlog.get_logger()

DIVERGENCE_LIMIT = 1e8


@dataclass(frozen=True)
class IterateRecord:
    k: int
    delta_k: float
    control_err: float | None = None
    value_err: float | None = None
    contraction_ratio: float | None = None
    bsde_loss: float | None = None
    control_loss: float | None = None
    wall_ms: float | None = None


@dataclass
class IterateHistory:
    records: list = field(default_factory=list)
    converged: bool = False

    def append(self, record):
        if record.delta_k < 0:
            raise UsageError("Relative change cannot be negative", k=record.k)
        if self.records and record.k <= self.records[-1].k:
            raise UsageError("History records must be strictly increasing in k", k=record.k, last=self.records[-1].k)
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def last(self):
        return self.records[-1] if self.records else None

    def column(self, name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], dtype=float)


def relative_change(new, old):
    """Sup-norm relative change; falls back to the absolute change when old is zero."""
    diff = float(np.max(np.abs(new - old)))
    scale = float(np.max(np.abs(old)))
    return diff / scale if scale > 0 else diff


def _update_alpha(spec, alpha, a, tau):
    values = np.empty_like(alpha.values)
    for i in range(spec.grid.N + 1):
        B, C, D = spec.B.at(i), spec.C.at(i), spec.D.at(i)
        al, a_i = alpha.at(i), a.at(i)
        grad = B.T @ a_i + D.T @ a_i @ (C + D @ al) + spec.R.at(i) @ al + spec.S.at(i)
        values[i] = al - tau * grad
    return CoefficientPath(spec.grid, values)


def lq_pgm_step(spec, alpha, tau, substeps=ODE_SUBSTEPS):
    if tau <= 0:
        raise UsageError("Step size must be positive", tau=tau)
    if not spec.constraint.is_free:
        raise UsageError("The ODE policy gradient method handles unconstrained problems only", problem=spec.name)
    a = solve_a_ode(spec, alpha, substeps)
    return _update_alpha(spec, alpha, a, tau)


def initial_alpha(spec, seed):
    rng = np.random.default_rng(seed)
    return CoefficientPath(spec.grid, rng.uniform(-0.1, 0.1, size=(spec.grid.N + 1, spec.m, spec.n)))


def run_lq_pgm(spec, alpha0=None, tau=0.1, tol=1e-6, kmax=200, reference=None, seed=0, record_timing=False,
               substeps=ODE_SUBSTEPS):
    """
    Iterate lq_pgm_step until the relative change of α drops below tol.

    Args:
        reference: optional RiccatiSolution; when given, each record carries the
            relative control and value errors against its grid fixed point.

    Returns:
        tuple: (alpha_final, IterateHistory)
    """
    if tau <= 0 or tol <= 0 or kmax < 1:
        raise UsageError("Invalid iteration parameters", tau=tau, tol=tol, kmax=kmax)
    if not spec.constraint.is_free:
        raise UsageError("The ODE policy gradient method handles unconstrained problems only", problem=spec.name)

    alpha = alpha0 if alpha0 is not None else initial_alpha(spec, seed)
    a = solve_a_ode(spec, alpha, substeps)
    history = IterateHistory()
    previous_step = None
    log.info("Starting LQ policy gradient iteration", problem=spec.name, n=spec.n, m=spec.m, tau=tau, tol=tol, kmax=kmax)

    for k in range(1, kmax + 1):
        started = time.perf_counter()
        alpha_new = _update_alpha(spec, alpha, a, tau)
        sup = alpha_new.sup_norm()
        if not np.isfinite(sup) or sup > DIVERGENCE_LIMIT:
            raise DivergenceError("Policy iterates diverged, try a smaller step size", k=k, tau=tau, sup_norm=sup)
        a_new = solve_a_ode(spec, alpha_new, substeps)

        step = float(np.max(np.abs(alpha_new.values - alpha.values)))
        record = IterateRecord(
            k=k,
            delta_k=relative_change(alpha_new.values, alpha.values),
            control_err=None if reference is None else relative_change(alpha_new.values, reference.alpha_grid.values),
            value_err=None if reference is None else relative_change(a_new.values, reference.a_grid.values),
            contraction_ratio=None if not previous_step else step / previous_step,
            wall_ms=(time.perf_counter() - started) * 1000.0 if record_timing else None,
        )
        history.append(record)
        log.debug("LQ policy gradient step", k=k, delta_k=record.delta_k, control_err=record.control_err)

        alpha, a, previous_step = alpha_new, a_new, step
        if record.delta_k < tol:
            history.converged = True
            log.info("LQ policy gradient converged", k=k, delta_k=record.delta_k, control_err=record.control_err)
            break
    else:
        log.warning("LQ policy gradient reached the iteration limit", kmax=kmax, delta_k=history.last.delta_k)

    return alpha, history

