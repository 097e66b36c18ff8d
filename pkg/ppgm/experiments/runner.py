"""
Runs one configured experiment end to end and writes its artifacts:

    history.csv      per-iteration convergence record
    value0.csv       v(0, x) along the first state coordinate, with a reference when one exists
    summary.json     run manifest (resolved config, version, seeds, timings, verdict, assumption report)
    convergence.svg  optional log-scale plot
    checkpoint.npz   deep runs only
"""

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import structlog

from .. import __version__
from ..config import load_settings_from_env
from ..core import AssumptionCase, ConstraintKind, ConstraintSet, TimeGrid, assumption_check
from ..deepppgm import EVAL_STREAM, load_checkpoint, run_ppgm, save_checkpoint
from ..errors import UsageError
from ..lqpgm import IterateHistory, run_lq_pgm
from ..montecarlo import (
    ConeFeedback,
    FixedStart,
    LinearFeedback,
    NetworkFeedback,
    ZeroPolicy,
    derive_seed,
    estimate_h2_distance,
    estimate_h2_norm_sq,
    value_curve,
)
from ..odesolve import solve_cone_reference, solve_cost_lyapunov, solve_riccati
from . import reporting
from .builtins import ProblemBundle, cosine_optimal_value, generate_random_spec, inline_spec, load_builtin, spec_to_dict

log = structlog.get_logger()

CHECKPOINT_FILE = "checkpoint.npz"


@dataclass
class RunOutcome:
    converged: bool
    out_dir: Path
    history: IterateHistory | None
    manifest: dict


@dataclass
class _MethodResult:
    converged: bool
    history: IterateHistory
    values: list
    reference: list | None
    extras: dict = field(default_factory=dict)


def resolve_problem(config):
    source, steps = config.problem, config.lq.steps
    if source.builtin:
        return load_builtin(source.builtin, steps)
    if source.random:
        spec = generate_random_spec(source.random.n, source.random.seed, steps)
        return ProblemBundle(name=spec.name, spec=spec, problem=spec.to_problem(), is_lq=True, ppgm_overrides={})
    return inline_spec(source.inline, steps)


def resolve_ppgm_config(config, bundle):
    """
    Deep settings after builtin overrides; fields set explicitly in the file always win.

    Builtin deep runs use the adaptive optimizer unless told otherwise, and the
    master seed and evaluation settings flow down when not given.
    """
    explicit = config.ppgm.model_fields_set
    updates = {key: value for key, value in bundle.ppgm_overrides.items() if key not in explicit}
    if config.problem.builtin and "optimizer" not in explicit:
        updates["optimizer"] = "adam"
    if "seed" not in explicit:
        updates["seed"] = config.seed
    if "eval_steps" not in explicit:
        updates["eval_steps"] = config.evaluation.eval_steps
    if "eval_paths" not in explicit:
        updates["eval_paths"] = config.evaluation.eval_paths
    return config.ppgm.model_copy(update=updates)


def output_directory(config, settings):
    base = Path(config.output_dir or settings["output_dir"])
    out_dir = base / config.run_name
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def x_grid(config):
    ev = config.evaluation
    return np.linspace(ev.x_min, ev.x_max, ev.x_points)


def _start_points(x0, xs):
    points = np.repeat(np.asarray(x0, dtype=float)[None, :], len(xs), axis=0)
    points[:, 0] = xs
    return points


def _require_free_lq(bundle, method):
    if not bundle.is_lq:
        raise UsageError("Method needs a linear-quadratic problem", method=method, problem=bundle.name)
    if not bundle.spec.constraint.is_free:
        raise UsageError(
            "Method handles unconstrained problems only",
            method=method,
            problem=bundle.name,
            constraint=bundle.spec.constraint.kind.value,
        )


def _run_riccati(config, bundle, settings, out_dir, checkpoint):
    _require_free_lq(bundle, "riccati")
    riccati = solve_riccati(bundle.spec)
    values = riccati.value(_start_points(bundle.spec.x0, x_grid(config)))
    return _MethodResult(
        converged=True,
        history=IterateHistory(converged=True),
        values=list(values),
        reference=None,
        extras={"value_at_x0": float(riccati.value(bundle.spec.x0)[0])},
    )


def _run_lq_pgm(config, bundle, settings, out_dir, checkpoint):
    _require_free_lq(bundle, "lq-pgm")
    spec, params = bundle.spec, config.lq
    riccati = solve_riccati(spec)
    alpha, history = run_lq_pgm(
        spec,
        tau=params.tau,
        tol=params.tol,
        kmax=params.kmax,
        reference=riccati,
        seed=config.seed,
        record_timing=settings["record_timing"],
    )
    points = _start_points(spec.x0, x_grid(config))
    values = solve_cost_lyapunov(spec, alpha).quadratic_value(points, 0)
    return _MethodResult(
        converged=history.converged,
        history=history,
        values=list(values),
        reference=list(riccati.value(points)),
        extras={"iterations": len(history)},
    )


def _run_cone_reference(config, bundle, settings, out_dir, checkpoint):
    spec = bundle.spec
    if spec.n != 1 or spec.constraint.kind is not ConstraintKind.POSITIVE_CONE:
        raise UsageError("Cone reference needs a scalar-state problem with a positive-cone constraint", problem=bundle.name)
    cone = solve_cone_reference(spec)
    unconstrained = solve_riccati(spec.with_constraint(ConstraintSet.free()))
    xs = x_grid(config)
    return _MethodResult(
        converged=True,
        history=IterateHistory(converged=True),
        values=list(cone.value(xs, 0)),
        reference=list(unconstrained.value(xs.reshape(-1, 1))),
        extras={"p_plus0": float(cone.p_plus[0]), "p_minus0": float(cone.p_minus[0])},
    )


def reference_for(bundle):
    """
    Reference policy and exact value function for a bundle, when one is known.

    Returns:
        tuple: (Policy | None, callable(points) -> values | None)
    """
    spec = bundle.spec
    if not bundle.is_lq:
        return ZeroPolicy(spec.m), lambda points: cosine_optimal_value(points, spec.T)
    if spec.constraint.is_free:
        riccati = solve_riccati(spec)
        return LinearFeedback(riccati.alpha_star), riccati.value
    if spec.n == 1 and spec.constraint.kind is ConstraintKind.POSITIVE_CONE:
        cone = solve_cone_reference(spec)
        return ConeFeedback(cone), lambda points: cone.value(points[:, 0], 0)
    return None, None


def _deep_value_curve(bundle, phi_net, ppgm_config, xs):
    problem = bundle.problem
    policy = NetworkFeedback(phi_net, problem.constraint)
    grid = TimeGrid(ppgm_config.eval_steps, problem.T)
    return value_curve(problem, policy, xs, ppgm_config.eval_paths, grid, derive_seed(ppgm_config.seed, EVAL_STREAM))


def _run_ppgm(config, bundle, settings, out_dir, checkpoint):
    ppgm_config = resolve_ppgm_config(config, bundle)
    reference_policy, reference_value = reference_for(bundle)
    state = load_checkpoint(checkpoint) if checkpoint else None
    if state is not None:
        log.info("Resuming from checkpoint", path=str(checkpoint), k=state.k)
    state, history = run_ppgm(
        bundle.problem,
        ppgm_config,
        reference=reference_policy,
        state=state,
        record_timing=settings["record_timing"],
    )
    save_checkpoint(out_dir / CHECKPOINT_FILE, state)
    xs = x_grid(config)
    estimates = _deep_value_curve(bundle, state.phi_net, ppgm_config, xs)
    reference = None if reference_value is None else list(reference_value(_start_points(bundle.spec.x0, xs)))
    return _MethodResult(
        converged=history.converged,
        history=history,
        values=estimates,
        reference=reference,
        extras={
            "ppgm": ppgm_config.model_dump(mode="json"),
            "eval_seed": derive_seed(ppgm_config.seed, EVAL_STREAM),
            "checkpoint": CHECKPOINT_FILE,
            "final_k": state.k,
        },
    )


_METHODS = {
    "riccati": _run_riccati,
    "lq-pgm": _run_lq_pgm,
    "cone-reference": _run_cone_reference,
    "ppgm": _run_ppgm,
}


def _last_record(history):
    last = history.last if history is not None else None
    if last is None:
        return None
    return {
        "k": last.k,
        "delta_k": last.delta_k,
        "control_err": last.control_err,
        "value_err": last.value_err,
        "bsde_loss": last.bsde_loss,
        "control_loss": last.control_loss,
    }


def _manifest(config, bundle, report, result, wall_seconds):
    problem = spec_to_dict(bundle.spec) if all(
        path.is_constant() for path in (bundle.spec.A, bundle.spec.B, bundle.spec.C, bundle.spec.D)
    ) else None
    return {
        "name": config.run_name,
        "version": __version__,
        "method": config.method,
        "problem_name": bundle.name,
        "config": config.model_dump(mode="json"),
        "problem": problem if bundle.is_lq else None,
        "seeds": {"master": config.seed, **({"eval": result.extras["eval_seed"]} if "eval_seed" in result.extras else {})},
        "wall_seconds": wall_seconds,
        "converged": result.converged,
        "iterations": len(result.history),
        "final": _last_record(result.history),
        "assumptions": report.as_dict(),
        "details": {k: v for k, v in result.extras.items() if k != "eval_seed"},
    }


def _check_assumptions(bundle):
    report = assumption_check(bundle.spec)
    if report.case is AssumptionCase.NOT_SATISFIED and bundle.is_lq:
        log.warning(
            "Problem does not satisfy the convexity assumptions, convergence is not guaranteed",
            problem=bundle.name,
            mu=report.mu,
        )
    return report


def run_experiment(config, settings=None, checkpoint=None):
    """
    Resolve the problem, run the configured method and write every artifact.

    Args:
        checkpoint: optional path of a saved deep state to resume from (ppgm only).
    """
    settings = settings or load_settings_from_env()
    bundle = resolve_problem(config)
    report = _check_assumptions(bundle)
    out_dir = output_directory(config, settings)
    log.info(
        "Starting experiment",
        name=config.run_name,
        method=config.method,
        problem=bundle.name,
        assumption_case=report.case.value,
        mu=report.mu,
        out_dir=str(out_dir),
    )

    started = time.perf_counter()
    result = _METHODS[config.method](config, bundle, settings, out_dir, checkpoint)
    wall_seconds = time.perf_counter() - started
    # summary.json carries wall time only with PPGM_RECORD_TIMING set
    recorded_seconds = round(wall_seconds, 3) if settings["record_timing"] else None

    reporting.write_history(out_dir / "history.csv", result.history)
    reporting.write_value_curve(out_dir / "value0.csv", x_grid(config), result.values, result.reference)
    manifest = _manifest(config, bundle, report, result, recorded_seconds)
    reporting.write_json(out_dir / "summary.json", manifest)
    if config.plots and len(result.history):
        reporting.write_convergence_svg(out_dir / "convergence.svg", result.history, f"{config.run_name} convergence")

    log.info(
        "Experiment finished",
        name=config.run_name,
        converged=result.converged,
        iterations=len(result.history),
        wall_seconds=round(wall_seconds, 3),
    )
    return RunOutcome(converged=result.converged, out_dir=out_dir, history=result.history, manifest=manifest)


def evaluate_checkpoint(config, checkpoint, settings=None):
    """
    Re-score a saved policy network: value curve over the x-grid plus the
    relative H² distance to the reference policy when one exists.
    """
    settings = settings or load_settings_from_env()
    bundle = resolve_problem(config)
    ppgm_config = resolve_ppgm_config(config, bundle)
    state = load_checkpoint(checkpoint)
    out_dir = output_directory(config, settings)
    reference_policy, reference_value = reference_for(bundle)
    xs = x_grid(config)

    estimates = _deep_value_curve(bundle, state.phi_net, ppgm_config, xs)
    reference = None if reference_value is None else list(reference_value(_start_points(bundle.spec.x0, xs)))
    reporting.write_value_curve(out_dir / "value0.csv", xs, estimates, reference)

    control_err = None
    if reference_policy is not None:
        problem = bundle.problem
        grid = TimeGrid(ppgm_config.eval_steps, problem.T)
        seed = derive_seed(ppgm_config.seed, EVAL_STREAM)
        start = FixedStart(problem.x0)
        policy = NetworkFeedback(state.phi_net, problem.constraint)
        dist = estimate_h2_distance(problem, policy, reference_policy, ppgm_config.eval_paths, grid, seed, start).mean
        norm = estimate_h2_norm_sq(problem, reference_policy, ppgm_config.eval_paths, grid, seed, start).mean
        control_err = float(np.sqrt(dist / norm)) if norm > 0 else float(np.sqrt(dist))

    summary = {
        "name": config.run_name,
        "version": __version__,
        "checkpoint": str(checkpoint),
        "k": state.k,
        "control_err": control_err,
        "eval_seed": derive_seed(ppgm_config.seed, EVAL_STREAM),
        "eval_paths": ppgm_config.eval_paths,
        "eval_steps": ppgm_config.eval_steps,
    }
    reporting.write_json(out_dir / "evaluation.json", summary)
    log.info("Checkpoint evaluated", checkpoint=str(checkpoint), k=state.k, control_err=control_err)
    return RunOutcome(converged=True, out_dir=out_dir, history=None, manifest=summary)
