"""
Sensitivity sweeps of the ODE policy gradient method over random LQ problems.

    dimension    n = m over the given values, runtime and errors per cell
    convexity-r  n = m = 5 with R = r·I over the given r values
    rate         repeated runs per n, per-iteration mean and spread of the errors
"""

import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import structlog
from scipy import stats

from ..core import CoefficientPath
from ..errors import PpgmError, UsageError
from ..lqpgm import run_lq_pgm
from ..montecarlo import derive_seed
from ..odesolve import solve_riccati
from . import reporting
from .builtins import generate_random_spec

log = structlog.get_logger()

SWEEP_KINDS = ("dimension", "convexity-r", "rate")
CONVEXITY_DIM = 5

CELL_COLUMNS = [
    "kind",
    "value",
    "repeat",
    "seed",
    "status",
    "iterations",
    "runtime_s",
    "control_err",
    "value_err",
    "error",
]
SUMMARY_COLUMNS = [
    "value",
    "cells",
    "failed",
    "runtime_mean",
    "runtime_std",
    "control_err_mean",
    "control_err_std",
    "value_err_mean",
    "value_err_std",
]
RATE_COLUMNS = ["value", "iter", "runs", "control_err_mean", "control_err_std", "value_err_mean", "value_err_std"]


@dataclass(frozen=True)
class SweepParams:
    tau: float = 0.1
    tol: float = 1e-6
    kmax: int = 200
    steps: int = 100


@dataclass
class SweepResult:
    kind: str
    out_dir: Path
    rows: list
    summary: list
    trend: dict = field(default_factory=dict)

    @property
    def failed(self):
        return sum(1 for row in self.rows if row["status"] == "failed")

    @property
    def all_converged(self):
        return all(row["status"] == "converged" for row in self.rows)


def cell_spec(kind, value, index, repeat, seed, steps):
    """The random problem of one sweep cell; seeds depend only on (seed, index of the value, repeat)."""
    cell_seed = derive_seed(seed, index, repeat)
    if kind == "convexity-r":
        spec = generate_random_spec(CONVEXITY_DIM, cell_seed, steps)
        R = CoefficientPath.constant(spec.grid, float(value) * np.eye(spec.m))
        return dataclasses.replace(spec, R=R, name=f"random-n{CONVEXITY_DIM}-r{value:g}"), cell_seed
    return generate_random_spec(int(value), cell_seed, steps), cell_seed


def run_cell(kind, value, index, repeat, seed, params):
    row = {"kind": kind, "value": value, "repeat": repeat, "status": "failed", "error": ""}
    history = None
    try:
        spec, cell_seed = cell_spec(kind, value, index, repeat, seed, params.steps)
        row["seed"] = str(cell_seed)
        reference = solve_riccati(spec)
        started = time.perf_counter()
        _, history = run_lq_pgm(
            spec,
            tau=params.tau,
            tol=params.tol,
            kmax=params.kmax,
            reference=reference,
            seed=cell_seed,
        )
        row["runtime_s"] = time.perf_counter() - started
        row["iterations"] = len(history)
        row["control_err"] = history.last.control_err
        row["value_err"] = history.last.value_err
        row["status"] = "converged" if history.converged else "max-iterations"
    except PpgmError as e:
        log.warning("Sweep cell failed", kind=kind, value=value, repeat=repeat, error=str(e))
        row["error"] = e.message
    return row, history


def _mean_std(values):
    values = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if values.size == 0:
        return None, None
    return float(values.mean()), float(values.std())


def summarize(values, rows):
    summary = []
    for value in values:
        cells = [row for row in rows if row["value"] == value]
        ok = [row for row in cells if row["status"] != "failed"]
        runtime = _mean_std([row["runtime_s"] for row in ok])
        control = _mean_std([row["control_err"] for row in ok])
        value_err = _mean_std([row["value_err"] for row in ok])
        summary.append(
            {
                "value": value,
                "cells": len(cells),
                "failed": len(cells) - len(ok),
                "runtime_mean": runtime[0],
                "runtime_std": runtime[1],
                "control_err_mean": control[0],
                "control_err_std": control[1],
                "value_err_mean": value_err[0],
                "value_err_std": value_err[1],
            }
        )
    return summary


def rate_rows(values, cells):
    """Per-iteration mean and spread of the errors over the repeats of each value."""
    rows = []
    for value in values:
        histories = [history for (v, _), history in cells.items() if v == value and history is not None]
        if not histories:
            continue
        longest = max(len(h) for h in histories)
        for k in range(longest):
            control = [h.records[k].control_err for h in histories if k < len(h)]
            value_err = [h.records[k].value_err for h in histories if k < len(h)]
            control_stats, value_stats = _mean_std(control), _mean_std(value_err)
            rows.append(
                {
                    "value": value,
                    "iter": k + 1,
                    "runs": len(control),
                    "control_err_mean": control_stats[0],
                    "control_err_std": control_stats[1],
                    "value_err_mean": value_stats[0],
                    "value_err_std": value_stats[1],
                }
            )
    return rows


def runtime_trend(summary):
    """
    Least-squares fits of log-runtime against n: a linear slope and the
    curvature of a quadratic. Sub-exponential growth shows as a non-positive
    curvature or a slope that flattens.
    """
    points = [(row["value"], row["runtime_mean"]) for row in summary if row["runtime_mean"]]
    if len(points) < 3:
        return {}
    n = np.array([p[0] for p in points], dtype=float)
    log_runtime = np.log(np.array([p[1] for p in points], dtype=float))
    fit = stats.linregress(n, log_runtime)
    curvature = float(np.polyfit(n, log_runtime, 2)[0])
    return {"log_runtime_slope": float(fit.slope), "log_runtime_r2": float(fit.rvalue**2), "curvature": curvature}


def sensitivity_sweep(kind, values, repeats=5, seed=0, out_dir="results", workers=4, params=None):
    """
    Run every (value, repeat) cell in a worker pool and write sweep.csv plus
    sweep_summary.csv (and sweep_rate.csv for the rate study).

    A failing cell is recorded with status "failed" and the sweep carries on.
    """
    if kind not in SWEEP_KINDS:
        raise UsageError("Unknown sweep kind", kind=kind, known=", ".join(SWEEP_KINDS))
    values = list(values)
    if not values:
        raise UsageError("Sweep range is empty", kind=kind)
    if len(set(values)) != len(values):
        raise UsageError("Sweep values must be distinct", kind=kind, values=values)
    if repeats < 1 or workers < 1:
        raise UsageError("Sweep needs at least one repeat and one worker", repeats=repeats, workers=workers)
    if kind in ("dimension", "rate") and any(int(v) != v or v < 1 for v in values):
        raise UsageError("Dimension values must be positive integers", values=values)
    if kind == "convexity-r" and any(v <= 0 for v in values):
        raise UsageError("Convexity values must be positive", values=values)
    params = params or SweepParams()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log.info("Starting sensitivity sweep", kind=kind, values=len(values), repeats=repeats, workers=workers)

    cells = {}
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {
            executor.submit(run_cell, kind, value, index, repeat, seed, params): (value, repeat)
            for index, value in enumerate(values)
            for repeat in range(repeats)
        }
        for future in as_completed(futures):
            cells[futures[future]] = future.result()

    rows = [cells[key][0] for key in sorted(cells)]
    summary = summarize(values, rows)
    reporting.write_csv(out_dir / "sweep.csv", CELL_COLUMNS, rows)
    reporting.write_csv(out_dir / "sweep_summary.csv", SUMMARY_COLUMNS, summary)
    if kind == "rate":
        histories = {key: cell[1] for key, cell in cells.items()}
        reporting.write_csv(out_dir / "sweep_rate.csv", RATE_COLUMNS, rate_rows(values, histories))

    trend = runtime_trend(summary) if kind == "dimension" else {}
    result = SweepResult(kind=kind, out_dir=out_dir, rows=rows, summary=summary, trend=trend)
    log.info("Sensitivity sweep finished", kind=kind, cells=len(rows), failed=result.failed, **trend)
    return result
