"""
Result files: history and value-curve CSVs, the JSON run manifest, and an SVG
convergence plot rendered from a Jinja2 template.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np
import structlog
from jinja2 import Environment, FileSystemLoader, select_autoescape

log = structlog.get_logger()

HISTORY_COLUMNS = ["iter", "delta_k", "control_err", "value_err", "bsde_loss", "control_loss", "wall_ms"]
VALUE_COLUMNS = ["x", "value", "value_stderr", "reference"]
TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"

PLOT_WIDTH = 640
PLOT_HEIGHT = 400
PLOT_MARGIN = 50
SERIES_COLORS = {"delta_k": "#1f77b4", "control_err": "#d62728", "value_err": "#2ca02c"}


def format_number(value):
    """'.12g' for finite numbers, blank for missing ones."""
    if value is None:
        return ""
    value = float(value)
    if math.isnan(value):
        return ""
    return format(value, ".12g")


def write_csv(path, fieldnames, rows):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: v if isinstance(v, str) else format_number(v) for k, v in row.items()})
    return path


def write_json(path, obj):
    path = Path(path)
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return path


def history_rows(history):
    return [
        {
            "iter": record.k,
            "delta_k": record.delta_k,
            "control_err": record.control_err,
            "value_err": record.value_err,
            "bsde_loss": record.bsde_loss,
            "control_loss": record.control_loss,
            "wall_ms": record.wall_ms,
        }
        for record in history
    ]


def write_history(path, history):
    return write_csv(path, HISTORY_COLUMNS, history_rows(history))


def write_value_curve(path, xs, estimates, reference=None):
    """
    Args:
        estimates: EstimateWithError per x, or plain floats for exact values.
        reference: optional sequence of reference values aligned with xs.
    """
    rows = []
    for idx, x in enumerate(xs):
        est = estimates[idx]
        rows.append(
            {
                "x": x,
                "value": getattr(est, "mean", est),
                "value_stderr": getattr(est, "stderr", None),
                "reference": None if reference is None else reference[idx],
            }
        )
    return write_csv(path, VALUE_COLUMNS, rows)


def _log_points(iters, values, x_span, y_range):
    lo, hi = y_range
    points = []
    for k, v in zip(iters, values):
        if not np.isfinite(v) or v <= 0:
            continue
        x = PLOT_MARGIN + (k - x_span[0]) / max(x_span[1] - x_span[0], 1) * (PLOT_WIDTH - 2 * PLOT_MARGIN)
        y = PLOT_HEIGHT - PLOT_MARGIN - (math.log10(v) - lo) / max(hi - lo, 1e-12) * (PLOT_HEIGHT - 2 * PLOT_MARGIN)
        points.append(f"{x:.2f},{y:.2f}")
    return " ".join(points)


def render_convergence_svg(history, title):
    """Log-scale lines of Δ_k and, when present, the control and value errors."""
    iters = [r.k for r in history]
    columns = {name: history.column(name) for name in SERIES_COLORS}
    positive = np.concatenate([c[np.isfinite(c) & (c > 0)] for c in columns.values()])
    if not iters or positive.size == 0:
        y_range = (0.0, 1.0)
    else:
        y_range = (math.floor(math.log10(positive.min())), math.ceil(math.log10(positive.max())))
        if y_range[0] == y_range[1]:
            y_range = (y_range[0] - 1, y_range[1] + 1)
    x_span = (min(iters), max(iters)) if iters else (0, 1)
    series = [
        {"name": name, "color": SERIES_COLORS[name], "points": _log_points(iters, values, x_span, y_range)}
        for name, values in columns.items()
        if np.any(np.isfinite(values))
    ]
    env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), autoescape=select_autoescape(["svg", "j2"]))
    return env.get_template("convergence.svg.j2").render(
        title=title,
        width=PLOT_WIDTH,
        height=PLOT_HEIGHT,
        margin=PLOT_MARGIN,
        series=series,
        x_span=x_span,
        y_range=y_range,
    )


def write_convergence_svg(path, history, title):
    path = Path(path)
    path.write_text(render_convergence_svg(history, title), encoding="utf-8")
    log.debug("Wrote convergence plot", path=str(path))
    return path
