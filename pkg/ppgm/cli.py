"""
ppgm command line

Subcommands:
    check     print the convexity assumption report of a problem as JSON
    riccati   solve the Riccati equation and write the optimal value curve
    lq-pgm    run the ODE policy gradient iteration against the Riccati reference
    ppgm      train the deep proximal policy gradient method
    cone-ref  solve the positive-cone reference of a scalar-state problem
    evaluate  re-score a saved deep checkpoint
    sweep     run a sensitivity sweep over random problems

A problem comes from --config (JSON experiment file) or --problem, which takes a
builtin name or random:N[:SEED]. Process settings are read from PPGM_* environment
variables or a .env file.

Exit codes: 0 converged, 2 iteration limit reached without convergence, 1 error.
"""

import argparse
import json
import sys

import structlog

from .config import BUILTIN_NAMES, configure_logging, load_experiment_config, load_settings_from_env, parse_experiment_config
from .core import assumption_check
from .errors import ConfigError, PpgmError, UsageError
from .experiments.runner import evaluate_checkpoint, resolve_problem, run_experiment
from .experiments.sweep import SWEEP_KINDS, SweepParams, sensitivity_sweep

log = structlog.get_logger()

EXIT_CONVERGED = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

SUBCOMMAND_METHODS = {
    "check": None,
    "riccati": "riccati",
    "lq-pgm": "lq-pgm",
    "ppgm": "ppgm",
    "cone-ref": "cone-reference",
    "evaluate": "ppgm",
}


def problem_source(text):
    """'std-lq' -> builtin; 'random:N' or 'random:N:SEED' -> random recipe."""
    if text in BUILTIN_NAMES:
        return {"builtin": text}
    parts = text.split(":")
    if parts[0] == "random" and len(parts) in (2, 3):
        try:
            recipe = {"n": int(parts[1])}
            if len(parts) == 3:
                recipe["seed"] = int(parts[2])
        except ValueError as e:
            raise UsageError("Random problem needs integer size and seed", problem=text) from e
        return {"random": recipe}
    raise UsageError("Unknown problem, use a builtin name or random:N[:SEED]", problem=text, builtins=", ".join(BUILTIN_NAMES))


def parse_values(text):
    """Comma list '1,2,5' or inclusive range 'start:stop[:step]'."""
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError(text)
            start, stop = parts[0], parts[1]
            step = parts[2] if len(parts) == 3 else 1.0
            if step <= 0:
                raise ValueError(text)
            count = int((stop - start) / step + 1e-9) + 1
            values = [start + i * step for i in range(count)]
        else:
            values = [float(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise UsageError("Sweep values must be a comma list or start:stop[:step]", values=text) from e
    return [int(v) if float(v).is_integer() else v for v in values]


def build_config(args, method):
    if args.config:
        config = load_experiment_config(args.config)
        if method and config.method != method:
            log.info("Command overrides the configured method", configured=config.method, method=method)
            config = config.model_copy(update={"method": method})
    elif args.problem:
        config = parse_experiment_config({"problem": problem_source(args.problem), "method": method or "riccati"})
    else:
        raise ConfigError("A problem is required, pass --config or --problem")

    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    if getattr(args, "plots", False):
        updates["plots"] = True
    lq_updates = {key: getattr(args, key) for key in ("tau", "kmax") if getattr(args, key, None) is not None}
    if lq_updates:
        updates["lq"] = config.lq.model_copy(update=lq_updates)
    return config.model_copy(update=updates) if updates else config


def _add_problem_args(parser):
    parser.add_argument("--config", help="experiment configuration file (JSON)")
    parser.add_argument("--problem", help="builtin name or random:N[:SEED]")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory (default PPGM_OUTPUT_DIR)")


class _ArgumentParser(argparse.ArgumentParser):
    """Reports bad arguments as UsageError so they share the error exit code."""

    def error(self, message):
        raise UsageError(message, prog=self.prog)


def build_parser():
    parser = _ArgumentParser(prog="ppgm", description="Proximal policy gradient toolkit for linear-state control.")
    sub = parser.add_subparsers(dest="command", required=True)

    check = sub.add_parser("check", help="print the assumption report")
    _add_problem_args(check)

    for name, help_text in (
        ("riccati", "Riccati reference"),
        ("lq-pgm", "ODE policy gradient iteration"),
        ("ppgm", "deep proximal policy gradient method"),
        ("cone-ref", "positive-cone reference"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        _add_problem_args(cmd)
        cmd.add_argument("--plots", action="store_true", help="also write convergence.svg")
        if name == "lq-pgm":
            cmd.add_argument("--tau", type=float, help="step size")
            cmd.add_argument("--kmax", type=int, help="iteration limit")
        if name == "ppgm":
            cmd.add_argument("--checkpoint", help="resume from a saved checkpoint")

    evaluate = sub.add_parser("evaluate", help="re-score a saved deep checkpoint")
    _add_problem_args(evaluate)
    evaluate.add_argument("--checkpoint", required=True, help="checkpoint.npz written by a ppgm run")

    sweep = sub.add_parser("sweep", help="sensitivity sweep over random problems")
    sweep.add_argument("--kind", choices=SWEEP_KINDS, required=True)
    sweep.add_argument("--values", required=True, help="comma list or start:stop[:step]")
    sweep.add_argument("--repeats", type=int, default=5)
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--out", help="output directory (default PPGM_OUTPUT_DIR/sweep-KIND)")
    sweep.add_argument("--workers", type=int, help="worker threads (default PPGM_SWEEP_WORKERS)")
    sweep.add_argument("--tau", type=float, default=SweepParams.tau)
    sweep.add_argument("--kmax", type=int, default=SweepParams.kmax)
    return parser


def _exit_code(converged):
    return EXIT_CONVERGED if converged else EXIT_NOT_CONVERGED


def run(argv=None):
    """Parse arguments, dispatch the subcommand and return the exit code."""
    args = build_parser().parse_args(argv)
    settings = load_settings_from_env()
    configure_logging(settings["log_level"])

    if args.command == "sweep":
        out_dir = args.out or f"{settings['output_dir']}/sweep-{args.kind}"
        result = sensitivity_sweep(
            args.kind,
            parse_values(args.values),
            repeats=args.repeats,
            seed=args.seed,
            out_dir=out_dir,
            workers=args.workers or settings["sweep_workers"],
            params=SweepParams(tau=args.tau, kmax=args.kmax),
        )
        return _exit_code(result.all_converged)

    config = build_config(args, SUBCOMMAND_METHODS[args.command])
    if args.command == "check":
        bundle = resolve_problem(config)
        report = {"problem": bundle.name, **assumption_check(bundle.spec).as_dict()}
        sys.stdout.write(json.dumps(report, indent=2) + "\n")
        return EXIT_CONVERGED
    if args.command == "evaluate":
        evaluate_checkpoint(config, args.checkpoint, settings)
        return EXIT_CONVERGED

    outcome = run_experiment(config, settings, checkpoint=getattr(args, "checkpoint", None))
    return _exit_code(outcome.converged)


def main(argv=None):
    try:
        code = run(argv)
    except ConfigError as e:
        log.critical("Invalid configuration", error=e.message, field_errors=e.field_errors, **e.context, exc_info=True)
        sys.exit(EXIT_ERROR)
    except PpgmError as e:
        log.critical("Command failed", error=e.message, **e.context, exc_info=True)
        sys.exit(EXIT_ERROR)
    except Exception:
        log.critical("An unhandled exception occurred in main", exc_info=True)
        sys.exit(EXIT_ERROR)
    sys.exit(code)


if __name__ == "__main__":
    main()
