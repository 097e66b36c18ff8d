"""
Process settings and experiment files.

Settings come from PPGM_* environment variables (or a .env file) and fall back to
defaults with a warning. Experiment files are JSON validated by the pydantic
models below; every error names the offending field.
"""

import functools
import json
import logging
import os
from pathlib import Path
from typing import Literal

import structlog
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .deepppgm import PpgmConfig
from .errors import ConfigError

log = structlog.get_logger()

ENV_OUTPUT_DIR = "PPGM_OUTPUT_DIR"
ENV_LOG_LEVEL = "PPGM_LOG_LEVEL"
ENV_SWEEP_WORKERS = "PPGM_SWEEP_WORKERS"
ENV_RECORD_TIMING = "PPGM_RECORD_TIMING"

BUILTIN_NAMES = ("std-lq", "singular-lq", "nonconvex-lq", "cone-lq", "cosine-cost")
METHODS = ("lq-pgm", "ppgm", "riccati", "cone-reference")


@functools.lru_cache(maxsize=1)
def load_settings_from_env():
    """
    Loads process-wide settings from environment variables (and a .env file if present).

    Returns:
        dict: output_dir, log_level, sweep_workers and record_timing.
    """
    load_dotenv()
    settings = {
        "output_dir": os.getenv(ENV_OUTPUT_DIR, "results"),
        "log_level": os.getenv(ENV_LOG_LEVEL, "info").lower(),
    }

    default_workers = "4"
    try:
        settings["sweep_workers"] = int(os.getenv(ENV_SWEEP_WORKERS, default_workers))
        if settings["sweep_workers"] < 1:
            raise ValueError(settings["sweep_workers"])
    except ValueError:
        log.warning(
            "Invalid value for PPGM_SWEEP_WORKERS, using default",
            invalid_value=os.getenv(ENV_SWEEP_WORKERS),
            default_value=default_workers,
        )
        settings["sweep_workers"] = int(default_workers)

    settings["record_timing"] = os.getenv(ENV_RECORD_TIMING, "false").strip().lower() in ("1", "true", "yes")

    if logging.getLevelName(settings["log_level"].upper()) not in (10, 20, 30, 40, 50):
        log.warning("Invalid value for PPGM_LOG_LEVEL, using default", invalid_value=settings["log_level"])
        settings["log_level"] = "info"
    return settings


def configure_logging(level="info"):
    structlog.configure(
        wrapper_class=structlog.make_filtering_bound_logger(logging.getLevelName(level.upper())),
    )


class InlineSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    A: list | float
    B: list | float
    C: list | float
    D: list | float
    Q: list | float
    R: list | float
    S: list | float
    G: list | float
    x0: list[float] | float
    T: float = Field(default=1.0, gt=0)
    constraint: Literal["free", "positive-cone", "box"] = "free"
    lo: list[float] | None = None
    hi: list[float] | None = None

    @model_validator(mode="after")
    def box_needs_bounds(self):
        if self.constraint == "box" and (self.lo is None or self.hi is None):
            raise ValueError("box constraint needs lo and hi")
        return self


class RandomRecipe(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n: int = Field(ge=1, le=500)
    seed: int = Field(default=0, ge=0)


class ProblemSource(BaseModel):
    model_config = ConfigDict(extra="forbid")

    builtin: Literal["std-lq", "singular-lq", "nonconvex-lq", "cone-lq", "cosine-cost"] | None = None
    inline: InlineSpec | None = None
    random: RandomRecipe | None = None

    @model_validator(mode="after")
    def exactly_one_source(self):
        given = [name for name in ("builtin", "inline", "random") if getattr(self, name) is not None]
        if len(given) != 1:
            raise ValueError(f"exactly one of builtin, inline, random is required, got {given or 'none'}")
        return self


class LqPgmParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau: float = Field(default=0.1, gt=0)
    tol: float = Field(default=1e-6, gt=0)
    kmax: int = Field(default=200, ge=1)
    steps: int = Field(default=100, ge=1)


class EvaluationParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    x_min: float = -10.0
    x_max: float = 10.0
    x_points: int = Field(default=21, ge=2)
    eval_steps: int = Field(default=100, ge=1)
    eval_paths: int = Field(default=10000, ge=2)

    @model_validator(mode="after")
    def ordered_range(self):
        if self.x_min >= self.x_max:
            raise ValueError("x_min must be below x_max")
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str | None = None
    problem: ProblemSource
    method: Literal["lq-pgm", "ppgm", "riccati", "cone-reference"]
    lq: LqPgmParams = Field(default_factory=LqPgmParams)
    ppgm: PpgmConfig = Field(default_factory=PpgmConfig)
    evaluation: EvaluationParams = Field(default_factory=EvaluationParams)
    seed: int = Field(default=0, ge=0)
    output_dir: str | None = None
    plots: bool = False

    @property
    def run_name(self):
        if self.name:
            return self.name
        source = self.problem.builtin or ("random" if self.problem.random else "inline")
        return f"{source}-{self.method}"


def _field_errors(exc):
    return [(".".join(str(part) for part in err["loc"]) or "<root>", err["msg"]) for err in exc.errors()]


def parse_experiment_config(data):
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError("Experiment configuration is invalid", field_errors=_field_errors(e)) from e


def load_experiment_config(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError("Configuration file not found", path=str(path)) from e
    except json.JSONDecodeError as e:
        raise ConfigError("Configuration file is not valid JSON", path=str(path), line=e.lineno) from e
    log.debug("Loaded experiment configuration", path=str(path))
    return parse_experiment_config(data)
