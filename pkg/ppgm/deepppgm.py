"""
Deep proximal policy gradient method.

Each outer iteration trains the adjoint pair (Y, Z) with a deep BSDE rollout under
the current policy network, forms proximal-gradient targets for the control along
the training batch, and fits the policy network to those targets. All three
networks are warm-started from the previous iteration.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from .core import TimeGrid, as_problem, hamiltonian_grad_u, prox_project
from .errors import SpecificationError, TrainingDivergenceError
from .lqpgm import IterateHistory, IterateRecord
from .montecarlo import (
    FixedStart,
    NetworkFeedback,
    UniformStart,
    derive_seed,
    estimate_h2_distance,
    estimate_h2_norm_sq,
    simulate_paths,
)
from .neural import (
    GradTape,
    Mlp,
    OptimizerState,
    flatten_parameters,
    grad,
    mlp_init,
    mlp_record,
    optimizer_step,
    state_norm,
    time_state_norm,
    unflatten_parameters,
)

log = structlog.get_logger()

EVAL_STREAM = 1_000_000


class PpgmConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau: float = Field(default=0.1, gt=0)
    bsde_rate: float = Field(default=0.01, gt=0)
    control_rate: float = Field(default=0.01, gt=0)
    bsde_steps: int = Field(default=100, ge=1)
    control_steps: int = Field(default=100, ge=1)
    outer_max: int = Field(default=200, ge=1)
    batch: int = Field(default=50, ge=1)
    time_steps: int = Field(default=10, ge=1)
    sampling_box: float = Field(default=10.0, gt=0)
    eps1: float = Field(default=1e-5, gt=0)
    eps2: float = Field(default=1e-12, gt=0)
    eps3: float = Field(default=1e-12, gt=0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    hidden: tuple[int, int] = (10, 10)
    init_sigma: float = Field(default=0.1, ge=0)
    eval_steps: int = Field(default=100, ge=1)
    eval_paths: int = Field(default=10000, ge=2)
    seed: int = Field(default=0, ge=0)


@dataclass(eq=False)
class DeepState:
    phi_net: object
    z_net: object
    y_net: object
    k: int = 0
    bsde_opt: OptimizerState | None = None
    control_opt: OptimizerState | None = None


def init_deep_state(prob, config):
    prob = as_problem(prob)
    n, m, T, box = prob.n, prob.m, prob.T, config.sampling_box
    h1, h2 = config.hidden
    return DeepState(
        phi_net=mlp_init((1 + n, h1, h2, m), derive_seed(config.seed, 0), config.init_sigma, time_state_norm(T, n, box)),
        z_net=mlp_init((1 + n, h1, h2, n), derive_seed(config.seed, 1), config.init_sigma, time_state_norm(T, n, box)),
        y_net=mlp_init((n, h1, h2, n), derive_seed(config.seed, 2), config.init_sigma, state_norm(n, box)),
        bsde_opt=OptimizerState(kind=config.optimizer, lr=config.bsde_rate),
        control_opt=OptimizerState(kind=config.optimizer, lr=config.control_rate),
    )


def _time_state(t, x):
    return np.column_stack([np.full(x.shape[0], t), x])


@dataclass(eq=False)
class Rollout:
    tape: GradTape
    loss: object
    y_values: np.ndarray
    z_values: np.ndarray


def dbsde_rollout(prob, z_net, y_net, batch):
    """
    Roll Y forward along the batch and record the terminal mismatch loss.

    The step solves (I + Δt A')Y_{i+1} = Y_i - (C'Z_i + ∂_x f)Δt + Z_i ΔW_i, with
    Y_0 = yNet(X_0) and Z_i = zNet(t_i, X_i). Only Y depends on parameters.
    """
    prob = as_problem(prob)
    grid, dt = batch.grid, batch.grid.dt
    tape = GradTape()
    z_params = tape.watch_all(z_net.params)
    y_params = tape.watch_all(y_net.params)

    y_values = np.empty((batch.M, grid.N + 1, prob.n))
    z_values = np.empty((batch.M, grid.N, prob.n))
    Y = mlp_record(y_net, batch.X[:, 0], y_params)
    y_values[:, 0] = Y.value
    identity = np.eye(prob.n)
    for i in range(grid.N):
        t = grid.nodes[i]
        A, _, C, _ = prob.coefficients_at(t)
        x = batch.X[:, i]
        Z = mlp_record(z_net, _time_state(t, x), z_params)
        z_values[:, i] = Z.value
        rhs = Y - (Z @ C + prob.cost.fx(t, x, batch.U[:, i])) * dt + Z * batch.dW[:, i : i + 1]
        try:
            step = np.linalg.inv(identity + dt * A)
        except np.linalg.LinAlgError as e:
            raise SpecificationError("I + Δt·A' is singular, reduce the time step", node=i, dt=dt) from e
        Y = rhs @ step
        y_values[:, i + 1] = Y.value
    diff = Y - prob.cost.grad_g(batch.X[:, -1])
    loss = diff.square().sum(axis=1).mean()
    return Rollout(tape=tape, loss=loss, y_values=y_values, z_values=z_values)


def dbsde_rollout_loss(prob, phi_net, z_net, y_net, batch):
    """Tape-recorded DBSDE loss of a batch simulated under phi_net."""
    return dbsde_rollout(prob, z_net, y_net, batch).loss


def training_batch(prob, phi_net, config, k, sub_step):
    prob = as_problem(prob)
    return simulate_paths(
        prob,
        NetworkFeedback(phi_net, prob.constraint),
        config.batch,
        TimeGrid(config.time_steps, prob.T),
        derive_seed(config.seed, k, sub_step),
        UniformStart(config.sampling_box),
    )


@dataclass(eq=False)
class DbsdeResult:
    z_net: object
    y_net: object
    losses: list
    batch: object
    rollout: Rollout


def dbsde_train(prob, phi_net, z_net, y_net, config, k=0, opt_state=None):
    """
    Gradient steps on (θ, κ) against the DBSDE loss, a fresh batch per step.

    Returns the trained copies together with the last batch and its rollout under
    the trained networks, which is where the control targets are formed.
    """
    prob = as_problem(prob)
    opt_state = opt_state or OptimizerState(kind=config.optimizer, lr=config.bsde_rate)
    z_net, y_net = z_net.copy(), y_net.copy()
    split = len(z_net.params)
    losses = []
    batch = None
    for sub_step in range(config.bsde_steps):
        batch = training_batch(prob, phi_net, config, k, sub_step)
        rollout = dbsde_rollout(prob, z_net, y_net, batch)
        loss = float(rollout.loss.value)
        if not np.isfinite(loss):
            raise TrainingDivergenceError("DBSDE loss is not finite", k=k, sub_step=sub_step)
        losses.append(loss)
        if loss < config.eps2:
            break
        updated = optimizer_step(opt_state, z_net.params + y_net.params, grad(rollout.tape, rollout.loss))
        if not all(np.all(np.isfinite(p)) for p in updated):
            raise TrainingDivergenceError("DBSDE parameters are not finite", k=k, sub_step=sub_step)
        z_net.params, y_net.params = updated[:split], updated[split:]
    final = dbsde_rollout(prob, z_net, y_net, batch)
    return DbsdeResult(z_net=z_net, y_net=y_net, losses=losses, batch=batch, rollout=final)


def _as_policy(prob, policy):
    return NetworkFeedback(policy, prob.constraint) if isinstance(policy, Mlp) else policy


def control_targets(prob, batch, y_values, z_values, policy, tau):
    """
    Proximal-gradient targets prox(u - τ ∂_u H) at every (t_i, X_i^j) of the batch.

    ``policy`` is the current policy network or any montecarlo Policy.
    """
    prob = as_problem(prob)
    policy = _as_policy(prob, policy)
    targets = np.empty((batch.M, batch.grid.N, prob.m))
    for i in range(batch.grid.N):
        t = batch.grid.nodes[i]
        x = batch.X[:, i]
        u = policy(t, x, i)
        step = u - tau * hamiltonian_grad_u(prob, t, x, u, y_values[:, i], z_values[:, i])
        targets[:, i] = prox_project(prob.constraint, step)
    return targets


@dataclass(eq=False)
class FitResult:
    phi_net: object
    losses: list = field(default_factory=list)


def control_fit(targets, batch, phi_net, config, opt_state=None, k=0):
    """Gradient steps on the policy parameters minimizing the mean squared gap to the targets."""
    opt_state = opt_state or OptimizerState(kind=config.optimizer, lr=config.control_rate)
    phi_net = phi_net.copy()
    M, N = batch.M, batch.grid.N
    times = np.repeat(batch.grid.nodes[:N][None, :], M, axis=0).reshape(M * N, 1)
    inputs = np.column_stack([times, batch.X[:, :N].reshape(M * N, -1)])
    flat_targets = targets.reshape(M * N, -1)
    losses = []
    for sub_step in range(config.control_steps):
        tape = GradTape()
        params = tape.watch_all(phi_net.params)
        gap = mlp_record(phi_net, inputs, params) - flat_targets
        loss = gap.square().sum(axis=1).mean()
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDivergenceError("Control fit loss is not finite", k=k, sub_step=sub_step)
        losses.append(value)
        if value < config.eps3:
            break
        phi_net.params = optimizer_step(opt_state, phi_net.params, grad(tape, loss))
    return FitResult(phi_net=phi_net, losses=losses)


def _relative_h2(prob, policy_a, policy_b, config, seed, start):
    grid = TimeGrid(config.eval_steps, prob.T)
    dist = estimate_h2_distance(prob, policy_a, policy_b, config.eval_paths, grid, seed, start).mean
    norm = estimate_h2_norm_sq(prob, policy_b, config.eval_paths, grid, seed, start).mean
    return float(np.sqrt(dist / norm)) if norm > 0 else float(np.sqrt(dist))


def run_ppgm(prob, config, reference=None, state=None, record_timing=False):
    """
    Outer loop: train (Y, Z), form targets, fit the policy, measure the H² change.

    Args:
        reference: optional Policy; when given, each record carries the relative
            H² distance of the current policy to it.

    Returns:
        tuple: (DeepState, IterateHistory)
    """
    prob = as_problem(prob)
    state = state or init_deep_state(prob, config)
    if state.bsde_opt is None or state.control_opt is None:
        state.bsde_opt = OptimizerState(kind=config.optimizer, lr=config.bsde_rate)
        state.control_opt = OptimizerState(kind=config.optimizer, lr=config.control_rate)
    eval_seed = derive_seed(config.seed, EVAL_STREAM)
    start = FixedStart(prob.x0)
    history = IterateHistory()
    log.info(
        "Starting deep policy gradient iteration",
        problem=prob.name,
        outer_max=config.outer_max,
        batch=config.batch,
        time_steps=config.time_steps,
        optimizer=config.optimizer,
        tau=config.tau,
    )

    for k in range(state.k + 1, state.k + config.outer_max + 1):
        started = time.perf_counter()
        previous = state.phi_net
        dbsde = dbsde_train(prob, previous, state.z_net, state.y_net, config, k, state.bsde_opt)
        targets = control_targets(prob, dbsde.batch, dbsde.rollout.y_values, dbsde.rollout.z_values, previous, config.tau)
        fit = control_fit(targets, dbsde.batch, previous, config, state.control_opt, k)
        state = DeepState(
            phi_net=fit.phi_net,
            z_net=dbsde.z_net,
            y_net=dbsde.y_net,
            k=k,
            bsde_opt=state.bsde_opt,
            control_opt=state.control_opt,
        )

        current = NetworkFeedback(state.phi_net, prob.constraint)
        delta_k = _relative_h2(prob, current, NetworkFeedback(previous, prob.constraint), config, eval_seed, start)
        control_err = None if reference is None else _relative_h2(prob, current, reference, config, eval_seed, start)
        record = IterateRecord(
            k=k,
            delta_k=delta_k,
            control_err=control_err,
            bsde_loss=dbsde.losses[-1],
            control_loss=fit.losses[-1],
            wall_ms=(time.perf_counter() - started) * 1000.0 if record_timing else None,
        )
        history.append(record)
        log.debug("Deep policy gradient step", k=k, delta_k=delta_k, bsde_loss=record.bsde_loss, control_loss=record.control_loss)
        if delta_k < config.eps1:
            history.converged = True
            log.info("Deep policy gradient converged", k=k, delta_k=delta_k)
            break
    else:
        log.warning("Deep policy gradient reached the iteration limit", outer_max=config.outer_max)
    return state, history


def save_checkpoint(path, state):
    path = Path(path)
    with path.open("wb") as handle:
        np.savez(
            handle,
            phi=flatten_parameters(state.phi_net),
            z=flatten_parameters(state.z_net),
            y=flatten_parameters(state.y_net),
            k=np.array([state.k]),
        )
    log.debug("Saved checkpoint", path=str(path), k=state.k)


def load_checkpoint(path):
    with np.load(Path(path)) as data:
        return DeepState(
            phi_net=unflatten_parameters(data["phi"]),
            z_net=unflatten_parameters(data["z"]),
            y_net=unflatten_parameters(data["y"]),
            k=int(data["k"][0]),
        )
