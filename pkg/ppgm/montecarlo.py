"""
Euler-Maruyama simulation of the controlled state and the Monte Carlo estimators
built on it.

Every path owns a counter-based random stream keyed by (seed, path index), so a
path's Brownian increments do not depend on the batch size or on the policy being
simulated. Estimators that compare two policies reuse the same increments.
"""

import functools
from dataclasses import dataclass

import numpy as np
import structlog

from .core import as_problem, hamiltonian_grad_u, prox_project
from .errors import NumericError, SpecificationError, UsageError
from .neural import mlp_forward
from .odesolve import solve_a_ode

log = structlog.get_logger()

BLOW_UP_LIMIT = 1e10


def derive_seed(master, *keys):
    """Independent 64-bit seed for a named sub-stream of the master seed."""
    sequence = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def path_generator(seed, j):
    return np.random.Generator(np.random.Philox(key=int(seed) * 2**64 + int(j)))


@dataclass(frozen=True, eq=False)
class FixedStart:
    x0: np.ndarray

    def draw(self, rng, n):
        return np.asarray(self.x0, dtype=float).reshape(n)

    def key(self):
        return ("fixed", tuple(float(v) for v in np.ravel(self.x0)))


@dataclass(frozen=True)
class UniformStart:
    """Start points uniform on the box [-half_width, half_width]^n."""

    half_width: float = 10.0

    def draw(self, rng, n):
        return rng.uniform(-self.half_width, self.half_width, size=n)

    def key(self):
        return ("uniform", float(self.half_width))


class Policy:
    """A control rule evaluated on a batch of states at time t (control interval i)."""

    def control(self, t, x, i):
        raise NotImplementedError

    def __call__(self, t, x, i=None):
        return self.control(t, np.atleast_2d(x), i)


class LinearFeedback(Policy):
    def __init__(self, alpha):
        self.alpha = alpha

    def control(self, t, x, i):
        return x @ self.alpha.at_time(t).T


class NetworkFeedback(Policy):
    """Network policy (t, x) -> u composed with the projection onto the constraint set."""

    def __init__(self, net, constraint):
        self.net = net
        self.constraint = constraint

    def control(self, t, x, i):
        inputs = np.column_stack([np.full(x.shape[0], t), x])
        return prox_project(self.constraint, mlp_forward(self.net, inputs))


class OpenLoopControl(Policy):
    """Pre-specified controls, shape (N, m) shared by all paths or (M, N, m) per path."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def control(self, t, x, i):
        if i is None:
            raise UsageError("Open-loop controls need the control interval index")
        if self.values.ndim == 2:
            return np.broadcast_to(self.values[i], (x.shape[0], self.values.shape[1])).copy()
        return self.values[:, i, :]


class ZeroPolicy(Policy):
    def __init__(self, m):
        self.m = m

    def control(self, t, x, i):
        return np.zeros((x.shape[0], self.m))


class ConeFeedback(Policy):
    def __init__(self, reference):
        self.reference = reference

    def control(self, t, x, i):
        return self.reference.control(t, x[:, 0])


class CallablePolicy(Policy):
    def __init__(self, fn):
        self.fn = fn

    def control(self, t, x, i):
        return np.atleast_2d(self.fn(t, x))


def as_policy(policy):
    return policy if isinstance(policy, Policy) else CallablePolicy(policy)


@dataclass(frozen=True, eq=False)
class PathBatch:
    M: int
    grid: object
    X: np.ndarray
    U: np.ndarray
    dW: np.ndarray
    start: object
    seed: int


@dataclass(frozen=True)
class EstimateWithError:
    mean: float
    stderr: float
    M: int


def _estimate(samples):
    samples = np.asarray(samples, dtype=float)
    stderr = float(np.std(samples, ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else 0.0
    return EstimateWithError(mean=float(np.mean(samples)), stderr=stderr, M=int(samples.size))


def draw_noise(M, grid, seed, start, n):
    """Brownian increments (M, N) and start points (M, n) from per-path streams; read-only."""
    return _cached_noise(int(M), grid.N, float(grid.T), int(seed), start.key(), int(n))


@functools.lru_cache(maxsize=8)
def _cached_noise(M, N, T, seed, start_key, n):
    kind, arg = start_key
    start = FixedStart(np.array(arg)) if kind == "fixed" else UniformStart(arg)
    dW = np.empty((M, N))
    X0 = np.empty((M, n))
    scale = np.sqrt(T / N)
    for j in range(M):
        rng = path_generator(seed, j)
        dW[j] = scale * rng.standard_normal(N)
        X0[j] = start.draw(rng, n)
    dW.flags.writeable = False
    X0.flags.writeable = False
    return dW, X0


def simulate_paths(prob, policy, M, grid, seed, start=None, dW=None):
    """
    Euler-Maruyama paths of the controlled state under a policy.

    Args:
        dW: optional (M, N) increments overriding the seeded draws.
    """
    prob = as_problem(prob)
    policy = as_policy(policy)
    if M < 1:
        raise UsageError("Batch size must be positive", M=M)
    start = start or FixedStart(prob.x0)
    noise, X0 = draw_noise(M, grid, seed, start, prob.n)
    if dW is not None:
        noise = np.asarray(dW, dtype=float)
        if noise.shape != (M, grid.N):
            raise SpecificationError("Brownian increments have the wrong shape", expected=(M, grid.N), got=noise.shape)

    X = np.empty((M, grid.N + 1, prob.n))
    U = np.empty((M, grid.N, prob.m))
    X[:, 0] = X0
    dt = grid.dt
    for i in range(grid.N):
        t = grid.nodes[i]
        A, B, C, D = prob.coefficients_at(t)
        x = X[:, i]
        u = policy(t, x, i)
        if u.shape != (M, prob.m):
            raise SpecificationError("Policy returned controls of the wrong shape", expected=(M, prob.m), got=u.shape)
        U[:, i] = u
        X[:, i + 1] = x + (x @ A.T + u @ B.T) * dt + (x @ C.T + u @ D.T) * noise[:, i : i + 1]
        size = np.abs(X[:, i + 1]).max(axis=1)
        if not np.all(size <= BLOW_UP_LIMIT):
            j = int(np.argmax(np.where(np.isfinite(size), size, np.inf)))
            raise NumericError("State path blew up", path=j, node=i + 1)
    return PathBatch(M=M, grid=grid, X=X, U=U, dW=noise, start=start, seed=seed)


def pathwise_cost(prob, batch):
    prob = as_problem(prob)
    total = np.zeros(batch.M)
    for i, t in enumerate(batch.grid.nodes[:-1]):
        total += prob.cost.f(t, batch.X[:, i], batch.U[:, i]) * batch.grid.dt
    total += prob.cost.g(batch.X[:, -1])
    if not np.all(np.isfinite(total)):
        raise NumericError("Cost evaluators returned non-finite values")
    return total


def estimate_cost(prob, policy, M, grid, seed, start=None):
    batch = simulate_paths(prob, policy, M, grid, seed, start)
    return _estimate(pathwise_cost(prob, batch))


def estimate_h2_distance(prob, policy_a, policy_b, M, grid, seed, start=None):
    """Squared H² distance E∫|u^A - u^B|² dt, each policy along its own path under shared noise."""
    batch_a = simulate_paths(prob, policy_a, M, grid, seed, start)
    batch_b = simulate_paths(prob, policy_b, M, grid, seed, start)
    diff = batch_a.U - batch_b.U
    return _estimate(np.sum(diff * diff, axis=(1, 2)) * grid.dt)


def estimate_h2_norm_sq(prob, policy, M, grid, seed, start=None):
    batch = simulate_paths(prob, policy, M, grid, seed, start)
    return _estimate(np.sum(batch.U * batch.U, axis=(1, 2)) * grid.dt)


def value_curve(prob, policy, xs, M, grid, seed):
    """Monte Carlo v(0, x) with x0 moved along its first coordinate; common noise across x."""
    prob = as_problem(prob)
    estimates = []
    for x in xs:
        x0 = np.array(prob.x0, dtype=float)
        x0[0] = x
        estimates.append(estimate_cost(prob, policy, M, grid, seed, FixedStart(x0)))
    return estimates


@dataclass(frozen=True)
class CoercivityEstimate:
    lambda_min: float
    op_norm_sq: float
    probes: int
    stderr: float
    ratios: tuple = ()


def estimate_coercivity(spec, probes, M, grid, seed):
    """
    Probe ‖L_{0,T}u‖²/‖u‖² with random piecewise-constant open-loop controls.

    L_{0,T}u is the terminal state started from zero, so the numerator is
    E|X_T|². The minimum over probes is an upper estimate of the coercivity
    constant.
    """
    if probes < 10:
        raise UsageError("Coercivity needs at least 10 probes", probes=probes)
    prob = as_problem(spec)
    zero = FixedStart(np.zeros(prob.n))
    ratios, errors, skipped = [], [], 0
    for p in range(probes):
        u = np.random.default_rng(derive_seed(seed, p)).standard_normal((grid.N, prob.m))
        norm_sq = float(np.sum(u * u) * grid.dt)
        if norm_sq == 0.0:
            skipped += 1
            continue
        batch = simulate_paths(prob, OpenLoopControl(u), M, grid, seed, zero)
        terminal = _estimate(np.sum(batch.X[:, -1] ** 2, axis=1))
        ratios.append(terminal.mean / norm_sq)
        errors.append(terminal.stderr / norm_sq)
    if skipped:
        log.warning("Skipped zero-norm coercivity probes", skipped=skipped)
    if not ratios:
        raise NumericError("Every coercivity probe had zero norm", probes=probes)
    worst = int(np.argmin(ratios))
    return CoercivityEstimate(
        lambda_min=float(ratios[worst]),
        op_norm_sq=float(np.max(ratios)),
        probes=len(ratios),
        stderr=float(errors[worst]),
        ratios=tuple(ratios),
    )


@dataclass(frozen=True)
class DualityCheck:
    residual: EstimateWithError
    lhs: EstimateWithError


def check_duality(spec, alpha, M, grid, seed):
    """
    Monte Carlo check of E[(L_{0,T}u)'η] = E∫u'(B'Y + D'Z) - (L_0 u)'ξ dt.

    u is the α-feedback control along the state from x0, (Y, Z) = (aX, a(C + Dα)X)
    its exact adjoint, η = GX_T and ξ = QX + S'u. L_0u is the state started at zero
    under the same control and noise.
    """
    if not spec.constraint.is_free:
        raise UsageError("Duality check needs an unconstrained LQ spec", problem=spec.name)
    a = solve_a_ode(spec, alpha)
    prob = spec.to_problem()
    batch = simulate_paths(prob, LinearFeedback(alpha), M, grid, seed)
    probe = simulate_paths(prob, OpenLoopControl(batch.U), M, grid, seed, FixedStart(np.zeros(spec.n)), dW=batch.dW)

    lhs = np.einsum("ki,ij,kj->k", probe.X[:, -1], spec.G, batch.X[:, -1])
    rhs = np.zeros(M)
    for i, t in enumerate(grid.nodes[:-1]):
        A, B, C, D = prob.coefficients_at(t)
        a_t, al = a.at_time(t), alpha.at_time(t)
        x, u, x0 = batch.X[:, i], batch.U[:, i], probe.X[:, i]
        y = x @ a_t.T
        z = x @ (a_t @ (C + D @ al)).T
        xi = prob.cost.fx(t, x, u)
        rhs += (np.sum(u * (y @ B + z @ D), axis=1) - np.sum(x0 * xi, axis=1)) * grid.dt
    return DualityCheck(residual=_estimate(lhs - rhs), lhs=_estimate(lhs))


def stationarity_residual(prob, policy, bsde_values, tau, M, grid, seed, start=None):
    """
    H² norm of u - prox(u - τ ∂_u H(X, u, Y, Z)) along simulated paths.

    bsde_values(t, x) returns the adjoint pair (y, z) for a batch of states.
    The standard error comes from the delta method on the squared norm.
    """
    if tau <= 0:
        raise UsageError("Step size must be positive", tau=tau)
    prob = as_problem(prob)
    batch = simulate_paths(prob, policy, M, grid, seed, start)
    per_path = np.zeros(M)
    for i, t in enumerate(grid.nodes[:-1]):
        x, u = batch.X[:, i], batch.U[:, i]
        y, z = bsde_values(t, x)
        step = prox_project(prob.constraint, u - tau * hamiltonian_grad_u(prob, t, x, u, y, z))
        gap = u - step
        per_path += np.sum(gap * gap, axis=1) * grid.dt
    squared = _estimate(per_path)
    norm = float(np.sqrt(max(squared.mean, 0.0)))
    stderr = squared.stderr / (2.0 * norm) if norm > 0 else squared.stderr
    return EstimateWithError(mean=norm, stderr=float(stderr), M=M)


def linear_adjoint(spec, alpha, a=None):
    """Exact adjoint evaluator (t, x) -> (aX, a(C + Dα)X) of a linear feedback."""
    a = a if a is not None else solve_a_ode(spec, alpha)

    def values(t, x):
        a_t, al = a.at_time(t), alpha.at_time(t)
        C, D = spec.C.at_time(t), spec.D.at_time(t)
        return x @ a_t.T, x @ (a_t @ (C + D @ al)).T

    return values
