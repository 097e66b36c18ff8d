"""
Small reverse-mode autodiff engine and feedforward networks.

A GradTape records every Tensor produced from watched parameters in creation
order, which is already a topological order, so the reverse pass is a single
sweep over the reversed tape. Plain numpy arrays mixed into an expression are
treated as constants.
"""

from dataclasses import dataclass, field

import numpy as np
import structlog

from .errors import NumericError, UsageError

log = structlog.get_logger()

DEFAULT_HIDDEN = (10, 10)
DEFAULT_SIGMA = 0.1


class GradTape:
    def __init__(self):
        self.nodes = []
        self.params = []

    def record(self, tensor):
        tensor.index = len(self.nodes)
        self.nodes.append(tensor)
        return tensor

    def watch(self, value):
        tensor = Tensor(np.array(value, dtype=float), self, ())
        self.params.append(tensor)
        return tensor

    def watch_all(self, values):
        return [self.watch(v) for v in values]


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A recorded value; parents hold (tensor, vector-Jacobian product) pairs."""

    __array_ufunc__ = None

    def __init__(self, value, tape, parents):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.index = None
        tape.record(self)

    @property
    def shape(self):
        return self.value.shape

    def _child(self, value, parents):
        return Tensor(value, self.tape, tuple((p, fn) for p, fn in parents if isinstance(p, Tensor)))

    def __add__(self, other):
        ov = _value(other)
        out = self.value + ov
        return self._child(
            out,
            [
                (self, lambda g, s=self.shape: _unbroadcast(g, s)),
                (other, lambda g, s=np.shape(ov): _unbroadcast(g, s)),
            ],
        )

    __radd__ = __add__

    def __neg__(self):
        return self._child(-self.value, [(self, lambda g: -g)])

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        sv, ov = self.value, _value(other)
        return self._child(
            sv * ov,
            [
                (self, lambda g: _unbroadcast(g * ov, sv.shape)),
                (other, lambda g: _unbroadcast(g * sv, np.shape(ov))),
            ],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("Division is only supported by constants")
        return self * (1.0 / np.asarray(other, dtype=float))

    def __matmul__(self, other):
        sv, ov = self.value, _value(other)
        return self._child(sv @ ov, [(self, lambda g: g @ ov.T), (other, lambda g: sv.T @ g)])

    def __rmatmul__(self, other):
        ov = np.asarray(other, dtype=float)
        sv = self.value
        return self._child(ov @ sv, [(self, lambda g: ov.T @ g)])

    def tanh(self):
        out = np.tanh(self.value)
        return self._child(out, [(self, lambda g: g * (1.0 - out * out))])

    def square(self):
        sv = self.value
        return self._child(sv * sv, [(self, lambda g: 2.0 * g * sv)])

    def sum(self, axis=None):
        sv = self.value
        out = sv.sum(axis=axis)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, sv.shape).copy()
            return np.broadcast_to(np.expand_dims(g, axis), sv.shape).copy()

        return self._child(out, [(self, vjp)])

    def mean(self):
        return self.sum() * (1.0 / self.value.size)


def _value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def grad(tape, loss):
    """
    Gradients of a recorded scalar with respect to every watched parameter.

    Returns:
        list: one array per tape.params entry, zeros where the loss does not depend on it.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape or tape.nodes[loss.index] is not loss:
        raise UsageError("Loss was not recorded on this tape")
    if loss.value.size != 1:
        raise UsageError("Loss must be a scalar", shape=loss.value.shape)

    grads = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        upstream = grads.pop(node.index, None) if node.parents else grads.get(node.index)
        if upstream is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(upstream)
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + contribution
            else:
                grads[parent.index] = contribution
    return [grads.get(p.index, np.zeros_like(p.value)).reshape(p.value.shape) for p in tape.params]


@dataclass(frozen=True, eq=False)
class InputNorm:
    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))

    def apply(self, x):
        return (x - self.shift) * self.scale


def time_state_norm(T, n, box):
    """t -> 2t/T - 1 and x -> x/box for networks taking (t, x)."""
    shift = np.concatenate([[0.5 * T], np.zeros(n)])
    scale = np.concatenate([[2.0 / T], np.full(n, 1.0 / box)])
    return InputNorm(shift, scale)


def state_norm(n, box):
    return InputNorm(np.zeros(n), np.full(n, 1.0 / box))


@dataclass(eq=False)
class Mlp:
    """tanh network; params are [W1, b1, ..., WL, bL] with W of shape (d_in, d_out)."""

    layer_dims: tuple
    params: list
    norm: InputNorm

    @property
    def parameter_count(self):
        return int(sum(p.size for p in self.params))

    def copy(self):
        return Mlp(tuple(self.layer_dims), [p.copy() for p in self.params], self.norm)


def parameter_count(layer_dims):
    return int(sum(layer_dims[i] * (layer_dims[i - 1] + 1) for i in range(1, len(layer_dims))))


def mlp_init(layer_dims, seed, sigma=DEFAULT_SIGMA, norm=None):
    """Parameters drawn N(0, sigma²); two-entry layer_dims get the default hidden sizes."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) == 2:
        dims = (dims[0], *DEFAULT_HIDDEN, dims[1])
    if len(dims) < 2 or min(dims) < 1:
        raise UsageError("Layer dimensions must be positive", layer_dims=dims)
    rng = np.random.default_rng(seed)
    params = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        params.append(sigma * rng.standard_normal((d_in, d_out)))
        params.append(sigma * rng.standard_normal(d_out))
    return Mlp(dims, params, norm or InputNorm.identity(dims[0]))


def mlp_forward(net, inputs):
    inputs = np.asarray(inputs, dtype=float)
    single = inputs.ndim == 1
    x = np.atleast_2d(inputs)
    if x.shape[1] != net.layer_dims[0]:
        raise UsageError("Network input has the wrong width", expected=net.layer_dims[0], got=x.shape[1])
    if not np.all(np.isfinite(x)):
        raise NumericError("Network input is not finite")
    h = net.norm.apply(x)
    last = len(net.params) // 2 - 1
    for layer in range(last + 1):
        h = h @ net.params[2 * layer] + net.params[2 * layer + 1]
        if layer < last:
            h = np.tanh(h)
    return h[0] if single else h


def mlp_record(net, inputs, params):
    """Same stack as mlp_forward, recorded on the tape owning ``params``."""
    h = net.norm.apply(np.atleast_2d(np.asarray(inputs, dtype=float)))
    last = len(params) // 2 - 1
    for layer in range(last + 1):
        h = h @ params[2 * layer] + params[2 * layer + 1]
        if layer < last:
            h = h.tanh()
    return h


def flatten_parameters(net):
    dims = np.asarray(net.layer_dims, dtype=float)
    header = np.concatenate([[len(dims)], dims, net.norm.shift, net.norm.scale])
    return np.concatenate([header] + [p.ravel() for p in net.params])


def unflatten_parameters(flat):
    flat = np.asarray(flat, dtype=float)
    count = int(flat[0])
    dims = tuple(int(d) for d in flat[1 : 1 + count])
    offset = 1 + count
    shift, scale = flat[offset : offset + dims[0]], flat[offset + dims[0] : offset + 2 * dims[0]]
    offset += 2 * dims[0]
    if flat.size != offset + parameter_count(dims):
        raise UsageError("Checkpoint size does not match its header", expected=offset + parameter_count(dims), got=flat.size)
    params = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        params.append(flat[offset : offset + d_in * d_out].reshape(d_in, d_out))
        offset += d_in * d_out
        params.append(flat[offset : offset + d_out].copy())
        offset += d_out
    return Mlp(dims, params, InputNorm(shift.copy(), scale.copy()))


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise UsageError("Unknown optimizer", kind=self.kind)
        if self.lr <= 0:
            raise UsageError("Learning rate must be positive", lr=self.lr)


def optimizer_step(state, params, grads):
    """
    One first-order update; returns new parameter arrays.

    Plain mode is p - lr*g. The adaptive mode keeps bias-corrected moment
    estimates in ``state``.
    """
    if len(params) != len(grads) or any(np.shape(p) != np.shape(g) for p, g in zip(params, grads)):
        raise UsageError("Gradients do not match the parameters in shape")
    if state.kind == "sgd":
        return [p - state.lr * g for p, g in zip(params, grads)]

    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    elif any(np.shape(m) != np.shape(p) for m, p in zip(state.first_moment, params)):
        raise UsageError("Optimizer buffers do not match the parameters in shape")
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    updated = []
    for idx, (p, g) in enumerate(zip(params, grads)):
        state.first_moment[idx] = state.beta1 * state.first_moment[idx] + (1.0 - state.beta1) * g
        state.second_moment[idx] = state.beta2 * state.second_moment[idx] + (1.0 - state.beta2) * g * g
        m_hat = state.first_moment[idx] / correction1
        v_hat = state.second_moment[idx] / correction2
        updated.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return updated
