"""Dense ReLU networks with manual backprop, Adam and global-norm clipping.

Parameters are kept as plain numpy arrays. A :class:`Network` exposes them as
an interleaved list ``[W0, b0, W1, b1, ...]``; gradients, Adam moments and
update directions all use that same ordering.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POLICY = "policy-logits"
VALUE = "scalar-value"
HEAD_KINDS = (POLICY, VALUE)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-5


class ConfigurationError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when a run produces non-finite losses, gradients or parameters."""


@dataclass
class Network:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head_kind: str = POLICY

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("weights and biases must be non-empty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: bad shapes {w.shape}, {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigurationError(f"layer {i} does not chain onto layer {i - 1}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigurationError(f"unknown head kind {self.head_kind!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def hidden_sizes(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    @property
    def num_hidden(self) -> int:
        return len(self.weights) - 1

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Network":
        return Network([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.head_kind)

    def with_params(self, params: list[np.ndarray]) -> "Network":
        return Network(list(params[0::2]), list(params[1::2]), self.head_kind)

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    preactivations: list[np.ndarray]
    outputs: np.ndarray

    def activations(self, layer: int) -> np.ndarray:
        """Input seen by weight matrix ``layer`` (the raw input for layer 0)."""
        if layer == 0:
            return self.inputs
        return np.maximum(self.preactivations[layer - 1], 0.0)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, net: Network) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in net.params()],
            [np.zeros_like(p) for p in net.params()],
        )

    def copy(self) -> "AdamState":
        return AdamState(
            [m.copy() for m in self.first_moment],
            [v.copy() for v in self.second_moment],
            self.step_count,
            self.beta1,
            self.beta2,
            self.epsilon,
        )


def init_network(layer_sizes, head_kind: str = POLICY, seed: int = 0) -> Network:
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ConfigurationError(f"layer_sizes must have >= 2 positive entries, got {layer_sizes!r}")
    if head_kind not in HEAD_KINDS:
        raise ConfigurationError(f"unknown head kind {head_kind!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if i == n_layers - 1:
            w = w * (0.01 if head_kind == POLICY else 1.0)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Network(weights, biases, head_kind)


def forward(net: Network, inputs) -> ForwardTrace:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.weights[0].shape[1]:
        raise ValueError(f"input shape {x.shape} does not match network input width {net.weights[0].shape[1]}")
    pre = []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ w.T + b
        if i < last:
            pre.append(a)
            h = np.maximum(a, 0.0)
        else:
            h = a
    return ForwardTrace(x, pre, h)


def backprop_deltas(net: Network, trace: ForwardTrace, grad: np.ndarray, start: int) -> list[np.ndarray]:
    """Per-sample gradients w.r.t. the preactivations of layers ``start..0``.

    ``grad`` is dL/d(preactivation of weight layer ``start``). Returns a list
    indexed by weight layer (entries above ``start`` are ``None``).
    """
    deltas: list = [None] * len(net.weights)
    delta = grad
    for i in range(start, -1, -1):
        deltas[i] = delta
        if i == 0:
            break
        upstream = delta @ net.weights[i]
        # rectifier subgradient at exactly 0 is 0
        delta = upstream * (trace.preactivations[i - 1] > 0.0)
    return deltas


def backward(net: Network, trace: ForwardTrace, output_grads) -> list[np.ndarray]:
    g = np.asarray(output_grads, dtype=np.float64)
    if g.shape != trace.outputs.shape or len(trace.preactivations) != net.num_hidden:
        raise ValueError("trace does not belong to this network / output grads mismatch")
    deltas = backprop_deltas(net, trace, g, len(net.weights) - 1)
    grads = []
    for i, delta in enumerate(deltas):
        grads.append(delta.T @ trace.activations(i))
        grads.append(delta.sum(axis=0))
    return grads


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_global_norm(grads, max_norm: float):
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return [g.copy() for g in grads]


def adam_direction(state: AdamState, grads) -> tuple[list[np.ndarray], AdamState]:
    """Advance the moments with ``grads`` and return the unit-lr step direction.

    The parameter update is ``theta - lr * direction``.
    """
    if not all(np.isfinite(g).all() for g in grads):
        raise DivergenceError("non-finite gradient")
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    m_new, v_new, direction = [], [], []
    for g, m, v in zip(grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        denom = np.sqrt(v) / np.sqrt(bc2) + eps
        direction.append((m / bc1) / denom)
        m_new.append(m)
        v_new.append(v)
    return direction, AdamState(m_new, v_new, t, b1, b2, eps)


def adam_step(net: Network, state: AdamState, grads, lr: float) -> tuple[Network, AdamState]:
    if lr < 0:
        raise ValueError("lr must be non-negative")
    direction, new_state = adam_direction(state, grads)
    params = [p - lr * d for p, d in zip(net.params(), direction)]
    new_net = net.with_params(params)
    if not new_net.is_finite():
        raise DivergenceError("non-finite parameters after Adam step")
    return new_net, new_state


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vector: np.ndarray, like) -> list[np.ndarray]:
    out, offset = [], 0
    for a in like:
        out.append(vector[offset : offset + a.size].reshape(a.shape))
        offset += a.size
    if offset != vector.size:
        raise ValueError("vector length does not match parameter count")
    return out
