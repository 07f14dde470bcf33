"""Dense feed-forward networks with hand-derived gradients.

Everything is float64. A batch is a C-contiguous matrix with samples in
rows; a single input is a 1-D vector. Forward passes record the layer
inputs and pre-activations needed for the exact backward pass, and every
network counts its per-input forward passes so early-exit behaviour can be
asserted from the outside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ContractViolation, NumericError

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

# Probabilities are floored here before any log; keeps rewards finite.
PROB_FLOOR = 1e-12


def as_matrix(a, name="array"):
    """Coerce to a C-contiguous float64 matrix and check finiteness."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got ndim={m.ndim}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name}: non-finite entries")
    return m


@dataclass
class DenseLayer:
    """One affine layer: activation(x @ weights + bias)."""

    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = IDENTITY

    def __post_init__(self):
        self.weights = as_matrix(self.weights, "weights")
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.bias.ndim != 1 or self.bias.shape[0] != self.weights.shape[1]:
            raise ValueError("bias shape does not match weights")
        if not np.isfinite(self.bias).all():
            raise ValueError("bias: non-finite entries")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1]

    @property
    def flops(self):
        """2*in*out multiply/adds plus out bias adds; activations count 0."""
        return 2 * self.in_dim * self.out_dim + self.out_dim


def flops_of(layers):
    """Total forward cost of a layer stack, additive over concatenation."""
    return sum(layer.flops for layer in layers)


def dense_forward(x, layer):
    """activation(x @ W + b), row-wise; accepts a vector or a batch."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(1, -1)
    if arr.shape[1] != layer.in_dim:
        raise ValueError(
            f"input has {arr.shape[1]} features, layer expects {layer.in_dim}"
        )
    out, _ = K.affine(np.ascontiguousarray(arr), layer.weights, layer.bias,
                      layer.activation == RELU)
    return out[0] if single else out


class FeedForwardNet:
    """A stack of dense layers ending in an identity (logit) layer.

    The softmax head lives in :func:`net_forward`; ``version`` is bumped on
    every parameter change so stale forward caches can be rejected.
    """

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ConfigError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigError("layer dimensions do not chain")
        if layers[-1].activation != IDENTITY:
            raise ConfigError("final layer must be identity (logits)")
        self.layers = layers
        self.version = 0
        self.forward_count = 0  # instrumentation: per-input forward passes

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def num_classes(self):
        return self.layers[-1].out_dim

    @property
    def flops(self):
        return flops_of(self.layers)

    def num_params(self):
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def copy(self):
        clone = FeedForwardNet(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
             for l in self.layers]
        )
        clone.version = self.version
        return clone

    def check_finite(self):
        for i, l in enumerate(self.layers):
            if not (np.isfinite(l.weights).all() and np.isfinite(l.bias).all()):
                raise NumericError(f"non-finite parameters in layer {i}")


@dataclass
class ForwardCache:
    """Activation record from a forward pass, consumed by net_backward."""

    net: FeedForwardNet
    version: int
    inputs: list  # input to each layer, (n, in_dim)
    preacts: list  # pre-activation per layer, (n, out_dim)
    probs: np.ndarray  # softmax output, (n, num_classes)
    single: bool


def softmax(logits):
    """Stable softmax of a single logit vector (max-subtraction)."""
    v = np.asarray(logits, dtype=np.float64)
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_rows(logits):
    """Row-wise stable softmax."""
    m = np.asarray(logits, dtype=np.float64)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_vjp(probs, d_probs):
    """Pull a gradient w.r.t. softmax outputs back to the logits.

    d_logits = p * (d_probs - <p, d_probs>), row-wise.
    """
    inner = np.sum(probs * d_probs, axis=-1, keepdims=True)
    return probs * (d_probs - inner)


def cross_entropy(probs, label):
    """-log(probs[label]) with the probability floored at PROB_FLOOR."""
    p = np.asarray(probs, dtype=np.float64)
    n = p.shape[-1]
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    return -math.log(max(float(p[label]), PROB_FLOOR))


def _forward(net, x2d):
    a = x2d
    inputs = []
    preacts = []
    for layer in net.layers:
        inputs.append(a)
        a, z = K.affine(a, layer.weights, layer.bias, layer.activation == RELU)
        preacts.append(z)
    return softmax_rows(a), inputs, preacts


def net_forward(net, x):
    """Forward one input vector; returns (probs, cache)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != net.in_dim:
        raise ValueError(f"input must be a vector of length {net.in_dim}")
    probs, inputs, preacts = _forward(net, arr.reshape(1, -1))
    net.forward_count += 1
    cache = ForwardCache(net, net.version, inputs, preacts, probs, single=True)
    return probs[0], cache


def net_forward_batch(net, x):
    """Forward a batch; returns (probs matrix, cache)."""
    arr = as_matrix(x, "input batch")
    if arr.shape[1] != net.in_dim:
        raise ValueError(f"batch has {arr.shape[1]} features, net expects {net.in_dim}")
    probs, inputs, preacts = _forward(net, arr)
    net.forward_count += arr.shape[0]
    cache = ForwardCache(net, net.version, inputs, preacts, probs, single=False)
    return probs, cache


@dataclass
class NetGradients:
    """Per-parameter gradients mirroring a network's layer shapes."""

    d_weights: list
    d_biases: list
    wrt_input: np.ndarray | None = None

    def sq_norm(self):
        total = 0.0
        for dw, db in zip(self.d_weights, self.d_biases):
            total += float(np.dot(dw.reshape(-1), dw.reshape(-1)))
            total += float(np.dot(db, db))
        return total

    def scaled(self, c):
        return NetGradients([dw * c for dw in self.d_weights],
                            [db * c for db in self.d_biases])


def zeros_grads(net):
    return NetGradients(
        [np.zeros_like(l.weights) for l in net.layers],
        [np.zeros_like(l.bias) for l in net.layers],
    )


def accumulate_grads(acc, grads, scale=1.0):
    """acc += scale * grads, in place."""
    for i in range(len(acc.d_weights)):
        acc.d_weights[i] += scale * grads.d_weights[i]
        acc.d_biases[i] += scale * grads.d_biases[i]


def net_backward(net, cache, d_logits):
    """Exact gradient of a scalar with the given logit gradient.

    ``d_logits`` is d(scalar)/d(final pre-softmax logits); use
    :func:`softmax_vjp` first when the scalar is defined on probabilities.
    Returns gradients for every layer plus the gradient w.r.t. the input.
    """
    if cache.net is not net:
        raise ContractViolation("cache was produced by a different network")
    if cache.version != net.version:
        raise ContractViolation(
            f"stale cache: parameters at version {net.version}, "
            f"cache at version {cache.version}"
        )
    d = np.asarray(d_logits, dtype=np.float64)
    if cache.single:
        d = d.reshape(1, -1)
    d = np.ascontiguousarray(d)
    if d.shape != cache.probs.shape:
        raise ContractViolation("d_logits shape does not match the forward pass")
    n_layers = len(net.layers)
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        layer = net.layers[i]
        d, dw, db = K.affine_backward(
            cache.inputs[i], layer.weights, cache.preacts[i], d,
            layer.activation == RELU,
        )
        d_weights[i] = dw
        d_biases[i] = db
    wrt_input = d[0] if cache.single else d
    return NetGradients(d_weights, d_biases, wrt_input)


@dataclass
class SgdState:
    """Momentum buffers, one pair per layer."""

    vel_weights: list
    vel_biases: list


def make_sgd_state(net):
    return SgdState(
        [np.zeros_like(l.weights) for l in net.layers],
        [np.zeros_like(l.bias) for l in net.layers],
    )


def sgd_momentum_step(net, grads, lr, momentum, state):
    """v = momentum*v + g; params -= lr*v.

    Descent on the given gradients; callers maximizing a reward negate
    first. Rejects non-finite gradients without touching the parameters.
    """
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError("momentum must be in [0, 1)")
    for i, (dw, db) in enumerate(zip(grads.d_weights, grads.d_biases)):
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise NumericError(f"update rejected: non-finite gradient in layer {i}")
    for i, layer in enumerate(net.layers):
        K.sgd_update(layer.weights.reshape(-1), state.vel_weights[i].reshape(-1),
                     np.ascontiguousarray(grads.d_weights[i]).reshape(-1),
                     lr, momentum)
        K.sgd_update(layer.bias, state.vel_biases[i],
                     np.ascontiguousarray(grads.d_biases[i]).reshape(-1),
                     lr, momentum)
    net.version += 1


BIAS_INIT_RANGE = 0.05


def build_net(dims, seed, hidden_activation=RELU):
    """He-uniform initialised network: W ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)).

    Draws come from numpy's default PCG64 generator seeded with ``seed``
    (an int or a SeedSequence), so the same seed gives bit-identical
    parameters. Biases get a small uniform jitter so pre-activations start
    away from the ReLU kink (exact zeros there would poison central
    finite-difference checks).
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ConfigError("need at least input and output dims")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"layer dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        b = rng.uniform(-BIAS_INIT_RANGE, BIAS_INIT_RANGE, size=fan_out)
        act = IDENTITY if i == len(dims) - 2 else hidden_activation
        layers.append(DenseLayer(w, b, act))
    return FeedForwardNet(layers)
