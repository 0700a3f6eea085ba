"""Dense linear-layer stacks with per-sample gradients, seeded streams and optimizers.

Everything here works on float64 numpy arrays. Per-sample gradients (what
DP-SGD clips) come either materialized, shape ``(n, out, in)``, or factored
as ``(delta, input)`` pairs per layer, which is all a linear layer needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
ROUND_MULT = 0xBF58476D1CE4E5B9
PURPOSE_MULT = 0x94D049BB133111EB

ACTIVATIONS = ("relu", "identity", "sigmoid")


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Purpose(IntEnum):
    """Purpose codes used to key random streams."""

    INIT = 1
    BATCH = 2
    NOISE = 3
    LATENT = 4
    GENERATE = 5
    PARTITION = 6
    SPLIT = 7
    DATA = 8
    DOWNSTREAM = 9
    GAN_LATENT = 10
    EVAL = 11


# client id used for server-side / global streams
SERVER_ID = 0xFFFF_FFFF


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int (mod 2**64)."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, client_id: int, round_: int, purpose: int) -> int:
    raw = (
        (seed & MASK64)
        ^ ((client_id * GOLDEN_GAMMA) & MASK64)
        ^ ((round_ * ROUND_MULT) & MASK64)
        ^ ((int(purpose) * PURPOSE_MULT) & MASK64)
    )
    return mix64(raw)


_U30, _U27, _U31, _U11 = (np.uint64(k) for k in (30, 27, 31, 11))
_MIX1, _MIX2 = np.uint64(0xBF58476D1CE4E5B9), np.uint64(0x94D049BB133111EB)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, in place on a uint64 array."""
    x ^= x >> _U30
    x *= _MIX1
    x ^= x >> _U27
    x *= _MIX2
    x ^= x >> _U31
    return x


class RngStream:
    """Counter-based SplitMix64 stream keyed by ``(seed, client, round, purpose)``.

    Output ``k`` is ``mix64(state + (k + 1) * GOLDEN_GAMMA)``, so a stream is
    fully determined by its key and how many draws were taken before.
    Streams are cheap; make a new one instead of sharing across workers.
    """

    def __init__(self, seed: int, client_id: int = SERVER_ID, round_: int = 0,
                 purpose: int = Purpose.INIT):
        self.stream_id = (int(client_id), int(round_), int(purpose))
        self.state = derive_seed(seed, client_id, round_, purpose)
        self.counter = 0

    @classmethod
    def from_state(cls, state: int) -> "RngStream":
        obj = cls.__new__(cls)
        obj.stream_id = (-1, -1, -1)
        obj.state = int(state) & MASK64
        obj.counter = 0
        return obj

    def spawn(self, tag: int) -> "RngStream":
        """Child stream for a sub-task, independent of this stream's position."""
        return RngStream.from_state(mix64(self.state ^ ((int(tag) + 1) * PURPOSE_MULT & MASK64)))

    def raw(self, count: int) -> np.ndarray:
        x = np.arange(self.counter + 1, self.counter + 1 + count, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            x *= np.uint64(GOLDEN_GAMMA)
            x += np.uint64(self.state)
            return _mix64_array(x)

    def uniform(self, shape) -> np.ndarray:
        """Uniform floats in [0, 1) with 53 random bits."""
        shape = _as_shape(shape)
        n = int(np.prod(shape))
        x = self.raw(n)
        x >>= _U11
        u = x.astype(np.float64)
        u *= 1.0 / (1 << 53)
        return u.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        return gaussian_sample(self, shape)

    def integers(self, high: int, size) -> np.ndarray:
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of fresh uniforms; ties have probability ~2**-53 and are
        # broken by index through the stable sort
        return np.argsort(self.uniform(n), kind="stable")

    def categorical(self, probs: np.ndarray, size: int) -> np.ndarray:
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        cdf /= cdf[-1]
        idx = np.searchsorted(cdf, self.uniform(size), side="right")
        return np.minimum(idx, len(cdf) - 1)

    def numpy_generator(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream, for distributions we don't hand-roll."""
        return np.random.Generator(np.random.PCG64(int(self.raw(1)[0])))


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative dimension in shape {shape}")
    return shape


def gaussian_sample(rng: RngStream, shape) -> np.ndarray:
    """Standard normal draws via Box-Muller on the stream's uniforms."""
    shape = _as_shape(shape)
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs).reshape(pairs, 2)
    r = 1.0 - u[:, 0]  # (0, 1], keeps the log finite
    np.log(r, out=r)
    r *= -2.0
    np.sqrt(r, out=r)
    theta = u[:, 1] * (2.0 * np.pi)
    z = np.empty((pairs, 2))
    np.cos(theta, out=z[:, 0])
    np.sin(theta, out=z[:, 1])
    z *= r[:, None]
    return z.reshape(-1)[:n].reshape(shape)


# ---------------------------------------------------------------------------
# layers


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"expected x 2-D, W 2-D, b 1-D; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[1] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"shapes do not chain: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W.T + b


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "identity":
        return a
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (pre > 0)
    if name == "identity":
        return g
    if name == "sigmoid":
        return g * post * (1.0 - post)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"layer weight {self.W.shape} and bias {self.b.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass
class ForwardCache:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    post: list  # output of each layer

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


@dataclass
class LayerFactors:
    """Per-sample gradients of one linear layer in factored form.

    Sample i has weight gradient ``outer(delta[i], inputs[i])`` and bias
    gradient ``delta[i]``, so its squared norm is
    ``|delta_i|^2 (|inputs_i|^2 + 1)`` without building the outer product.
    """

    delta: np.ndarray  # (n, out)
    inputs: np.ndarray  # (n, in)

    def sq_norms(self) -> np.ndarray:
        return np.sum(self.delta ** 2, axis=1) * (np.sum(self.inputs ** 2, axis=1) + 1.0)

    def weighted_sum(self, w: np.ndarray) -> list[np.ndarray]:
        """``[sum_i w_i dW_i, sum_i w_i db_i]``."""
        wd = self.delta * w[:, None]
        return [wd.T @ self.inputs, wd.sum(axis=0)]

    def materialize(self) -> list[np.ndarray]:
        return [np.einsum("no,ni->noi", self.delta, self.inputs), self.delta.copy()]

    @staticmethod
    def concat(parts: Sequence["LayerFactors"]) -> "LayerFactors":
        return LayerFactors(np.concatenate([p.delta for p in parts]), np.concatenate([p.inputs for p in parts]))


@dataclass
class MlpStack:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @classmethod
    def init(cls, widths: Sequence[int], rng: RngStream, hidden: str = "relu",
             output: str = "identity") -> "MlpStack":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, the usual linear-layer default."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            W = (rng.uniform((fan_out, fan_in)) * 2.0 - 1.0) * bound
            b = (rng.uniform(fan_out) * 2.0 - 1.0) * bound
            act = output if i == len(widths) - 2 else hidden
            layers.append(Layer(W, b, act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def param_count(self) -> int:
        return sum(layer.W.size + layer.b.size for layer in self.layers)

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def set_params(self, arrays: Sequence[np.ndarray]) -> None:
        if len(arrays) != 2 * len(self.layers):
            raise ShapeError("parameter list length does not match the stack")
        for i, layer in enumerate(self.layers):
            W, b = arrays[2 * i], arrays[2 * i + 1]
            if W.shape != layer.W.shape or b.shape != layer.b.shape:
                raise ShapeError(f"layer {i}: got {W.shape}/{b.shape}, want {layer.W.shape}/{layer.b.shape}")
            layer.W = np.array(W, dtype=np.float64)
            layer.b = np.array(b, dtype=np.float64)

    def copy(self) -> "MlpStack":
        return MlpStack([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def forward(self, x: np.ndarray) -> ForwardCache:
        a = np.asarray(x, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != self.in_dim:
            raise ShapeError(f"input shape {a.shape} does not match stack input width {self.in_dim}")
        inputs, pre, post = [], [], []
        for layer in self.layers:
            inputs.append(a)
            z = a @ layer.W.T + layer.b
            a = _activate(layer.activation, z)
            pre.append(z)
            post.append(a)
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite activations in forward pass")
        return ForwardCache(inputs, pre, post)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).output

    def backward(self, cache: ForwardCache, upstream: np.ndarray, per_sample=True):
        """Backpropagate ``upstream`` (dLoss/dOutput, one row per sample).

        Returns ``(grads, input_grad)``. With ``per_sample=True`` the gradients
        carry a leading sample axis (``(n, out, in)`` and ``(n, out)``); with
        ``False`` they are summed over the batch. ``"factored"`` returns one
        :class:`LayerFactors` per layer instead, from which per-sample
        gradients are outer products.
        """
        g = np.asarray(upstream, dtype=np.float64)
        n = cache.inputs[0].shape[0]
        if g.shape != (n, self.out_dim):
            raise ShapeError(f"upstream gradient {g.shape} does not match output ({n}, {self.out_dim})")
        grads: list = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            delta = _activation_grad(layer.activation, cache.pre[i], cache.post[i], g)
            a_in = cache.inputs[i]
            if per_sample == "factored":
                grads[i] = LayerFactors(delta, a_in)
            elif per_sample:
                grads[2 * i] = np.einsum("no,ni->noi", delta, a_in)
                grads[2 * i + 1] = delta.copy()
            else:
                grads[2 * i] = delta.T @ a_in
                grads[2 * i + 1] = delta.sum(axis=0)
            g = delta @ layer.W
        if per_sample == "factored":
            grads = grads[:len(self.layers)]
        return grads, g


def mlp_forward_backward(stack: MlpStack, x: np.ndarray, upstream_grad: np.ndarray) -> list[list[np.ndarray]]:
    """Per-sample parameter gradients as a list over samples of per-layer arrays."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("need at least one sample")
    cache = stack.forward(x)
    grads, _ = stack.backward(cache, upstream_grad, per_sample=True)
    return [[g[i] for g in grads] for i in range(x.shape[0])]


# ---------------------------------------------------------------------------
# optimizers


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    out = []
    for p, g in zip(params, grads):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        out.append(p - lr * g)
    return out


@dataclass
class OptimizerState:
    kind: str = "sgd"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    m: list | None = None
    v: list | None = None
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def apply(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        if self.kind == "adam":
            return adam_step(self, params, grads)
        self.step += 1
        return sgd_step(params, grads, self.learning_rate)


def adam_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    if state.kind != "adam":
        raise ValueError("adam_step needs an adam optimizer state")
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if state.m is None:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_hat))
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def onehot(y: np.ndarray, K: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros((y.shape[0], K))
    out[np.arange(y.shape[0]), y] = 1.0
    return out
