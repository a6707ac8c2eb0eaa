"""Dense feedforward networks, backpropagation and the Adam optimizer.

Matrices are plain ``float64`` numpy arrays. A network's weight for layer
``l`` has shape ``(dims[l + 1], dims[l])`` and is applied to row-major
batches as ``x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("linear", "sigmoid")

# sigmoid pre-activations are clamped to this range before exponentiation
SIGMOID_CLAMP = 40.0


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


_BELOW_ONE = np.nextafter(1.0, 0.0)


def sigmoid(a: np.ndarray) -> np.ndarray:
    a = np.clip(a, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    # 1 / (1 + e^-40) rounds to 1.0; keep the output strictly inside (0, 1)
    return np.minimum(1.0 / (1.0 + np.exp(-a)), _BELOW_ONE)


def glorot_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class FeedforwardNet:
    """Fully connected network with one hidden nonlinearity and an output head."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if len(self.layer_dims) < 2:
            raise ShapeError("a network needs at least an input and an output layer")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("one weight matrix and bias vector per layer transition required")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[l + 1], self.layer_dims[l])
            if w.shape != expected:
                raise ShapeError(f"weights[{l}] has shape {w.shape}, expected {expected}")
            if b.shape != (self.layer_dims[l + 1],):
                raise ShapeError(f"biases[{l}] has shape {b.shape}, expected ({expected[0]},)")

    @classmethod
    def initialize(
        cls,
        layer_dims,
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "linear",
    ) -> "FeedforwardNet":
        """Glorot-uniform weights, zero biases."""
        dims = [int(d) for d in layer_dims]
        weights = [glorot_uniform(dims[l + 1], dims[l], rng) for l in range(len(dims) - 1)]
        biases = [np.zeros(dims[l + 1]) for l in range(len(dims) - 1)]
        return cls(dims, weights, biases, hidden_activation, output_activation)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def params(self) -> list[np.ndarray]:
        """Weights and biases interleaved: ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "FeedforwardNet":
        return FeedforwardNet(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )

    def _hidden(self, a):
        if self.hidden_activation == "relu":
            return np.maximum(a, 0.0)
        return np.tanh(a)

    def forward_cached(self, batch: np.ndarray):
        """Forward pass that also returns the per-layer activations for backprop."""
        x = _as_batch(batch, self.input_dim)
        acts = [x]
        n_layers = len(self.weights)
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = acts[-1] @ w.T + b
            if l < n_layers - 1:
                acts.append(self._hidden(a))
            elif self.output_activation == "sigmoid":
                acts.append(sigmoid(a))
            else:
                acts.append(a)
        return acts[-1], acts

    def backward_cached(self, acts, upstream_grad: np.ndarray):
        """Backpropagate ``upstream_grad`` (gradient w.r.t. the output) through cached activations.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
        :attr:`params`.
        """
        out = acts[-1]
        g = np.asarray(upstream_grad, dtype=np.float64)
        if g.shape != out.shape:
            raise ShapeError(f"upstream gradient shape {g.shape} != output shape {out.shape}")
        if self.output_activation == "sigmoid":
            g = g * out * (1.0 - out)
        n_layers = len(self.weights)
        grads = [None] * (2 * n_layers)
        for l in range(n_layers - 1, -1, -1):
            grads[2 * l] = g.T @ acts[l]
            grads[2 * l + 1] = g.sum(axis=0)
            g = g @ self.weights[l]
            if l > 0:
                h = acts[l]
                if self.hidden_activation == "relu":
                    g = g * (h > 0.0)
                else:
                    g = g * (1.0 - h * h)
        return grads, g


def _as_batch(batch, dim: int) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"expected a batch with {dim} columns, got shape {x.shape}")
    return x


def forward(net: FeedforwardNet, batch) -> np.ndarray:
    """Apply ``net`` to every row of ``batch``; returns ``(rows, output_dim)``."""
    out, _ = net.forward_cached(batch)
    return out


def backward(net: FeedforwardNet, batch, upstream_grad):
    """Gradients of ``sum(upstream_grad * forward(net, batch))``.

    Returns ``(param_grads, input_grad)``; ``param_grads`` follows the
    ``[W0, b0, W1, b1, ...]`` ordering of :attr:`FeedforwardNet.params`.
    """
    _, acts = net.forward_cached(batch)
    return net.backward_cached(acts, upstream_grad)


@dataclass
class AdamState:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0.0 or self.learning_rate <= 0.0:
            raise ValueError("learning_rate and epsilon must be positive")


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    The moment buffers are created lazily on the first call. Returns
    ``params`` for convenience.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ShapeError("optimizer state does not match parameter shapes")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step_size = state.learning_rate / (1.0 - b1**t)
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step_size * m / (np.sqrt(v / bc2) + state.epsilon)
    return params
