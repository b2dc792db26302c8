"""Dense feed-forward networks with exact backpropagation and Adam.

Every generator and discriminator in the package is an :class:`Mlp`: ReLU
hidden layers and either a sigmoid or an identity output layer. Weight
matrices are stored ``(out, in)`` so a layer computes ``x @ W.T + b``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError

EPS = 1e-7

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("sigmoid", "identity")
INIT_SCHEMES = ("orthogonal", "variance_scaling")


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class Mlp:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("parameter count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expect or b.shape != (expect[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expect}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigurationError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def parameters_equal(self, other: "Mlp") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases))

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        return cls(
            layer_dims=[int(x) for x in d["layer_dims"]],
            weights=[np.asarray(w, dtype=np.float64).reshape(o, i)
                     for w, o, i in zip(d["weights"], d["layer_dims"][1:], d["layer_dims"][:-1])],
            biases=[np.asarray(b, dtype=np.float64) for b in d["biases"]],
            hidden_activation=d.get("hidden_activation", "relu"),
            output_activation=d.get("output_activation", "sigmoid"),
        )


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([w * factor for w in self.weights], [b * factor for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.weights + self.biases)


@dataclass
class AdamState:
    first_moment: Gradients
    second_moment: Gradients
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_mlp(cls, mlp: Mlp, learning_rate: float = 1e-4, beta1: float = 0.9,
                beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        if learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        zeros = lambda: Gradients([np.zeros_like(w) for w in mlp.weights],  # noqa: E731
                                  [np.zeros_like(b) for b in mlp.biases])
        return cls(zeros(), zeros(), 0, learning_rate, beta1, beta2, epsilon)


def init_mlp(layer_dims, scheme: str, rng_seed=None, *, output_activation: str = "sigmoid") -> Mlp:
    """Build a network with zero biases and weights drawn from ``scheme``.

    ``orthogonal`` gives each weight matrix orthonormal columns (or rows, for
    wide matrices) via QR of a Gaussian matrix with sign correction.
    ``variance_scaling`` draws N(0, 1/fan_in) entries.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigurationError(f"invalid layer_dims {list(layer_dims)!r}: need >= 2 positive entries")
    if scheme not in INIT_SCHEMES:
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    rng = as_rng(rng_seed)
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        if scheme == "orthogonal":
            a = rng.standard_normal((max(fan_out, fan_in), min(fan_out, fan_in)))
            q, r = np.linalg.qr(a)
            q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
            w = q if fan_out >= fan_in else q.T
        else:
            w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        weights.append(np.ascontiguousarray(w, dtype=np.float64))
    biases = [np.zeros(d, dtype=np.float64) for d in dims[1:]]
    return Mlp(dims, weights, biases, "relu", output_activation)


def _check_batch(mlp: Mlp, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.input_dim:
        raise ShapeError(f"batch of shape {x.shape} does not match input dim {mlp.input_dim}")
    return x


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cache(mlp: Mlp, x: np.ndarray):
    acts = [x]
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w.T + b
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    if mlp.output_activation == "sigmoid":
        out = np.clip(_sigmoid(h), EPS, 1.0 - EPS)
    else:
        out = h
    return acts, out


def forward(mlp: Mlp, batch) -> np.ndarray:
    """Outputs of shape ``(n_batch, out_dim)``; sigmoid heads are clamped to [EPS, 1-EPS]."""
    return _forward_cache(mlp, _check_batch(mlp, batch))[1]


def bce_loss(predictions, targets, weights=None) -> float:
    """Summed binary cross-entropy ``-sum w*(t log p + (1-t) log(1-p))``."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"{p.size} predictions vs {t.size} targets")
    p = np.clip(p, EPS, 1.0 - EPS)
    per_row = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64).ravel()
        if w.shape != p.shape:
            raise ShapeError(f"{w.size} weights vs {p.size} predictions")
        per_row = per_row * w
    return float(per_row.sum())


def _backward_logits(mlp: Mlp, acts, grad_z: np.ndarray):
    """Propagate a gradient at the final pre-activation back to params and input."""
    n_layers = len(mlp.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    g = grad_z
    for i in range(n_layers - 1, -1, -1):
        gw[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        g = g @ mlp.weights[i]
        if i > 0:
            g = g * (acts[i] > 0.0)
    return Gradients(gw, gb), g


def backward(mlp: Mlp, batch, grad_output) -> tuple[Gradients, np.ndarray]:
    """Vector-Jacobian product: gradient of ``sum(grad_output * forward(batch))``.

    Returns the parameter gradients and the gradient with respect to the
    batch itself (used to chain a discriminator into a generator).
    """
    x = _check_batch(mlp, batch)
    acts, out = _forward_cache(mlp, x)
    g = np.asarray(grad_output, dtype=np.float64).reshape(out.shape)
    if mlp.output_activation == "sigmoid":
        g = g * out * (1.0 - out)
    return _backward_logits(mlp, acts, g)


def bce_logit_grad(mlp: Mlp, out: np.ndarray, targets, sample_weights=None) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    w = 1.0 if sample_weights is None else np.asarray(sample_weights, dtype=np.float64).reshape(out.shape)
    if mlp.output_activation == "sigmoid":
        return w * (out - t)
    return w * (out - t) / (out * (1.0 - out))


def backprop(mlp: Mlp, batch, targets, sample_weights=None) -> Gradients:
    """Exact gradient of ``bce_loss(forward(mlp, batch), targets, sample_weights)``."""
    x = _check_batch(mlp, batch)
    acts, out = _forward_cache(mlp, x)
    if np.asarray(targets).size != out.size:
        raise ShapeError(f"{np.asarray(targets).size} targets for {out.shape[0]} rows")
    if sample_weights is not None and np.asarray(sample_weights).size != out.size:
        raise ShapeError("sample_weights length does not match batch")
    return _backward_logits(mlp, acts, bce_logit_grad(mlp, out, targets, sample_weights))[0]


def bce_with_input_grad(mlp: Mlp, batch, targets):
    """BCE loss of ``mlp`` on ``batch`` and its gradient with respect to the batch."""
    x = _check_batch(mlp, batch)
    acts, out = _forward_cache(mlp, x)
    loss = bce_loss(out, targets)
    _, gx = _backward_logits(mlp, acts, bce_logit_grad(mlp, out, targets))
    return loss, gx


def adam_step(mlp: Mlp, grads: Gradients, state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``mlp`` and ``state``."""
    if not grads.all_finite():
        raise NumericError("non-finite gradient; aborting update")
    if len(grads.weights) != len(mlp.weights):
        raise ShapeError("gradient layer count does not match network")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    params = mlp.weights + mlp.biases
    g_all = grads.weights + grads.biases
    m_all = state.first_moment.weights + state.first_moment.biases
    v_all = state.second_moment.weights + state.second_moment.biases
    for p, g, m, v in zip(params, g_all, m_all, v_all):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.learning_rate:
            p -= state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
