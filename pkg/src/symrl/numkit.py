"""Small numpy kernels: a tanh/relu MLP with hand-written backprop, a diagonal
Gaussian head, Adam, uniform initialisation and a finite-difference checker.

Everything here is a pure function of its arguments. Batched inputs are
row-major: an array of shape ``(batch, features)``; 1-D inputs are treated as
a batch of one and returned 1-D.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)

ACTIVATIONS = ("tanh", "relu")
INIT_RULES = ("uniform", "fan_in")


@dataclass
class MlpParams:
    """Weights ``(n_out, n_in)`` and biases ``(n_out,)`` for every layer.

    The last layer is linear, or ``output_bound * tanh(.)`` when
    ``output_bound > 0``.
    """

    layer_sizes: tuple[int, ...]
    activation: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_bound: float = 0.0

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ConfigurationError(f"bad layer sizes {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        self.output_bound = float(self.output_bound)
        if not (self.output_bound >= 0 and math.isfinite(self.output_bound)):
            raise ConfigurationError(f"output_bound must be finite and >= 0, got {self.output_bound}")
        pairs = list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        if len(self.weights) != len(pairs) or len(self.biases) != len(pairs):
            raise ConfigurationError("layer count does not match layer_sizes")
        for i, ((n_in, n_out), w, b) in enumerate(zip(pairs, self.weights, self.biases)):
            if w.shape != (n_out, n_in) or b.shape != (n_out,):
                raise ConfigurationError(
                    f"layer {i}: expected W{(n_out, n_in)} b{(n_out,)}, "
                    f"got W{w.shape} b{b.shape}"
                )

    @property
    def n_params(self) -> int:
        return sum((n_in + 1) * n_out for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ConfigurationError(f"flat vector has shape {vec.shape}, need ({self.n_params},)")
        weights, biases = [], []
        pos = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            weights.append(vec[pos:pos + n_in * n_out].reshape(n_out, n_in).copy())
            pos += n_in * n_out
            biases.append(vec[pos:pos + n_out].copy())
            pos += n_out
        return MlpParams(self.layer_sizes, self.activation, weights, biases, self.output_bound)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], activation: str = "tanh", output_bound: float = 0.0) -> "MlpParams":
        pairs = list(zip(layer_sizes[:-1], layer_sizes[1:]))
        return cls(tuple(layer_sizes), activation, [np.zeros((o, i)) for i, o in pairs],
                   [np.zeros(o) for _, o in pairs], output_bound)

    def zeros_like(self) -> "MlpParams":
        return self.with_flat(np.zeros(self.n_params))


def init_uniform(layer_sizes: Sequence[int], scale: float, rng: np.random.Generator,
                 activation: str = "tanh", rule: str = "uniform", output_bound: float = 0.0) -> MlpParams:
    """Draw every weight and bias i.i.d. from Uniform(-b, b).

    ``rule="uniform"`` uses ``b = scale`` in every layer; ``rule="fan_in"``
    uses ``b = scale / sqrt(n_in)`` per layer, so wide layers start small.
    """
    if scale < 0:
        raise ConfigurationError(f"init scale must be >= 0, got {scale}")
    if rule not in INIT_RULES:
        raise ConfigurationError(f"unknown init rule {rule!r}; choose from {INIT_RULES}")
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        b = scale if rule == "uniform" else scale / math.sqrt(n_in)
        weights.append(rng.uniform(-b, b, size=(n_out, n_in)) + 0.0)
        biases.append(rng.uniform(-b, b, size=n_out) + 0.0)
    return MlpParams(tuple(layer_sizes), activation, weights, biases, output_bound)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ConfigurationError(f"input must be 1-D or 2-D, got shape {x.shape}")
    return x, False


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each layer
    hidden: list[np.ndarray] = field(default_factory=list)   # post-activation of hidden layers
    squashed: np.ndarray | None = None                       # tanh of the last layer when bounded
    squeeze: bool = False


def mlp_forward_cache(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    h, squeeze = _as_batch(x)
    if h.shape[1] != params.layer_sizes[0]:
        raise ConfigurationError(
            f"input has {h.shape[1]} features, network expects {params.layer_sizes[0]}"
        )
    cache = ForwardCache(squeeze=squeeze)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        h = h @ w.T + b
        if i < last:
            h = _activate(h, params.activation)
            cache.hidden.append(h)
    if params.output_bound > 0:
        cache.squashed = np.tanh(h)
        h = params.output_bound * cache.squashed
    return (h[0] if squeeze else h), cache


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    return mlp_forward_cache(params, x)[0]


def mlp_backward(params: MlpParams, cache: ForwardCache, grad_out) -> tuple[MlpParams, np.ndarray]:
    """Reverse-mode pass. Returns (gradient w.r.t. params, gradient w.r.t. input)."""
    g, _ = _as_batch(grad_out)
    if params.output_bound > 0:
        g = g * (params.output_bound * (1.0 - cache.squashed * cache.squashed))
    weights, biases = [None] * len(params.weights), [None] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        if i < len(params.weights) - 1:
            h = cache.hidden[i]
            if params.activation == "tanh":
                g = g * (1.0 - h * h)
            else:
                g = g * (h > 0.0)
        gw = g.T @ cache.inputs[i]
        gb = g.sum(axis=0)
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {i}")
        weights[i], biases[i] = gw, gb
        g = g @ params.weights[i]
    grad_in = g[0] if cache.squeeze else g
    return MlpParams(params.layer_sizes, params.activation, weights, biases, params.output_bound), grad_in


def loss_gradient(params: MlpParams, x, output_loss: Callable[[np.ndarray], tuple[float, np.ndarray]]):
    """Value and parameter gradient of ``output_loss(mlp(x))``.

    ``output_loss`` maps the network output to ``(value, d value / d output)``.
    """
    y, cache = mlp_forward_cache(params, x)
    value, dy = output_loss(y)
    if not np.isfinite(value):
        raise NumericError("non-finite loss value")
    grad, _ = mlp_backward(params, cache, dy)
    return float(value), grad


def gradient_check(loss: Callable[[np.ndarray], tuple[float, np.ndarray]], params: np.ndarray,
                   epsilon: float = 1e-5) -> float:
    """Max symmetric relative error between the analytic gradient of ``loss``
    and central differences, over all entries of the flat vector ``params``."""
    if not 0.0 < epsilon <= 1e-2:
        raise ConfigurationError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    params = np.array(params, dtype=np.float64)
    _, analytic = loss(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + epsilon
        up, _ = loss(params)
        params[i] = orig - epsilon
        down, _ = loss(params)
        params[i] = orig
        numeric = (up - down) / (2.0 * epsilon)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return worst


def clamp_log_std(log_std) -> np.ndarray:
    return np.clip(np.asarray(log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)


def gaussian_logp(mean, log_std, action) -> np.ndarray | float:
    """Diagonal Gaussian log density. Batched rows give one value per row."""
    mean = np.asarray(mean, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    log_std = clamp_log_std(log_std)
    if mean.shape[-1] != log_std.shape[-1] or action.shape != mean.shape:
        raise ConfigurationError(
            f"shape mismatch: mean {mean.shape}, log_std {log_std.shape}, action {action.shape}"
        )
    z = (action - mean) * np.exp(-log_std)
    out = -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI
    return float(out) if np.ndim(out) == 0 else out


def gaussian_logp_grads(mean, log_std, action) -> tuple[np.ndarray, np.ndarray]:
    """Per-row derivatives of the log density w.r.t. mean and log_std.

    The log_std derivative is zeroed where the clamp is active.
    """
    raw = np.asarray(log_std, dtype=np.float64)
    log_std = clamp_log_std(raw)
    inv_var = np.exp(-2.0 * log_std)
    diff = np.asarray(action) - np.asarray(mean)
    d_mean = diff * inv_var
    inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
    d_log_std = (diff * diff * inv_var - 1.0) * inside
    return d_mean, d_log_std


def gaussian_sample(mean, log_std, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    return mean + np.exp(clamp_log_std(log_std)) * rng.standard_normal(mean.shape)


def gaussian_entropy(log_std) -> float:
    log_std = clamp_log_std(log_std)
    return float(np.sum(log_std) + 0.5 * log_std.shape[-1] * (1.0 + LOG_2PI))


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ConfigurationError(
            f"adam shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be > 0, got {lr}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


@dataclass
class GaussianPolicy:
    """MLP mean with a state-independent log standard deviation."""

    mean_net: MlpParams
    log_std: np.ndarray

    def __post_init__(self):
        self.log_std = clamp_log_std(self.log_std)
        if self.log_std.shape != (self.act_dim,):
            raise ConfigurationError(f"log_std must have shape ({self.act_dim},)")

    @classmethod
    def create(cls, layer_sizes: Sequence[int], scale: float, rng: np.random.Generator,
               activation: str = "tanh", log_std_init: float = 0.0, rule: str = "uniform",
               output_bound: float = 0.0) -> "GaussianPolicy":
        net = init_uniform(layer_sizes, scale, rng, activation, rule, output_bound)
        return cls(net, np.full(net.layer_sizes[-1], float(log_std_init)))

    @property
    def obs_dim(self) -> int:
        return self.mean_net.layer_sizes[0]

    @property
    def act_dim(self) -> int:
        return self.mean_net.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return self.mean_net.n_params + self.act_dim

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mean_net.flat(), self.log_std])

    def with_flat(self, vec: np.ndarray) -> "GaussianPolicy":
        vec = np.asarray(vec, dtype=np.float64)
        n = self.mean_net.n_params
        if vec.shape != (self.n_params,):
            raise ConfigurationError(f"flat vector has shape {vec.shape}, need ({self.n_params},)")
        return GaussianPolicy(self.mean_net.with_flat(vec[:n]), vec[n:].copy())

    def mean(self, obs) -> np.ndarray:
        return mlp_forward(self.mean_net, obs)

    def log_prob(self, obs, actions) -> np.ndarray | float:
        return gaussian_logp(self.mean(obs), self.log_std, actions)

    def sample(self, obs, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | float]:
        mu = self.mean(obs)
        action = gaussian_sample(mu, self.log_std, rng)
        return action, gaussian_logp(mu, self.log_std, action)
