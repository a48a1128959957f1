"""PPO update with optional mirror loss and symmetry augmentation.

Symmetry modes:

* ``none``  plain clipped PPO
* ``loss``  PPO plus ``mirror_weight`` times the mirror loss
* ``aug``   PPO on a buffer augmented with every group image of each sample
* ``both``  augmentation and mirror loss together

Each loss returns ``(value, gradient)`` with the gradient as a flat vector
laid out like ``GaussianPolicy.flat()`` (or ``MlpParams.flat()`` for the
value network).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigurationError, NumericError
from .numkit import (INIT_RULES, AdamState, GaussianPolicy, MlpParams, adam_step, gaussian_entropy,
                     gaussian_logp, gaussian_logp_grads, mlp_backward,
                     mlp_forward_cache)
from .rollout import RolloutBuffer
from .symmdp import SymmetryGroup

SYMMETRY_MODES = ("none", "loss", "aug", "both")
LR_SCHEDULES = ("constant", "linear")


@dataclass(frozen=True)
class TrainConfig:
    env_id: str = "cartpole"
    symmetry_mode: str = "none"
    mirror_weight: float = 1.0
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    lr_schedule: str = "linear"      # linear decays to zero over total_iters
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    epochs_per_iter: int = 10
    minibatch_size: int = 128
    num_envs: int = 16
    horizon: int = 128
    total_iters: int = 300
    init_scale: float = 1.0
    init_rule: str = "fan_in"
    log_std_init: float = 0.0
    squash_mean: bool = False        # policy mean = bound * tanh(.) inside the action box
    seed: int = 0
    naive_aug_ablation: bool = False
    hidden_sizes: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    reward_scale: float = 1.0
    max_grad_norm: float = 0.0       # 0 disables clipping

    def __post_init__(self):
        if self.symmetry_mode not in SYMMETRY_MODES:
            raise ConfigurationError(f"symmetry_mode must be one of {SYMMETRY_MODES}, got {self.symmetry_mode!r}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigurationError("clip_eps must lie in (0, 1)")
        if self.mirror_weight < 0:
            raise ConfigurationError("mirror_weight must be >= 0")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ConfigurationError("gamma and lam must lie in [0, 1]")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.init_rule not in INIT_RULES:
            raise ConfigurationError(f"init_rule must be one of {INIT_RULES}, got {self.init_rule!r}")
        if self.max_grad_norm < 0:
            raise ConfigurationError("max_grad_norm must be >= 0")
        if self.lr <= 0 or self.init_scale < 0 or self.reward_scale <= 0:
            raise ConfigurationError("lr and reward_scale must be > 0, init_scale >= 0")
        for name in ("epochs_per_iter", "minibatch_size", "num_envs", "horizon", "total_iters"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.naive_aug_ablation and self.symmetry_mode not in ("aug", "both"):
            raise ConfigurationError("naive_aug_ablation requires symmetry_mode aug or both")

    def lr_at(self, it: int) -> float:
        """Learning rate for iteration ``it`` (0-based)."""
        if self.lr_schedule == "linear":
            return self.lr * (1.0 - it / self.total_iters)
        return self.lr

    @property
    def uses_augmentation(self) -> bool:
        return self.symmetry_mode in ("aug", "both")

    @property
    def uses_mirror(self) -> bool:
        return self.symmetry_mode in ("loss", "both")

    @property
    def method_label(self) -> str:
        if self.symmetry_mode == "loss":
            return f"loss-{self.mirror_weight:g}"
        if self.symmetry_mode == "both":
            return f"both-{self.mirror_weight:g}"
        return self.symmetry_mode

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


ENV_DEFAULTS = {
    "cartpole": dict(entropy_coef=0.0, total_iters=500, reward_scale=0.02, log_std_init=1.0),
    "planar-reach": dict(entropy_coef=0.003, total_iters=300, reward_scale=1.0, gamma=0.95),
}


def default_config(env_id: str = "cartpole", **overrides) -> TrainConfig:
    if env_id not in ENV_DEFAULTS:
        raise ConfigurationError(f"unknown environment {env_id!r}; choose from {sorted(ENV_DEFAULTS)}")
    return TrainConfig(env_id=env_id, **{**ENV_DEFAULTS[env_id], **overrides})


@dataclass
class LossBreakdown:
    surrogate: float
    value_loss: float
    entropy: float
    mirror: float
    total: float
    mean_aug_logp: float


@dataclass
class Minibatch:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantage: np.ndarray
    return_target: np.ndarray
    group_tag: np.ndarray


def _policy_grad_from_mean(policy: GaussianPolicy, cache, d_mu: np.ndarray, d_log_std: np.ndarray) -> np.ndarray:
    g_net, _ = mlp_backward(policy.mean_net, cache, d_mu)
    return np.concatenate([g_net.flat(), d_log_std])


def ppo_surrogate(policy: GaussianPolicy, mb: Minibatch, clip_eps: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Negated clipped objective, its gradient, and the new log-probabilities.

    For augmented rows the ratio pairs the current density at the transformed
    pair with the stored density of the source pair.
    """
    mu, cache = mlp_forward_cache(policy.mean_net, mb.obs)
    logp = gaussian_logp(mu, policy.log_std, mb.actions)
    gap = logp - mb.logp_old
    with np.errstate(over="ignore"):
        ratio = np.exp(gap)
    if not np.all(np.isfinite(ratio)):
        worst = float(np.max(np.abs(gap)))
        raise NumericError(f"non-finite importance ratio (max |logp_new - logp_old| = {worst:.3g})")
    adv = mb.advantage
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    n = len(adv)
    loss = -float(np.mean(np.minimum(unclipped, clipped)))
    active = unclipped <= clipped
    coeff = -(ratio * adv * active) / n          # d loss / d logp_new
    d_mean, d_log_std = gaussian_logp_grads(mu, policy.log_std, mb.actions)
    grad = _policy_grad_from_mean(policy, cache, coeff[:, None] * d_mean,
                                  (coeff[:, None] * d_log_std).sum(axis=0))
    return loss, grad, logp


def entropy_term(policy: GaussianPolicy) -> tuple[float, np.ndarray]:
    grad = np.zeros(policy.n_params)
    grad[policy.mean_net.n_params:] = 1.0
    return gaussian_entropy(policy.log_std), grad


def mirror_loss(policy: GaussianPolicy, states: np.ndarray, group: SymmetryGroup) -> tuple[float, np.ndarray]:
    """Mean over states and transforms of ``|K_g mu(s) - mu(L_g s)|^2``.

    ``K_g mu(s)`` is a fixed label: no gradient flows through it.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n, N = len(states), len(group)
    inputs = np.concatenate([states @ g.state_map.T for g in group])
    mu_all, cache = mlp_forward_cache(policy.mean_net, inputs)
    base = mu_all[:n]
    labels = np.concatenate([base @ g.action_map.T for g in group])
    diff = mu_all - labels
    loss = float(np.sum(diff * diff)) / (n * N)
    d_mu = 2.0 * diff / (n * N)
    grad = _policy_grad_from_mean(policy, cache, d_mu, np.zeros(policy.act_dim))
    return loss, grad


def value_loss(value_net: MlpParams, obs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    v, cache = mlp_forward_cache(value_net, obs)
    diff = v[:, 0] - targets
    loss = float(np.mean(diff * diff))
    g, _ = mlp_backward(value_net, cache, (2.0 * diff / len(diff))[:, None])
    return loss, g.flat()


def naive_augment_logp(policy_old: GaussianPolicy, buffer: RolloutBuffer) -> RolloutBuffer:
    """Replace the stored log-probability of augmented rows by the rollout
    policy's density at the transformed pair (the unstable variant)."""
    mask = buffer.augmented_mask
    logp = buffer.logp_old.copy()
    if mask.any():
        logp[mask] = policy_old.log_prob(buffer.obs[mask], buffer.actions[mask])
    return replace(buffer, logp_old=logp)


def normalized_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def orbit_minibatches(n_original: int, n_copies: int, minibatch_size: int,
                      rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatch index sets, each holding whole orbits.

    A trailing partial minibatch is dropped.
    """
    per = max(1, minibatch_size // n_copies)
    order = rng.permutation(n_original)
    batches = []
    for start in range(0, n_original - per + 1, per):
        chunk = order[start:start + per]
        batches.append(np.concatenate([chunk + k * n_original for k in range(n_copies)]))
    return batches


@dataclass
class UpdateResult:
    policy: GaussianPolicy
    value_net: MlpParams
    policy_adam: AdamState
    value_adam: AdamState
    epochs: list[LossBreakdown]


def clip_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Rescale ``grad`` so its Euclidean norm is at most ``max_norm``."""
    norm = math.sqrt(float(grad @ grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def update(policy: GaussianPolicy, value_net: MlpParams, buffer: RolloutBuffer, config: TrainConfig,
           policy_adam: AdamState, value_adam: AdamState, group: SymmetryGroup | None,
           rng: np.random.Generator, lr: float | None = None) -> UpdateResult:
    """Run ``epochs_per_iter`` passes of minibatch Adam over the buffer.

    ``lr`` overrides ``config.lr`` (the trainer passes the scheduled rate).
    """
    lr = config.lr if lr is None else lr
    if buffer.advantage is None:
        raise ConfigurationError("buffer has no advantages; run compute_gae first")
    if config.uses_augmentation and buffer.n_copies == 1 and group is not None and len(group) > 1:
        raise ConfigurationError("mode requires an augmented buffer")
    if config.uses_mirror and group is None:
        raise ConfigurationError("mirror loss needs a symmetry group")
    w = config.mirror_weight if config.uses_mirror else 0.0
    adv = normalized_advantages(buffer.advantage)
    theta = policy.flat()
    phi = value_net.flat()
    epochs = []
    for _ in range(config.epochs_per_iter):
        rows = []
        for idx in orbit_minibatches(buffer.n_original, buffer.n_copies, config.minibatch_size, rng):
            mb = Minibatch(buffer.obs[idx], buffer.actions[idx], buffer.logp_old[idx], adv[idx],
                           buffer.return_target[idx], buffer.group_tag[idx])
            surr, g_surr, logp_new = ppo_surrogate(policy, mb, config.clip_eps)
            ent, g_ent = entropy_term(policy)
            if config.uses_mirror:
                mir, g_mir = mirror_loss(policy, mb.obs[mb.group_tag == 0], group)
            else:
                mir, g_mir = 0.0, None
            v_loss, g_val = value_loss(value_net, mb.obs, mb.return_target)
            total = surr + config.value_coef * v_loss - config.entropy_coef * ent + w * mir
            aug = mb.group_tag != 0
            rows.append((surr, v_loss, ent, mir, total,
                         float(np.mean(logp_new[aug])) if aug.any() else math.nan))

            g_pol = g_surr - config.entropy_coef * g_ent
            if g_mir is not None:
                g_pol = g_pol + w * g_mir
            g_val = config.value_coef * g_val
            if config.max_grad_norm > 0:
                g_pol = clip_norm(g_pol, config.max_grad_norm)
                g_val = clip_norm(g_val, config.max_grad_norm)
            theta, policy_adam = adam_step(theta, g_pol, policy_adam, lr)
            phi, value_adam = adam_step(phi, g_val, value_adam, lr)
            policy = policy.with_flat(theta)
            value_net = value_net.with_flat(phi)
        if not rows:
            raise ConfigurationError("minibatch_size larger than the buffer")
        epochs.append(LossBreakdown(*(float(np.mean(col)) for col in zip(*rows))))
    return UpdateResult(policy, value_net, policy_adam, value_adam, epochs)
