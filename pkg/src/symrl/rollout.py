"""On-policy data collection, GAE, and symmetry augmentation of buffers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigurationError, SymrlError
from .numkit import GaussianPolicy, gaussian_logp
from .symmdp import SymmetryGroup

ValuesFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class RolloutBuffer:
    """Flat transitions in (env index, time) order, optionally followed by
    augmented copies.

    Row ``j`` of an augmented block is the image of original row
    ``source[j]`` under transform ``group_tag[j]``.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    logp_old: np.ndarray
    value_old: np.ndarray
    num_envs: int
    horizon: int
    last_obs: np.ndarray
    advantage: np.ndarray | None = None
    return_target: np.ndarray | None = None
    group_tag: np.ndarray | None = None
    source: np.ndarray | None = None
    episode_returns: list[float] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.obs)
        if self.group_tag is None:
            self.group_tag = np.zeros(n, dtype=np.int64)
        if self.source is None:
            self.source = np.arange(n, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def n_original(self) -> int:
        return self.num_envs * self.horizon

    @property
    def n_copies(self) -> int:
        return len(self) // self.n_original

    @property
    def augmented_mask(self) -> np.ndarray:
        return self.group_tag != 0


class Collector:
    """Steps ``num_envs`` environments with a Gaussian policy, carrying
    unfinished episodes over from one ``collect`` call to the next."""

    def __init__(self, env_factory: Callable[[], object], num_envs: int, rng: np.random.Generator):
        if num_envs < 1:
            raise ConfigurationError("num_envs must be >= 1")
        self.envs = [env_factory() for _ in range(num_envs)]
        self.env_rngs = rng.spawn(num_envs)
        self.action_rng = rng.spawn(1)[0]
        self.obs = np.stack([env.reset(r) for env, r in zip(self.envs, self.env_rngs)])
        self.running = np.zeros(num_envs)

    @property
    def num_envs(self) -> int:
        return len(self.envs)

    def collect(self, policy: GaussianPolicy, values_fn: ValuesFn | None, horizon: int,
                reward_scale: float = 1.0) -> RolloutBuffer:
        if horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        n, od, ad = self.num_envs, self.obs.shape[1], policy.act_dim
        obs = np.empty((n, horizon, od))
        actions = np.empty((n, horizon, ad))
        rewards = np.empty((n, horizon))
        dones = np.zeros((n, horizon), dtype=bool)
        logps = np.empty((n, horizon))
        values = np.zeros((n, horizon))
        finished: list[float] = []
        std = np.exp(policy.log_std)
        for t in range(horizon):
            mu = policy.mean(self.obs)
            act = mu + std * self.action_rng.standard_normal(mu.shape)
            obs[:, t] = self.obs
            actions[:, t] = act
            logps[:, t] = gaussian_logp(mu, policy.log_std, act)
            if values_fn is not None:
                values[:, t] = values_fn(self.obs)
            for i, env in enumerate(self.envs):
                try:
                    result = env.step(act[i])
                except SymrlError as exc:
                    raise type(exc)(f"env {i}: {exc}") from exc
                self.running[i] += result.reward
                rewards[i, t] = reward_scale * result.reward
                dones[i, t] = result.done
                if result.done:
                    finished.append(float(self.running[i]))
                    self.running[i] = 0.0
                    self.obs[i] = env.reset(self.env_rngs[i])
                else:
                    self.obs[i] = result.next_obs
        total = n * horizon
        return RolloutBuffer(
            obs=obs.reshape(total, od), actions=actions.reshape(total, ad),
            rewards=rewards.reshape(total), dones=dones.reshape(total),
            logp_old=logps.reshape(total), value_old=values.reshape(total),
            num_envs=n, horizon=horizon, last_obs=self.obs.copy(),
            episode_returns=finished,
        )


def collect(env_factory, policy: GaussianPolicy, num_envs: int, horizon: int, rng: np.random.Generator,
            values_fn: ValuesFn | None = None, reward_scale: float = 1.0) -> RolloutBuffer:
    """One-shot collection from freshly reset environments."""
    return Collector(env_factory, num_envs, rng).collect(policy, values_fn, horizon, reward_scale)


def gae(rewards, values, dones, bootstrap: float, gamma: float, lam: float) -> np.ndarray:
    """Advantages for one environment's time-ordered transitions."""
    T = len(rewards)
    adv = np.zeros(T)
    last = 0.0
    next_value = bootstrap
    for t in range(T - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv


def compute_gae(buffer: RolloutBuffer, values_fn: ValuesFn, gamma: float, lam: float) -> RolloutBuffer:
    """Fill ``advantage`` and ``return_target`` on an un-augmented buffer."""
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ConfigurationError("gamma and lam must lie in [0, 1]")
    if buffer.n_copies != 1:
        raise ConfigurationError("GAE must run before augmentation")
    n, T = buffer.num_envs, buffer.horizon
    rewards = buffer.rewards.reshape(n, T)
    values = buffer.value_old.reshape(n, T)
    dones = buffer.dones.reshape(n, T)
    boot = np.asarray(values_fn(buffer.last_obs), dtype=np.float64).reshape(n)
    adv = np.empty((n, T))
    for i in range(n):
        b = 0.0 if dones[i, -1] else float(boot[i])
        adv[i] = gae(rewards[i], values[i], dones[i], b, gamma, lam)
    adv = adv.reshape(n * T)
    return replace(buffer, advantage=adv, return_target=adv + buffer.value_old)


def augment(buffer: RolloutBuffer, group: SymmetryGroup) -> RolloutBuffer:
    """Append the image of every transition under each non-identity transform.

    Log-probabilities, advantages, return targets, values, rewards and done
    flags are copied from the source transition unchanged.
    """
    if buffer.advantage is None or buffer.return_target is None:
        raise ConfigurationError("compute advantages before augmenting")
    if buffer.n_copies != 1:
        raise ConfigurationError("buffer is already augmented")
    if group.obs_dim != buffer.obs.shape[1] or group.act_dim != buffer.actions.shape[1]:
        raise ConfigurationError("group dimensions do not match the buffer")
    n = len(buffer)
    N = len(group)
    obs = [buffer.obs] + [buffer.obs @ g.state_map.T for g in group.transforms[1:]]
    act = [buffer.actions] + [buffer.actions @ g.action_map.T for g in group.transforms[1:]]

    def tile(x):
        return np.concatenate([x] * N)

    return replace(
        buffer,
        obs=np.concatenate(obs), actions=np.concatenate(act),
        rewards=tile(buffer.rewards), dones=tile(buffer.dones),
        logp_old=tile(buffer.logp_old), value_old=tile(buffer.value_old),
        advantage=tile(buffer.advantage), return_target=tile(buffer.return_target),
        group_tag=np.repeat(np.arange(N, dtype=np.int64), n),
        source=np.tile(np.arange(n, dtype=np.int64), N),
        episode_returns=list(buffer.episode_returns),
    )
