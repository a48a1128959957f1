"""The training loop: collect, estimate advantages, augment, update."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envs import make_env
from .errors import ConfigurationError
from .evalkit import MetricsRecord, symmetry_metric
from .learner import TrainConfig, naive_augment_logp, update
from .numkit import AdamState, GaussianPolicy, MlpParams, init_uniform, mlp_forward
from .rollout import Collector, augment, compute_gae


def build_networks(config: TrainConfig, rng: np.random.Generator) -> tuple[GaussianPolicy, MlpParams]:
    spec = make_env(config.env_id).spec
    hidden = list(config.hidden_sizes)
    bound = 0.0
    if config.squash_mean:
        bound = float(spec.action_high[0])
        if not (np.all(spec.action_high == bound) and np.all(spec.action_low == -bound)):
            raise ConfigurationError("squash_mean needs a symmetric action box with equal bounds")
    policy = GaussianPolicy.create([spec.obs_dim, *hidden, spec.act_dim], config.init_scale, rng,
                                   config.activation, log_std_init=config.log_std_init,
                                   rule=config.init_rule, output_bound=bound)
    value_net = init_uniform([spec.obs_dim, *hidden, 1], config.init_scale, rng, config.activation,
                             config.init_rule)
    return policy, value_net


@dataclass
class TrainResult:
    config: TrainConfig
    policy: GaussianPolicy
    value_net: MlpParams
    records: list[MetricsRecord] = field(default_factory=list)


def train(config: TrainConfig, on_record: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    """Run ``config.total_iters`` iterations and return the final networks.

    The per-iteration ``symmetry_metric`` is measured for the policy that
    collected the iteration's data, on those freshly collected states.
    ``mean_aug_logp`` is the mean stored log-probability of the augmented
    rows (the denominators of their importance ratios); NaN without
    augmentation.
    """
    init_ss, env_ss, shuffle_ss = np.random.SeedSequence(config.seed).spawn(3)
    policy, value_net = build_networks(config, np.random.default_rng(init_ss))
    group = make_env(config.env_id).group
    collector = Collector(lambda: make_env(config.env_id), config.num_envs, np.random.default_rng(env_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    policy_adam = AdamState.zeros(policy.n_params)
    value_adam = AdamState.zeros(value_net.n_params)

    def values_fn(obs):
        return mlp_forward(value_net, obs)[:, 0]

    result = TrainResult(config, policy, value_net)
    last_return = math.nan
    start = time.perf_counter()
    for it in range(config.total_iters):
        buffer = collector.collect(policy, values_fn, config.horizon, config.reward_scale)
        buffer = compute_gae(buffer, values_fn, config.gamma, config.lam)
        sym = symmetry_metric(policy, buffer.obs, group)
        aug_logp = math.nan
        if config.uses_augmentation:
            buffer = augment(buffer, group)
            if config.naive_aug_ablation:
                buffer = naive_augment_logp(policy, buffer)
            aug_logp = float(np.mean(buffer.logp_old[buffer.augmented_mask]))
            if not config.naive_aug_ablation:
                # corrected rule: denominators are the sources' own log-probs
                source_mean = float(np.mean(buffer.logp_old[:buffer.n_original]))
                assert abs(aug_logp - source_mean) <= 1e-9 * max(1.0, abs(source_mean))
        out = update(policy, value_net, buffer, config, policy_adam, value_adam, group, shuffle_rng,
                     config.lr_at(it))
        policy, value_net = out.policy, out.value_net
        policy_adam, value_adam = out.policy_adam, out.value_adam
        if buffer.episode_returns:
            last_return = float(np.mean(buffer.episode_returns))
        parts = [float(np.mean([getattr(e, name) for e in out.epochs]))
                 for name in ("surrogate", "value_loss", "entropy", "mirror", "total")]
        record = MetricsRecord(it, last_return, sym, aug_logp, *parts,
                               wall_time_s=time.perf_counter() - start)
        result.records.append(record)
        if on_record is not None:
            on_record(record)
    result.policy, result.value_net = policy, value_net
    return result
