"""Measurement: symmetry metric, equivalent-goal evaluation, init-scale study."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Callable, Sequence

import numpy as np

from .envs import make_env
from .errors import SymrlError
from .symmdp import SymmetryGroup

CSV_HEADER = ("iter,mean_return,symmetry_metric,mean_aug_logp,surrogate,"
              "value_loss,entropy,mirror,total,wall_time_s")


@dataclass
class MetricsRecord:
    iter: int
    mean_return: float
    symmetry_metric: float
    mean_aug_logp: float
    surrogate: float
    value_loss: float
    entropy: float
    mirror: float
    total: float
    wall_time_s: float

    def csv_row(self, wall_time: bool = True) -> str:
        values = [getattr(self, f.name) for f in fields(self)]
        if not wall_time:
            values[-1] = 0.0
        return ",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in values)

    @classmethod
    def from_csv_row(cls, row: dict) -> "MetricsRecord":
        return cls(int(row["iter"]), *(float(row[f.name]) for f in fields(cls)[1:]))


def symmetry_metric(policy, states, group: SymmetryGroup) -> float:
    """Mean over states and transforms of ``|K_g mu(s) - mu(L_g s)|^2``."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if len(states) == 0:
        raise ValueError("symmetry_metric needs at least one state")
    mu = policy.mean(states)
    per_g = []
    for g in group:
        diff = mu @ g.action_map.T - policy.mean(states @ g.state_map.T)
        per_g.append(np.sum(diff * diff) / len(states))
    return float(sum(per_g) / len(group))


class SymmetrizedPolicy:
    """Group average ``mean(s) = 1/N sum_g K_g^-1 mu(L_g s)``.

    Exactly equivariant: the per-component sums use ``math.fsum`` so that
    permuting the group terms cannot change the rounding.
    """

    def __init__(self, policy, group: SymmetryGroup):
        self.policy = policy
        self.group = group
        self._inverse_actions = [np.linalg.inv(g.action_map) for g in group]

    @property
    def act_dim(self) -> int:
        return self.group.act_dim

    def mean(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        terms = [self.policy.mean(obs @ g.state_map.T) @ k_inv.T
                 for g, k_inv in zip(self.group, self._inverse_actions)]
        stacked = np.stack(terms)            # (N, ..., act_dim)
        flat = stacked.reshape(len(terms), -1)
        out = np.array([math.fsum(col) for col in flat.T]) / len(terms)
        return out.reshape(stacked.shape[1:])


def canonical_start(env_id: str, env, rng: np.random.Generator) -> np.ndarray:
    """Base initial condition whose group orbit forms the equivalent goals.

    Cart-pole: pole hanging on the right side. Planar reach: a random goal.
    """
    env.reset(rng)
    state = env.get_state()
    if env_id == "cartpole":
        state[2] = abs(state[2])
    return state


@dataclass
class GoalEvalReport:
    goal_names: list[str]
    mean_returns: list[float]
    n_runs: int
    returns: np.ndarray          # (goals, runs)

    @property
    def variation(self) -> float:
        m = self.mean_returns
        return max((abs(a - b) for a in m for b in m), default=0.0)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.mean_returns))

    def to_text(self) -> str:
        lines = [f"equivalent-goal evaluation ({self.n_runs} runs per goal)"]
        for name, r in zip(self.goal_names, self.mean_returns):
            lines.append(f"  {name:>12s}  mean return {r: .6f}")
        lines.append(f"  {'variation':>12s}  {self.variation:.6g}")
        return "\n".join(lines)


def run_episode(env, policy, state) -> float:
    """Deterministic (mean-action) episode from an internal state."""
    env.set_state(state)
    obs = env.observe()
    total = 0.0
    while True:
        result = env.step(policy.mean(obs))
        total += result.reward
        if result.done:
            return total
        obs = result.next_obs


def equivalent_goal_eval(env_id: str, policy, group: SymmetryGroup | None = None, n_runs: int = 500,
                         rng: np.random.Generator | None = None,
                         base_condition: Callable | None = None) -> GoalEvalReport:
    """Return per orbit element of the base condition, averaged over runs."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    env = make_env(env_id)
    group = group if group is not None else env.group
    rng = rng if rng is not None else np.random.default_rng(0)
    base_condition = base_condition or (lambda e, r: canonical_start(env_id, e, r))
    lifts = [env.lift(g) for g in group]
    returns = np.empty((len(group), n_runs))
    for run in range(n_runs):
        base = base_condition(env, rng)
        for k, lift in enumerate(lifts):
            returns[k, run] = run_episode(env, policy, lift @ base)
    return GoalEvalReport(group.names, [float(r) for r in returns.mean(axis=1)], n_runs, returns)


@dataclass
class InitScaleRow:
    scale: float
    seed: int
    initial_symmetry_metric: float
    final_return: float
    final_symmetry_metric: float


def final_value(values: Sequence[float], window: int = 10) -> float:
    """Mean of the last ``window`` finite entries."""
    tail = [v for v in values if np.isfinite(v)][-window:]
    return float(np.mean(tail)) if tail else math.nan


def init_scale_study(template, scales: Sequence[float], seeds: Sequence[int],
                     train_fn: Callable | None = None) -> list[InitScaleRow]:
    """Train once per (scale, seed) and tabulate symmetry before and after.

    Every run draws all weights and biases from Uniform(-scale, scale)
    (``init_rule="uniform"``), whatever rule the template uses.
    """
    if list(scales) != sorted(scales) or any(s < 0 for s in scales):
        raise ValueError("scales must be non-negative and sorted ascending")
    if train_fn is None:
        from .trainer import train as train_fn
    rows = []
    for scale in scales:
        for seed in seeds:
            config = replace(template, init_scale=float(scale), seed=int(seed), init_rule="uniform")
            try:
                records = train_fn(config).records
            except SymrlError as exc:
                raise type(exc)(f"scale={scale} seed={seed}: {exc}") from exc
            rows.append(InitScaleRow(
                float(scale), int(seed), records[0].symmetry_metric,
                final_value([r.mean_return for r in records]),
                final_value([r.symmetry_metric for r in records]),
            ))
    return rows
