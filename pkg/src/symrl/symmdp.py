"""Symmetry transforms over state/action spaces and empirical checks that an
environment is invariant under them."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, UnsupportedEnvironmentError


@dataclass(frozen=True)
class SymmetryTransform:
    """A paired (state map, action map); both are square matrices."""

    state_map: np.ndarray
    action_map: np.ndarray
    name: str = ""

    def __post_init__(self):
        for label, m in (("state_map", self.state_map), ("action_map", self.action_map)):
            m = np.asarray(m, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ConfigurationError(f"{label} must be square, got shape {m.shape}")
            m.setflags(write=False)
            object.__setattr__(self, label, m)

    @property
    def obs_dim(self) -> int:
        return self.state_map.shape[0]

    @property
    def act_dim(self) -> int:
        return self.action_map.shape[0]

    @classmethod
    def identity(cls, obs_dim: int, act_dim: int) -> "SymmetryTransform":
        return cls(np.eye(obs_dim), np.eye(act_dim), "identity")

    @classmethod
    def signed(cls, state_signs: Sequence[float], action_signs: Sequence[float], name: str = "") -> "SymmetryTransform":
        return cls(np.diag(np.asarray(state_signs, float)), np.diag(np.asarray(action_signs, float)), name)


def apply_state(g: SymmetryTransform, s) -> np.ndarray:
    """``L_g s`` for a single state or a batch of row states."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != g.obs_dim:
        raise ConfigurationError(f"state has {s.shape[-1]} entries, transform expects {g.obs_dim}")
    return s @ g.state_map.T


def apply_action(g: SymmetryTransform, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != g.act_dim:
        raise ConfigurationError(f"action has {a.shape[-1]} entries, transform expects {g.act_dim}")
    return a @ g.action_map.T


def compose(g1: SymmetryTransform, g2: SymmetryTransform) -> SymmetryTransform:
    """The transform that applies ``g2`` first, then ``g1``."""
    if g1.obs_dim != g2.obs_dim or g1.act_dim != g2.act_dim:
        raise ConfigurationError("cannot compose transforms of different dimensions")
    name = f"{g1.name}*{g2.name}" if g1.name and g2.name else ""
    return SymmetryTransform(g1.state_map @ g2.state_map, g1.action_map @ g2.action_map, name)


def same_transform(g1: SymmetryTransform, g2: SymmetryTransform, tol: float = 1e-12) -> bool:
    return (g1.state_map.shape == g2.state_map.shape and g1.action_map.shape == g2.action_map.shape
            and np.max(np.abs(g1.state_map - g2.state_map)) <= tol
            and np.max(np.abs(g1.action_map - g2.action_map)) <= tol)


@dataclass(frozen=True)
class SymmetryGroup:
    transforms: tuple[SymmetryTransform, ...]

    def __post_init__(self):
        transforms = tuple(self.transforms)
        if not transforms:
            raise ConfigurationError("a symmetry group needs at least one transform")
        dims = {(g.obs_dim, g.act_dim) for g in transforms}
        if len(dims) != 1:
            raise ConfigurationError(f"transforms disagree on dimensions: {sorted(dims)}")
        object.__setattr__(self, "transforms", transforms)

    def __len__(self) -> int:
        return len(self.transforms)

    def __iter__(self):
        return iter(self.transforms)

    def __getitem__(self, i: int) -> SymmetryTransform:
        return self.transforms[i]

    @property
    def obs_dim(self) -> int:
        return self.transforms[0].obs_dim

    @property
    def act_dim(self) -> int:
        return self.transforms[0].act_dim

    @property
    def names(self) -> list[str]:
        return [g.name or f"g{i}" for i, g in enumerate(self.transforms)]

    def state_maps(self) -> np.ndarray:
        """Stacked ``(N, obs_dim, obs_dim)`` array of state maps."""
        return np.stack([g.state_map for g in self.transforms])

    def action_maps(self) -> np.ndarray:
        return np.stack([g.action_map for g in self.transforms])

    def replace(self, index: int, g: SymmetryTransform) -> "SymmetryGroup":
        items = list(self.transforms)
        items[index] = g
        return SymmetryGroup(tuple(items))

    @classmethod
    def trivial(cls, obs_dim: int, act_dim: int) -> "SymmetryGroup":
        return cls((SymmetryTransform.identity(obs_dim, act_dim),))


@dataclass
class CheckReport:
    """Named pass/fail checks with an optional measured violation each."""

    title: str
    checks: list[tuple[str, bool, float]] = field(default_factory=list)

    def add(self, name: str, ok: bool, violation: float = 0.0) -> None:
        self.checks.append((name, bool(ok), float(violation)))

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def failed(self) -> list[str]:
        return [name for name, ok, _ in self.checks if not ok]

    def violation(self, name: str) -> float:
        for n, _, v in self.checks:
            if n == name:
                return v
        raise KeyError(name)

    def to_text(self) -> str:
        lines = [f"{self.title}: {'PASS' if self.passed else 'FAIL'}"]
        for name, ok, v in self.checks:
            lines.append(f"  [{'ok' if ok else 'FAIL'}] {name}  violation={v:.3e}")
        return "\n".join(lines)

    def to_kv(self, prefix: str = "") -> str:
        lines = [f"{prefix}passed={int(self.passed)}"]
        for name, ok, v in self.checks:
            lines.append(f"{prefix}{name}.passed={int(ok)}")
            lines.append(f"{prefix}{name}.violation={v!r}")
        return "\n".join(lines)


def _is_identity(g: SymmetryTransform, tol: float) -> float:
    return max(np.max(np.abs(g.state_map - np.eye(g.obs_dim))),
               np.max(np.abs(g.action_map - np.eye(g.act_dim))))


def verify_group(group: SymmetryGroup, tol: float = 1e-9) -> CheckReport:
    """Identity first, every map invertible, closure under composition."""
    if tol <= 0:
        raise ConfigurationError("tol must be > 0")
    report = CheckReport("group")
    dev = _is_identity(group[0], tol)
    report.add("identity_first", dev <= tol, dev)

    worst_cond = 0.0
    for g in group:
        for m in (g.state_map, g.action_map):
            sv = np.linalg.svd(m, compute_uv=False)
            worst_cond = max(worst_cond, np.inf if sv[-1] <= tol else sv[0] / sv[-1])
    report.add("invertible", np.isfinite(worst_cond), 0.0 if np.isfinite(worst_cond) else np.inf)

    worst = 0.0
    for a, b in itertools.product(group, repeat=2):
        prod = compose(a, b)
        gap = min(max(np.max(np.abs(prod.state_map - c.state_map)),
                      np.max(np.abs(prod.action_map - c.action_map))) for c in group)
        worst = max(worst, gap)
    report.add("closure", worst <= tol, worst)
    return report


class SymmetricEnv(Protocol):
    """What the verifier needs from an environment."""

    group: SymmetryGroup

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...
    def step(self, action): ...
    def get_state(self) -> np.ndarray: ...
    def set_state(self, state) -> None: ...
    def lift(self, g: SymmetryTransform) -> np.ndarray: ...
    def sample_action(self, rng: np.random.Generator) -> np.ndarray: ...
    def near_branch(self, state) -> bool: ...


def sample_reachable_states(env, num_samples: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Internal states visited by a uniform-random policy, skipping states the
    environment flags as sitting on a branch point."""
    states: list[np.ndarray] = []
    env.reset(rng)
    while len(states) < num_samples:
        state = env.get_state()
        if not env.near_branch(state):
            states.append(state)
        result = env.step(env.sample_action(rng))
        if result.done:
            env.reset(rng)
    return states


def verify_mdp_symmetry(env, group: SymmetryGroup, num_samples: int = 1000, tol: float = 1e-9,
                        rng: np.random.Generator | None = None) -> CheckReport:
    """Check reward, transition and termination invariance on sampled (s, a).

    For every non-identity ``g``: ``r(L s, K a) == r(s, a)``,
    ``step(L s, K a).next_obs == L step(s, a).next_obs`` and the done flags
    agree, all within ``tol`` in the max norm.
    """
    for attr in ("set_state", "get_state", "lift"):
        if not callable(getattr(env, attr, None)):
            raise UnsupportedEnvironmentError(f"environment has no {attr}() hook")
    if num_samples < 1:
        raise ConfigurationError("num_samples must be >= 1")
    if group.obs_dim != env.spec.obs_dim or group.act_dim != env.spec.act_dim:
        raise ConfigurationError("group dimensions do not match the environment")
    rng = rng if rng is not None else np.random.default_rng(0)
    states = sample_reachable_states(env, num_samples, rng)
    actions = [env.sample_action(rng) for _ in states]

    report = CheckReport("mdp-symmetry")
    for i, g in enumerate(group):
        if i == 0:
            continue
        lifted = env.lift(g)
        reward_gap = dyn_gap = 0.0
        done_mismatch = 0
        for s, a in zip(states, actions):
            env.set_state(s)
            ref = env.step(a)
            env.set_state(lifted @ s)
            mirrored = env.step(apply_action(g, a))
            reward_gap = max(reward_gap, abs(mirrored.reward - ref.reward))
            dyn_gap = max(dyn_gap, float(np.max(np.abs(mirrored.next_obs - apply_state(g, ref.next_obs)))))
            done_mismatch += int(mirrored.done != ref.done)
        name = group.names[i]
        report.add(f"{name}.reward", reward_gap <= tol, reward_gap)
        report.add(f"{name}.dynamics", dyn_gap <= tol, dyn_gap)
        report.add(f"{name}.done", done_mismatch == 0, float(done_mismatch))
    return report
