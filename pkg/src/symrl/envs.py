"""Built-in symmetric environments.

``cartpole``
    Swing-up cart-pole driven by a desired cart velocity. Observation
    ``(cart velocity, pole angle, pole angular velocity)``; the cart position is
    internal. Symmetric under negating observation and action.

``planar-reach``
    A damped point mass that must reach a goal on a ring of radius 2.
    Observation ``(position, velocity, goal)``. Symmetric under the Klein
    four-group {identity, reflect-x, reflect-y, rotate-180}.

Dynamics use plain Python floats so that mirrored rollouts are bitwise
mirrors of each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, InputError
from .symmdp import SymmetryGroup, SymmetryTransform


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    group: SymmetryGroup

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if np.any(np.asarray(self.action_low) >= np.asarray(self.action_high)):
            raise ConfigurationError("action bounds must satisfy low < high")


@dataclass(frozen=True)
class StepResult:
    next_obs: np.ndarray
    reward: float
    done: bool


def _check_action(action, dim: int) -> list[float]:
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (dim,):
        raise InputError(f"action must have {dim} entries, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"non-finite action {a}")
    return [float(v) for v in a]


def wrap_angle(theta: float) -> float:
    """Map to (-pi, pi]; exactly odd except at -pi itself."""
    while theta > math.pi:
        theta -= 2.0 * math.pi
    while theta <= -math.pi:
        theta += 2.0 * math.pi
    return theta


def cartpole_group() -> SymmetryGroup:
    return SymmetryGroup((
        SymmetryTransform.identity(3, 1),
        SymmetryTransform.signed([-1, -1, -1], [-1], "mirror"),
    ))


class CartPole:
    dt = 0.02
    tau = 0.1          # cart velocity lag (s)
    gravity = 9.81
    pole_length = 0.6
    max_speed = 5.0    # bound on the commanded cart velocity
    horizon = 200
    reset_noise = 0.05

    def __init__(self):
        self.group = cartpole_group()
        bound = np.array([self.max_speed])
        self.spec = EnvSpec(3, 1, -bound, bound, self.horizon, self.group)
        self.x = self.v = self.theta = self.theta_dot = 0.0
        self.t = 0

    def observe(self) -> np.ndarray:
        return np.array([self.v, self.theta, self.theta_dot])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        side = 1.0 if rng.random() < 0.5 else -1.0
        self.x = self.v = self.theta_dot = 0.0
        self.theta = side * (math.pi - rng.uniform(0.0, self.reset_noise))
        self.t = 0
        return self.observe()

    def step(self, action) -> StepResult:
        (a,) = _check_action(action, 1)
        a = min(max(a, -self.max_speed), self.max_speed)
        accel = (a - self.v) / self.tau
        theta_acc = (self.gravity * math.sin(self.theta) - accel * math.cos(self.theta)) / self.pole_length
        self.v += accel * self.dt
        self.x += self.v * self.dt
        self.theta_dot += theta_acc * self.dt
        self.theta = wrap_angle(self.theta + self.theta_dot * self.dt)
        self.t += 1
        return StepResult(self.observe(), -abs(self.theta), self.t >= self.horizon)

    def get_state(self) -> np.ndarray:
        return np.array([self.x, self.v, self.theta, self.theta_dot])

    def set_state(self, state) -> None:
        """Test hook: place the system in ``(x, v, theta, theta_dot)``."""
        self.x, self.v, self.theta, self.theta_dot = (float(s) for s in state)
        self.theta = wrap_angle(self.theta)
        self.t = 0

    def lift(self, g: SymmetryTransform) -> np.ndarray:
        # cart position transforms like cart velocity
        m = np.zeros((4, 4))
        m[0, 0] = g.state_map[0, 0]
        m[1:, 1:] = g.state_map
        return m

    def near_branch(self, state) -> bool:
        return abs(state[2]) > math.pi - 1e-6

    def sample_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.spec.action_low, self.spec.action_high)


def planar_reach_group() -> SymmetryGroup:
    fx = [-1, 1]
    fy = [1, -1]
    return SymmetryGroup((
        SymmetryTransform.identity(6, 2),
        SymmetryTransform.signed(fx * 3, fx, "reflect-x"),
        SymmetryTransform.signed(fy * 3, fy, "reflect-y"),
        SymmetryTransform.signed([-1] * 6, [-1, -1], "rotate-180"),
    ))


class PlanarReach:
    dt = 0.05
    drag = 0.1
    max_speed = 2.0
    goal_radius = 2.0
    half_width = 4.0
    horizon = 150

    def __init__(self):
        self.group = planar_reach_group()
        self.spec = EnvSpec(6, 2, -np.ones(2), np.ones(2), self.horizon, self.group)
        self.state = [0.0] * 6   # px, py, vx, vy, gx, gy
        self.t = 0

    def observe(self) -> np.ndarray:
        return np.array(self.state)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        phi = rng.uniform(0.0, 2.0 * math.pi)
        self.state = [0.0, 0.0, 0.0, 0.0,
                      self.goal_radius * math.cos(phi), self.goal_radius * math.sin(phi)]
        self.t = 0
        return self.observe()

    def step(self, action) -> StepResult:
        ax, ay = (min(max(v, -1.0), 1.0) for v in _check_action(action, 2))
        px, py, vx, vy, gx, gy = self.state
        vx += (ax - self.drag * vx) * self.dt
        vy += (ay - self.drag * vy) * self.dt
        speed = math.hypot(vx, vy)
        if speed > self.max_speed:
            vx *= self.max_speed / speed
            vy *= self.max_speed / speed
        h = self.half_width
        px = min(max(px + vx * self.dt, -h), h)
        py = min(max(py + vy * self.dt, -h), h)
        self.state = [px, py, vx, vy, gx, gy]
        self.t += 1
        reward = -math.hypot(px - gx, py - gy) * self.dt
        return StepResult(self.observe(), reward, self.t >= self.horizon)

    def get_state(self) -> np.ndarray:
        return self.observe()

    def set_state(self, state) -> None:
        """Test hook: place the system in ``(p, vel, goal)``."""
        self.state = [float(s) for s in state]
        self.t = 0

    def lift(self, g: SymmetryTransform) -> np.ndarray:
        return np.array(g.state_map)

    def near_branch(self, state) -> bool:
        return False

    def sample_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.spec.action_low, self.spec.action_high)


ENVIRONMENTS: dict[str, Callable[[], object]] = {
    "cartpole": CartPole,
    "planar-reach": PlanarReach,
}


def make_env(env_id: str):
    try:
        return ENVIRONMENTS[env_id]()
    except KeyError:
        raise ConfigurationError(
            f"unknown environment {env_id!r}; choose from {sorted(ENVIRONMENTS)}"
        ) from None
