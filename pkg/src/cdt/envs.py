"""Point-mass Run and Circle constrained environments.

Both tasks use damped double-integrator kinematics on a 2D plane. Run rewards
progress toward a distant goal and penalizes leaving a lateral band or
speeding; Circle rewards tangential motion near a target radius and penalizes
leaving a vertical band narrower than that radius. Costs are binary per step.

The numeric limits (y_lim, v_lim, x_lim, radius) are artifact defaults, not
published task constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class PointState:
    x: float
    y: float
    vx: float
    vy: float
    step_index: int = 0

    def observation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class _KinematicSpec:
    dt: float = 0.1
    accel_max: float = 1.0
    damping: float = 0.05
    reset_noise: float = 0.05

    def __post_init__(self):
        if self.dt <= 0 or self.accel_max <= 0:
            raise ValueError("dt and accel_max must be positive")
        if not 0 <= self.damping < 1:
            raise ValueError("damping must lie in [0, 1)")
        if self.reset_noise < 0:
            raise ValueError("reset_noise must be non-negative")


@dataclass(frozen=True)
class RunSpec(_KinematicSpec):
    goal: tuple[float, float] = (100.0, 0.0)
    y_lim: float = 1.0
    v_lim: float = 1.5
    episode_len: int = 200

    def __post_init__(self):
        super().__post_init__()
        if self.episode_len < 1:
            raise ValueError("episode_len must be at least 1")
        if self.y_lim <= 0 or self.v_lim <= 0:
            raise ValueError("y_lim and v_lim must be positive")


@dataclass(frozen=True)
class CircleSpec(_KinematicSpec):
    radius: float = 1.0
    x_lim: float = 0.7
    episode_len: int = 300

    def __post_init__(self):
        super().__post_init__()
        if self.episode_len < 1:
            raise ValueError("episode_len must be at least 1")
        if self.radius <= 0 or self.x_lim <= 0:
            raise ValueError("radius and x_lim must be positive")
        if self.x_lim >= self.radius:
            raise ValueError("x_lim must be smaller than the circle radius")


@dataclass(frozen=True)
class StepResult:
    next_state: PointState
    reward: float
    cost: float
    done: bool


def run_reward(prev: PointState, nxt: PointState, spec: RunSpec) -> float:
    """Decrease in distance to the goal over one transition."""
    gx, gy = spec.goal
    return math.hypot(prev.x - gx, prev.y - gy) - math.hypot(nxt.x - gx, nxt.y - gy)


def run_cost(state: PointState, spec: RunSpec) -> float:
    """Binary violation: outside the lateral band or over the speed limit.

    The two indicators are clamped to a single {0,1} signal to match the
    binary per-step cost convention of the stored datasets.
    """
    violations = int(abs(state.y) > spec.y_lim) + int(state.speed > spec.v_lim)
    return float(min(1, violations))


def circle_reward(state: PointState, spec: CircleSpec) -> float:
    """Tangential progress, discounted by distance from the target radius."""
    angular = -state.y * state.vx + state.x * state.vy
    return angular / (1.0 + abs(math.hypot(state.x, state.y) - spec.radius))


def circle_cost(state: PointState, spec: CircleSpec) -> float:
    """Binary violation: |x| strictly beyond the safe band."""
    return float(abs(state.x) > spec.x_lim)


def reset(spec, rng: np.random.Generator) -> PointState:
    """Initial state: at rest near the origin with small positional noise."""
    noise = rng.normal(0.0, spec.reset_noise, size=2) if spec.reset_noise > 0 \
        else np.zeros(2)
    return PointState(x=float(noise[0]), y=float(noise[1]), vx=0.0, vy=0.0,
                      step_index=0)


def step(state: PointState, action, spec) -> StepResult:
    """Advance the damped double integrator one step and score the transition.

    Velocity updates before position (semi-implicit Euler); the action is
    clipped elementwise to the acceleration limit.
    """
    a = np.asarray(action, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite action {a} at step {state.step_index}")
    if state.step_index >= spec.episode_len:
        raise ValueError("episode already finished; reset the environment")
    a = np.clip(a, -spec.accel_max, spec.accel_max)

    vx = (1.0 - spec.damping) * state.vx + a[0] * spec.dt
    vy = (1.0 - spec.damping) * state.vy + a[1] * spec.dt
    nxt = PointState(
        x=state.x + vx * spec.dt,
        y=state.y + vy * spec.dt,
        vx=vx,
        vy=vy,
        step_index=state.step_index + 1,
    )
    if isinstance(spec, RunSpec):
        reward = run_reward(state, nxt, spec)
        cost = run_cost(nxt, spec)
    elif isinstance(spec, CircleSpec):
        reward = circle_reward(nxt, spec)
        cost = circle_cost(nxt, spec)
    else:
        raise TypeError(f"unknown environment spec {type(spec).__name__}")
    return StepResult(next_state=nxt, reward=reward, cost=cost,
                      done=nxt.step_index == spec.episode_len)


@dataclass(frozen=True)
class PointEnv:
    """Value-type environment handle: a task spec plus the observation contract."""

    name: str
    spec: RunSpec | CircleSpec

    state_dim: int = 4
    action_dim: int = 2

    @property
    def action_bound(self) -> float:
        return self.spec.accel_max

    @property
    def episode_len(self) -> int:
        return self.spec.episode_len

    def reset(self, rng: np.random.Generator) -> PointState:
        return reset(self.spec, rng)

    def step(self, state: PointState, action) -> StepResult:
        return step(state, action, self.spec)


ENV_NAMES = ("point-run", "point-circle")


def make_env(name: str, **overrides) -> PointEnv:
    """Build a named environment, applying spec-field overrides."""
    if name == "point-run":
        spec = RunSpec()
    elif name == "point-circle":
        spec = CircleSpec()
    else:
        raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    if overrides:
        if "goal" in overrides:
            overrides["goal"] = tuple(overrides["goal"])
        spec = replace(spec, **overrides)
    return PointEnv(name=name, spec=spec)
