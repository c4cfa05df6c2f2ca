"""Scripted data collection with risk-parameterized controllers.

The collectors stand in for a full constrained policy-gradient learner: a
proportional controller tracks the task (goal-directed running, or circling),
and a ``risk`` knob in [0, 1] schedules periodic excursions past the
constraint (overspeeding in Run, widening the allowed band in Circle) so
that datasets cover a spread of cost returns.

The PID dual-variable update used by constrained policy-gradient trainers is
kept here as a standalone, closed-form utility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Trajectory, TrajectoryDataset
from .envs import CircleSpec, PointEnv, PointState, RunSpec

# Run excursion schedule: slow sinusoid, one cycle per RISK_PERIOD steps.
RISK_PERIOD = 60
# Run: commanded speed = v_lim * (RUN_SPEED_BASE + RUN_SPEED_SPAN * risk * phase).
RUN_SPEED_BASE = 0.85
RUN_SPEED_SPAN = 0.6
# Circle: controller keeps |x| within x_lim * (BAND_LO + BAND_RISE * risk),
# always below the true limit; wider bands hug the circle more and earn more.
BAND_LO = 0.60
BAND_RISE = 0.10
# Risky circle episodes widen the tracked band well past the limit for a few
# short scheduled pulses, trading bounded violations for extra reward; the
# top reward returns are only reachable through these excursions.
CIRCLE_MAX_PULSES = 2
PULSE_LEN = 6
PULSE_BAND = 1.45
# Tangential cruise speed relative to the circle radius.
CIRCLE_SPEED = 1.0
# Brake-authority fraction reserved when capping outward velocity at the band.
BRAKE_FRACTION = 0.8
# Minimum pull-back speed once the band is exceeded.
PULLBACK_MIN_SPEED = 1.0


@dataclass(frozen=True)
class PidState:
    """Feedback-control state for the dual-variable update."""

    kp: float
    ki: float
    kd: float
    integral: float = 0.0
    prev_error: float = 0.0

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0 or self.kd < 0:
            raise ValueError("PID gains must be non-negative")
        if self.integral < 0:
            raise ValueError("integral accumulator is clamped non-negative")


def pid_lambda_update(pid: PidState, error: float) -> tuple[float, PidState]:
    """One dual-variable update from a constraint-violation error signal.

    lambda = kp * e + ki * max(0, sum of errors) + kd * max(0, e - e_prev),
    with the integral accumulator clamped at zero from below.
    """
    integral = max(0.0, pid.integral + error)
    lam = (
        pid.kp * error
        + pid.ki * integral
        + pid.kd * max(0.0, error - pid.prev_error)
    )
    new_state = PidState(kp=pid.kp, ki=pid.ki, kd=pid.kd,
                         integral=integral, prev_error=error)
    return lam, new_state


@dataclass(frozen=True)
class ScriptedPolicy:
    """Risk-parameterized proportional controller.

    gains = (velocity-tracking gain, position/pursuit gain). The velocity gain
    of 1 gives deadbeat tracking of the commanded velocity (up to the
    acceleration limit); zero gains command zero acceleration.
    """

    risk: float
    gains: tuple[float, float] = (1.0, 1.5)
    noise_scale: float = 0.0

    def __post_init__(self):
        if not 0 <= self.risk <= 1:
            raise ValueError("risk must lie in [0, 1]")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")


def _risk_phase(step_index: int) -> float:
    """Slow oscillation in [0, 1] gating the risky excursions."""
    return 0.5 * (1.0 + math.sin(2.0 * math.pi * step_index / RISK_PERIOD))


def _track_velocity(v_des: np.ndarray, state: PointState, spec, gain: float,
                    ) -> np.ndarray:
    # Inverts v' = (1-damping) v + a dt; gain 1 reaches v_des in one step
    # when the acceleration limit allows.
    return gain * (v_des - (1.0 - spec.damping) * state.velocity) / spec.dt


def _run_velocity(policy: ScriptedPolicy, state: PointState,
                  spec: RunSpec) -> np.ndarray:
    to_goal = np.array(spec.goal) - state.position
    dist = float(np.hypot(*to_goal))
    if dist < 1e-9:
        return np.zeros(2)
    speed = spec.v_lim * (
        RUN_SPEED_BASE
        + RUN_SPEED_SPAN * policy.risk * _risk_phase(state.step_index)
    )
    return to_goal / dist * speed


def _in_pulse(step_index: int, episode_len: int, n_pulses: int) -> bool:
    if n_pulses <= 0:
        return False
    spacing = episode_len // (n_pulses + 1)
    if spacing == 0:
        return False
    for k in range(1, n_pulses + 1):
        if k * spacing <= step_index < k * spacing + PULSE_LEN:
            return True
    return False


def _circle_velocity(policy: ScriptedPolicy, state: PointState,
                     spec: CircleSpec) -> np.ndarray:
    _, k_pos = policy.gains
    pos = state.position
    r = float(np.hypot(*pos))
    if r < 1e-9:
        radial = np.array([1.0, 0.0])
    else:
        radial = pos / r
    tangent = np.array([-radial[1], radial[0]])
    direction = tangent + k_pos * (spec.radius - r) * radial
    norm = float(np.hypot(*direction))
    if norm < 1e-9:
        return np.zeros(2)
    v_des = direction / norm * (CIRCLE_SPEED * spec.radius)

    n_pulses = round(policy.risk * CIRCLE_MAX_PULSES)
    if _in_pulse(state.step_index, spec.episode_len, n_pulses):
        band = spec.x_lim * PULSE_BAND
    else:
        band = spec.x_lim * (BAND_LO + BAND_RISE * policy.risk)
    slack = band - abs(state.x)
    out_sign = 1.0 if state.x >= 0 else -1.0
    if slack <= 0:
        # beyond the allowed band: pull back inside at a guaranteed pace
        pull = max(k_pos * (-slack), PULLBACK_MIN_SPEED)
        v_des[0] = -out_sign * pull
    else:
        # cap the outward velocity by the brake-limited approach profile
        max_out = math.sqrt(2.0 * BRAKE_FRACTION * spec.accel_max * slack)
        if v_des[0] * out_sign > max_out:
            v_des[0] = out_sign * max_out
    return v_des


def scripted_action(policy: ScriptedPolicy, state: PointState, spec,
                    rng: np.random.Generator) -> np.ndarray:
    """Controller action for one step, with optional Gaussian exploration noise."""
    if isinstance(spec, RunSpec):
        v_des = _run_velocity(policy, state, spec)
    elif isinstance(spec, CircleSpec):
        v_des = _circle_velocity(policy, state, spec)
    else:
        raise TypeError(f"unknown environment spec {type(spec).__name__}")
    action = _track_velocity(v_des, state, spec, policy.gains[0])
    if policy.noise_scale > 0:
        action = action + rng.normal(0.0, policy.noise_scale, size=2)
    return np.clip(action, -spec.accel_max, spec.accel_max)


def rollout_scripted(env: PointEnv, policy: ScriptedPolicy,
                     rng: np.random.Generator) -> Trajectory:
    """Run one full scripted episode and package it as a trajectory."""
    state = env.reset(rng)
    states, actions, rewards, costs = [], [], [], []
    for _ in range(env.episode_len):
        action = scripted_action(policy, state, env.spec, rng)
        res = env.step(state, action)
        states.append(state.observation())
        actions.append(action)
        rewards.append(res.reward)
        costs.append(res.cost)
        state = res.next_state
    return Trajectory(states=states, actions=actions, rewards=rewards, costs=costs)


def collect(env: PointEnv, risk_grid, episodes_per_risk: int, seed: int, *,
            gains: tuple[float, float] = (1.0, 1.5),
            noise_scale: float = 0.05) -> TrajectoryDataset:
    """Collect episodes for each risk level with per-episode derived seeds.

    The RNG stream for episode j of risk level i derives from
    (seed, i, j), so collection is reproducible and order-independent.
    """
    risk_grid = list(risk_grid)
    if not risk_grid:
        raise ValueError("risk grid must be non-empty")
    trajectories = []
    for i, risk in enumerate(risk_grid):
        policy = ScriptedPolicy(risk=float(risk), gains=gains,
                                noise_scale=noise_scale)
        for j in range(episodes_per_risk):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i, j]))
            trajectories.append(rollout_scripted(env, policy, rng))
    return TrajectoryDataset(trajectories)
