"""Returns-conditioned rollouts, aggregation, and target sweeps.

A rollout conditions the policy on an initial (reward, cost) target pair and
subtracts realized signals from the targets each step. The cost target is
floored at zero by default, keeping the conditioning token in-distribution;
pass floor_cost_target=False for the unfloored variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MetricConfig, normalize_cost, normalize_reward
from .model import CdtModel, TokenWindow


@dataclass
class RolloutRecord:
    """One evaluated episode: realized returns plus full per-step traces."""

    target_reward: float
    target_cost: float
    seed: tuple[int, ...]
    mode: str
    realized_reward_return: float
    realized_cost_return: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    target_reward_trace: np.ndarray
    target_cost_trace: np.ndarray


def _as_seed_tuple(seed) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def rollout(model: CdtModel, env, target_reward: float, target_cost: float,
            mode: str = "sample", seed=0,
            floor_cost_target: bool = True) -> RolloutRecord:
    """Run one episode of exactly env.episode_len steps.

    The token sequence grows as the episode proceeds; predictions use the
    last K timesteps. Targets update as R <- R - r and C <- C - c (the cost
    side floored at zero unless disabled).
    """
    cfg = model.config
    if env.state_dim != cfg.state_dim or env.action_dim != cfg.action_dim:
        raise ValueError(
            f"env dims ({env.state_dim}, {env.action_dim}) do not match model "
            f"({cfg.state_dim}, {cfg.action_dim})"
        )
    seed_tuple = _as_seed_tuple(seed)
    rng = np.random.default_rng(np.random.SeedSequence(list(seed_tuple)))
    state = env.reset(rng)

    k = cfg.context_len
    rtg_r = [float(target_reward)]
    rtg_c = [float(target_cost)]
    obs = [state.observation()]
    acts: list[np.ndarray] = []
    rewards: list[float] = []
    costs: list[float] = []
    tgt_r_trace: list[float] = []
    tgt_c_trace: list[float] = []

    for t in range(env.episode_len):
        lo = max(0, t + 1 - k)
        step_actions = acts[lo:] + [np.zeros(cfg.action_dim)]
        window = TokenWindow.from_steps(
            k,
            rtg_reward=rtg_r[lo:],
            rtg_cost=rtg_c[lo:],
            states=obs[lo:],
            actions=step_actions,
            timesteps=np.arange(lo, t + 1),
        )
        action = model.predict(window, mode=mode, rng=rng)
        if not np.all(np.isfinite(action)):
            raise RuntimeError(
                f"non-finite action {action} at step {t} "
                f"(targets R={rtg_r[-1]}, C={rtg_c[-1]})"
            )
        tgt_r_trace.append(rtg_r[-1])
        tgt_c_trace.append(rtg_c[-1])
        res = env.step(state, action)
        state = res.next_state
        acts.append(np.asarray(action, dtype=np.float64))
        rewards.append(res.reward)
        costs.append(res.cost)
        next_r = rtg_r[-1] - res.reward
        next_c = rtg_c[-1] - res.cost
        if floor_cost_target:
            next_c = max(0.0, next_c)
        rtg_r.append(next_r)
        rtg_c.append(next_c)
        obs.append(state.observation())

    rewards_arr = np.array(rewards)
    costs_arr = np.array(costs)
    return RolloutRecord(
        target_reward=float(target_reward),
        target_cost=float(target_cost),
        seed=seed_tuple,
        mode=mode,
        realized_reward_return=float(rewards_arr.sum()),
        realized_cost_return=float(costs_arr.sum()),
        states=np.array(obs),
        actions=np.array(acts),
        rewards=rewards_arr,
        costs=costs_arr,
        target_reward_trace=np.array(tgt_r_trace),
        target_cost_trace=np.array(tgt_c_trace),
    )


@dataclass
class EvalAggregate:
    """Cross-seed aggregate of normalized metrics (per-seed episode means)."""

    norm_reward_mean: float
    norm_reward_std: float
    norm_cost_mean: float
    norm_cost_std: float
    n_episodes: int
    records: list[RolloutRecord] = field(default_factory=list)


def evaluate(model: CdtModel, env, target_reward: float, target_cost: float,
             episodes: int, seeds, metric_cfg: MetricConfig,
             mode: str = "sample", floor_cost_target: bool = True,
             keep_records: bool = True) -> EvalAggregate:
    """Per-seed episode means of normalized metrics, then cross-seed mean/std.

    Episode j under seed s uses the derived stream (s, j), so aggregation is
    independent of evaluation order.
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    per_seed_reward = []
    per_seed_cost = []
    records: list[RolloutRecord] = []
    for s in seeds:
        nr, nc = [], []
        for ep in range(episodes):
            rec = rollout(model, env, target_reward, target_cost, mode=mode,
                          seed=(s, ep), floor_cost_target=floor_cost_target)
            nr.append(normalize_reward(rec.realized_reward_return, metric_cfg))
            nc.append(normalize_cost(rec.realized_cost_return, metric_cfg))
            if keep_records:
                records.append(rec)
        per_seed_reward.append(float(np.mean(nr)))
        per_seed_cost.append(float(np.mean(nc)))
    return EvalAggregate(
        norm_reward_mean=float(np.mean(per_seed_reward)),
        norm_reward_std=float(np.std(per_seed_reward)),
        norm_cost_mean=float(np.mean(per_seed_cost)),
        norm_cost_std=float(np.std(per_seed_cost)),
        n_episodes=episodes * len(seeds),
        records=records,
    )


@dataclass
class SweepResult:
    """Evaluation aggregates along a grid of conditioning targets."""

    axis: str  # "target_cost" or "target_reward"
    values: list[float]
    rows: list[EvalAggregate]
    metadata: dict

    def to_csv(self) -> str:
        lines = ["axis_value,norm_reward_mean,norm_reward_std,"
                 "norm_cost_mean,norm_cost_std,n"]
        for v, row in zip(self.values, self.rows):
            lines.append(
                f"{v!r},{row.norm_reward_mean!r},{row.norm_reward_std!r},"
                f"{row.norm_cost_mean!r},{row.norm_cost_std!r},{row.n_episodes}"
            )
        return "\n".join(lines) + "\n"


def sweep_target_cost(model: CdtModel, env, cost_grid, target_reward: float,
                      episodes: int, seeds, metric_cfg: MetricConfig,
                      mode: str = "sample",
                      floor_cost_target: bool = True) -> SweepResult:
    """Fix the target reward and evaluate across a grid of target costs."""
    cost_grid = [float(c) for c in cost_grid]
    if not cost_grid:
        raise ValueError("cost grid must be non-empty")
    rows = [
        evaluate(model, env, target_reward, c, episodes, seeds, metric_cfg,
                 mode=mode, floor_cost_target=floor_cost_target,
                 keep_records=False)
        for c in cost_grid
    ]
    return SweepResult(
        axis="target_cost",
        values=cost_grid,
        rows=rows,
        metadata={
            "fixed_target_reward": float(target_reward),
            "episodes": episodes,
            "seeds": [int(s) for s in seeds],
            "mode": mode,
            "floor_cost_target": floor_cost_target,
            "kappa": metric_cfg.kappa,
        },
    )


def sweep_target_reward(model: CdtModel, env, reward_grid, target_cost: float,
                        episodes: int, seeds, metric_cfg: MetricConfig,
                        mode: str = "sample",
                        floor_cost_target: bool = True) -> SweepResult:
    """Fix the target cost and evaluate across a grid of target rewards."""
    reward_grid = [float(r) for r in reward_grid]
    if not reward_grid:
        raise ValueError("reward grid must be non-empty")
    rows = [
        evaluate(model, env, r, target_cost, episodes, seeds, metric_cfg,
                 mode=mode, floor_cost_target=floor_cost_target,
                 keep_records=False)
        for r in reward_grid
    ]
    return SweepResult(
        axis="target_reward",
        values=reward_grid,
        rows=rows,
        metadata={
            "fixed_target_cost": float(target_cost),
            "episodes": episodes,
            "seeds": [int(s) for s in seeds],
            "mode": mode,
            "floor_cost_target": floor_cost_target,
            "kappa": metric_cfg.kappa,
        },
    )
