"""Dataset augmentation by return relabeling.

Samples (reward, cost) target pairs at or above the achievable frontier,
associates each with a safe maximum-reward trajectory (optionally sampling
its neighborhood with inverse-distance weights), and appends a copy of that
trajectory whose return-to-go channels are shifted so the initial pair equals
the sampled target. Payloads (states and actions) are never modified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Trajectory, TrajectoryDataset, returns_to_go
from .frontier import UndefinedFrontierError, pf

ASSOCIATION_MODES = ("deterministic_argmax", "sampled_neighborhood")

# Fallback neighborhood radius: fraction of the dataset's return-plane span.
DEFAULT_RADIUS_FRACTION = 0.05
# Fallback reward sample ceiling: margin over the best feasible reward.
DEFAULT_R_MAX_MARGIN = 1.25


class TargetBoundError(ValueError):
    """The reward sample ceiling sits below the frontier at a drawn cost."""


@dataclass(frozen=True)
class TargetPair:
    """A sampled conditioning target: desired reward and cost returns."""

    rho: float
    kappa: float


@dataclass(frozen=True)
class AugmentConfig:
    n_samples: int
    r_max_sample: float | None = None
    beta: float = 1.0
    neighborhood_radius: float | None = None
    mode: str = "deterministic_argmax"
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.neighborhood_radius is not None and self.neighborhood_radius < 0:
            raise ValueError("neighborhood_radius must be non-negative")
        if self.mode not in ASSOCIATION_MODES:
            raise ValueError(f"mode must be one of {ASSOCIATION_MODES}")


def default_r_max_sample(ds: TrajectoryDataset,
                         margin: float = DEFAULT_R_MAX_MARGIN) -> float:
    c_max = float(ds.cost_returns.max())
    return margin * pf(ds, c_max)


def default_neighborhood_radius(ds: TrajectoryDataset,
                                fraction: float = DEFAULT_RADIUS_FRACTION) -> float:
    r_span = float(np.ptp(ds.reward_returns))
    c_span = float(np.ptp(ds.cost_returns))
    return fraction * math.hypot(r_span, c_span)


def resolve_config(ds: TrajectoryDataset, cfg: AugmentConfig) -> AugmentConfig:
    """Fill the dataset-dependent defaults (reward ceiling, radius)."""
    r_max = cfg.r_max_sample
    if r_max is None:
        r_max = default_r_max_sample(ds)
    radius = cfg.neighborhood_radius
    if radius is None:
        radius = default_neighborhood_radius(ds)
    return AugmentConfig(
        n_samples=cfg.n_samples, r_max_sample=r_max, beta=cfg.beta,
        neighborhood_radius=radius, mode=cfg.mode, seed=cfg.seed,
    )


def sample_target_pairs(ds: TrajectoryDataset, cfg: AugmentConfig,
                        rng: np.random.Generator) -> list[TargetPair]:
    """Draw n_samples pairs: kappa uniform over the dataset cost range, rho
    uniform between the frontier value at kappa and the reward ceiling."""
    if len(ds) == 0:
        raise ValueError("cannot sample targets from an empty dataset")
    cfg = resolve_config(ds, cfg)
    c_min = float(ds.cost_returns.min())
    c_max = float(ds.cost_returns.max())
    pairs = []
    for i in range(cfg.n_samples):
        kappa = float(rng.uniform(c_min, c_max))
        lower = pf(ds, kappa)
        if cfg.r_max_sample < lower:
            raise TargetBoundError(
                f"sample {i}: reward ceiling {cfg.r_max_sample} is below the "
                f"frontier value {lower} at cost {kappa}"
            )
        pairs.append(TargetPair(rho=float(rng.uniform(lower, cfg.r_max_sample)),
                                kappa=kappa))
    return pairs


def associate_argmax(pair: TargetPair, ds: TrajectoryDataset) -> int:
    """Index of the maximum-reward trajectory with cost <= pair.kappa.

    Ties break toward lower cost, then lower index.
    """
    rewards = ds.reward_returns
    costs = ds.cost_returns
    feasible = np.nonzero(costs <= pair.kappa)[0]
    if feasible.size == 0:
        raise UndefinedFrontierError(
            f"no trajectory with cost return <= {pair.kappa}"
        )
    best_r = rewards[feasible].max()
    candidates = feasible[rewards[feasible] == best_r]
    best_c = costs[candidates].min()
    candidates = candidates[costs[candidates] == best_c]
    return int(candidates.min())


def associate_sampled(pair: TargetPair, ds: TrajectoryDataset,
                      cfg: AugmentConfig, rng: np.random.Generator) -> int:
    """Sample a safe trajectory near the associated frontier point.

    Candidates are trajectories with cost <= kappa within the configured
    return-plane radius of the argmax point; each is drawn with probability
    proportional to 1 / (distance + beta). The frontier point itself is
    always a candidate, so an empty neighborhood falls back to it.
    """
    cfg = resolve_config(ds, cfg)
    anchor = associate_argmax(pair, ds)
    anchor_point = ds.return_points[anchor]
    rewards = ds.reward_returns
    costs = ds.cost_returns
    dist = np.hypot(rewards - anchor_point[0], costs - anchor_point[1])
    candidates = np.nonzero((dist <= cfg.neighborhood_radius)
                            & (costs <= pair.kappa))[0]
    if candidates.size == 0:
        return anchor
    weights = 1.0 / (dist[candidates] + cfg.beta)
    probs = weights / weights.sum()
    return int(rng.choice(candidates, p=probs))


def relabel(src: Trajectory, pair: TargetPair) -> Trajectory:
    """Copy of src whose RTG channels are shifted to start at (rho, kappa).

    States, actions, and per-step channels are untouched; the initial RTG
    entries equal the target pair exactly and per-step RTG increments are
    preserved up to rounding.
    """
    if not src.has_rtg:
        src = returns_to_go(src)
    shift_r = pair.rho - float(src.rtg_reward[0])
    shift_c = pair.kappa - float(src.rtg_cost[0])
    rtg_r = np.concatenate([[pair.rho], src.rtg_reward[1:] + shift_r])
    rtg_c = np.concatenate([[pair.kappa], src.rtg_cost[1:] + shift_c])
    return Trajectory(
        states=src.states.copy(),
        actions=src.actions.copy(),
        rewards=src.rewards.copy(),
        costs=src.costs.copy(),
        rtg_reward=rtg_r,
        rtg_cost=rtg_c,
        is_augmented=True,
    )


@dataclass
class AugmentSummary:
    requested: int
    produced: int
    skipped: int
    associations: list[tuple[float, float, int]]

    def to_dict(self) -> dict:
        return {
            "requested": self.requested,
            "produced": self.produced,
            "skipped": self.skipped,
            "associations": [
                {"rho": r, "kappa": k, "source_index": i}
                for r, k, i in self.associations
            ],
        }


def augment(ds: TrajectoryDataset, cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple[TrajectoryDataset, AugmentSummary]:
    """Append n_samples relabeled trajectories to the dataset.

    Per-sample association failures are skipped and counted rather than
    aborting the run; source trajectories are never modified.
    """
    cfg = resolve_config(ds, cfg)
    pairs = sample_target_pairs(ds, cfg, rng)
    produced: list[Trajectory] = []
    associations: list[tuple[float, float, int]] = []
    skipped = 0
    for pair in pairs:
        try:
            if cfg.mode == "sampled_neighborhood":
                idx = associate_sampled(pair, ds, cfg, rng)
            else:
                idx = associate_argmax(pair, ds)
        except UndefinedFrontierError:
            skipped += 1
            continue
        produced.append(relabel(ds[idx], pair))
        associations.append((pair.rho, pair.kappa, idx))
    summary = AugmentSummary(
        requested=cfg.n_samples,
        produced=len(produced),
        skipped=skipped,
        associations=associations,
    )
    return ds.extended(produced), summary
