"""Trajectory containers, episodic returns, normalized metrics, and NDJSON storage.

A trajectory holds aligned per-step sequences (states, actions, rewards, costs)
plus optional return-to-go channels. Datasets are immutable after construction
and cache episodic (reward, cost) return points for frontier analysis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_NAME = "trajectory-ndjson"
FORMAT_VERSION = 1

# Relative tolerance for the suffix-sum consistency check on stored RTG channels.
RTG_CONSISTENCY_RTOL = 1e-9


class DatasetFormatError(ValueError):
    """An on-disk dataset file violates the trajectory schema."""


def _readonly(x, dtype=np.float64) -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode of aligned per-step data.

    ``rtg_reward[t]`` / ``rtg_cost[t]`` are the suffix sums of rewards / costs
    from step t to the end. For augmented trajectories the RTG channels are
    authoritative: they have been shifted to a relabeled target pair and no
    longer tie to the per-step sums at the final step.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    rtg_reward: np.ndarray | None = None
    rtg_cost: np.ndarray | None = None
    is_augmented: bool = False

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "states", _readonly(self.states))
        set_(self, "actions", _readonly(self.actions))
        set_(self, "rewards", _readonly(self.rewards))
        set_(self, "costs", _readonly(self.costs))
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValueError(
                f"states/actions must be 2-d (T, dim); got shapes "
                f"{self.states.shape} and {self.actions.shape}"
            )
        if self.rewards.ndim != 1 or self.costs.ndim != 1:
            raise ValueError("rewards/costs must be 1-d sequences")
        T = self.states.shape[0]
        if T < 1:
            raise ValueError("trajectory must contain at least one step")
        for name in ("actions", "rewards", "costs"):
            if getattr(self, name).shape[0] != T:
                raise ValueError(
                    f"length mismatch: states has {T} steps, {name} has "
                    f"{getattr(self, name).shape[0]}"
                )
        for name in ("states", "actions", "rewards", "costs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if np.any(self.costs < 0):
            raise ValueError("costs must be non-negative")

        for name in ("rtg_reward", "rtg_cost"):
            chan = getattr(self, name)
            if chan is None:
                continue
            chan = _readonly(chan)
            set_(self, name, chan)
            if chan.shape != (T,):
                raise ValueError(f"{name} must have shape ({T},), got {chan.shape}")
            if not np.all(np.isfinite(chan)):
                raise ValueError(f"non-finite values in {name}")
        if (self.rtg_reward is None) != (self.rtg_cost is None):
            raise ValueError("rtg_reward and rtg_cost must be supplied together")

        if self.rtg_reward is not None and not self.is_augmented:
            self._check_suffix_consistency("rtg_reward", self.rewards)
            self._check_suffix_consistency("rtg_cost", self.costs)

    def _check_suffix_consistency(self, name: str, per_step: np.ndarray) -> None:
        chan = getattr(self, name)
        scale = max(1.0, float(np.max(np.abs(chan))))
        diffs = chan[:-1] - chan[1:]
        if not np.allclose(diffs, per_step[:-1], rtol=RTG_CONSISTENCY_RTOL,
                           atol=RTG_CONSISTENCY_RTOL * scale):
            raise ValueError(f"{name} is not a suffix sum of its per-step channel")
        if not math.isclose(float(chan[-1]), float(per_step[-1]),
                            rel_tol=RTG_CONSISTENCY_RTOL,
                            abs_tol=RTG_CONSISTENCY_RTOL * scale):
            raise ValueError(f"{name}[-1] does not equal the final per-step value")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def has_rtg(self) -> bool:
        return self.rtg_reward is not None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        if self.is_augmented != other.is_augmented or self.has_rtg != other.has_rtg:
            return False
        for name in ("states", "actions", "rewards", "costs"):
            if not np.array_equal(getattr(self, name), getattr(other, name)):
                return False
        if self.has_rtg:
            if not np.array_equal(self.rtg_reward, other.rtg_reward):
                return False
            if not np.array_equal(self.rtg_cost, other.rtg_cost):
                return False
        return True


class TrajectoryDataset:
    """Ordered, immutable collection of trajectories with cached return points."""

    def __init__(self, trajectories):
        self._trajectories = tuple(trajectories)
        if self._trajectories:
            self._return_points = _readonly(
                [episodic_returns(t) for t in self._trajectories]
            )
        else:
            self._return_points = _readonly(np.empty((0, 2)))

    @property
    def trajectories(self) -> tuple[Trajectory, ...]:
        return self._trajectories

    @property
    def return_points(self) -> np.ndarray:
        """(n, 2) array of episodic (reward return, cost return) pairs."""
        return self._return_points

    @property
    def reward_returns(self) -> np.ndarray:
        return self._return_points[:, 0]

    @property
    def cost_returns(self) -> np.ndarray:
        return self._return_points[:, 1]

    def __len__(self) -> int:
        return len(self._trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self._trajectories[i]

    def __iter__(self):
        return iter(self._trajectories)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return self._trajectories == other._trajectories

    def subset(self, indices) -> "TrajectoryDataset":
        return TrajectoryDataset(self._trajectories[i] for i in indices)

    def extended(self, extra) -> "TrajectoryDataset":
        return TrajectoryDataset(list(self._trajectories) + list(extra))


@dataclass(frozen=True)
class MetricConfig:
    """Normalization constants: cost threshold and dataset reward extrema."""

    kappa: float = 10.0
    eps_stability: float = 1e-6
    r_min: float = 0.0
    r_max: float = 1.0

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.eps_stability <= 0:
            raise ValueError("eps_stability must be positive")
        if self.r_max < self.r_min:
            raise ValueError("r_max must be at least r_min")

    @classmethod
    def from_dataset(cls, ds: TrajectoryDataset, kappa: float = 10.0,
                     eps_stability: float = 1e-6) -> "MetricConfig":
        if len(ds) == 0:
            raise ValueError("cannot derive reward extrema from an empty dataset")
        rr = ds.reward_returns
        return cls(kappa=kappa, eps_stability=eps_stability,
                   r_min=float(rr.min()), r_max=float(rr.max()))


def episodic_returns(traj: Trajectory) -> tuple[float, float]:
    """Episodic (reward return, cost return): the per-step sums."""
    return float(np.sum(traj.rewards)), float(np.sum(traj.costs))


def returns_to_go(traj: Trajectory, overwrite: bool = False) -> Trajectory:
    """Fill the RTG channels with suffix sums of rewards and costs."""
    if traj.has_rtg and not overwrite:
        raise ValueError("rtg channels already present; pass overwrite=True to recompute")
    rtg_r = np.cumsum(traj.rewards[::-1])[::-1]
    rtg_c = np.cumsum(traj.costs[::-1])[::-1]
    return Trajectory(
        states=traj.states,
        actions=traj.actions,
        rewards=traj.rewards,
        costs=traj.costs,
        rtg_reward=rtg_r,
        rtg_cost=rtg_c,
        is_augmented=traj.is_augmented,
    )


def with_returns_to_go(ds: TrajectoryDataset) -> TrajectoryDataset:
    """Dataset with RTG channels filled wherever they are missing."""
    return TrajectoryDataset(
        t if t.has_rtg else returns_to_go(t) for t in ds
    )


def normalize_reward(reward_return: float, cfg: MetricConfig) -> float:
    """Scale a reward return to roughly [0, 100] against the dataset extrema.

    Deliberately not clamped: evaluated policies may beat the best trajectory
    in the dataset.
    """
    span = cfg.r_max - cfg.r_min
    if span == 0:
        raise ValueError(
            "reward extrema are degenerate (r_min == r_max); dataset is uninformative"
        )
    return (reward_return - cfg.r_min) / span * 100.0


def normalize_cost(cost_return: float, cfg: MetricConfig) -> float:
    """Ratio of a cost return to the (stabilized) cost threshold."""
    return cost_return / (cfg.kappa + cfg.eps_stability)


def _traj_to_record(traj: Trajectory) -> dict:
    rec = {
        "observations": traj.states.tolist(),
        "actions": traj.actions.tolist(),
        "rewards": traj.rewards.tolist(),
        "costs": traj.costs.tolist(),
    }
    if traj.has_rtg:
        rec["rtg_rewards"] = traj.rtg_reward.tolist()
        rec["rtg_costs"] = traj.rtg_cost.tolist()
    if traj.is_augmented:
        rec["augmented"] = True
    return rec


def _record_to_traj(rec: dict) -> Trajectory:
    for key in ("observations", "actions", "rewards", "costs"):
        if key not in rec:
            raise ValueError(f"missing required key {key!r}")
    has_rtg = "rtg_rewards" in rec or "rtg_costs" in rec
    return Trajectory(
        states=rec["observations"],
        actions=rec["actions"],
        rewards=rec["rewards"],
        costs=rec["costs"],
        rtg_reward=rec.get("rtg_rewards") if has_rtg else None,
        rtg_cost=rec.get("rtg_costs") if has_rtg else None,
        is_augmented=bool(rec.get("augmented", False)),
    )


def save_dataset(ds: TrajectoryDataset, path) -> None:
    """Write a dataset as NDJSON: a header line then one trajectory per line."""
    path = Path(path)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "count": len(ds)}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for traj in ds:
            fh.write(json.dumps(_traj_to_record(traj)) + "\n")


def load_dataset(path) -> TrajectoryDataset:
    """Load an NDJSON dataset, rejecting malformed records with their index."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text:
        raise DatasetFormatError(f"{path}: empty file (missing header line)")
    if not text.endswith("\n"):
        raise DatasetFormatError(f"{path}: missing required trailing newline")
    lines = text.splitlines()
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid header line: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported format version {header.get('version')!r}"
        )

    trajectories = []
    for i, line in enumerate(lines[1:]):
        if not line.strip():
            raise DatasetFormatError(f"{path}: record {i}: blank line")
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{path}: record {i}: invalid JSON: {exc}") from exc
        if not isinstance(rec, dict):
            raise DatasetFormatError(f"{path}: record {i}: expected a JSON object")
        try:
            trajectories.append(_record_to_traj(rec))
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: record {i}: {exc}") from exc

    count = header.get("count")
    if count is not None and count != len(trajectories):
        raise DatasetFormatError(
            f"{path}: header count {count} does not match {len(trajectories)} records"
        )
    return TrajectoryDataset(trajectories)
