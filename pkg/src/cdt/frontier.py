"""Frontier functions over episodic return points and dataset filters.

pf / ipf give the maximum reward return among trajectories whose cost return
is below / above a threshold; rf is the per-cost-level maximum and is only
defined on cost values that actually occur. Their gap characterizes how
tempting the unsafe part of a dataset is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import TrajectoryDataset

RF_DEFAULT_TOL = 1e-9


class UndefinedFrontierError(ValueError):
    """No trajectory satisfies the requested cost-threshold constraint."""


def _points(ds: TrajectoryDataset) -> tuple[np.ndarray, np.ndarray]:
    if len(ds) == 0:
        raise UndefinedFrontierError("frontier functions need a non-empty dataset")
    pts = ds.return_points
    return pts[:, 0], pts[:, 1]


def pf(ds: TrajectoryDataset, kappa: float) -> float:
    """Maximum reward return among trajectories with cost return <= kappa."""
    rewards, costs = _points(ds)
    feasible = costs <= kappa
    if not feasible.any():
        raise UndefinedFrontierError(
            f"no trajectory with cost return <= {kappa} (min cost {costs.min()})"
        )
    return float(rewards[feasible].max())


def ipf(ds: TrajectoryDataset, kappa: float) -> float:
    """Maximum reward return among trajectories with cost return >= kappa."""
    rewards, costs = _points(ds)
    feasible = costs >= kappa
    if not feasible.any():
        raise UndefinedFrontierError(
            f"no trajectory with cost return >= {kappa} (max cost {costs.max()})"
        )
    return float(rewards[feasible].max())


def rf(ds: TrajectoryDataset, kappa: float, tol: float = RF_DEFAULT_TOL) -> float:
    """Maximum reward return among trajectories with cost return == kappa.

    Equality is taken with an absolute tolerance because stored cost returns
    are floats; rf is undefined away from cost values present in the dataset.
    """
    rewards, costs = _points(ds)
    at_level = np.abs(costs - kappa) <= tol
    if not at_level.any():
        raise UndefinedFrontierError(
            f"cost return {kappa} does not occur in the dataset (tol {tol})"
        )
    return float(rewards[at_level].max())


def epsilon_reducible(ds: TrajectoryDataset, kappa: float) -> float:
    """Gap pf - ipf at a threshold.

    Negative values mean the dataset contains higher-reward trajectories beyond
    the threshold, i.e. greedy reward maximization is tempted into unsafe data.
    """
    return pf(ds, kappa) - ipf(ds, kappa)


def normalized_epsilon(ds: TrajectoryDataset, kappa: float) -> float:
    """epsilon_reducible scaled by the maximum reward return in the dataset."""
    rewards, _ = _points(ds)
    r_best = float(rewards.max())
    if r_best == 0:
        raise ValueError("maximum reward return is zero; normalized gap undefined")
    return epsilon_reducible(ds, kappa) / r_best


def pareto_set(ds: TrajectoryDataset) -> list[int]:
    """Indices of non-dominated trajectories, sorted ascending by cost return.

    A point is dominated when some other point has cost <= its cost and a
    strictly higher reward; co-located duplicates are all retained.
    """
    rewards, costs = _points(ds)
    order = np.argsort(costs, kind="stable")
    keep: list[int] = []
    best = -math.inf
    i = 0
    n = len(order)
    while i < n:
        j = i
        level = costs[order[i]]
        while j < n and costs[order[j]] == level:
            j += 1
        group = order[i:j]
        group_best = float(rewards[group].max())
        best = max(best, group_best)
        keep.extend(int(g) for g in group if rewards[g] == best)
        i = j
    return keep


@dataclass(frozen=True)
class GridSpec:
    """Half-open 2D binning of the (cost, reward) return plane."""

    cost_bin_width: float
    reward_bin_width: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.cost_bin_width <= 0 or self.reward_bin_width <= 0:
            raise ValueError("bin widths must be positive")

    def cell_of(self, reward: float, cost: float) -> tuple[int, int]:
        """Cell key (cost index, reward index); cells are [k*w, (k+1)*w)."""
        c0, r0 = self.origin
        return (
            int(math.floor((cost - c0) / self.cost_bin_width)),
            int(math.floor((reward - r0) / self.reward_bin_width)),
        )


def _cells(ds: TrajectoryDataset, spec: GridSpec) -> dict[tuple[int, int], list[int]]:
    cells: dict[tuple[int, int], list[int]] = {}
    for i, (r, c) in enumerate(ds.return_points):
        cells.setdefault(spec.cell_of(float(r), float(c)), []).append(i)
    return cells


def grid_filter(ds: TrajectoryDataset, spec: GridSpec, max_per_cell: int,
                rng: np.random.Generator) -> TrajectoryDataset:
    """Down-sample: keep at most max_per_cell trajectories per (cost, reward) cell.

    Survivors are chosen uniformly without replacement; input order is preserved.
    Cells are visited in sorted key order so a fixed seed fixes the outcome.
    """
    if max_per_cell < 1:
        raise ValueError("max_per_cell must be at least 1")
    keep: set[int] = set()
    cells = _cells(ds, spec)
    for key in sorted(cells):
        members = cells[key]
        if len(members) <= max_per_cell:
            keep.update(members)
        else:
            keep.update(int(i) for i in rng.choice(members, size=max_per_cell,
                                                   replace=False))
    return ds.subset(i for i in range(len(ds)) if i in keep)


def density_filter(ds: TrajectoryDataset, spec: GridSpec,
                   min_count: int) -> TrajectoryDataset:
    """Drop outliers: remove all trajectories in cells with fewer than min_count."""
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    cells = _cells(ds, spec)
    keep = {i for members in cells.values() if len(members) >= min_count
            for i in members}
    return ds.subset(i for i in range(len(ds)) if i in keep)


@dataclass(frozen=True)
class FrontierReport:
    """Frontier evaluations at one threshold; None marks undefined values."""

    kappa: float
    pf: float | None
    ipf: float | None
    rf: float | None
    epsilon: float | None
    pareto_indices: tuple[int, ...]

    def to_dict(self, ds: TrajectoryDataset) -> dict:
        eps_norm = None
        if self.epsilon is not None:
            r_best = float(ds.reward_returns.max())
            eps_norm = self.epsilon / r_best if r_best != 0 else None
        return {
            "kappa": self.kappa,
            "pf": self.pf,
            "ipf": self.ipf,
            "rf": self.rf,
            "epsilon": self.epsilon,
            "normalized_epsilon": eps_norm,
            "pareto": [
                [float(ds.return_points[i, 0]), float(ds.return_points[i, 1])]
                for i in self.pareto_indices
            ],
        }


def frontier_report(ds: TrajectoryDataset, kappa: float,
                    rf_tol: float = RF_DEFAULT_TOL) -> FrontierReport:
    def attempt(fn, *args):
        try:
            return fn(ds, *args)
        except UndefinedFrontierError:
            return None

    pf_v = attempt(pf, kappa)
    ipf_v = attempt(ipf, kappa)
    eps = pf_v - ipf_v if pf_v is not None and ipf_v is not None else None
    return FrontierReport(
        kappa=kappa,
        pf=pf_v,
        ipf=ipf_v,
        rf=attempt(rf, kappa, rf_tol),
        epsilon=eps,
        pareto_indices=tuple(pareto_set(ds)),
    )
