"""Offline safe RL toolchain: datasets, frontier math, augmentation, policy."""

__version__ = "0.1.0"

from .data import (MetricConfig, Trajectory, TrajectoryDataset,
                   episodic_returns, load_dataset, normalize_cost,
                   normalize_reward, returns_to_go, save_dataset,
                   with_returns_to_go)
from .frontier import (FrontierReport, GridSpec, UndefinedFrontierError,
                       density_filter, epsilon_reducible, frontier_report,
                       grid_filter, ipf, normalized_epsilon, pareto_set, pf, rf)
from .augment import (AugmentConfig, TargetPair, associate_argmax,
                      associate_sampled, augment, relabel, sample_target_pairs)
from .envs import CircleSpec, PointEnv, PointState, RunSpec, StepResult, make_env
from .collect import PidState, ScriptedPolicy, collect, pid_lambda_update, scripted_action
from .model import CdtConfig, CdtModel, GaussianAction, TokenWindow, preset
from .training import TrainConfig, sample_batch, train
from .evaluation import (EvalAggregate, RolloutRecord, SweepResult, evaluate,
                         rollout, sweep_target_cost, sweep_target_reward)

__all__ = [
    "MetricConfig", "Trajectory", "TrajectoryDataset", "episodic_returns",
    "load_dataset", "normalize_cost", "normalize_reward", "returns_to_go",
    "save_dataset", "with_returns_to_go",
    "FrontierReport", "GridSpec", "UndefinedFrontierError", "density_filter",
    "epsilon_reducible", "frontier_report", "grid_filter", "ipf",
    "normalized_epsilon", "pareto_set", "pf", "rf",
    "AugmentConfig", "TargetPair", "associate_argmax", "associate_sampled",
    "augment", "relabel", "sample_target_pairs",
    "CircleSpec", "PointEnv", "PointState", "RunSpec", "StepResult", "make_env",
    "PidState", "ScriptedPolicy", "collect", "pid_lambda_update", "scripted_action",
    "CdtConfig", "CdtModel", "GaussianAction", "TokenWindow", "preset",
    "TrainConfig", "sample_batch", "train",
    "EvalAggregate", "RolloutRecord", "SweepResult", "evaluate", "rollout",
    "sweep_target_cost", "sweep_target_reward",
]
