from datetime import timedelta

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=50,
    deadline=timedelta(seconds=30),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_trajectory(rng, T=8, state_dim=3, action_dim=2, with_rtg=False,
                    costs=None):
    from cdt.data import Trajectory, returns_to_go

    traj = Trajectory(
        states=rng.normal(size=(T, state_dim)),
        actions=rng.uniform(-1, 1, size=(T, action_dim)),
        rewards=rng.normal(size=T),
        costs=rng.integers(0, 2, size=T).astype(float) if costs is None
        else np.asarray(costs, dtype=float),
    )
    return returns_to_go(traj) if with_rtg else traj


def dataset_from_points(points):
    """Tiny single-step trajectories whose episodic returns equal the points.

    points: iterable of (reward_return, cost_return).
    """
    from cdt.data import Trajectory, TrajectoryDataset

    trajs = [
        Trajectory(states=[[0.0]], actions=[[0.0]], rewards=[r], costs=[c])
        for r, c in points
    ]
    return TrajectoryDataset(trajs)
