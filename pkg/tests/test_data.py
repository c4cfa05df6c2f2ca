import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdt.data import (DatasetFormatError, MetricConfig, Trajectory,
                      TrajectoryDataset, episodic_returns, load_dataset,
                      normalize_cost, normalize_reward, returns_to_go,
                      save_dataset, with_returns_to_go)

from conftest import make_trajectory

finite_reward = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
reward_lists = st.lists(finite_reward, min_size=1, max_size=40)


def traj_from_channels(rewards, costs):
    T = len(rewards)
    return Trajectory(states=np.zeros((T, 2)), actions=np.zeros((T, 1)),
                      rewards=rewards, costs=costs)


class TestEpisodicReturns:
    def test_simple_sums(self):
        traj = traj_from_channels([1.0, 2.0, 3.0], [0.0, 1.0, 0.0])
        assert episodic_returns(traj) == (6.0, 1.0)

    def test_zero_case(self):
        traj = traj_from_channels([0.0, 0.0], [0.0, 0.0])
        assert episodic_returns(traj) == (0.0, 0.0)

    def test_matches_compensated_summation(self, rng):
        rewards = rng.uniform(-1, 1, size=1000)
        traj = traj_from_channels(rewards, np.zeros(1000))
        reward_return, _ = episodic_returns(traj)
        assert math.isclose(reward_return, math.fsum(rewards), rel_tol=1e-12,
                            abs_tol=1e-12)


class TestReturnsToGo:
    def test_suffix_sums(self):
        traj = returns_to_go(traj_from_channels([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]))
        assert traj.rtg_reward.tolist() == [6.0, 5.0, 3.0]

    def test_singleton(self):
        traj = returns_to_go(traj_from_channels([5.0], [0.0]))
        assert traj.rtg_reward.tolist() == [5.0]

    def test_cost_channel_brute_force(self):
        costs = [0.0, 1.0, 0.0, 1.0]
        traj = returns_to_go(traj_from_channels([0.0] * 4, costs))
        expected = [sum(costs[t:]) for t in range(4)]  # brute-force suffix sums
        assert traj.rtg_cost.tolist() == expected == [2.0, 2.0, 1.0, 1.0]

    def test_refuses_overwrite_without_flag(self, rng):
        traj = make_trajectory(rng, with_rtg=True)
        with pytest.raises(ValueError, match="overwrite"):
            returns_to_go(traj)
        returns_to_go(traj, overwrite=True)

    @given(rewards=reward_lists)
    def test_suffix_consistency_property(self, rewards):
        traj = returns_to_go(traj_from_channels(rewards, [0.0] * len(rewards)))
        rtg = traj.rtg_reward
        scale = max(1.0, float(np.max(np.abs(rtg))))
        assert np.allclose(rtg[:-1] - rtg[1:], np.asarray(rewards)[:-1],
                           rtol=1e-9, atol=1e-9 * scale)
        assert rtg[-1] == rewards[-1]

    def test_with_returns_to_go_fills_only_missing(self, rng):
        plain = make_trajectory(rng)
        filled = make_trajectory(rng, with_rtg=True)
        ds = with_returns_to_go(TrajectoryDataset([plain, filled]))
        assert all(t.has_rtg for t in ds)
        assert ds[1] is not None and np.array_equal(ds[1].rtg_reward,
                                                    filled.rtg_reward)


class TestTrajectoryValidation:
    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            Trajectory(states=np.zeros((3, 2)), actions=np.zeros((2, 1)),
                       rewards=np.zeros(3), costs=np.zeros(3))

    def test_negative_costs(self):
        with pytest.raises(ValueError, match="non-negative"):
            traj_from_channels([1.0], [-0.5])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            Trajectory(states=np.zeros((0, 2)), actions=np.zeros((0, 1)),
                       rewards=np.zeros(0), costs=np.zeros(0))

    def test_inconsistent_rtg_rejected(self):
        with pytest.raises(ValueError, match="suffix sum"):
            Trajectory(states=np.zeros((2, 1)), actions=np.zeros((2, 1)),
                       rewards=[1.0, 2.0], costs=[0.0, 0.0],
                       rtg_reward=[9.0, 2.0], rtg_cost=[0.0, 0.0])

    def test_augmented_rtg_not_tied_to_final_step(self):
        # shifted RTG heads are legal only on augmented trajectories
        Trajectory(states=np.zeros((2, 1)), actions=np.zeros((2, 1)),
                   rewards=[1.0, 2.0], costs=[0.0, 0.0],
                   rtg_reward=[13.0, 12.0], rtg_cost=[5.0, 5.0],
                   is_augmented=True)
        with pytest.raises(ValueError):
            Trajectory(states=np.zeros((2, 1)), actions=np.zeros((2, 1)),
                       rewards=[1.0, 2.0], costs=[0.0, 0.0],
                       rtg_reward=[13.0, 12.0], rtg_cost=[5.0, 5.0])

    def test_arrays_are_readonly(self, rng):
        traj = make_trajectory(rng)
        with pytest.raises(ValueError):
            traj.rewards[0] = 99.0


class TestNormalizedMetrics:
    CFG = MetricConfig(kappa=10.0, eps_stability=1e-6, r_min=0.0, r_max=200.0)

    def test_extrema_identities(self):
        assert normalize_reward(self.CFG.r_max, self.CFG) == 100.0
        assert normalize_reward(self.CFG.r_min, self.CFG) == 0.0

    def test_midpoint(self):
        assert normalize_reward(50.0, self.CFG) == pytest.approx(25.0)

    def test_not_clamped_above_100(self):
        assert normalize_reward(400.0, self.CFG) == pytest.approx(200.0)

    def test_degenerate_extrema_error(self):
        cfg = MetricConfig(r_min=5.0, r_max=5.0)
        with pytest.raises(ValueError, match="degenerate"):
            normalize_reward(5.0, cfg)

    def test_cost_ratio(self):
        assert normalize_cost(25.0, self.CFG) == pytest.approx(2.5, rel=1e-6)

    def test_cost_threshold_identity_in_eps_limit(self):
        cfg = MetricConfig(kappa=10.0, eps_stability=1e-12)
        assert normalize_cost(10.0, cfg) == pytest.approx(1.0, abs=1e-9)

    def test_cost_zero_with_zero_kappa(self):
        cfg = MetricConfig(kappa=0.0, eps_stability=1e-6)
        assert normalize_cost(0.0, cfg) == 0.0

    @given(shift=st.floats(-100, 100), scale=st.floats(0.1, 50),
           value=st.floats(0, 1))
    def test_affine_invariance(self, shift, scale, value):
        r = value * 200.0
        base = normalize_reward(r, self.CFG)
        shifted_cfg = MetricConfig(
            kappa=10.0, r_min=self.CFG.r_min * scale + shift,
            r_max=self.CFG.r_max * scale + shift)
        assert normalize_reward(r * scale + shift, shifted_cfg) == \
            pytest.approx(base, rel=1e-9, abs=1e-7)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MetricConfig(kappa=-1.0)
        with pytest.raises(ValueError):
            MetricConfig(eps_stability=0.0)
        with pytest.raises(ValueError):
            MetricConfig(r_min=1.0, r_max=0.0)

    def test_from_dataset(self, rng):
        ds = TrajectoryDataset([make_trajectory(rng) for _ in range(4)])
        cfg = MetricConfig.from_dataset(ds, kappa=5.0)
        assert cfg.r_min == ds.reward_returns.min()
        assert cfg.r_max == ds.reward_returns.max()
        assert cfg.kappa == 5.0


class TestDatasetCache:
    def test_return_points_match_sums(self, rng):
        trajs = [make_trajectory(rng) for _ in range(5)]
        ds = TrajectoryDataset(trajs)
        for point, traj in zip(ds.return_points, trajs):
            assert tuple(point) == episodic_returns(traj)


class TestSerialization:
    def test_empty_roundtrip(self, tmp_path):
        path = tmp_path / "empty.ndjson"
        save_dataset(TrajectoryDataset([]), path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1  # header only
        assert load_dataset(path) == TrajectoryDataset([])

    def test_roundtrip_identity(self, rng, tmp_path):
        ds = TrajectoryDataset([
            make_trajectory(rng),
            make_trajectory(rng, with_rtg=True),
            make_trajectory(rng, T=3),
        ])
        path = tmp_path / "ds.ndjson"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    @given(reward_rows=st.lists(st.lists(finite_reward, min_size=1, max_size=6),
                                min_size=0, max_size=4))
    def test_roundtrip_property(self, reward_rows, tmp_path_factory):
        trajs = []
        for rewards in reward_rows:
            T = len(rewards)
            trajs.append(Trajectory(
                states=np.arange(T * 2, dtype=float).reshape(T, 2),
                actions=np.zeros((T, 1)), rewards=rewards, costs=[0.0] * T))
        ds = TrajectoryDataset(trajs)
        path = tmp_path_factory.mktemp("rt") / "p.ndjson"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    def test_length_mismatch_names_record(self, tmp_path):
        path = tmp_path / "bad.ndjson"
        rec = {"observations": [[0.0], [0.0]], "actions": [[0.0], [0.0]],
               "rewards": [1.0, 2.0], "costs": [0.0]}
        header = {"format": "trajectory-ndjson", "version": 1}
        path.write_text(json.dumps(header) + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(DatasetFormatError, match="record 0"):
            load_dataset(path)

    def test_negative_cost_rejected_with_index(self, rng, tmp_path):
        path = tmp_path / "neg.ndjson"
        good = json.dumps({"observations": [[0.0]], "actions": [[0.0]],
                           "rewards": [1.0], "costs": [0.0]})
        bad = json.dumps({"observations": [[0.0]], "actions": [[0.0]],
                          "rewards": [1.0], "costs": [-1.0]})
        header = json.dumps({"format": "trajectory-ndjson", "version": 1})
        path.write_text("\n".join([header, good, bad]) + "\n")
        with pytest.raises(DatasetFormatError, match="record 1"):
            load_dataset(path)

    def test_unknown_keys_tolerated(self, tmp_path):
        path = tmp_path / "extra.ndjson"
        rec = {"observations": [[0.0]], "actions": [[0.0]], "rewards": [1.0],
               "costs": [0.0], "infos": {"weather": "sunny"}}
        header = {"format": "trajectory-ndjson", "version": 1}
        path.write_text(json.dumps(header) + "\n" + json.dumps(rec) + "\n")
        assert len(load_dataset(path)) == 1

    def test_missing_trailing_newline_rejected(self, tmp_path):
        path = tmp_path / "trunc.ndjson"
        header = json.dumps({"format": "trajectory-ndjson", "version": 1})
        path.write_text(header)
        with pytest.raises(DatasetFormatError, match="trailing newline"):
            load_dataset(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "hdr.ndjson"
        path.write_text('{"format": "something-else"}\n')
        with pytest.raises(DatasetFormatError, match="not a"):
            load_dataset(path)

    def test_count_mismatch_rejected(self, tmp_path):
        path = tmp_path / "cnt.ndjson"
        header = json.dumps({"format": "trajectory-ndjson", "version": 1,
                             "count": 3})
        path.write_text(header + "\n")
        with pytest.raises(DatasetFormatError, match="count"):
            load_dataset(path)

    def test_augmented_flag_roundtrip(self, rng, tmp_path):
        base = make_trajectory(rng, with_rtg=True)
        aug = Trajectory(states=base.states, actions=base.actions,
                         rewards=base.rewards, costs=base.costs,
                         rtg_reward=base.rtg_reward + 3.5,
                         rtg_cost=base.rtg_cost + 1.25, is_augmented=True)
        path = tmp_path / "aug.ndjson"
        save_dataset(TrajectoryDataset([aug]), path)
        loaded = load_dataset(path)
        assert loaded[0].is_augmented
        assert loaded[0] == aug
