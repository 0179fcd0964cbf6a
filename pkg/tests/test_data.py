"""
Tests for dataset collection, mixtures and the JSON-lines format.
"""

import json

import numpy as np
import pytest
from ilmar_lab import (
    DatasetFormatError,
    DemoDataset,
    GridWorldSpec,
    LinPointMassSpec,
    MixtureSpec,
    StructureError,
    Trajectory,
    build_mixture,
    collect,
    expert_policy,
    load,
    save,
)
from ilmar_lab.data import Standardizer, dataset_stats, poison_rewards

SMALL_GRID = GridWorldSpec(width=4, height=4, horizon=20)


def _small_mixture(ratio=1.0, n_ds=4, seed=0):
    return build_mixture(MixtureSpec(n_expert_in_de=1, n_expert_in_ds=n_ds, suboptimal_ratio=ratio, seed=seed),
                         SMALL_GRID)


class TestTrajectory:
    def test_empty_trajectory_rejected(self):
        with pytest.raises(StructureError):
            Trajectory(0, "expert", np.zeros((0, 2)), [], [], [])

    def test_ragged_columns_rejected(self):
        with pytest.raises(StructureError):
            Trajectory(0, "expert", np.zeros((2, 2)), [0, 1], [0.0], [False, True])

    def test_duplicate_episode_ids_rejected(self):
        traj = Trajectory(0, "expert", np.zeros((1, 2)), [0], [-1.0], [True])
        with pytest.raises(StructureError):
            DemoDataset(expert=[traj, traj])


class TestCollect:
    def test_expert_episodes_are_shortest_paths(self):
        trajectories = collect(expert_policy(SMALL_GRID), SMALL_GRID, 3, seed=0)
        assert [len(t) for t in trajectories] == [6, 6, 6]
        assert all(t.dones[-1] for t in trajectories)
        assert [t.episode_id for t in trajectories] == [0, 1, 2]

    def test_collect_is_reproducible(self):
        env = LinPointMassSpec(horizon=5)
        a = collect(expert_policy(env), env, 2, seed=4)
        b = collect(expert_policy(env), env, 2, seed=4)
        assert all(x.equals(y) for x, y in zip(a, b))

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            collect(expert_policy(SMALL_GRID), SMALL_GRID, -1, seed=0)


class TestMixture:
    def test_tier_counts_distribute_remainder(self):
        spec = MixtureSpec(n_expert_in_ds=40, suboptimal_ratio=0.25)
        assert spec.tier_counts() == [3, 3, 2, 2]

    def test_tier_counts_for_ratio_four(self):
        assert MixtureSpec(n_expert_in_ds=40, suboptimal_ratio=4.0).tier_counts() == [40, 40, 40, 40]

    def test_zero_ratio_needs_no_tiers(self):
        dataset = _small_mixture(ratio=0.0)
        assert dataset.provenance["DS"] == {"expert": 4}
        assert "tiers" not in dataset.provenance

    def test_provenance_counts(self):
        dataset = _small_mixture(ratio=1.0)
        assert dataset.provenance["DE"] == {"expert": 1}
        assert dataset.provenance["DS"] == {"expert": 4, "tier-1": 1, "tier-2": 1, "tier-3": 1, "tier-4": 1}
        assert len(dataset.expert) == 1
        assert len(dataset.supplementary) == 8

    def test_episode_ids_unique_within_split(self):
        dataset = _small_mixture(ratio=1.0)
        ids = [t.episode_id for t in dataset.supplementary]
        assert len(ids) == len(set(ids))

    def test_negative_counts_rejected(self):
        with pytest.raises(StructureError):
            build_mixture(MixtureSpec(n_expert_in_de=-1), SMALL_GRID)


class TestTrainingView:
    def test_view_has_no_rewards(self):
        view = _small_mixture(ratio=0.0).training_view(SMALL_GRID)
        assert not hasattr(view, "rewards")
        assert view.actions.shape[1] == 4
        assert view.is_expert_split.sum() == 6

    def test_split_indices(self):
        dataset = _small_mixture(ratio=0.0)
        view = dataset.training_view(SMALL_GRID)
        assert len(view.expert_indices) + len(view.supplementary_indices) == len(view)

    def test_empty_dataset(self):
        with pytest.raises(StructureError):
            DemoDataset().training_view(SMALL_GRID)


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        dataset = _small_mixture(ratio=1.0)
        path = save(dataset, tmp_path / "dataset.jsonl")
        assert load(path).equals(dataset)

    def test_continuous_round_trip(self, tmp_path):
        env = LinPointMassSpec(horizon=5)
        dataset = build_mixture(MixtureSpec(n_expert_in_de=1, n_expert_in_ds=2, suboptimal_ratio=0.0), env)
        assert load(save(dataset, tmp_path / "d.jsonl")).equals(dataset)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            load(tmp_path / "nope.jsonl")

    def test_bad_schema(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({"schema": 99}) + "\n")
        with pytest.raises(DatasetFormatError) as exc_info:
            load(path)
        assert exc_info.value.line_number == 1

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = save(_small_mixture(ratio=0.0), tmp_path / "d.jsonl")
        lines = path.read_text().splitlines()
        lines[3] = "{not json"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError) as exc_info:
            load(path)
        assert exc_info.value.line_number == 4

    def test_missing_fields(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({"schema": 1}) + "\n" + json.dumps({"state": [0, 0]}) + "\n")
        with pytest.raises(DatasetFormatError) as exc_info:
            load(path)
        assert exc_info.value.line_number == 2


class TestHelpers:
    def test_poisoned_rewards_keep_states_and_actions(self):
        dataset = _small_mixture(ratio=0.0)
        poisoned = poison_rewards(dataset)
        assert all(np.isnan(t.rewards).all() for t in poisoned.full)
        np.testing.assert_array_equal(poisoned.training_view(SMALL_GRID).states,
                                      dataset.training_view(SMALL_GRID).states)

    def test_stats(self):
        stats = dataset_stats(_small_mixture(ratio=0.0))
        assert stats["per_source"]["expert/expert"]["n_trajectories"] == 1
        assert stats["per_source"]["supplementary/expert"]["mean_return"] == pytest.approx(-6.0)
        assert sum(stats["action_frequency"]) == pytest.approx(1.0)

    def test_standardizer(self):
        states = np.array([[0.0, 1.0], [2.0, 1.0]])
        norm = Standardizer.fit(states)
        np.testing.assert_allclose(norm.apply(states), [[-1.0, 0.0], [1.0, 0.0]])
        assert Standardizer.from_dict(norm.to_dict()).std.tolist() == norm.std.tolist()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
