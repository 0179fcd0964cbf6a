"""
Tests for evaluation rollouts, rank correlations and learning curves.
"""

import csv

import numpy as np
import pytest
from ilmar_lab import (
    AdvantageOracle,
    AnalysisError,
    GridWorldSpec,
    MixtureSpec,
    PolicyModel,
    RankerModel,
    build_mixture,
    evaluate_policy,
    expert_policy,
    normalized_score,
    spearman_rho,
    weight_quality,
)
from ilmar_lab.envs import grid_state
from ilmar_lab.evaluation import aggregate_curves, emit_curves
from ilmar_lab.training import TrainReport

GRID = GridWorldSpec(width=4, height=4, horizon=20)


def _mixture():
    spec = MixtureSpec(n_expert_in_de=1, n_expert_in_ds=4, suboptimal_ratio=1.0, tier_fractions=(0.2,))
    return build_mixture(spec, GRID)


class TestNormalizedScore:
    def test_midpoint(self):
        assert normalized_score(2343.0, -75.0, 4761.0) == pytest.approx(50.0)

    def test_references_map_to_zero_and_hundred(self):
        assert normalized_score(-75.0, -75.0, 4761.0) == 0.0
        assert normalized_score(4761.0, -75.0, 4761.0) == 100.0

    def test_equal_references(self):
        with pytest.raises(AnalysisError):
            normalized_score(1.0, 5.0, 5.0)


class TestEvaluatePolicy:
    def test_expert_scores_hundred(self):
        result = evaluate_policy(expert_policy(GRID), GRID, 5, seed=0, refs=(-20.0, -6.0))
        assert result.mean_return == pytest.approx(-6.0)
        assert result.normalized_score == pytest.approx(100.0)
        assert result.std_return == pytest.approx(0.0)
        assert len(result.returns) == 5

    def test_same_seed_same_returns(self):
        policy = PolicyModel.create(GRID, (8,), seed=0)
        a = evaluate_policy(policy, GRID, 3, seed=7, greedy=False)
        b = evaluate_policy(policy, GRID, 3, seed=7, greedy=False)
        assert a.returns == b.returns
        assert a.normalized_score is None

    def test_needs_an_episode(self):
        with pytest.raises(ValueError):
            evaluate_policy(expert_policy(GRID), GRID, 0, seed=0)


class TestSpearman:
    def test_perfect_agreement(self):
        assert spearman_rho([1, 2, 3], [10, 20, 30]).rho == pytest.approx(1.0)

    def test_perfect_disagreement(self):
        assert spearman_rho([1, 2, 3], [30, 20, 10]).rho == pytest.approx(-1.0)

    def test_one_swap(self):
        report = spearman_rho([1, 2, 3], [1, 3, 2])
        assert report.rho == pytest.approx(0.5)
        assert report.n == 3

    def test_ties_get_average_ranks(self):
        report = spearman_rho([1, 1, 2], [1, 2, 3])
        assert report.rho == pytest.approx(np.sqrt(3.0) / 2.0)
        assert report.tie_policy == "average"

    def test_constant_sequence(self):
        with pytest.raises(AnalysisError):
            spearman_rho([1, 1, 1], [1, 2, 3])

    def test_too_few_points(self):
        with pytest.raises(AnalysisError):
            spearman_rho([1], [1])

    def test_length_mismatch(self):
        with pytest.raises(AnalysisError):
            spearman_rho([1, 2], [1, 2, 3])


class TestWeightQuality:
    def test_return_variant_tracks_episode_length(self):
        dataset = _mixture()
        # every step costs one, so shorter episodes have higher returns
        report = weight_quality(None, None, dataset, None, GRID, variant="return",
                                weights_fn=lambda s, a: np.full(len(s), 1.0 / len(s)))
        assert report.rho == pytest.approx(1.0)
        assert report.n == len(dataset.supplementary)
        assert min(report.normalized_weights) == 0.0
        assert max(report.normalized_weights) == 1.0

    def test_return_variant_inverse(self):
        report = weight_quality(None, None, _mixture(), None, GRID, variant="return",
                                weights_fn=lambda s, a: np.full(len(s), float(len(s))))
        assert report.rho == pytest.approx(-1.0)

    def test_advantage_variant_with_oracle_weights(self):
        dataset = _mixture()
        # a long horizon keeps every advantage of these short episodes independent of the step
        oracle = AdvantageOracle(GridWorldSpec(width=4, height=4, horizon=200), expert_policy(GRID))

        def oracle_weights(states, actions):
            return np.array([
                oracle.advantage(grid_state(GRID, (int(s[0]), int(s[1]))), int(np.argmax(a))).value
                for s, a in zip(states, actions)
            ])

        report = weight_quality(None, None, dataset, oracle, GRID, weights_fn=oracle_weights, max_pairs=15)
        assert report.rho == pytest.approx(1.0)
        assert report.n == 15
        assert report.variant == "advantage"

    def test_untrained_ranker_has_all_zero_weights(self):
        dataset = _mixture()
        ranker = RankerModel.create(GRID, (8,), (4,), (8,), seed=0, zero_head=True)
        policy = PolicyModel.create(GRID, (8,), seed=0)
        with pytest.raises(AnalysisError):
            weight_quality(ranker, policy, dataset, AdvantageOracle(GRID, expert_policy(GRID)), GRID)

    def test_advantage_variant_needs_oracle(self):
        with pytest.raises(AnalysisError):
            weight_quality(None, None, _mixture(), None, GRID, weights_fn=lambda s, a: np.ones(len(s)))

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            weight_quality(None, None, _mixture(), None, GRID, variant="median")


class TestCurves:
    def test_aggregate(self):
        rows = aggregate_curves([[(1, 10.0), (2, 20.0)], [(1, 30.0), (2, 40.0)]])
        assert [r["mean_score"] for r in rows] == [20.0, 30.0]
        assert rows[0]["ci_hi"] - rows[0]["mean_score"] == pytest.approx(19.6)
        assert rows[0]["n_seeds"] == 2

    def test_single_run_has_no_interval(self):
        (row,) = aggregate_curves([[(5, 12.5)]])
        assert row["ci_lo"] == row["ci_hi"] == 12.5

    def test_identical_runs_have_zero_width(self):
        rows = aggregate_curves([[(1, 7.0), (2, 9.0)]] * 5)
        assert all(r["ci_lo"] == r["ci_hi"] == r["mean_score"] for r in rows)

    def test_emit_from_reports(self, tmp_path):
        report = TrainReport()
        report.append({"iter": 10, "eval_score": 40.0})
        report.append({"iter": 20, "eval_score": None})
        report.append({"iter": 30, "eval_score": 60.0})
        written = emit_curves([report, [(10, 20.0), (30, 80.0)]], tmp_path, labels=["ilmar", "bc"])
        assert set(written) == {"ilmar", "bc", "aggregate"}
        with open(written["aggregate"], newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["iter"] for r in rows] == ["10", "30"]
        assert float(rows[1]["mean_score"]) == 70.0
        assert (tmp_path / "curve_ilmar.csv").read_text().splitlines()[0] == "iter,score"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
