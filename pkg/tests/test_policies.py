"""
Tests for scripted experts, the random policy and tier calibration.
"""

import numpy as np
import pytest
from ilmar_lab import (
    CalibrationError,
    GridWorldSpec,
    LinPointMassSpec,
    expert_policy,
    make_tier_policies,
    random_policy,
    reference_returns,
)
from ilmar_lab.policies import corrupted_policy, policy_fraction

SMALL_GRID = GridWorldSpec(width=4, height=4, horizon=20)


class TestReferencePolicies:
    def test_gridworld_refs_are_exact(self):
        random_ref, expert_ref = reference_returns(GridWorldSpec())
        assert expert_ref == pytest.approx(-12.0)
        assert random_ref < expert_ref

    def test_pointmass_refs_are_seeded(self):
        env = LinPointMassSpec(horizon=10)
        assert reference_returns(env, n_episodes=8, seed=1) == reference_returns(env, n_episodes=8, seed=1)
        random_ref, expert_ref = reference_returns(env, n_episodes=32, seed=1)
        assert random_ref < expert_ref

    def test_random_policy_probs(self):
        policy = random_policy(SMALL_GRID)
        np.testing.assert_allclose(policy.action_probs(np.zeros(2)), [0.25] * 4)

    def test_random_policy_has_no_probs_for_continuous(self):
        with pytest.raises(TypeError):
            random_policy(LinPointMassSpec()).action_probs(np.zeros(2))

    def test_expert_actions_stay_in_bounds(self):
        env = LinPointMassSpec()
        action = expert_policy(env).act(np.array([50.0, -50.0]), np.random.default_rng(0))
        assert np.all(np.abs(action) <= env.action_bound)


class TestCorruption:
    def test_zero_corruption_is_expert(self):
        refs = reference_returns(SMALL_GRID)
        assert policy_fraction(SMALL_GRID, corrupted_policy(SMALL_GRID, 0.0), refs) == pytest.approx(1.0)

    def test_full_corruption_is_random(self):
        refs = reference_returns(SMALL_GRID)
        assert policy_fraction(SMALL_GRID, corrupted_policy(SMALL_GRID, 1.0), refs) == pytest.approx(0.0)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            corrupted_policy(SMALL_GRID, 1.5)


class TestTierCalibration:
    def test_gridworld_tiers_hit_targets(self):
        tiers = make_tier_policies(SMALL_GRID, (0.8, 0.6, 0.4, 0.2), tolerance=0.1)
        assert [t.name for t in tiers] == ["tier-1", "tier-2", "tier-3", "tier-4"]
        for tier, target in zip(tiers, (0.8, 0.6, 0.4, 0.2)):
            assert abs(tier.achieved - target) <= 0.1
        corruptions = [t.corruption for t in tiers]
        assert corruptions == sorted(corruptions)

    def test_tier_table_is_a_distribution(self):
        (tier,) = make_tier_policies(SMALL_GRID, (0.5,))
        np.testing.assert_allclose(tier.table.sum(axis=1), 1.0)

    def test_fraction_outside_unit_interval(self):
        with pytest.raises(CalibrationError) as exc_info:
            make_tier_policies(SMALL_GRID, (1.2,))
        assert exc_info.value.requested == [1.2]

    def test_unreachable_tolerance_raises(self):
        # one bisection step cannot get within 1e-6 of the target
        with pytest.raises(CalibrationError):
            make_tier_policies(SMALL_GRID, (0.9,), tolerance=1e-6, max_bisections=1)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
