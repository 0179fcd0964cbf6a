"""
Tests for value, return and advantage oracles.
"""

import numpy as np
import pytest
from ilmar_lab import (
    AdvantageOracle,
    ConvergenceError,
    GridWorldSpec,
    LinPointMassSpec,
    StructureError,
    expected_return_tabular,
    optimal_gridworld_policy,
    policy_evaluation_tabular,
    reset,
    value_iteration,
)
from ilmar_lab.envs import grid_state
from ilmar_lab.oracles import TabularMDP, lqr_gain, tabular_model, uniform_policy_table
from ilmar_lab.policies import expert_policy, random_policy


def _chain_mdp():
    # two states: state 0 loops with reward 1 under action 0, action 1 ends the episode
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    R = np.array([[1.0, 0.0], [0.0, 0.0]])
    return TabularMDP(P=P, R=R, gamma=0.5, start=0, horizon=10)


class TestTabularModel:
    def test_goal_is_absorbing(self):
        env = GridWorldSpec(width=3, height=3)
        mdp = tabular_model(env)
        goal = env.state_index(env.goal)
        assert np.all(mdp.P[goal] == 0.0)

    def test_rows_are_distributions(self):
        env = GridWorldSpec(width=3, height=3, slip_prob=0.2)
        mdp = tabular_model(env)
        sums = mdp.P.sum(axis=2)
        goal = env.state_index(env.goal)
        np.testing.assert_allclose(np.delete(sums, goal, axis=0), 1.0)

    def test_inconsistent_shapes_rejected(self):
        with pytest.raises(StructureError):
            TabularMDP(P=np.zeros((2, 2, 3)), R=np.zeros((2, 2)), gamma=0.9)


class TestPolicyEvaluation:
    def test_chain_values(self):
        mdp = _chain_mdp()
        values = policy_evaluation_tabular(mdp, np.array([[1.0, 0.0], [1.0, 0.0]]))
        # ten looping steps left: 1 + 0.5 + ... + 0.5^9
        assert values.v[0] == pytest.approx(2.0 * (1.0 - 0.5 ** 10), abs=1e-12)
        assert values.v[1] == 0.0
        assert values.residual <= 1e-10
        assert values.horizon == 10

    def test_chain_values_without_horizon(self):
        mdp = _chain_mdp()
        mdp.horizon = None
        values = policy_evaluation_tabular(mdp, np.array([[1.0, 0.0], [1.0, 0.0]]))
        # V = 1 / (1 - 0.5)
        assert values.v[0] == pytest.approx(2.0)
        assert values.horizon is None
        assert values.residual <= 1e-10

    def test_values_by_step(self):
        mdp = _chain_mdp()
        values = policy_evaluation_tabular(mdp, np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert values.v_by_t.shape == (10, 2)
        assert values.q_by_t.shape == (10, 2, 2)
        for t in range(10):
            assert values.v_by_t[t, 0] == pytest.approx(2.0 * (1.0 - 0.5 ** (10 - t)), abs=1e-12)

    def test_advantage_of_policy_action_is_zero(self):
        mdp = _chain_mdp()
        values = policy_evaluation_tabular(mdp, np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert values.advantage[0, 0] == pytest.approx(0.0)
        assert values.advantage[0, 1] == pytest.approx(-2.0 * (1.0 - 0.5 ** 10), abs=1e-12)
        # one step left: only the immediate reward is lost
        assert values.advantage_at(9)[0, 1] == pytest.approx(-1.0)
        np.testing.assert_array_equal(values.advantage_at(10), np.zeros((2, 2)))

    def test_negative_step_rejected(self):
        values = policy_evaluation_tabular(_chain_mdp(), np.array([[1.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(ValueError):
            values.advantage_at(-1)

    def test_gridworld_bellman_residual(self):
        env = GridWorldSpec(width=5, height=5, horizon=30, slip_prob=0.1)
        values = policy_evaluation_tabular(env, uniform_policy_table(env))
        assert values.residual <= 1e-10

    @pytest.mark.parametrize("slip_prob", [0.0, 0.2])
    def test_policy_weighted_advantage_is_zero(self, slip_prob):
        env = GridWorldSpec(width=5, height=5, horizon=30, slip_prob=slip_prob)
        pi = 0.5 * optimal_gridworld_policy(env) + 0.5 * uniform_policy_table(env)
        values = policy_evaluation_tabular(env, pi)
        for t in (0, env.horizon // 2, env.horizon - 1):
            assert np.max(np.abs(np.sum(pi * values.advantage_at(t), axis=1))) <= 1e-9

    def test_iteration_cap_raises(self):
        env = GridWorldSpec(width=3, height=3)
        with pytest.raises(ConvergenceError) as exc_info:
            policy_evaluation_tabular(env, uniform_policy_table(env), max_iterations=1)
        assert exc_info.value.iterations == 1

    def test_bad_policy_table_rejected(self):
        env = GridWorldSpec(width=3, height=3)
        with pytest.raises(StructureError):
            policy_evaluation_tabular(env, np.full((9, 4), 0.5))


class TestValueIteration:
    def test_optimal_value_at_start(self):
        env = GridWorldSpec()
        v = value_iteration(env).v[env.state_index(env.start)]
        assert v == pytest.approx(-(1.0 - 0.99 ** 12) / 0.01, rel=1e-8)

    def test_optimal_policy_moves_towards_goal(self):
        env = GridWorldSpec()
        pi = optimal_gridworld_policy(env)
        start = pi[env.state_index(env.start)]
        # north and east are both optimal from the corner
        np.testing.assert_allclose(start, [0.5, 0.5, 0.0, 0.0])

    def test_first_tie_break(self):
        env = GridWorldSpec()
        pi = optimal_gridworld_policy(env, tie_break="first")
        assert pi[env.state_index(env.start)].tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_unknown_tie_break(self):
        with pytest.raises(ValueError):
            optimal_gridworld_policy(GridWorldSpec(), tie_break="random")


class TestExpectedReturn:
    def test_optimal_return_is_shortest_path(self):
        env = GridWorldSpec()
        assert expected_return_tabular(env, optimal_gridworld_policy(env)) == pytest.approx(-12.0)

    def test_uniform_return_is_worse(self):
        env = GridWorldSpec()
        value = expected_return_tabular(env, uniform_policy_table(env))
        assert -60.0 <= value < -12.0

    def test_horizon_required(self):
        mdp = _chain_mdp()
        mdp.horizon = None
        with pytest.raises(StructureError):
            expected_return_tabular(mdp, np.array([[1.0, 0.0], [1.0, 0.0]]))

    def test_chain_return(self):
        mdp = _chain_mdp()
        assert expected_return_tabular(mdp, np.array([[1.0, 0.0], [1.0, 0.0]]), horizon=4) == 4.0


class TestAdvantageOracle:
    def test_exact_advantages_under_expert(self):
        env = GridWorldSpec()
        oracle = AdvantageOracle(env, expert_policy(env))
        state = reset(env)
        assert oracle.advantage(state, 0).value == pytest.approx(0.0, abs=1e-8)
        assert oracle.advantage(state, 1).value == pytest.approx(0.0, abs=1e-8)
        assert oracle.advantage(state, 3).value < -0.5
        assert oracle.advantage(state, 3).stderr == 0.0

    def test_exact_advantage_matches_bellman(self):
        env = GridWorldSpec(width=4, height=4)
        oracle = AdvantageOracle(env, uniform_policy_table(env))
        v = oracle.values.v_by_t
        cell = (1, 1)
        s = env.state_index(cell)
        nxt = env.state_index(env.move(cell, 2))
        for t in (0, 7, env.horizon - 2):
            expected = env.reward(env.move(cell, 2)) + env.gamma * v[t + 1][nxt] - v[t][s]
            assert oracle.advantage(grid_state(env, cell, t), 2).value == pytest.approx(expected)

    def test_exact_advantage_depends_on_step(self):
        env = GridWorldSpec(width=4, height=4, horizon=10)
        oracle = AdvantageOracle(env, uniform_policy_table(env))
        cell = (2, 3)
        early = oracle.advantage(grid_state(env, cell, 0), 1).value
        late = oracle.advantage(grid_state(env, cell, env.horizon - 2), 1).value
        assert early != pytest.approx(late)
        # last step: reward of the action minus the policy's mean reward
        rewards = [env.reward(env.move(cell, a)) for a in range(env.n_actions)]
        last = oracle.advantage(grid_state(env, cell, env.horizon - 1), 1).value
        assert last == pytest.approx(rewards[1] - np.mean(rewards))

    def test_terminal_state_has_zero_advantage(self):
        env = GridWorldSpec(width=3, height=3)
        oracle = AdvantageOracle(env, uniform_policy_table(env))
        assert oracle.advantage(grid_state(env, env.goal), 0).value == 0.0

    @pytest.mark.slow
    def test_monte_carlo_agrees_with_exact(self):
        env = GridWorldSpec(width=3, height=3, horizon=6, slip_prob=0.1)
        policy = random_policy(env)
        exact = AdvantageOracle(env, uniform_policy_table(env))
        rng = np.random.default_rng(0)
        cells = [env.cell(s) for s in range(env.n_states) if env.cell(s) != env.goal]
        agree = 0
        for j in range(500):
            cell = cells[int(rng.integers(len(cells)))]
            t, a = int(rng.integers(env.horizon)), int(rng.integers(env.n_actions))
            state = grid_state(env, cell, t)
            estimate = AdvantageOracle(env, policy, method="monte-carlo", n_rollouts=200, seed=j).advantage(state, a)
            target = exact.advantage(state, a).value
            agree += abs(estimate.value - target) <= 3.0 * estimate.stderr + 1e-9
        assert agree >= 0.99 * 500

    def test_exact_needs_gridworld(self):
        env = LinPointMassSpec()
        with pytest.raises(StructureError):
            AdvantageOracle(env, expert_policy(env), method="exact-tabular")

    def test_monte_carlo_expert_action_is_near_zero(self):
        env = LinPointMassSpec(horizon=20)
        expert = expert_policy(env)
        oracle = AdvantageOracle(env, expert, n_rollouts=4, seed=1)
        state = reset(env, seed=0)
        estimate = oracle.advantage(state, expert.act(state.obs, np.random.default_rng(0)))
        # deterministic expert and paired streams: both rollouts coincide
        assert estimate.value == pytest.approx(0.0, abs=1e-12)
        assert estimate.n_rollouts == 4

    def test_monte_carlo_bad_action_is_negative(self):
        env = LinPointMassSpec(horizon=20)
        expert = expert_policy(env)
        oracle = AdvantageOracle(env, expert, n_rollouts=2, seed=1)
        state = reset(env, seed=0)
        bad = np.sign(state.obs)
        assert oracle.advantage(state, bad).value < 0.0


class TestLqr:
    def test_closed_loop_is_stable(self):
        env = LinPointMassSpec()
        K = lqr_gain(env)
        closed = env.A_matrix - env.B_matrix @ K
        assert np.max(np.abs(np.linalg.eigvals(closed))) < 1.0


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
