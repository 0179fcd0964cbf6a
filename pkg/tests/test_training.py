"""
Tests for losses, the meta step, the alignment diagnostic and the trainer.
"""

import math

import numpy as np
import pytest
from ilmar_lab import (
    GridWorldSpec,
    MixtureSpec,
    ModelConfig,
    NumericalError,
    ParamVector,
    PolicyModel,
    RankerModel,
    StructureError,
    TrainConfig,
    TrainingAborted,
    build_mixture,
    expert_dist_weighted_bc,
    quadratic_theorem1_testbed,
    theorem1_diagnostic,
    train,
)
from ilmar_lab.autodiff import Tensor, grad, relative_error
from ilmar_lab.constants import PairKind, TrainMode
from ilmar_lab.data import poison_rewards
from ilmar_lab.models import load_checkpoint, weight_tensor
from ilmar_lab.training import (
    CHECKPOINT_FILE,
    REPORT_FILE,
    Batch,
    Trainer,
    TrainReport,
    actor_loss,
    antisymmetry_deviation,
    bc_loss,
    discriminator_update,
    explicit_meta_gradient,
    make_gradcheck_problem,
    meta_loss,
    meta_step,
    pair_counts,
    policy_update,
    run_gradcheck,
    sample_pairs,
    traced_meta_gradient,
    vanilla_loss,
    vanilla_nll,
    weight_statistics,
)

GRID = GridWorldSpec(width=4, height=4, horizon=20)
REFS = (-19.0, -6.0)
TINY_MODEL = ModelConfig(policy_hidden=(8,), ranker_state_hidden=(8,), ranker_action_hidden=(4,),
                         ranker_head_hidden=(8,), classifier_hidden=(8,))


def _dataset():
    spec = MixtureSpec(n_expert_in_de=1, n_expert_in_ds=2, suboptimal_ratio=1.0, tier_fractions=(0.5,))
    return build_mixture(spec, GRID)


def _config(**overrides):
    values = dict(mode=TrainMode.ILMAR, iterations=3, n1=8, n2=9, eval_interval=3, eval_episodes=2,
                  diagnostic_interval=1, checkpoint_interval=100, policy_lr=0.05, disc_lr=0.01, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def _zero_policy():
    policy = PolicyModel.create(GRID, (8,), seed=0)
    return policy.with_params(policy.params.zeros_like())


class _ScriptedRanker:
    """Outputs ``high`` when a1 carries the first action, ``1 - high`` otherwise."""

    def __init__(self, high):
        self.high = high

    def forward(self, psi, states, a1, a2):
        first = np.asarray(a1)[:, 0] > np.asarray(a2)[:, 0]
        return Tensor(np.where(first, self.high, 1.0 - self.high))


class TestActorLoss:
    def test_single_weighted_sample(self):
        policy = _zero_policy()
        segments = dict(policy.params.items())
        segments["pi.1.b"] = np.array([math.log(3.0), 0.0, 0.0, 0.0])
        policy = policy.with_params(ParamVector(list(segments.items())))
        loss = actor_loss(policy, policy.params, np.zeros((1, 2)), np.eye(4)[[0]], np.array([0.8]))
        assert loss.item() == pytest.approx(0.8 * math.log(2.0))
        assert loss.item() == pytest.approx(0.5545, abs=1e-4)

    def test_unit_weights_equal_bc(self):
        policy = PolicyModel.create(GRID, (8,), seed=1)
        states = np.random.default_rng(0).normal(size=(5, 2))
        actions = np.eye(4)[[0, 1, 2, 3, 0]]
        weighted = actor_loss(policy, policy.params, states, actions, np.ones(5)).item()
        assert weighted == pytest.approx(bc_loss(policy, policy.params, states, actions).item())

    def test_zero_weights_give_zero_loss_and_gradient(self):
        policy = PolicyModel.create(GRID, (8,), seed=1)
        states, actions = np.zeros((3, 2)), np.eye(4)[[0, 1, 2]]
        g = grad(lambda th: actor_loss(policy, th, states, actions, np.zeros(3)), policy.params)
        assert actor_loss(policy, policy.params, states, actions, np.zeros(3)).item() == 0.0
        assert np.all(g.flatten() == 0.0)


class TestPairs:
    def test_pair_counts(self):
        assert pair_counts(3) == [1, 1, 1]
        assert pair_counts(10) == [4, 3, 3]

    def test_one_pair_of_each_kind(self):
        view = _dataset().training_view(GRID)
        policy = PolicyModel.create(GRID, (8,), seed=0)
        pairs = sample_pairs(view, policy, GRID, 3, np.random.default_rng(0))
        assert [pairs.count(k) for k in (PairKind.EXPERT_VS_POLICY, PairKind.DATA_VS_RANDOM,
                                         PairKind.POLICY_VS_RANDOM)] == [1, 1, 1]
        assert pairs.policy_slot.tolist() == [2, 0, 1]

    def test_same_seed_same_batch(self):
        view = _dataset().training_view(GRID)
        policy = PolicyModel.create(GRID, (8,), seed=0)
        a = sample_pairs(view, policy, GRID, 9, np.random.default_rng(4))
        b = sample_pairs(view, policy, GRID, 9, np.random.default_rng(4))
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.a1, b.a1)
        np.testing.assert_array_equal(a.a2, b.a2)

    def test_expert_pairs_use_expert_states(self):
        view = _dataset().training_view(GRID)
        policy = PolicyModel.create(GRID, (8,), seed=0)
        pairs = sample_pairs(view, policy, GRID, 30, np.random.default_rng(0))
        expert_states = {tuple(s) for s in view.states[view.expert_indices]}
        picked = pairs.states[pairs.kinds == PairKind.EXPERT_VS_POLICY]
        assert all(tuple(s) in expert_states for s in picked)


class TestVanillaLoss:
    def test_untrained_ranker(self):
        ranker = RankerModel.create(GRID, (8,), (4,), (8,), seed=0, zero_head=True)
        loss = vanilla_nll(ranker, ranker.params, np.zeros((4, 2)), np.eye(4)[[0, 1, 2, 3]], np.eye(4)[[1, 2, 3, 0]])
        assert loss.item() == pytest.approx(2.0 * math.log(2.0))
        assert loss.item() == pytest.approx(1.3863, abs=1e-4)

    def test_perfect_ranker(self):
        loss = vanilla_nll(_ScriptedRanker(0.999), None, np.zeros((2, 2)), np.eye(4)[[0, 0]], np.eye(4)[[1, 2]])
        assert loss.item() == pytest.approx(-2.0 * math.log(0.999))
        assert loss.item() == pytest.approx(0.0020, abs=1e-4)

    def test_maximally_wrong_ranker(self):
        loss = vanilla_nll(_ScriptedRanker(0.001), None, np.zeros((2, 2)), np.eye(4)[[0, 0]], np.eye(4)[[1, 2]])
        assert loss.item() == pytest.approx(13.8155, abs=1e-4)

    def test_gradient_penalty_term_is_added(self):
        view = _dataset().training_view(GRID)
        policy = PolicyModel.create(GRID, (8,), seed=0)
        ranker = RankerModel.create(GRID, (8,), (4,), (8,), seed=0, zero_head=True)
        pairs = sample_pairs(view, policy, GRID, 6, np.random.default_rng(0))
        plain = vanilla_loss(ranker, ranker.params, pairs).item()
        penalized = vanilla_loss(ranker, ranker.params, pairs, gp_coef=0.5, rng=np.random.default_rng(0)).item()
        # a constant ranker has a unit penalty
        assert penalized == pytest.approx(plain + 0.5, abs=1e-5)

    def test_penalty_needs_rng(self):
        view = _dataset().training_view(GRID)
        policy = PolicyModel.create(GRID, (8,), seed=0)
        ranker = RankerModel.create(GRID, (8,), (4,), (8,), seed=0)
        pairs = sample_pairs(view, policy, GRID, 3, np.random.default_rng(0))
        with pytest.raises(ValueError):
            vanilla_loss(ranker, ranker.params, pairs, gp_coef=1.0)


class TestAntisymmetry:
    def test_scripted_ranker_is_antisymmetric(self):
        deviation = antisymmetry_deviation(_ScriptedRanker(0.9), None, np.zeros((2, 2)), np.eye(4)[[0, 0]],
                                           np.eye(4)[[1, 2]])
        assert deviation == pytest.approx(0.0, abs=1e-12)

    def test_constant_ranker(self):
        ranker = RankerModel.create(GRID, (8,), (4,), (8,), seed=0, zero_head=True)
        segments = dict(ranker.params.items())
        segments["head.1.b"] = np.array([math.log(0.8 / 0.2)])
        ranker = ranker.with_params(ParamVector(list(segments.items())))
        deviation = antisymmetry_deviation(ranker, ranker.params, np.zeros((3, 2)), np.eye(4)[[0, 1, 2]],
                                           np.eye(4)[[3, 3, 3]])
        assert deviation == pytest.approx(0.6)

    def test_untrained_ranker(self):
        ranker = RankerModel.create(GRID, (8,), (4,), (8,), seed=0, zero_head=True)
        assert antisymmetry_deviation(ranker, ranker.params, np.zeros((2, 2)), np.eye(4)[[0, 1]],
                                      np.eye(4)[[2, 3]]) == 0.0

    @pytest.mark.parametrize("mode", [TrainMode.ILMAR, TrainMode.META_ONLY, TrainMode.VANILLA_ONLY])
    def test_reported_every_iteration(self, mode):
        result = train(_config(mode=mode), _dataset(), GRID, TINY_MODEL, refs=REFS)
        values = [r["antisym_dev"] for r in result.report.rows]
        assert all(v is not None and 0.0 <= v <= 1.0 for v in values)

    @pytest.mark.parametrize("mode", [TrainMode.BC, TrainMode.EXPERT_DIST_WBC])
    def test_absent_without_ranker(self, mode):
        result = train(_config(mode=mode), _dataset(), GRID, TINY_MODEL, refs=REFS)
        assert all(r["antisym_dev"] is None for r in result.report.rows)


class TestUpdates:
    def test_policy_update(self):
        out = policy_update(ParamVector({"w": [1.0]}), ParamVector({"w": [2.0]}), 0.5)
        np.testing.assert_allclose(out["w"], [0.0])

    def test_zero_coefficients_leave_discriminator_unchanged(self):
        psi = ParamVector({"w": [1.0, 2.0]})
        g = ParamVector({"w": [5.0, 5.0]})
        out, _ = discriminator_update(psi, 0.0, 0.0, g, g, lr=0.1)
        assert out.equals(psi)

    def test_sgd_combination(self):
        psi = ParamVector({"w": [0.0]})
        out, _ = discriminator_update(psi, 0.5, 2.0, ParamVector({"w": [1.0]}), ParamVector({"w": [1.0]}),
                                      lr=0.1, optimizer="sgd")
        np.testing.assert_allclose(out["w"], [-0.25])

    def test_meta_loss_requires_traced_parameters(self):
        policy = PolicyModel.create(GRID, (8,), seed=0)
        with pytest.raises(StructureError):
            meta_loss(policy, policy.params, np.zeros((1, 2)), np.eye(4)[[0]], require_traced=True)


class TestMetaStep:
    def _step(self, problem, mu):
        def weight_fn(ps):
            return weight_tensor(problem.ranker, ps, problem.states, problem.actions,
                                 problem.policy_actions, problem.mask)

        batch = Batch(problem.states, problem.actions, np.array(["x"] * len(problem.states)))
        expert = Batch(problem.expert_states, problem.expert_actions, np.array(["expert"] * len(problem.states)))
        return meta_step(problem.policy, problem.theta, problem.psi, weight_fn, batch, expert, mu)

    def test_zero_step_size_gives_zero_meta_gradient(self):
        step = self._step(make_gradcheck_problem(3), 0.0)
        assert np.all(step.meta_grad.flatten() == 0.0)
        assert step.theta_next.equals(make_gradcheck_problem(3).theta)

    def test_matches_traced_meta_gradient(self):
        problem = make_gradcheck_problem(5)
        step = self._step(problem, problem.mu)
        assert relative_error(step.meta_grad, traced_meta_gradient(problem)) < 1e-10

    def test_without_meta_gradient(self):
        problem = make_gradcheck_problem(5)

        def weight_fn(ps):
            return weight_tensor(problem.ranker, ps, problem.states, problem.actions,
                                 problem.policy_actions, problem.mask)

        batch = Batch(problem.states, problem.actions, np.array(["x"] * 8))
        step = meta_step(problem.policy, problem.theta, problem.psi, weight_fn, batch, batch, 0.1,
                         with_meta_grad=False)
        assert step.meta_grad is None
        assert np.isfinite(step.meta_loss)


class TestGradcheck:
    def test_three_way_agreement(self):
        checks = run_gradcheck(trials=2, seed=0)
        assert all(check.passed() for check in checks)
        assert [check.seed for check in checks] == [0, 1000]

    def test_sign_flip_is_caught(self):
        def flipped(problem):
            return explicit_meta_gradient(problem).map(lambda x: -x)

        (check,) = run_gradcheck(trials=1, seed=0, explicit_fn=flipped)
        assert not check.passed()
        assert check.errors["traced_vs_explicit"] > 1.0


class TestAlignmentDiagnostic:
    @pytest.mark.parametrize("mu", [0.25, 0.5, 1.0])
    def test_loss_does_not_increase_below_two_over_l(self, mu):
        reports = quadratic_theorem1_testbed([2.0, 2.0], mu, steps=5)
        assert all(r.loss_change <= 0.0 for r in reports)
        assert reports[0].implied_K == pytest.approx(1.0 - 2.0 * mu)

    def test_loss_increases_at_four_over_l(self):
        reports = quadratic_theorem1_testbed([2.0, 2.0], 2.0, steps=3)
        assert all(r.loss_change > 0.0 for r in reports)
        assert reports[0].implied_K == pytest.approx(-3.0)

    def test_zero_gradient_leaves_k_undefined(self):
        (report,) = quadratic_theorem1_testbed([1.0, 3.0], 0.1, steps=1, theta0=[0.0, 0.0])
        assert report.implied_K is None
        assert report.loss_change == pytest.approx(0.0)

    def test_diagnostic_row(self):
        theta = ParamVector({"x": [1.0]})

        def loss(p):
            return (p["x"] * p["x"]).sum()

        report = theorem1_diagnostic(theta, ParamVector({"x": [0.5]}), loss, loss)
        assert report.inner == pytest.approx(2.0)
        assert report.g2sq == pytest.approx(4.0)
        assert report.to_row(3)["implied_K"] == pytest.approx(0.5)


class TestReport:
    def test_weight_statistics(self):
        rows = weight_statistics(4, np.array(["expert", "tier-1", "expert"]), np.array([1.0, 0.0, 0.5]))
        assert rows == [
            {"iter": 4, "source": "expert", "w_mean": 0.75, "w_zero_frac": 0.0},
            {"iter": 4, "source": "tier-1", "w_mean": 0.0, "w_zero_frac": 1.0},
        ]

    def test_write_read(self, tmp_path):
        report = TrainReport()
        report.append({"iter": 1, "L_actor": 0.1, "eval_score": None},
                      [{"iter": 1, "source": "expert", "w_mean": 1.0, "w_zero_frac": 0.0}])
        report.append({"iter": 2, "L_actor": 1.0 / 3.0, "eval_score": 42.5})
        report.write(tmp_path)
        loaded = TrainReport.read(tmp_path)
        assert loaded.rows[1]["L_actor"] == 1.0 / 3.0
        assert loaded.final_score == 42.5
        assert len(TrainReport.read(tmp_path, upto=1)) == 1


class TestTrainer:
    def test_bit_identical_across_runs(self):
        dataset = _dataset()
        a = train(_config(), dataset, GRID, TINY_MODEL, refs=REFS)
        b = train(_config(), dataset, GRID, TINY_MODEL, refs=REFS)
        assert a.report.equals(b.report)
        assert a.policy.params.equals(b.policy.params)
        assert a.discriminator.params.equals(b.discriminator.params)

    def test_rewards_are_never_read(self):
        dataset = _dataset()
        a = train(_config(), dataset, GRID, TINY_MODEL, refs=REFS)
        b = train(_config(), poison_rewards(dataset), GRID, TINY_MODEL, refs=REFS)
        assert a.report.equals(b.report)

    def test_report_columns(self):
        result = train(_config(), _dataset(), GRID, TINY_MODEL, refs=REFS)
        assert len(result.report) == 3
        last = result.report.rows[-1]
        assert last["eval_score"] is not None
        assert last["L_C"] == pytest.approx(last["L_meta"] + last["L_vanilla"])
        assert len(result.report.diagnostics) == 3

    def test_bc_mode_has_unit_weights(self):
        result = train(_config(mode=TrainMode.BC), _dataset(), GRID, TINY_MODEL, refs=REFS)
        assert result.discriminator is None
        assert all(r["w_mean"] == 1.0 for r in result.report.rows)
        assert all(r["L_meta"] is None for r in result.report.rows)

    def test_meta_only_has_no_vanilla_term(self):
        result = train(_config(mode=TrainMode.META_ONLY), _dataset(), GRID, TINY_MODEL, refs=REFS)
        assert all(r["L_vanilla"] is None for r in result.report.rows)

    def test_vanilla_only_trains_ranker(self):
        config = _config(mode=TrainMode.VANILLA_ONLY)
        trainer = Trainer(config, _dataset(), GRID, TINY_MODEL, refs=REFS)
        before = trainer.psi
        result = trainer.run()
        assert not result.discriminator.params.equals(before)

    @pytest.mark.parametrize("with_meta_goal", [False, True])
    def test_expert_distribution_baseline(self, with_meta_goal):
        result = expert_dist_weighted_bc(_config(), _dataset(), GRID, with_meta_goal=with_meta_goal,
                                         model_config=TINY_MODEL, refs=REFS)
        assert type(result.discriminator).__name__ == "ClassifierModel"
        assert all(0.0 < r["w_mean"] < 1.0 for r in result.report.rows)

    def test_baseline_needs_supplementary_data(self):
        spec = MixtureSpec(n_expert_in_de=1, n_expert_in_ds=0, suboptimal_ratio=0.0)
        with pytest.raises(StructureError):
            Trainer(_config(mode=TrainMode.EXPERT_DIST_WBC), build_mixture(spec, GRID), GRID, TINY_MODEL)

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        dataset = _dataset()
        full = train(_config(iterations=4, eval_interval=2), dataset, GRID, TINY_MODEL,
                     run_dir=tmp_path / "full", refs=REFS)
        train(_config(iterations=2, eval_interval=2), dataset, GRID, TINY_MODEL,
              run_dir=tmp_path / "split", refs=REFS)
        resumed = train(_config(iterations=4, eval_interval=2), dataset, GRID, TINY_MODEL,
                        run_dir=tmp_path / "split", resume=True, refs=REFS)
        assert resumed.report.equals(full.report)
        assert resumed.policy.params.equals(full.policy.params)
        assert (tmp_path / "split" / REPORT_FILE).exists()

    def test_checkpoint_carries_adam_moments(self, tmp_path):
        trainer = Trainer(_config(iterations=2), _dataset(), GRID, TINY_MODEL, run_dir=tmp_path, refs=REFS)
        trainer.run()
        checkpoint = load_checkpoint(tmp_path / CHECKPOINT_FILE)
        assert trainer.disc_adam.step > 0
        assert checkpoint.header["disc_adam_step"] == trainer.disc_adam.step
        assert checkpoint.groups["disc_adam.m"].equals(trainer.disc_adam.m)
        assert checkpoint.groups["disc_adam.v"].equals(trainer.disc_adam.v)

    def test_non_finite_loss_aborts_with_checkpoint(self, tmp_path, monkeypatch):
        trainer = Trainer(_config(iterations=3), _dataset(), GRID, TINY_MODEL, run_dir=tmp_path, refs=REFS)
        original = Trainer._iterate

        def failing(self, iteration):
            if iteration == 2:
                raise NumericalError("L_actor is not finite", op="L_actor")
            return original(self, iteration)

        monkeypatch.setattr(Trainer, "_iterate", failing)
        with pytest.raises(TrainingAborted) as exc_info:
            trainer.run()
        assert exc_info.value.iteration == 2
        assert load_checkpoint(tmp_path / CHECKPOINT_FILE).iteration == 1


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
