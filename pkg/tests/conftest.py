"""
Shared fixtures: a run configuration small enough to train in well under a second.
"""

import pytest
from ilmar_lab import GridWorldSpec, RunConfig


def make_tiny_config(out, **train):
    train_section = {"iterations": 2, "n1": 8, "n2": 9, "eval_interval": 2, "eval_episodes": 2,
                     "diagnostic_interval": 1, "checkpoint_interval": 1, "policy_lr": 0.05, "disc_lr": 0.01}
    train_section.update(train)
    return RunConfig.from_dict({
        "env": GridWorldSpec(width=4, height=4, horizon=20).to_dict(),
        "mixture": {"ratio": 1.0, "n_expert_in_ds": 2, "tier_fractions": [0.5]},
        "model": {"policy_hidden": [8], "ranker_state_hidden": [8], "ranker_action_hidden": [4],
                  "ranker_head_hidden": [8], "classifier_hidden": [8]},
        "train": train_section,
        "eval": {"n_episodes": 2, "reference_episodes": 4},
        "out": str(out),
    })


@pytest.fixture
def tiny_config():
    return make_tiny_config


@pytest.fixture
def config_file(tmp_path):
    return str(make_tiny_config(tmp_path / "runs").save(tmp_path / "config.yaml"))
