"""
ilmar-lab - Weighted imitation learning from mixed-quality demonstrations

A small expert set D^E and a larger supplementary set D^S of unknown quality
are combined by weighting each demonstrated action with a learned action
ranker. The ranker is trained on pairwise comparisons against random actions
and, through a meta-goal, on how well the policy imitates the expert set after
each weighted update.

Features:
- Reverse-mode autodiff on numpy with gradients of gradients
- Gridworld and linear point-mass environments with exact oracles
- Calibrated suboptimal tiers and T1/T2/T3 dataset mixtures
- Weighted BC, ablations and an expert-distribution baseline
- Alignment diagnostics, weight-quality correlations and learning curves
- CLI for reproducible runs and alpha/beta sweeps

Quick Start:
    >>> from ilmar_lab import GridWorldSpec, MixtureSpec, TrainConfig, build_mixture, train
    >>> env = GridWorldSpec()
    >>> dataset = build_mixture(MixtureSpec(suboptimal_ratio=4.0), env)
    >>> result = train(TrainConfig(mode="ilmar", iterations=2000), dataset, env)
    >>> result.report.final_score
"""

from .constants import ALL_MODES, TASK_RATIOS, PairKind, TrainMode

from .exceptions import (
    AnalysisError,
    CalibrationError,
    ConfigurationError,
    ConvergenceError,
    DatasetFormatError,
    EnvironmentStepError,
    IlmarError,
    NumericalError,
    StructureError,
    TrainingAborted,
    UsageError,
)

from .autodiff import (
    CompGraph,
    ParamVector,
    Tensor,
    finite_diff_grad,
    grad,
    mixed_second_vjp,
    no_grad,
    relative_error,
    value_and_grad,
)

from .envs import GridWorldSpec, LinPointMassSpec, reset, step

from .oracles import (
    AdvantageOracle,
    expected_return_tabular,
    optimal_gridworld_policy,
    policy_evaluation_tabular,
    value_iteration,
)

from .policies import expert_policy, make_tier_policies, random_policy, reference_returns

from .data import DemoDataset, MixtureSpec, Trajectory, build_mixture, collect, load, save

from .models import ClassifierModel, PolicyModel, RankerModel, weight

from .config import ModelConfig, RunConfig, TrainConfig, load_config

from .training import (
    TrainReport,
    Trainer,
    expert_dist_weighted_bc,
    meta_gradient_three_way,
    quadratic_theorem1_testbed,
    theorem1_diagnostic,
    train,
)

from .evaluation import emit_curves, evaluate_policy, normalized_score, spearman_rho, weight_quality

from . import utils
from . import decorators

__version__ = "0.1.0"

__all__ = [
    # Constants
    "ALL_MODES",
    "TASK_RATIOS",
    "PairKind",
    "TrainMode",
    # Errors
    "AnalysisError",
    "CalibrationError",
    "ConfigurationError",
    "ConvergenceError",
    "DatasetFormatError",
    "EnvironmentStepError",
    "IlmarError",
    "NumericalError",
    "StructureError",
    "TrainingAborted",
    "UsageError",
    # Autodiff
    "CompGraph",
    "ParamVector",
    "Tensor",
    "finite_diff_grad",
    "grad",
    "mixed_second_vjp",
    "no_grad",
    "relative_error",
    "value_and_grad",
    # Environments and oracles
    "GridWorldSpec",
    "LinPointMassSpec",
    "reset",
    "step",
    "AdvantageOracle",
    "expected_return_tabular",
    "optimal_gridworld_policy",
    "policy_evaluation_tabular",
    "value_iteration",
    "expert_policy",
    "make_tier_policies",
    "random_policy",
    "reference_returns",
    # Data
    "DemoDataset",
    "MixtureSpec",
    "Trajectory",
    "build_mixture",
    "collect",
    "load",
    "save",
    # Models
    "ClassifierModel",
    "PolicyModel",
    "RankerModel",
    "weight",
    # Training
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "load_config",
    "TrainReport",
    "Trainer",
    "expert_dist_weighted_bc",
    "meta_gradient_three_way",
    "quadratic_theorem1_testbed",
    "theorem1_diagnostic",
    "train",
    # Evaluation
    "emit_curves",
    "evaluate_policy",
    "normalized_score",
    "spearman_rho",
    "weight_quality",
    # Modules
    "utils",
    "decorators",
]
