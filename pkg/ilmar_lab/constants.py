"""
Constants for ilmar-lab.

This module contains all constants used across the package to ensure consistency.
"""

# File schema version shared by dataset and checkpoint files
SCHEMA_VERSION = 1


class TrainMode:
    """Training mode identifiers"""
    BC = "bc"
    VANILLA_ONLY = "vanilla-only"
    META_ONLY = "meta-only"
    ILMAR = "ilmar"
    EXPERT_DIST_WBC = "expert-dist-wbc"
    EXPERT_DIST_WBC_META = "expert-dist-wbc+meta"


ALL_MODES = (
    TrainMode.BC,
    TrainMode.VANILLA_ONLY,
    TrainMode.META_ONLY,
    TrainMode.ILMAR,
    TrainMode.EXPERT_DIST_WBC,
    TrainMode.EXPERT_DIST_WBC_META,
)

# Modes whose weights come from the pairwise action ranker
RANKER_MODES = (TrainMode.VANILLA_ONLY, TrainMode.META_ONLY, TrainMode.ILMAR)

# Modes whose weights come from the expert-vs-supplementary classifier
CLASSIFIER_MODES = (TrainMode.EXPERT_DIST_WBC, TrainMode.EXPERT_DIST_WBC_META)


class PairKind:
    """Pair kinds used by the vanilla ranking loss"""
    EXPERT_VS_POLICY = "expert-vs-policy"
    DATA_VS_RANDOM = "data-vs-random"
    POLICY_VS_RANDOM = "policy-vs-random"


PAIR_KINDS = (PairKind.EXPERT_VS_POLICY, PairKind.DATA_VS_RANDOM, PairKind.POLICY_VS_RANDOM)


class Split:
    """Dataset split tags"""
    EXPERT = "expert"
    SUPPLEMENTARY = "supplementary"


EXPERT_SOURCE = "expert"


def tier_source(index: int) -> str:
    """Source tag of the ``index``-th suboptimal tier (1-based)."""
    return f"tier-{index}"


# Supplementary-to-expert trajectory ratios of the task presets
TASK_RATIOS = {
    "T1": 0.25,
    "T2": 1.0,
    "T3": 4.0,
}

# Intermediate policy performance levels, as fractions of the expert score
DEFAULT_TIER_FRACTIONS = (0.8, 0.6, 0.4, 0.2)

# Grid searched over the composite-loss coefficients
DEFAULT_ALPHA_GRID = (0.0, 0.1, 0.3, 0.7, 1.0)
DEFAULT_BETA_GRID = (0.0, 0.01, 0.05, 0.5, 1.0)

# Ranker output clipping and weight threshold
DEFAULT_CLIP_EPS = 1e-3
WEIGHT_THRESHOLD = 0.5

# Continuous policy log-std clamp
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

# Alignment diagnostic: below this squared actor-gradient norm the implied K is undefined
G2SQ_FLOOR = 1e-12

# Gridworld compass moves: (dx, dy)
GRID_ACTIONS = ((0, 1), (1, 0), (0, -1), (-1, 0))
GRID_ACTION_NAMES = ("north", "east", "south", "west")

# Report CSV columns
REPORT_COLUMNS = (
    "iter", "L_actor", "L_vanilla", "L_meta", "L_C", "w_mean", "w_zero_frac", "antisym_dev",
    "inner", "g2sq", "implied_K", "eval_score",
)
WEIGHT_COLUMNS = ("iter", "source", "w_mean", "w_zero_frac")
THEOREM1_COLUMNS = ("iter", "inner", "g2sq", "implied_K", "loss_before", "loss_after")
CURVE_COLUMNS = ("iter", "mean_score", "ci_lo", "ci_hi", "n_seeds")
HEATMAP_COLUMNS = ("alpha", "beta", "seed", "score")
HEATMAP_SUMMARY_COLUMNS = ("alpha", "beta", "mean_score", "ci_lo", "ci_hi", "n_seeds")

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
