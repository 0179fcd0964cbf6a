"""
Evaluation and analysis: policy rollouts, the normalized score, Spearman
weight-quality checks against oracles and learning-curve files.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from .constants import CURVE_COLUMNS
from .data import DemoDataset
from .envs import EnvSpec, EnvState, GridWorldSpec, encode_action, grid_state, rollout_returns
from .exceptions import AnalysisError
from .logging_config import get_logger
from .models import EXPECTATION, PolicyModel, RankerModel, weight
from .oracles import AdvantageOracle
from .policies import reference_returns

logger = get_logger("evaluation")

ADVANTAGE_VARIANT = "advantage"
RETURN_VARIANT = "return"

__all__ = [
    "EvalResult",
    "CorrelationReport",
    "evaluate_policy",
    "normalized_score",
    "spearman_rho",
    "weight_quality",
    "emit_curves",
    "aggregate_curves",
    "reference_returns",
]


@dataclass
class EvalResult:
    """Summary of evaluation episodes."""
    mean_return: float
    std_return: float
    n_episodes: int
    seed: int
    normalized_score: Optional[float] = None
    returns: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean_return": self.mean_return,
            "std_return": self.std_return,
            "normalized_score": self.normalized_score,
            "n_episodes": self.n_episodes,
            "seed": self.seed,
        }


def normalized_score(mean: float, random_ref: float, expert_ref: float) -> float:
    """``100 * (mean - random_ref) / (expert_ref - random_ref)``."""
    if expert_ref == random_ref:
        raise AnalysisError("Normalized score is undefined when expert and random references coincide",
                            {"random_ref": random_ref, "expert_ref": expert_ref})
    return 100.0 * (mean - random_ref) / (expert_ref - random_ref)


def evaluate_policy(policy: Any, env: EnvSpec, n_episodes: int, seed: int,
                    refs: Optional[Tuple[float, float]] = None, greedy: bool = True) -> EvalResult:
    """
    Mean and std of undiscounted returns over seeded episodes.

    Neural policies act by argmax or mean; scripted policies act as they always do.

    Args:
        policy: Object with ``act(obs, rng, greedy)``
        env: Environment spec
        n_episodes: Number of episodes (``>= 1``)
        seed: Evaluation seed
        refs: Optional (random_ref, expert_ref) for the normalized score
        greedy: Deterministic action selection
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    returns = rollout_returns(env, policy, n_episodes, seed, greedy=greedy)
    mean = float(np.mean(returns))
    score = normalized_score(mean, *refs) if refs is not None else None
    return EvalResult(mean_return=mean, std_return=float(np.std(returns)), n_episodes=n_episodes,
                      seed=seed, normalized_score=score, returns=returns.tolist())


@dataclass
class CorrelationReport:
    """Spearman correlation with its sample size and tie handling."""
    rho: float
    n: int
    tie_policy: str = "average"
    variant: str = ""
    normalized_weights: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"rho": self.rho, "n": self.n, "variant": self.variant, "tie_policy": self.tie_policy}


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> CorrelationReport:
    """
    Spearman rank correlation.

    Ties get average ranks and rho is the Pearson correlation of the ranks,
    which equals ``1 - 6 sum d^2 / (n (n^2 - 1))`` when there are no ties.

    Raises:
        AnalysisError: Length mismatch, fewer than two points or a constant sequence
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise AnalysisError(f"Sequences differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise AnalysisError("Spearman correlation needs at least two points")
    rx, ry = rankdata(x, method="average"), rankdata(y, method="average")
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    if denom == 0.0:
        raise AnalysisError("Spearman correlation is undefined for a constant sequence")
    rho = float(np.clip(np.sum(dx * dy) / denom, -1.0, 1.0))
    return CorrelationReport(rho=rho, n=int(x.size))


def _min_max(values: np.ndarray) -> List[float]:
    span = float(values.max() - values.min())
    if span == 0.0:
        return [0.0] * len(values)
    return ((values - values.min()) / span).tolist()


def _env_state(env: EnvSpec, obs: np.ndarray, t: int) -> EnvState:
    if isinstance(env, GridWorldSpec):
        return grid_state(env, (int(round(obs[0])), int(round(obs[1]))), t)
    return EnvState(values=tuple(float(v) for v in obs), t=t, terminal=False)


WeightFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def weight_quality(
    ranker: Optional[RankerModel],
    policy: PolicyModel,
    dataset: DemoDataset,
    oracle: Optional[AdvantageOracle],
    env: EnvSpec,
    variant: str = ADVANTAGE_VARIANT,
    max_pairs: Optional[int] = None,
    seed: int = 0,
    mode: str = EXPECTATION,
    weights_fn: Optional[WeightFn] = None,
) -> CorrelationReport:
    """
    Rank agreement between learned weights and ground truth on D^S.

    The ``advantage`` variant pairs each supplementary transition's weight with
    the oracle advantage under the oracle's policy. The ``return`` variant pairs
    each supplementary trajectory's mean weight with its return.

    Args:
        ranker: Trained ranker (ignored when ``weights_fn`` is given)
        policy: Policy the weights are computed against
        dataset: Dataset whose supplementary split is scored
        oracle: Advantage oracle (required for the advantage variant)
        env: Environment spec
        variant: ``advantage`` or ``return``
        max_pairs: Subsample at most this many transitions (advantage variant)
        seed: Subsampling seed
        mode: Ranker input mode for the policy action
        weights_fn: Override ``(states, encoded actions) -> weights``

    Raises:
        AnalysisError: All weights are zero, or the correlation is undefined
    """
    if variant not in (ADVANTAGE_VARIANT, RETURN_VARIANT):
        raise ValueError(f"Unknown weight-quality variant: {variant}")
    if not dataset.supplementary:
        raise AnalysisError("The dataset has no supplementary trajectories")

    def weights_of(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        if weights_fn is not None:
            return np.asarray(weights_fn(states, actions), dtype=np.float64)
        return weight(ranker, states, actions, policy, mode=mode, seed=seed).w

    if variant == RETURN_VARIANT:
        means, returns = [], []
        for traj in dataset.supplementary:
            encoded = np.asarray([encode_action(env, a) for a in traj.actions])
            means.append(float(np.mean(weights_of(traj.states, encoded))))
            returns.append(traj.total_return)
        means = np.asarray(means)
        if np.all(means == 0.0):
            raise AnalysisError("All weights are zero")
        report = spearman_rho(means, returns)
        report.variant = RETURN_VARIANT
        report.normalized_weights = _min_max(means)
        return report

    if oracle is None:
        raise AnalysisError("The advantage variant needs an oracle")
    rows = [(traj, k) for traj in dataset.supplementary for k in range(len(traj))]
    if max_pairs is not None and len(rows) > max_pairs:
        keep = np.sort(np.random.default_rng(seed).choice(len(rows), size=max_pairs, replace=False))
        rows = [rows[i] for i in keep]
    states = np.asarray([traj.states[k] for traj, k in rows])
    actions = np.asarray([encode_action(env, traj.actions[k]) for traj, k in rows])
    w = weights_of(states, actions)
    if np.all(w == 0.0):
        raise AnalysisError("All weights are zero")
    advantages = np.asarray([
        oracle.advantage(_env_state(env, traj.states[k], k), traj.actions[k]).value for traj, k in rows
    ])
    report = spearman_rho(w, advantages)
    report.variant = ADVANTAGE_VARIANT
    report.normalized_weights = _min_max(w)
    logger.info(f"Weight quality ({variant}): rho={report.rho:.4f} over n={report.n}")
    return report


Curve = Sequence[Tuple[int, float]]


def mean_interval(scores: Sequence[float]) -> Tuple[float, float, float]:
    """
    Mean and 95% interval ``(mean, lo, hi)`` of seed scores.

    The half-width is ``1.96 * std / sqrt(n)`` with the sample std (ddof=1),
    zero for a single score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise AnalysisError("No scores to aggregate")
    mean = float(np.mean(scores))
    half = float(1.96 * np.std(scores, ddof=1) / np.sqrt(scores.size)) if scores.size > 1 else 0.0
    return mean, mean - half, mean + half


def aggregate_curves(curves: Sequence[Curve]) -> List[Dict[str, Any]]:
    """Mean score and 95% interval per iteration across runs (see ``mean_interval``)."""
    by_iter: Dict[int, List[float]] = {}
    for curve in curves:
        for iteration, score in curve:
            by_iter.setdefault(int(iteration), []).append(float(score))
    rows = []
    for iteration in sorted(by_iter):
        mean, lo, hi = mean_interval(by_iter[iteration])
        rows.append({"iter": iteration, "mean_score": mean, "ci_lo": lo, "ci_hi": hi,
                     "n_seeds": len(by_iter[iteration])})
    return rows


def _curve_of(report: Any) -> Curve:
    if hasattr(report, "eval_curve"):
        return report.eval_curve()
    return list(report)


def emit_curves(reports: Sequence[Any], path: Union[str, Path], labels: Optional[Sequence[str]] = None) -> Dict[str, Path]:
    """
    Write one curve CSV per run plus ``curves.csv`` aggregated across runs.

    Args:
        reports: TrainReports (anything with ``eval_curve()``) or (iter, score) sequences
        path: Output directory
        labels: Per-run file labels (defaults to ``run0``, ``run1``, ...)

    Returns:
        Mapping of label (and ``"aggregate"``) to written path
    """
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = [_curve_of(r) for r in reports]
    labels = list(labels) if labels is not None else [f"run{k}" for k in range(len(curves))]
    written = {}
    for label, curve in zip(labels, curves):
        target = out_dir / f"curve_{label}.csv"
        with open(target, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["iter", "score"])
            for iteration, score in curve:
                writer.writerow([int(iteration), repr(float(score))])
        written[label] = target

    target = out_dir / "curves.csv"
    with open(target, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(CURVE_COLUMNS))
        writer.writeheader()
        for row in aggregate_curves(curves):
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    written["aggregate"] = target
    return written
