"""
Scripted policies: experts, the uniform random policy and calibrated
suboptimal tiers.

Every policy exposes ``act(obs, rng, greedy)``; discrete policies also expose
``action_probs(obs)``. Scripted policies ignore ``greedy`` because their
corruption is part of their behavior.
"""

from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from .constants import tier_source
from .envs import EnvSpec, GridWorldSpec, LinPointMassSpec, random_action, rollout_returns
from .exceptions import CalibrationError
from .logging_config import get_logger
from .oracles import (
    expected_return_tabular,
    lqr_gain,
    optimal_gridworld_policy,
    uniform_policy_table,
)

logger = get_logger("policies")


class TabularPolicy:
    """Stationary gridworld policy given by a probability table."""

    def __init__(self, env: GridWorldSpec, table: np.ndarray, name: str = "tabular"):
        self.env = env
        self.table = np.asarray(table, dtype=np.float64)
        self.name = name

    def action_probs(self, obs: np.ndarray) -> np.ndarray:
        cell = (int(round(obs[0])), int(round(obs[1])))
        return self.table[self.env.state_index(cell)]

    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> int:
        probs = self.action_probs(obs)
        return int(rng.choice(len(probs), p=probs))


class UniformRandomPolicy:
    """Uniform over the discrete moves, or uniform on the action box."""

    def __init__(self, env: EnvSpec):
        self.env = env
        self.name = "random"

    def action_probs(self, obs: np.ndarray) -> np.ndarray:
        if not isinstance(self.env, GridWorldSpec):
            raise TypeError("action_probs is only defined for discrete actions")
        return np.full(self.env.n_actions, 1.0 / self.env.n_actions)

    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> Any:
        return random_action(self.env, rng)


class LinearGainPolicy:
    """Point-mass controller ``clip(-K s + noise)`` with Gaussian action noise."""

    def __init__(self, env: LinPointMassSpec, gain: np.ndarray, noise_std: float = 0.0, name: str = "linear"):
        self.env = env
        self.gain = np.asarray(gain, dtype=np.float64)
        self.noise_std = float(noise_std)
        self.name = name

    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
        u = -self.gain @ np.asarray(obs, dtype=np.float64)
        if self.noise_std > 0.0:
            u = u + rng.normal(0.0, self.noise_std, size=u.shape)
        return self.env.clip_action(u)


def expert_policy(env: EnvSpec, tie_break: str = "uniform") -> Any:
    """The oracle expert: value-iteration optimal (gridworld) or discounted LQR (point mass)."""
    if isinstance(env, GridWorldSpec):
        return TabularPolicy(env, optimal_gridworld_policy(env, tie_break=tie_break), name="expert")
    return LinearGainPolicy(env, lqr_gain(env), 0.0, name="expert")


def random_policy(env: EnvSpec) -> UniformRandomPolicy:
    return UniformRandomPolicy(env)


def reference_returns(env: EnvSpec, n_episodes: int = 100, seed: int = 0) -> Tuple[float, float]:
    """
    Random and expert reference returns for the normalized score.

    Exact for the gridworld; seeded rollouts for the point mass.

    Returns:
        Tuple of (random_ref, expert_ref)
    """
    if isinstance(env, GridWorldSpec):
        return (expected_return_tabular(env, uniform_policy_table(env)),
                expected_return_tabular(env, optimal_gridworld_policy(env)))
    random_ref = float(np.mean(rollout_returns(env, random_policy(env), n_episodes, seed)))
    expert_ref = float(np.mean(rollout_returns(env, expert_policy(env), n_episodes, seed)))
    return random_ref, expert_ref


def corrupted_policy(env: EnvSpec, corruption: float, name: str = "corrupted") -> Any:
    """
    Corrupt the expert.

    Gridworld: ``(1 - c) * pi* + c * uniform``. Point mass: gain ``(1 - c) * K``
    plus Gaussian action noise with std ``c * bound``.
    """
    if not 0.0 <= corruption <= 1.0:
        raise ValueError(f"corruption must lie in [0, 1], got {corruption}")
    if isinstance(env, GridWorldSpec):
        table = (1.0 - corruption) * optimal_gridworld_policy(env) + corruption * uniform_policy_table(env)
        return TabularPolicy(env, table, name=name)
    return LinearGainPolicy(env, (1.0 - corruption) * lqr_gain(env), corruption * env.action_bound, name=name)


@dataclass
class TierPolicy:
    """A calibrated suboptimal policy."""
    name: str
    policy: Any
    requested: float
    corruption: float
    achieved: float

    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> Any:
        return self.policy.act(obs, rng, greedy)

    def action_probs(self, obs: np.ndarray) -> np.ndarray:
        return self.policy.action_probs(obs)

    @property
    def table(self) -> np.ndarray:
        return self.policy.table


def policy_fraction(env: EnvSpec, policy: Any, refs: Tuple[float, float],
                    n_episodes: int = 64, seed: int = 0) -> float:
    """Performance of a scripted policy as a fraction of the expert on the normalized scale."""
    random_ref, expert_ref = refs
    if isinstance(env, GridWorldSpec):
        value = expected_return_tabular(env, policy.table)
    else:
        value = float(np.mean(rollout_returns(env, policy, n_episodes, seed)))
    return (value - random_ref) / (expert_ref - random_ref)


def make_tier_policies(
    env: EnvSpec,
    fractions: Sequence[float],
    tolerance: float = 0.1,
    n_episodes: int = 64,
    seed: int = 0,
    max_bisections: int = 40,
    refs: Optional[Tuple[float, float]] = None,
) -> List[TierPolicy]:
    """
    Calibrate one corrupted expert per requested performance fraction.

    Bisection on the corruption parameter assumes performance decreases as
    corruption grows.

    Args:
        env: Environment spec
        fractions: Target fractions of the expert score, each in (0, 1)
        tolerance: Allowed absolute error on the fraction (0.1 = 10 score points)
        n_episodes: Rollouts per evaluation (point mass only)
        seed: Rollout seed, shared by every evaluation
        max_bisections: Bisection cap per tier
        refs: Precomputed (random_ref, expert_ref)

    Returns:
        Tier policies in the order requested

    Raises:
        CalibrationError: A tier misses its target by more than ``tolerance``
    """
    fractions = [float(f) for f in fractions]
    if any(not 0.0 < f < 1.0 for f in fractions):
        raise CalibrationError("Tier fractions must lie in (0, 1)", requested=fractions)
    if refs is None:
        refs = reference_returns(env, n_episodes=max(n_episodes, 100), seed=seed)

    def fraction_at(c: float) -> float:
        return policy_fraction(env, corrupted_policy(env, c), refs, n_episodes, seed)

    tiers, achieved = [], []
    for k, target in enumerate(fractions, start=1):
        lo, hi = 0.0, 1.0
        c, value = 0.5, fraction_at(0.5)
        for _ in range(max_bisections):
            if abs(value - target) <= tolerance / 10.0:
                break
            if value > target:
                lo = c
            else:
                hi = c
            c = 0.5 * (lo + hi)
            value = fraction_at(c)
        achieved.append(value)
        tiers.append(TierPolicy(name=tier_source(k), policy=corrupted_policy(env, c, name=tier_source(k)),
                                requested=target, corruption=c, achieved=value))
        logger.info(f"Calibrated {tier_source(k)}: target={target:.2f} achieved={value:.3f} corruption={c:.4f}")

    if any(abs(a - t) > tolerance for a, t in zip(achieved, fractions)):
        raise CalibrationError("Tier calibration missed its targets", requested=fractions, achieved=achieved)
    return tiers
