"""
Value and advantage oracles.

Tabular environments get exact dynamic programming: horizon-aware policy evaluation, value
iteration and finite-horizon expected returns. Continuous environments get a
Monte-Carlo advantage estimate with paired (common random number) rollouts,
and the point mass gets its discounted LQR expert gain.
"""

from dataclasses import dataclass, replace
from typing import Any, Optional, Union

import numpy as np
from scipy.linalg import solve_discrete_are

from .envs import EnvSpec, EnvState, GridWorldSpec, LinPointMassSpec, run_episode
from .exceptions import ConvergenceError, StructureError
from .logging_config import get_logger

logger = get_logger("oracles")

EXACT_TABULAR = "exact-tabular"
MONTE_CARLO = "monte-carlo"


@dataclass
class TabularMDP:
    """
    Explicit finite MDP.

    ``P[s, a, s']`` are transition probabilities and ``R[s, a]`` expected
    rewards. Terminal states have all-zero transition rows, so their value is 0.
    """
    P: np.ndarray
    R: np.ndarray
    gamma: float
    start: int = 0
    horizon: Optional[int] = None

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2] or self.P.shape[:2] != self.R.shape:
            raise StructureError(f"Inconsistent MDP shapes P{self.P.shape} R{self.R.shape}")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def tabular_model(env: Union[GridWorldSpec, TabularMDP]) -> TabularMDP:
    """Explicit transition and reward tables of a gridworld (goal is absorbing)."""
    if isinstance(env, TabularMDP):
        return env
    S, A = env.n_states, env.n_actions
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    goal = env.state_index(env.goal)
    for s in range(S):
        if s == goal:
            continue
        cell = env.cell(s)
        for a in range(A):
            outcomes = [(1.0 - env.slip_prob, a)] + [(env.slip_prob / A, b) for b in range(A)]
            for prob, executed in outcomes:
                if prob == 0.0:
                    continue
                nxt = env.move(cell, executed)
                P[s, a, env.state_index(nxt)] += prob
                R[s, a] += prob * env.reward(nxt)
    return TabularMDP(P=P, R=R, gamma=env.gamma, start=env.state_index(env.start), horizon=env.horizon)


@dataclass
class TabularValues:
    """
    State values, action values and the final Bellman residual.

    ``v`` and ``q`` belong to the first step of an episode. Finite-horizon
    evaluations also carry one stage per remaining step in ``v_by_t`` with
    shape ``(H, S)`` and ``q_by_t`` with shape ``(H, S, A)``.
    """
    v: np.ndarray
    q: np.ndarray
    residual: float
    iterations: int
    v_by_t: Optional[np.ndarray] = None
    q_by_t: Optional[np.ndarray] = None

    @property
    def advantage(self) -> np.ndarray:
        return self.q - self.v[:, None]

    @property
    def horizon(self) -> Optional[int]:
        return None if self.v_by_t is None else self.v_by_t.shape[0]

    def advantage_at(self, t: int) -> np.ndarray:
        """Advantages at step ``t``; zero once the horizon is reached."""
        if self.v_by_t is None:
            return self.advantage
        if t < 0:
            raise ValueError(f"step must be non-negative, got {t}")
        if t >= self.horizon:
            return np.zeros_like(self.q)
        return self.q_by_t[t] - self.v_by_t[t][:, None]


def _check_policy(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise StructureError(f"Policy table shape {pi.shape} != {(mdp.n_states, mdp.n_actions)}")
    if np.any(pi < -1e-12) or not np.allclose(pi.sum(axis=1), 1.0, atol=1e-9):
        raise StructureError("Policy rows must be probability distributions")
    return pi


def _finite_horizon_evaluation(mdp: TabularMDP, pi: np.ndarray, tol: float,
                               max_iterations: int) -> TabularValues:
    H = int(mdp.horizon)
    v_by_t = np.zeros((H + 1, mdp.n_states))
    q_by_t = np.zeros((H, mdp.n_states, mdp.n_actions))
    sweeps = 0
    for t in range(H - 1, -1, -1):
        if sweeps == max_iterations:
            raise ConvergenceError(
                f"Policy evaluation did not converge in {max_iterations} iterations",
                iterations=max_iterations,
                residual=float(np.max(np.abs(v_by_t[t + 1] - v_by_t[min(t + 2, H)]))),
            )
        sweeps += 1
        q_by_t[t] = mdp.R + mdp.gamma * mdp.P @ v_by_t[t + 1]
        v_by_t[t] = np.sum(pi * q_by_t[t], axis=1)
        if t > 0 and t + 2 <= H and np.max(np.abs(v_by_t[t] - v_by_t[t + 1])) <= tol:
            # earlier stages repeat the converged one
            v_by_t[:t] = v_by_t[t]
            q_by_t[:t] = q_by_t[t]
            break
    residual = 0.0
    for t in range(H):
        backup = np.sum(pi * (mdp.R + mdp.gamma * mdp.P @ v_by_t[t + 1]), axis=1)
        residual = max(residual, float(np.max(np.abs(backup - v_by_t[t]))))
    return TabularValues(v=v_by_t[0].copy(), q=q_by_t[0].copy(), residual=residual, iterations=sweeps,
                         v_by_t=v_by_t[:H].copy(), q_by_t=q_by_t)


def policy_evaluation_tabular(
    env: Union[GridWorldSpec, TabularMDP],
    pi: np.ndarray,
    tol: float = 1e-10,
    max_iterations: int = 200_000,
) -> TabularValues:
    """
    Evaluate a stationary policy.

    With a horizon ``H`` the values are computed by backward induction from
    ``V_H = 0``, one stage per remaining step, so episodes cut off at the
    horizon are valued the way they are played. Without a horizon the
    discounted fixed point is found by iteration.

    Args:
        env: Gridworld or explicit MDP
        pi: Action probabilities, shape ``(n_states, n_actions)``
        tol: Bellman residual target
        max_iterations: Iteration cap (sweeps)

    Returns:
        TabularValues with residual ``max |T^pi V - V| <= tol``

    Raises:
        ConvergenceError: The cap is hit before the residual target
    """
    mdp = tabular_model(env)
    pi = _check_policy(mdp, pi)
    if mdp.horizon is not None:
        return _finite_horizon_evaluation(mdp, pi, tol, max_iterations)
    v = np.zeros(mdp.n_states)
    residual = np.inf
    for iteration in range(1, max_iterations + 1):
        q = mdp.R + mdp.gamma * mdp.P @ v
        v_next = np.sum(pi * q, axis=1)
        residual = float(np.max(np.abs(v_next - v)))
        v = v_next
        if residual <= tol:
            q = mdp.R + mdp.gamma * mdp.P @ v
            final = float(np.max(np.abs(np.sum(pi * q, axis=1) - v)))
            return TabularValues(v=v, q=q, residual=final, iterations=iteration)
    raise ConvergenceError(
        f"Policy evaluation did not converge in {max_iterations} iterations",
        iterations=max_iterations, residual=residual,
    )


def value_iteration(
    env: Union[GridWorldSpec, TabularMDP],
    tol: float = 1e-10,
    max_iterations: int = 200_000,
) -> TabularValues:
    """Optimal values by value iteration."""
    mdp = tabular_model(env)
    v = np.zeros(mdp.n_states)
    residual = np.inf
    for iteration in range(1, max_iterations + 1):
        q = mdp.R + mdp.gamma * mdp.P @ v
        v_next = q.max(axis=1)
        residual = float(np.max(np.abs(v_next - v)))
        v = v_next
        if residual <= tol:
            q = mdp.R + mdp.gamma * mdp.P @ v
            return TabularValues(v=v, q=q, residual=float(np.max(np.abs(q.max(axis=1) - v))),
                                 iterations=iteration)
    raise ConvergenceError(
        f"Value iteration did not converge in {max_iterations} iterations",
        iterations=max_iterations, residual=residual,
    )


def optimal_gridworld_policy(env: Union[GridWorldSpec, TabularMDP], tie_break: str = "uniform",
                             atol: float = 1e-9) -> np.ndarray:
    """
    Optimal policy table from value iteration.

    Args:
        env: Gridworld or explicit MDP
        tie_break: ``"first"`` picks the lowest-index optimal action,
            ``"uniform"`` spreads mass over all optimal actions

    Returns:
        Action probabilities, shape ``(n_states, n_actions)``
    """
    if tie_break not in ("first", "uniform"):
        raise ValueError(f"Unknown tie_break: {tie_break}")
    q = value_iteration(env).q
    best = q >= q.max(axis=1, keepdims=True) - atol
    if tie_break == "first":
        first = np.argmax(best, axis=1)
        best = np.zeros_like(best)
        best[np.arange(q.shape[0]), first] = True
    return best / best.sum(axis=1, keepdims=True)


def uniform_policy_table(env: Union[GridWorldSpec, TabularMDP]) -> np.ndarray:
    mdp = tabular_model(env)
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def expected_return_tabular(env: Union[GridWorldSpec, TabularMDP], pi: np.ndarray,
                            horizon: Optional[int] = None) -> float:
    """Exact expected undiscounted return from the start state over the episode horizon."""
    mdp = tabular_model(env)
    pi = _check_policy(mdp, pi)
    steps = horizon if horizon is not None else mdp.horizon
    if steps is None:
        raise StructureError("expected_return_tabular needs a horizon")
    d = np.zeros(mdp.n_states)
    d[mdp.start] = 1.0
    reward_pi = np.sum(pi * mdp.R, axis=1)
    transition_pi = np.einsum("sa,sat->st", pi, mdp.P)
    total = 0.0
    for _ in range(steps):
        total += float(d @ reward_pi)
        d = d @ transition_pi
    return total


def lqr_gain(env: LinPointMassSpec) -> np.ndarray:
    """Discounted infinite-horizon LQR gain ``K`` (control is ``u = -K s``)."""
    root = np.sqrt(env.gamma)
    A, B = root * env.A_matrix, root * env.B_matrix
    Q, R = env.Q_matrix, env.R_matrix
    P = solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


@dataclass
class AdvantageEstimate:
    """Advantage value with its standard error (zero for exact oracles)."""
    value: float
    stderr: float = 0.0
    n_rollouts: int = 0

    def __float__(self) -> float:
        return self.value


class AdvantageOracle:
    """
    Advantage oracle prepared for one policy.

    Args:
        env: Environment spec
        policy: For ``exact-tabular`` a probability table or an object with
            ``action_probs(obs)``; for ``monte-carlo`` an object with ``act``
        method: ``exact-tabular`` or ``monte-carlo``
        n_rollouts: Paired rollouts per Monte-Carlo query
        seed: Base seed of the Monte-Carlo streams
        rollout_horizon: Override the episode horizon of Monte-Carlo rollouts
    """

    def __init__(
        self,
        env: EnvSpec,
        policy: Any,
        method: Optional[str] = None,
        n_rollouts: int = 256,
        seed: int = 0,
        rollout_horizon: Optional[int] = None,
    ):
        if method is None:
            method = EXACT_TABULAR if isinstance(env, GridWorldSpec) else MONTE_CARLO
        if method not in (EXACT_TABULAR, MONTE_CARLO):
            raise ValueError(f"Unknown oracle method: {method}")
        if method == EXACT_TABULAR and not isinstance(env, GridWorldSpec):
            raise StructureError("exact-tabular advantages need a gridworld")
        self.env = env
        self.policy = policy
        self.method = method
        self.n_rollouts = n_rollouts
        self.seed = seed
        self.rollout_horizon = rollout_horizon
        self.values: Optional[TabularValues] = None
        if method == EXACT_TABULAR:
            self.values = policy_evaluation_tabular(env, policy_table(env, policy))

    def advantage(self, state: EnvState, action: Any) -> AdvantageEstimate:
        if self.method == EXACT_TABULAR:
            if state.terminal:
                return AdvantageEstimate(value=0.0)
            s = self.env.state_index(state.cell)
            return AdvantageEstimate(value=float(self.values.advantage_at(state.t)[s, int(action)]))
        return self._monte_carlo(state, action)

    def _monte_carlo(self, state: EnvState, action: Any) -> AdvantageEstimate:
        env = self.env
        if self.rollout_horizon is not None:
            env = replace(env, horizon=self.rollout_horizon)
            state = replace(state, t=0)
        diffs = np.zeros(self.n_rollouts)
        for i in range(self.n_rollouts):
            # identical streams for the Q and V rollouts of pair i
            q_run = run_episode(env, self.policy, np.random.default_rng([self.seed, i]),
                                start=state, first_action=action)
            v_run = run_episode(env, self.policy, np.random.default_rng([self.seed, i]), start=state)
            diffs[i] = q_run.discounted_return(env.gamma) - v_run.discounted_return(env.gamma)
        stderr = float(np.std(diffs, ddof=1) / np.sqrt(self.n_rollouts)) if self.n_rollouts > 1 else 0.0
        return AdvantageEstimate(value=float(np.mean(diffs)), stderr=stderr, n_rollouts=self.n_rollouts)


def advantage(oracle: AdvantageOracle, state: EnvState, action: Any) -> AdvantageEstimate:
    """A^pi(s, a) for the policy the oracle was prepared with."""
    return oracle.advantage(state, action)


def policy_table(env: GridWorldSpec, policy: Any) -> np.ndarray:
    """Probability table of a tabular policy (array passthrough or ``action_probs`` per cell)."""
    if isinstance(policy, np.ndarray):
        return policy
    if hasattr(policy, "table"):
        return np.asarray(policy.table)
    rows = [policy.action_probs(np.array(env.cell(s), dtype=np.float64)) for s in range(env.n_states)]
    return np.asarray(rows, dtype=np.float64)
