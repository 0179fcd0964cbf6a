"""
Synthetic episodic environments.

Two families are provided:

- ``GridWorldSpec``: a tabular grid with four compass moves, small enough for
  exact dynamic-programming oracles.
- ``LinPointMassSpec``: a linear point mass with quadratic costs, whose expert
  is the discounted LQR controller.

Specs are immutable; rollout state is an ``EnvState`` owned by the caller.
"""

from dataclasses import dataclass, field
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .constants import GRID_ACTIONS
from .exceptions import ConfigurationError, EnvironmentStepError

Cell = Tuple[int, int]
Matrix = Tuple[Tuple[float, ...], ...]


def _as_matrix(value: Any) -> Matrix:
    array = np.atleast_2d(np.asarray(value, dtype=np.float64))
    return tuple(tuple(float(x) for x in row) for row in array)


def _scaled_identity(n: int, scale: float) -> Matrix:
    return _as_matrix(scale * np.eye(n))


@dataclass(frozen=True)
class GridWorldSpec:
    """Deterministic (or slippery) grid with a terminal goal cell."""
    kind: ClassVar[str] = "gridworld"
    discrete: ClassVar[bool] = True

    width: int = 7
    height: int = 7
    goal: Optional[Cell] = None
    start: Cell = (0, 0)
    step_reward: float = -1.0
    goal_reward: float = 0.0
    horizon: int = 60
    gamma: float = 0.99
    slip_prob: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("grid dimensions must be positive", field="env.width")
        goal = tuple(self.goal) if self.goal is not None else (self.width - 1, self.height - 1)
        object.__setattr__(self, "goal", (int(goal[0]), int(goal[1])))
        object.__setattr__(self, "start", (int(self.start[0]), int(self.start[1])))
        if not self.contains(self.goal):
            raise ConfigurationError(f"goal {self.goal} lies outside the grid", field="env.goal")
        if not self.contains(self.start):
            raise ConfigurationError(f"start {self.start} lies outside the grid", field="env.start")
        if self.horizon <= 0:
            raise ConfigurationError("horizon must be positive", field="env.horizon")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in (0, 1]", field="env.gamma")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ConfigurationError("slip_prob must lie in [0, 1)", field="env.slip_prob")

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def n_actions(self) -> int:
        return len(GRID_ACTIONS)

    @property
    def obs_dim(self) -> int:
        return 2

    @property
    def action_dim(self) -> int:
        """Width of the one-hot action encoding."""
        return self.n_actions

    def contains(self, cell: Sequence[int]) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def state_index(self, cell: Sequence[int]) -> int:
        return int(cell[1]) * self.width + int(cell[0])

    def cell(self, index: int) -> Cell:
        return (index % self.width, index // self.width)

    def move(self, cell: Cell, action: int) -> Cell:
        """Deterministic successor; bumping into a wall leaves the agent in place."""
        dx, dy = GRID_ACTIONS[action]
        target = (cell[0] + dx, cell[1] + dy)
        return target if self.contains(target) else cell

    def reward(self, next_cell: Cell) -> float:
        return self.step_reward + (self.goal_reward if next_cell == self.goal else 0.0)

    def manhattan_to_goal(self, cell: Optional[Cell] = None) -> int:
        cell = self.start if cell is None else cell
        return abs(self.goal[0] - cell[0]) + abs(self.goal[1] - cell[1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "width": self.width,
            "height": self.height,
            "goal": list(self.goal),
            "start": list(self.start),
            "step_reward": self.step_reward,
            "goal_reward": self.goal_reward,
            "horizon": self.horizon,
            "gamma": self.gamma,
            "slip_prob": self.slip_prob,
        }


@dataclass(frozen=True)
class LinPointMassSpec:
    """Linear dynamics ``s' = A s + B clip(a)`` with reward ``-(s'Qs + a'Ra)``."""
    kind: ClassVar[str] = "pointmass"
    discrete: ClassVar[bool] = False

    state_dim: int = 2
    action_dim: int = 2
    A: Optional[Matrix] = None
    B: Optional[Matrix] = None
    Qc: Optional[Matrix] = None
    Rc: Optional[Matrix] = None
    horizon: int = 40
    gamma: float = 0.99
    action_bound: float = 1.0
    init_std: float = 1.0

    def __post_init__(self):
        n, m = self.state_dim, self.action_dim
        if n <= 0 or m <= 0:
            raise ConfigurationError("state and action dims must be positive", field="env.state_dim")
        defaults = {
            "A": _scaled_identity(n, 1.0),
            "B": _as_matrix(0.1 * np.eye(n, m)),
            "Qc": _scaled_identity(n, 1.0),
            "Rc": _scaled_identity(m, 0.1),
        }
        shapes = {"A": (n, n), "B": (n, m), "Qc": (n, n), "Rc": (m, m)}
        for name, default in defaults.items():
            value = getattr(self, name)
            matrix = default if value is None else _as_matrix(value)
            if np.asarray(matrix).shape != shapes[name]:
                raise ConfigurationError(
                    f"{name} must have shape {shapes[name]}, got {np.asarray(matrix).shape}",
                    field=f"env.{name}",
                )
            object.__setattr__(self, name, matrix)

        Q, R = self.Q_matrix, self.R_matrix
        if not np.allclose(Q, Q.T) or np.min(np.linalg.eigvalsh(Q)) < -1e-12:
            raise ConfigurationError("Qc must be symmetric positive semi-definite", field="env.Qc")
        if not np.allclose(R, R.T) or np.min(np.linalg.eigvalsh(R)) <= 0:
            raise ConfigurationError("Rc must be symmetric positive definite", field="env.Rc")
        if self.horizon <= 0:
            raise ConfigurationError("horizon must be positive", field="env.horizon")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in (0, 1]", field="env.gamma")
        if self.action_bound <= 0:
            raise ConfigurationError("action_bound must be positive", field="env.action_bound")

    @property
    def A_matrix(self) -> np.ndarray:
        return np.asarray(self.A, dtype=np.float64)

    @property
    def B_matrix(self) -> np.ndarray:
        return np.asarray(self.B, dtype=np.float64)

    @property
    def Q_matrix(self) -> np.ndarray:
        return np.asarray(self.Qc, dtype=np.float64)

    @property
    def R_matrix(self) -> np.ndarray:
        return np.asarray(self.Rc, dtype=np.float64)

    @property
    def obs_dim(self) -> int:
        return self.state_dim

    def clip_action(self, action: Any) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64), -self.action_bound, self.action_bound)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "A": [list(r) for r in self.A],
            "B": [list(r) for r in self.B],
            "Qc": [list(r) for r in self.Qc],
            "Rc": [list(r) for r in self.Rc],
            "horizon": self.horizon,
            "gamma": self.gamma,
            "action_bound": self.action_bound,
            "init_std": self.init_std,
        }


EnvSpec = Union[GridWorldSpec, LinPointMassSpec]

ENV_KINDS = {
    GridWorldSpec.kind: GridWorldSpec,
    LinPointMassSpec.kind: LinPointMassSpec,
}


def env_from_dict(data: Dict[str, Any]) -> EnvSpec:
    """Build an environment spec from its ``to_dict`` form."""
    data = dict(data)
    kind = data.pop("kind", GridWorldSpec.kind)
    if kind not in ENV_KINDS:
        raise ConfigurationError(f"Unknown environment kind: {kind}", field="env.kind")
    cls = ENV_KINDS[kind]
    valid = set(cls.__dataclass_fields__)
    unknown = sorted(set(data) - valid)
    if unknown:
        raise ConfigurationError(f"Unknown env field: {unknown[0]}", field=f"env.{unknown[0]}")
    if cls is GridWorldSpec:
        for key in ("goal", "start"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
    return cls(**data)


@dataclass(frozen=True)
class EnvState:
    """A point in an environment: observation values, time step and terminal flag."""
    values: Tuple[float, ...]
    t: int = 0
    terminal: bool = False

    @property
    def obs(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    @property
    def cell(self) -> Cell:
        return (int(round(self.values[0])), int(round(self.values[1])))


def reset(env: EnvSpec, seed: Optional[int] = None) -> EnvState:
    """
    Draw an initial state.

    The gridworld always starts at its start cell; the point mass draws a
    seeded Gaussian around the origin.
    """
    if isinstance(env, GridWorldSpec):
        return EnvState(values=(float(env.start[0]), float(env.start[1])), t=0,
                        terminal=env.start == env.goal)
    rng = np.random.default_rng(seed)
    s0 = rng.normal(0.0, env.init_std, size=env.state_dim)
    return EnvState(values=tuple(float(x) for x in s0), t=0, terminal=False)


def grid_state(env: GridWorldSpec, cell: Cell, t: int = 0) -> EnvState:
    return EnvState(values=(float(cell[0]), float(cell[1])), t=t, terminal=tuple(cell) == env.goal)


def validate_discrete_action(env: GridWorldSpec, action: Any) -> int:
    if isinstance(action, (bool, np.bool_)):
        raise EnvironmentStepError(f"Invalid action {action!r}")
    try:
        index = int(action)
    except (TypeError, ValueError):
        raise EnvironmentStepError(f"Invalid action {action!r}")
    if index != action or not 0 <= index < env.n_actions:
        raise EnvironmentStepError(
            f"Action {action!r} outside range 0..{env.n_actions - 1}", {"action": action})
    return index


def step(env: EnvSpec, state: EnvState, action: Any,
         rng: Optional[np.random.Generator] = None) -> Tuple[EnvState, float, bool]:
    """
    Advance one step.

    Args:
        env: Environment spec
        state: Current state; must not be terminal
        action: Discrete index (gridworld) or real vector (point mass, clipped)
        rng: Generator used for slips on a slippery grid

    Returns:
        Tuple of (next state, reward, done)

    Raises:
        EnvironmentStepError: Invalid action or stepping a finished episode
    """
    if state.terminal:
        raise EnvironmentStepError("Cannot step a finished episode", {"t": state.t})

    if isinstance(env, GridWorldSpec):
        index = validate_discrete_action(env, action)
        if env.slip_prob > 0.0:
            if rng is None:
                raise EnvironmentStepError("A slippery gridworld needs a random generator to step")
            if rng.random() < env.slip_prob:
                index = int(rng.integers(env.n_actions))
        next_cell = env.move(state.cell, index)
        reward = env.reward(next_cell)
        t = state.t + 1
        done = next_cell == env.goal or t >= env.horizon
        return EnvState(values=(float(next_cell[0]), float(next_cell[1])), t=t, terminal=done), reward, done

    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (env.action_dim,) or not np.all(np.isfinite(a)):
        raise EnvironmentStepError(
            f"Action must be a finite vector of length {env.action_dim}", {"action": a.tolist()})
    a = env.clip_action(a)
    s = state.obs
    reward = -float(s @ env.Q_matrix @ s + a @ env.R_matrix @ a)
    s_next = env.A_matrix @ s + env.B_matrix @ a
    t = state.t + 1
    done = t >= env.horizon
    return EnvState(values=tuple(float(x) for x in s_next), t=t, terminal=done), reward, done


def encode_action(env: EnvSpec, action: Any) -> np.ndarray:
    """Model-facing action encoding: one-hot for discrete moves, clipped vector otherwise."""
    if isinstance(env, GridWorldSpec):
        one_hot = np.zeros(env.n_actions)
        one_hot[validate_discrete_action(env, action)] = 1.0
        return one_hot
    return env.clip_action(np.asarray(action, dtype=np.float64).reshape(-1))


def random_action(env: EnvSpec, rng: np.random.Generator) -> Any:
    """Sample from the uniform random policy."""
    if isinstance(env, GridWorldSpec):
        return int(rng.integers(env.n_actions))
    return rng.uniform(-env.action_bound, env.action_bound, size=env.action_dim)


@dataclass
class Rollout:
    """One episode as executed."""
    observations: List[np.ndarray] = field(default_factory=list)
    actions: List[Any] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    dones: List[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards)) if self.rewards else 0.0

    def discounted_return(self, gamma: float) -> float:
        return float(sum(r * gamma ** k for k, r in enumerate(self.rewards)))


def run_episode(
    env: EnvSpec,
    policy: Any,
    rng: np.random.Generator,
    greedy: bool = False,
    start: Optional[EnvState] = None,
    first_action: Any = None,
    max_steps: Optional[int] = None,
) -> Rollout:
    """
    Roll a policy out until the episode ends.

    Args:
        env: Environment spec
        policy: Object with ``act(obs, rng, greedy)``
        rng: Generator shared by policy sampling and environment noise
        greedy: Ask the policy for its deterministic action
        start: Start state (defaults to ``reset`` drawn from ``rng``)
        first_action: Force the first action instead of asking the policy
        max_steps: Stop early after this many steps

    Returns:
        The executed rollout
    """
    state = start if start is not None else reset(env, int(rng.integers(2 ** 31)))
    rollout = Rollout()
    limit = env.horizon if max_steps is None else max_steps
    while not state.terminal and len(rollout) < limit:
        obs = state.obs
        if first_action is not None and len(rollout) == 0:
            action = first_action
        else:
            action = policy.act(obs, rng, greedy)
        next_state, reward, done = step(env, state, action, rng)
        rollout.observations.append(obs)
        rollout.actions.append(action)
        rollout.rewards.append(reward)
        rollout.dones.append(done)
        state = next_state
    return rollout


def episode_seeds(seed: int, n_episodes: int) -> np.ndarray:
    """Per-episode seeds derived from one run seed."""
    return np.random.default_rng(seed).integers(2 ** 31, size=n_episodes)


def rollout_returns(env: EnvSpec, policy: Any, n_episodes: int, seed: int,
                    greedy: bool = False) -> np.ndarray:
    """Undiscounted returns of ``n_episodes`` independent, seeded episodes."""
    returns = np.zeros(n_episodes)
    for i, episode_seed in enumerate(episode_seeds(seed, n_episodes)):
        returns[i] = run_episode(env, policy, np.random.default_rng(int(episode_seed)), greedy).total_return
    return returns
