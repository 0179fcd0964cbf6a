"""
Demonstration datasets: collection, mixtures, persistence and statistics.

A ``DemoDataset`` holds the small expert set D^E and the supplementary set D^S;
their union is D. Rewards are stored for evaluation only: training consumes
``DemoDataset.training_view``, which carries no rewards.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np

from .constants import DEFAULT_TIER_FRACTIONS, EXPERT_SOURCE, SCHEMA_VERSION, Split
from .envs import EnvSpec, encode_action, episode_seeds, run_episode
from .exceptions import DatasetFormatError, StructureError
from .logging_config import get_logger
from .policies import expert_policy, make_tier_policies

logger = get_logger("data")

LINE_KEYS = ("state", "action", "reward", "done", "episode_id", "source_id", "split")


@dataclass(frozen=True)
class Transition:
    """One recorded step."""
    state: np.ndarray
    action: Any
    reward: float
    done: bool
    episode_id: int
    source_id: str


@dataclass
class Trajectory:
    """One episode from one source, stored column-wise."""
    episode_id: int
    source_id: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.asarray(self.actions)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        if len(self.rewards) == 0:
            raise StructureError(f"Trajectory {self.episode_id} ({self.source_id}) is empty")
        if not (len(self.states) == len(self.actions) == len(self.rewards) == len(self.dones)):
            raise StructureError(f"Trajectory {self.episode_id} has ragged columns")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def discrete(self) -> bool:
        return self.actions.ndim == 1

    def transitions(self) -> Iterator[Transition]:
        for k in range(len(self)):
            action = int(self.actions[k]) if self.discrete else self.actions[k]
            yield Transition(self.states[k], action, float(self.rewards[k]), bool(self.dones[k]),
                             self.episode_id, self.source_id)

    def equals(self, other: "Trajectory") -> bool:
        return (
            self.episode_id == other.episode_id
            and self.source_id == other.source_id
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards, equal_nan=True)
            and np.array_equal(self.dones, other.dones)
        )


@dataclass
class TrainingView:
    """Reward-free arrays over D = D^E + D^S, the only data the trainer sees."""
    states: np.ndarray
    actions: np.ndarray
    source_ids: np.ndarray
    is_expert_split: np.ndarray
    episode_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @property
    def expert_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_expert_split)

    @property
    def supplementary_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_expert_split)


@dataclass
class DemoDataset:
    """Expert set D^E, supplementary set D^S and per-source provenance counts."""
    expert: List[Trajectory] = field(default_factory=list)
    supplementary: List[Trajectory] = field(default_factory=list)
    provenance: Dict[str, Any] = field(default_factory=dict)
    env: Optional[Dict[str, Any]] = None

    def __post_init__(self):
        for name, split in ((Split.EXPERT, self.expert), (Split.SUPPLEMENTARY, self.supplementary)):
            ids = [t.episode_id for t in split]
            if len(ids) != len(set(ids)):
                raise StructureError(f"Duplicate episode ids in the {name} split")

    @property
    def full(self) -> List[Trajectory]:
        return list(self.expert) + list(self.supplementary)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.full)

    def is_empty(self) -> bool:
        return not self.expert and not self.supplementary

    def training_view(self, env: EnvSpec) -> TrainingView:
        """Encode states and actions of D; rewards are left behind."""
        states, actions, sources, flags, episodes = [], [], [], [], []
        for is_expert, split in ((True, self.expert), (False, self.supplementary)):
            for traj in split:
                for k in range(len(traj)):
                    states.append(traj.states[k])
                    actions.append(encode_action(env, traj.actions[k]))
                    sources.append(traj.source_id)
                    flags.append(is_expert)
                    episodes.append(traj.episode_id)
        if not states:
            raise StructureError("Cannot build a training view of an empty dataset")
        return TrainingView(
            states=np.asarray(states, dtype=np.float64),
            actions=np.asarray(actions, dtype=np.float64),
            source_ids=np.asarray(sources),
            is_expert_split=np.asarray(flags, dtype=bool),
            episode_ids=np.asarray(episodes, dtype=np.int64),
        )

    def equals(self, other: "DemoDataset") -> bool:
        return (
            len(self.expert) == len(other.expert)
            and len(self.supplementary) == len(other.supplementary)
            and all(a.equals(b) for a, b in zip(self.expert, other.expert))
            and all(a.equals(b) for a, b in zip(self.supplementary, other.supplementary))
            and self.provenance == other.provenance
            and self.env == other.env
        )


def collect(policy: Any, env: EnvSpec, n_episodes: int, seed: int,
            source_id: str = EXPERT_SOURCE, first_episode_id: int = 0) -> List[Trajectory]:
    """
    Roll a policy out for complete episodes, recording actions as executed.

    Args:
        policy: Object with ``act(obs, rng, greedy)``
        env: Environment spec
        n_episodes: Number of episodes (``>= 0``)
        seed: Seed; each episode gets its own derived stream
        source_id: Provenance tag of the trajectories
        first_episode_id: Id of the first episode

    Returns:
        List of trajectories
    """
    if n_episodes < 0:
        raise ValueError("n_episodes must be non-negative")
    out = []
    for k, episode_seed in enumerate(episode_seeds(seed, n_episodes)):
        run = run_episode(env, policy, np.random.default_rng(int(episode_seed)))
        out.append(Trajectory(
            episode_id=first_episode_id + k,
            source_id=source_id,
            states=np.asarray(run.observations),
            actions=np.asarray(run.actions),
            rewards=np.asarray(run.rewards),
            dones=np.asarray(run.dones),
        ))
    return out


@dataclass
class MixtureSpec:
    """
    Composition of a mixed dataset.

    ``suboptimal_ratio`` is the number of suboptimal trajectories per expert
    trajectory in D^S (0.25, 1 and 4 for the T1, T2 and T3 presets).
    """
    n_expert_in_de: int = 1
    n_expert_in_ds: int = 40
    suboptimal_ratio: float = 1.0
    tier_fractions: Sequence[float] = DEFAULT_TIER_FRACTIONS
    seed: int = 0
    tier_policies: Optional[Sequence[Any]] = None

    def tier_counts(self) -> List[int]:
        """Suboptimal trajectories per tier; the remainder goes round-robin to the first tiers."""
        n_tiers = len(self.tier_fractions) if self.tier_policies is None else len(self.tier_policies)
        n_sub = int(math.floor(self.suboptimal_ratio * self.n_expert_in_ds + 1e-9))
        if n_sub == 0:
            return [0] * n_tiers
        if n_tiers == 0:
            raise StructureError("A positive suboptimal ratio needs at least one tier")
        base, remainder = divmod(n_sub, n_tiers)
        return [base + (1 if k < remainder else 0) for k in range(n_tiers)]


def build_mixture(spec: MixtureSpec, env: EnvSpec, expert: Any = None) -> DemoDataset:
    """
    Build D^E and D^S with exact per-source counts.

    Args:
        spec: Mixture composition; tiers are calibrated here when not supplied
        env: Environment spec
        expert: Expert policy (defaults to the oracle expert)

    Returns:
        The mixed dataset, with provenance counts per source
    """
    if spec.n_expert_in_de < 0 or spec.n_expert_in_ds < 0 or spec.suboptimal_ratio < 0:
        raise StructureError("Mixture counts and ratio must be non-negative")
    expert = expert if expert is not None else expert_policy(env)
    counts = spec.tier_counts()
    tiers = spec.tier_policies
    if tiers is None and any(counts):
        tiers = make_tier_policies(env, spec.tier_fractions, seed=spec.seed)

    seeds = [int(s) for s in episode_seeds(spec.seed, 2 + len(counts))]
    de = collect(expert, env, spec.n_expert_in_de, seeds[0], EXPERT_SOURCE)
    ds = collect(expert, env, spec.n_expert_in_ds, seeds[1], EXPERT_SOURCE)
    ds_counts = {EXPERT_SOURCE: spec.n_expert_in_ds}
    for k, count in enumerate(counts):
        if count == 0:
            continue
        tier = tiers[k]
        ds += collect(tier, env, count, seeds[2 + k], tier.name, first_episode_id=len(ds))
        ds_counts[tier.name] = count

    provenance = {
        "DE": {EXPERT_SOURCE: spec.n_expert_in_de},
        "DS": ds_counts,
        "suboptimal_ratio": spec.suboptimal_ratio,
        "remainder": int(sum(counts) % len(counts)) if counts else 0,
    }
    if tiers is not None:
        provenance["tiers"] = {
            t.name: {"requested": t.requested, "achieved": t.achieved, "corruption": t.corruption}
            for t in tiers if hasattr(t, "achieved")
        }
    logger.info(f"Built mixture: DE={provenance['DE']} DS={ds_counts}")
    return DemoDataset(expert=de, supplementary=ds, provenance=provenance, env=env.to_dict())


def _json_action(action: Any) -> Any:
    if np.ndim(action) == 0:
        return int(action)
    return [float(x) for x in np.asarray(action).ravel()]


def save(dataset: DemoDataset, path: Union[str, Path]) -> Path:
    """Write the dataset as JSON lines: a header, then one transition per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema": SCHEMA_VERSION, "env": dataset.env, "provenance": dataset.provenance}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for split, trajectories in ((Split.EXPERT, dataset.expert), (Split.SUPPLEMENTARY, dataset.supplementary)):
            for traj in trajectories:
                for k in range(len(traj)):
                    record = {
                        "state": [float(x) for x in traj.states[k]],
                        "action": _json_action(traj.actions[k]),
                        "reward": float(traj.rewards[k]),
                        "done": bool(traj.dones[k]),
                        "episode_id": traj.episode_id,
                        "source_id": traj.source_id,
                        "split": split,
                    }
                    f.write(json.dumps(record) + "\n")
    return path


def load(path: Union[str, Path]) -> DemoDataset:
    """
    Read a dataset written by ``save``.

    Raises:
        DatasetFormatError: Schema mismatch or a malformed line (with its line number)
    """
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"Dataset file not found: {path}", path=str(path))

    groups: Dict[str, List[Dict[str, Any]]] = {Split.EXPERT: [], Split.SUPPLEMENTARY: []}
    header = None
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"Line {line_number}: invalid JSON ({e.msg})",
                                         line_number=line_number, path=str(path))
            if header is None:
                if not isinstance(record, dict) or record.get("schema") != SCHEMA_VERSION:
                    raise DatasetFormatError(
                        f"Line {line_number}: expected a header with schema {SCHEMA_VERSION}",
                        line_number=line_number, path=str(path))
                header = record
                continue
            if not isinstance(record, dict) or any(k not in record for k in LINE_KEYS):
                raise DatasetFormatError(f"Line {line_number}: missing transition fields",
                                         line_number=line_number, path=str(path))
            if record["split"] not in groups:
                raise DatasetFormatError(f"Line {line_number}: unknown split {record['split']!r}",
                                         line_number=line_number, path=str(path))
            record["_line"] = line_number
            groups[record["split"]].append(record)

    if header is None:
        raise DatasetFormatError("Empty dataset file", line_number=1, path=str(path))

    splits = {}
    for split, records in groups.items():
        trajectories = []
        start = 0
        for end in range(1, len(records) + 1):
            boundary = end == len(records) or (
                records[end]["episode_id"], records[end]["source_id"]
            ) != (records[start]["episode_id"], records[start]["source_id"])
            if not boundary:
                continue
            chunk = records[start:end]
            try:
                trajectories.append(Trajectory(
                    episode_id=int(chunk[0]["episode_id"]),
                    source_id=str(chunk[0]["source_id"]),
                    states=np.asarray([r["state"] for r in chunk], dtype=np.float64),
                    actions=np.asarray([r["action"] for r in chunk]),
                    rewards=np.asarray([r["reward"] for r in chunk], dtype=np.float64),
                    dones=np.asarray([r["done"] for r in chunk], dtype=bool),
                ))
            except (StructureError, ValueError, TypeError) as e:
                raise DatasetFormatError(f"Line {chunk[0]['_line']}: malformed trajectory ({e})",
                                         line_number=chunk[0]["_line"], path=str(path))
            start = end
        splits[split] = trajectories

    try:
        return DemoDataset(expert=splits[Split.EXPERT], supplementary=splits[Split.SUPPLEMENTARY],
                           provenance=header.get("provenance") or {}, env=header.get("env"))
    except StructureError as e:
        raise DatasetFormatError(str(e), path=str(path))


@dataclass
class Standardizer:
    """Per-dimension observation standardization fitted on D."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray, floor: float = 1e-6) -> "Standardizer":
        states = np.asarray(states, dtype=np.float64)
        return cls(mean=states.mean(axis=0), std=np.maximum(states.std(axis=0), floor))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def apply(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> "Standardizer":
        return cls(mean=np.asarray(data["mean"], dtype=np.float64), std=np.asarray(data["std"], dtype=np.float64))


def poison_rewards(dataset: DemoDataset, value: float = float("nan")) -> DemoDataset:
    """Copy of the dataset with every reward overwritten."""
    def poisoned(trajectories: List[Trajectory]) -> List[Trajectory]:
        return [replace(t, rewards=np.full(len(t), value)) for t in trajectories]

    return DemoDataset(expert=poisoned(dataset.expert), supplementary=poisoned(dataset.supplementary),
                       provenance=dict(dataset.provenance), env=dataset.env)


def dataset_stats(dataset: DemoDataset) -> Dict[str, Any]:
    """Per-source trajectory counts and mean returns plus state and action moments over D."""
    per_source: Dict[str, Dict[str, Any]] = {}
    for split, trajectories in ((Split.EXPERT, dataset.expert), (Split.SUPPLEMENTARY, dataset.supplementary)):
        for traj in trajectories:
            key = f"{split}/{traj.source_id}"
            entry = per_source.setdefault(key, {"split": split, "source_id": traj.source_id,
                                                "n_trajectories": 0, "n_transitions": 0, "returns": []})
            entry["n_trajectories"] += 1
            entry["n_transitions"] += len(traj)
            entry["returns"].append(traj.total_return)
    for entry in per_source.values():
        returns = entry.pop("returns")
        entry["mean_return"] = float(np.mean(returns))

    stats: Dict[str, Any] = {"per_source": per_source, "n_transitions": dataset.n_transitions}
    full = dataset.full
    if full:
        states = np.concatenate([t.states for t in full])
        stats["state_mean"] = states.mean(axis=0).tolist()
        stats["state_std"] = states.std(axis=0).tolist()
        if full[0].discrete:
            actions = np.concatenate([t.actions for t in full]).astype(np.int64)
            stats["action_frequency"] = (np.bincount(actions) / len(actions)).tolist()
        else:
            actions = np.concatenate([t.actions for t in full]).astype(np.float64)
            stats["action_mean"] = actions.mean(axis=0).tolist()
            stats["action_std"] = actions.std(axis=0).tolist()
    return stats
