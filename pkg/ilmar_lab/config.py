"""
Configuration management for ilmar-lab.

A run is described by a ``RunConfig`` made of one section per concern. Sections
load from a YAML file (one mapping per section), from ``--set section.key=value``
overrides and from a few environment variables. The resolved configuration is
echoed as ``config.yaml`` into every artifact directory.
"""

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import yaml

from .constants import (
    ALL_MODES,
    CLASSIFIER_MODES,
    DEFAULT_ALPHA_GRID,
    DEFAULT_BETA_GRID,
    DEFAULT_CLIP_EPS,
    DEFAULT_TIER_FRACTIONS,
    TASK_RATIOS,
    TrainMode,
)
from .envs import EnvSpec, GridWorldSpec, env_from_dict
from .exceptions import ConfigurationError, IlmarError
from .logging_config import resolve_level

OPTIMIZERS = ("sgd", "adam")


def _check_keys(cls, data: Dict[str, Any], section: str) -> None:
    valid = {f.name for f in fields(cls)}
    for key in data:
        if key not in valid:
            raise ConfigurationError(f"Unknown config key: {section}.{key}", field=f"{section}.{key}")


def _as_float(value: Any, name: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name} must be a number, got {value!r}", field=name)


def _as_int(value: Any, name: str) -> int:
    if isinstance(value, bool):
        raise ConfigurationError(f"{name} must be an integer, got {value!r}", field=name)
    try:
        number = int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name} must be an integer, got {value!r}", field=name)
    if number != value and not isinstance(value, str):
        raise ConfigurationError(f"{name} must be an integer, got {value!r}", field=name)
    return number


def _as_floats(value: Any, name: str) -> Tuple[float, ...]:
    if isinstance(value, (int, float, str)):
        value = [value]
    return tuple(_as_float(v, name) for v in value)


def _as_ints(value: Any, name: str) -> Tuple[int, ...]:
    if isinstance(value, (int, str)):
        value = [value]
    return tuple(_as_int(v, name) for v in value)


@dataclass
class EnvConfig:
    """Environment section; the mapping is ``GridWorldSpec.to_dict`` or ``LinPointMassSpec.to_dict``."""
    spec: EnvSpec = field(default_factory=GridWorldSpec)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "EnvConfig":
        if not data:
            return cls()
        try:
            return cls(spec=env_from_dict(data))
        except ConfigurationError:
            raise
        except (TypeError, ValueError, IlmarError) as e:
            raise ConfigurationError(f"Invalid env section: {e}", field="env")

    def to_dict(self) -> Dict[str, Any]:
        return self.spec.to_dict()


@dataclass
class MixtureConfig:
    """Dataset composition. ``ratio`` overrides the task preset's ratio when set."""
    task: str = "T3"
    ratio: Optional[float] = None
    n_expert_in_de: int = 1
    n_expert_in_ds: int = 40
    tier_fractions: Tuple[float, ...] = DEFAULT_TIER_FRACTIONS
    calibration_tolerance: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.ratio is not None:
            self.ratio = _as_float(self.ratio, "mixture.ratio")
            if self.ratio < 0:
                raise ConfigurationError("mixture.ratio must be non-negative", field="mixture.ratio")
        elif self.task not in TASK_RATIOS:
            raise ConfigurationError(
                f"Unknown task {self.task!r}; expected one of {sorted(TASK_RATIOS)}", field="mixture.task")
        self.n_expert_in_de = _as_int(self.n_expert_in_de, "mixture.n_expert_in_de")
        self.n_expert_in_ds = _as_int(self.n_expert_in_ds, "mixture.n_expert_in_ds")
        self.tier_fractions = _as_floats(self.tier_fractions, "mixture.tier_fractions")
        self.seed = _as_int(self.seed, "mixture.seed")
        if self.n_expert_in_de < 1:
            raise ConfigurationError("mixture.n_expert_in_de must be at least 1", field="mixture.n_expert_in_de")
        if self.n_expert_in_ds < 0:
            raise ConfigurationError("mixture.n_expert_in_ds must be non-negative", field="mixture.n_expert_in_ds")
        if any(not 0.0 < f < 1.0 for f in self.tier_fractions):
            raise ConfigurationError("tier fractions must lie in (0, 1)", field="mixture.tier_fractions")

    @property
    def suboptimal_ratio(self) -> float:
        return self.ratio if self.ratio is not None else TASK_RATIOS[self.task]

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "MixtureConfig":
        data = data or {}
        _check_keys(cls, data, "mixture")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["tier_fractions"] = list(self.tier_fractions)
        return out


@dataclass
class ModelConfig:
    """Network sizes."""
    policy_hidden: Tuple[int, ...] = (64, 64)
    ranker_state_hidden: Tuple[int, ...] = (64, 64)
    ranker_action_hidden: Tuple[int, ...] = (32, 32)
    ranker_head_hidden: Tuple[int, ...] = (64,)
    classifier_hidden: Tuple[int, ...] = (64, 64)
    clip_eps: float = DEFAULT_CLIP_EPS
    zero_head: bool = False

    def __post_init__(self):
        for name in ("policy_hidden", "ranker_state_hidden", "ranker_action_hidden",
                     "ranker_head_hidden", "classifier_hidden"):
            sizes = _as_ints(getattr(self, name), f"model.{name}")
            if any(s <= 0 for s in sizes):
                raise ConfigurationError(f"model.{name} sizes must be positive", field=f"model.{name}")
            setattr(self, name, sizes)
        self.clip_eps = _as_float(self.clip_eps, "model.clip_eps")
        if not 0.0 < self.clip_eps < 0.5:
            raise ConfigurationError("model.clip_eps must lie in (0, 0.5)", field="model.clip_eps")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ModelConfig":
        data = data or {}
        _check_keys(cls, data, "model")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class TrainConfig:
    """
    Training hyperparameters.

    ``policy_lr`` is the policy step size and ``disc_lr`` the discriminator
    step size; ``alpha`` and ``beta`` weight the meta and vanilla terms of the
    composite discriminator loss.
    """
    mode: str = TrainMode.ILMAR
    policy_lr: float = 3e-4
    disc_lr: float = 3e-4
    alpha: float = 1.0
    beta: float = 1.0
    n1: int = 64
    n2: int = 64
    iterations: int = 50_000
    eval_interval: int = 1000
    eval_episodes: int = 10
    diagnostic_interval: int = 10
    checkpoint_interval: int = 1000
    gp_coef: float = 1.0
    ranker_input_mode: str = "expectation"
    policy_optimizer: str = "sgd"
    discriminator_optimizer: str = "adam"
    normalize_obs: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("policy_lr", "disc_lr", "alpha", "beta", "gp_coef"):
            setattr(self, name, _as_float(getattr(self, name), f"train.{name}"))
        for name in ("n1", "n2", "iterations", "eval_interval", "eval_episodes",
                     "diagnostic_interval", "checkpoint_interval", "seed"):
            setattr(self, name, _as_int(getattr(self, name), f"train.{name}"))
        self.validate()

    def validate(self) -> None:
        if self.mode not in ALL_MODES:
            raise ConfigurationError(f"Unknown mode {self.mode!r}; expected one of {list(ALL_MODES)}",
                                     field="train.mode")
        if self.policy_lr <= 0:
            raise ConfigurationError("train.policy_lr must be positive", field="train.policy_lr")
        if self.disc_lr <= 0:
            raise ConfigurationError("train.disc_lr must be positive", field="train.disc_lr")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("train.alpha and train.beta must be non-negative", field="train.alpha")
        if self.gp_coef < 0:
            raise ConfigurationError("train.gp_coef must be non-negative", field="train.gp_coef")
        for name in ("n1", "n2", "eval_interval", "eval_episodes", "diagnostic_interval", "checkpoint_interval"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"train.{name} must be positive", field=f"train.{name}")
        if self.iterations < 0:
            raise ConfigurationError("train.iterations must be non-negative", field="train.iterations")
        if self.ranker_input_mode not in ("expectation", "sample"):
            raise ConfigurationError("train.ranker_input_mode must be expectation or sample",
                                     field="train.ranker_input_mode")
        if self.policy_optimizer not in OPTIMIZERS:
            raise ConfigurationError("train.policy_optimizer must be sgd or adam", field="train.policy_optimizer")
        if self.discriminator_optimizer not in OPTIMIZERS:
            raise ConfigurationError("train.discriminator_optimizer must be sgd or adam",
                                     field="train.discriminator_optimizer")
        alpha, beta = self.coefficients()
        if self.mode != TrainMode.BC and alpha + beta <= 0:
            raise ConfigurationError("alpha + beta must be positive unless mode is bc", field="train.alpha")

    def coefficients(self) -> Tuple[float, float]:
        """Effective (alpha, beta) after applying the mode."""
        if self.mode == TrainMode.BC:
            return 0.0, 0.0
        if self.mode in (TrainMode.VANILLA_ONLY, TrainMode.EXPERT_DIST_WBC):
            return 0.0, self.beta
        if self.mode == TrainMode.META_ONLY:
            return self.alpha, 0.0
        return self.alpha, self.beta

    @property
    def uses_classifier(self) -> bool:
        return self.mode in CLASSIFIER_MODES

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "TrainConfig":
        data = data or {}
        _check_keys(cls, data, "train")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvalConfig:
    """Evaluation and analysis settings."""
    n_episodes: int = 10
    seed: int = 2024
    reference_episodes: int = 100
    oracle_rollouts: int = 256
    max_pairs: int = 500

    def __post_init__(self):
        for name in ("n_episodes", "seed", "reference_episodes", "oracle_rollouts", "max_pairs"):
            setattr(self, name, _as_int(getattr(self, name), f"eval.{name}"))
        if self.n_episodes < 1:
            raise ConfigurationError("eval.n_episodes must be at least 1", field="eval.n_episodes")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "EvalConfig":
        data = data or {}
        _check_keys(cls, data, "eval")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SweepConfig:
    """Grid over the composite-loss coefficients."""
    alpha_grid: Tuple[float, ...] = DEFAULT_ALPHA_GRID
    beta_grid: Tuple[float, ...] = DEFAULT_BETA_GRID
    workers: int = 1

    def __post_init__(self):
        self.alpha_grid = _as_floats(self.alpha_grid, "sweep.alpha_grid")
        self.beta_grid = _as_floats(self.beta_grid, "sweep.beta_grid")
        self.workers = _as_int(self.workers, "sweep.workers")
        if any(v < 0 for v in self.alpha_grid + self.beta_grid):
            raise ConfigurationError("sweep grids must be non-negative", field="sweep.alpha_grid")
        if self.workers < 1:
            raise ConfigurationError("sweep.workers must be at least 1", field="sweep.workers")

    def cells(self) -> List[Tuple[float, float]]:
        """Every (alpha, beta) pair except the joint zero."""
        return [(a, b) for a in self.alpha_grid for b in self.beta_grid if not (a == 0.0 and b == 0.0)]

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "SweepConfig":
        data = data or {}
        _check_keys(cls, data, "sweep")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {"alpha_grid": list(self.alpha_grid), "beta_grid": list(self.beta_grid), "workers": self.workers}


SECTIONS = ("env", "mixture", "model", "train", "eval", "sweep")


@dataclass
class RunConfig:
    """Everything needed to reproduce a run."""
    env: EnvConfig = field(default_factory=EnvConfig)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out: str = "runs"
    seeds: Tuple[int, ...] = (0,)
    log_level: str = "INFO"

    def __post_init__(self):
        self.seeds = _as_ints(self.seeds, "seeds")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required", field="seeds")
        resolve_level(self.log_level)
        self.log_level = self.log_level.upper()

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "RunConfig":
        """Load configuration from a dictionary; unknown sections or keys are errors."""
        data = dict(data or {})
        valid = set(SECTIONS) | {"out", "seeds", "log_level"}
        for key in data:
            if key not in valid:
                raise ConfigurationError(f"Unknown config section: {key}", field=key)
        for key in SECTIONS:
            if data.get(key) is not None and not isinstance(data[key], dict):
                raise ConfigurationError(f"Section {key} must be a mapping", field=key)
        return cls(
            env=EnvConfig.from_dict(data.get("env")),
            mixture=MixtureConfig.from_dict(data.get("mixture")),
            model=ModelConfig.from_dict(data.get("model")),
            train=TrainConfig.from_dict(data.get("train")),
            eval=EvalConfig.from_dict(data.get("eval")),
            sweep=SweepConfig.from_dict(data.get("sweep")),
            out=str(data.get("out", "runs")),
            seeds=data.get("seeds", (0,)),
            log_level=str(data.get("log_level", "INFO")),
        )

    @classmethod
    def from_env(cls, base: Optional["RunConfig"] = None) -> "RunConfig":
        """Apply ``ILMAR_LOG_LEVEL`` and ``ILMAR_WORKERS`` on top of ``base``."""
        data = (base or cls()).to_dict()
        if os.getenv("ILMAR_LOG_LEVEL"):
            data["log_level"] = os.environ["ILMAR_LOG_LEVEL"]
        if os.getenv("ILMAR_WORKERS"):
            data["sweep"]["workers"] = os.environ["ILMAR_WORKERS"]
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "env": self.env.to_dict(),
            "mixture": self.mixture.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "sweep": self.sweep.to_dict(),
            "out": self.out,
            "seeds": list(self.seeds),
            "log_level": self.log_level,
        }

    def with_overrides(self, assignments: Sequence[str]) -> "RunConfig":
        """Apply ``section.key=value`` assignments; values are parsed as YAML scalars."""
        data = self.to_dict()
        for assignment in assignments:
            if "=" not in assignment:
                raise ConfigurationError(f"Override must look like section.key=value: {assignment!r}",
                                         field=assignment)
            dotted, raw = assignment.split("=", 1)
            value = yaml.safe_load(raw) if raw.strip() else None
            parts = dotted.strip().split(".")
            if len(parts) == 1:
                data[parts[0]] = value
            elif len(parts) == 2 and parts[0] in SECTIONS:
                data[parts[0]][parts[1]] = value
            else:
                raise ConfigurationError(f"Unknown config field: {dotted}", field=dotted)
        return RunConfig.from_dict(data)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)
        return path


def load_config(path: Union[str, Path]) -> RunConfig:
    """Load a YAML run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}", field="config")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML in {path}: {e}", field="config")
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError(f"Config file {path} must hold a mapping", field="config")
    return RunConfig.from_dict(data)
