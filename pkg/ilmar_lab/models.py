"""
Parametric models: the policy, the pairwise action ranker and the
expert-vs-supplementary classifier, plus JSON-lines checkpoints.

Forward functions take their parameters as a mapping of segment name to
tensor (or plain array), so the same code runs on constants, on watched
leaves, and on traced post-update parameters.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import CompGraph, ParamVector, Tensor, as_tensor
from .constants import DEFAULT_CLIP_EPS, LOG_STD_MAX, LOG_STD_MIN, SCHEMA_VERSION, WEIGHT_THRESHOLD
from .data import Standardizer
from .envs import EnvSpec
from .exceptions import DatasetFormatError, StructureError
from .logging_config import get_logger

logger = get_logger("models")

Params = Mapping[str, Any]

SAMPLE = "sample"
EXPECTATION = "expectation"
RANKER_INPUT_MODES = (EXPECTATION, SAMPLE)


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], prefix: str,
             zero_last: bool = False) -> List[Tuple[str, np.ndarray]]:
    """Segments ``{prefix}.{k}.W`` / ``{prefix}.{k}.b`` with 1/sqrt(fan_in) normal weights."""
    segments = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        if zero_last and last:
            W = np.zeros((n_in, n_out))
        else:
            W = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))
        segments.append((f"{prefix}.{k}.W", W))
        segments.append((f"{prefix}.{k}.b", np.zeros(n_out)))
    return segments


def mlp(params: Params, x: Tensor, prefix: str, n_layers: int, activate_last: bool = False) -> Tensor:
    h = as_tensor(x)
    for k in range(n_layers):
        h = ad.add(ad.matmul(h, as_tensor(params[f"{prefix}.{k}.W"])), as_tensor(params[f"{prefix}.{k}.b"]))
        if k < n_layers - 1 or activate_last:
            h = ad.tanh(h)
    return h


@dataclass
class PolicyModel:
    """
    Stochastic policy over a tanh MLP trunk.

    Discrete heads emit categorical logits. Continuous heads emit a Gaussian
    mean ``bound * tanh(linear)`` with a state-independent log-std segment
    clamped to ``[LOG_STD_MIN, LOG_STD_MAX]``.
    """
    obs_dim: int
    action_dim: int
    discrete: bool
    hidden: Tuple[int, ...]
    params: ParamVector
    action_bound: float = 1.0
    normalizer: Optional[Standardizer] = None

    @classmethod
    def create(cls, env: EnvSpec, hidden: Sequence[int] = (64, 64), seed: int = 0,
               normalizer: Optional[Standardizer] = None) -> "PolicyModel":
        rng = np.random.default_rng(seed)
        sizes = [env.obs_dim] + list(hidden) + [env.action_dim]
        segments = init_mlp(rng, sizes, "pi")
        if not env.discrete:
            segments.append(("pi.log_std", np.zeros(env.action_dim)))
        return cls(
            obs_dim=env.obs_dim,
            action_dim=env.action_dim,
            discrete=env.discrete,
            hidden=tuple(hidden),
            params=ParamVector(segments),
            action_bound=float(getattr(env, "action_bound", 1.0)),
            normalizer=normalizer,
        )

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def with_params(self, params: ParamVector) -> "PolicyModel":
        self.params.check_same_structure(params, "policy parameters")
        return PolicyModel(self.obs_dim, self.action_dim, self.discrete, self.hidden, params,
                           self.action_bound, self.normalizer)

    def normalize(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return self.normalizer.apply(states) if self.normalizer is not None else states

    def head(self, params: Params, states: np.ndarray) -> Tensor:
        """Logits (discrete) or pre-squash means (continuous), shape (N, action_dim)."""
        return mlp(params, Tensor(self.normalize(states)), "pi", self.n_layers)

    def mean(self, params: Params, states: np.ndarray) -> Tensor:
        return ad.mul(ad.tanh(self.head(params, states)), self.action_bound)

    def log_std(self, params: Params) -> Tensor:
        return ad.clip(as_tensor(params["pi.log_std"]), LOG_STD_MIN, LOG_STD_MAX)

    def log_prob(self, params: Params, states: np.ndarray, actions: np.ndarray) -> Tensor:
        """
        Log-probability of encoded actions, shape (N,).

        Args:
            params: Policy parameters
            states: Raw observations, shape (N, obs_dim)
            actions: One-hot (discrete) or real (continuous) encodings, shape (N, action_dim)
        """
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if self.discrete:
            return ad.summation(ad.mul(ad.log_softmax(self.head(params, states)), actions), axis=1)
        mean = self.mean(params, states)
        log_std = self.log_std(params)
        z = ad.div(ad.sub(actions, mean), ad.exp(log_std))
        per_dim = ad.add(ad.add(ad.mul(z, z), ad.mul(log_std, 2.0)), math.log(2.0 * math.pi))
        return ad.mul(ad.summation(per_dim, axis=1), -0.5)

    def action_for_ranker(self, params: Params, states: np.ndarray, mode: str = EXPECTATION,
                          rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        Policy action fed to the ranker, shape (N, action_dim).

        ``expectation`` gives the probability vector or the Gaussian mean and is
        differentiable in the parameters; ``sample`` draws a one-hot or Gaussian sample.
        """
        if mode not in RANKER_INPUT_MODES:
            raise ValueError(f"Unknown ranker input mode: {mode}")
        if self.discrete:
            probs = ad.softmax(self.head(params, states))
            if mode == EXPECTATION:
                return probs
            if rng is None:
                raise ValueError("sample mode needs a random generator")
            p = probs.value
            u = rng.random((p.shape[0], 1))
            index = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)
            return Tensor(np.eye(p.shape[1])[index])
        mean = self.mean(params, states)
        if mode == EXPECTATION:
            return mean
        if rng is None:
            raise ValueError("sample mode needs a random generator")
        noise = rng.normal(size=mean.shape)
        sample = ad.add(mean, ad.mul(ad.exp(self.log_std(params)), noise))
        return ad.clip(sample, -self.action_bound, self.action_bound)

    def action_probs(self, obs: np.ndarray) -> np.ndarray:
        if not self.discrete:
            raise TypeError("action_probs is only defined for discrete policies")
        with ad.no_grad():
            return ad.softmax(self.head(self.params, obs)).value[0]

    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> Any:
        """Environment action: argmax or mean when ``greedy``, otherwise a sample."""
        with ad.no_grad():
            if self.discrete:
                probs = ad.softmax(self.head(self.params, obs)).value[0]
                if greedy:
                    return int(np.argmax(probs))
                return int(rng.choice(len(probs), p=probs / probs.sum()))
            mean = self.mean(self.params, obs).value[0]
            if greedy:
                return mean
            std = np.exp(np.clip(self.params["pi.log_std"], LOG_STD_MIN, LOG_STD_MAX))
            return np.clip(mean + std * rng.normal(size=mean.shape), -self.action_bound, self.action_bound)

    def config(self) -> Dict[str, Any]:
        return {
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "discrete": self.discrete,
            "hidden": list(self.hidden),
            "action_bound": self.action_bound,
            "normalizer": self.normalizer.to_dict() if self.normalizer is not None else None,
        }


@dataclass
class RankerModel:
    """
    Action ranker ``C(s, a1, a2)``: probability that ``a1`` is not inferior to ``a2``.

    One action encoder with shared parameters codes both actions; the head
    sees ``[state code, code(a1), code(a2)]``. Outputs are clipped to
    ``[clip_eps, 1 - clip_eps]``.
    """
    obs_dim: int
    action_dim: int
    params: ParamVector
    state_hidden: Tuple[int, ...] = (64, 64)
    action_hidden: Tuple[int, ...] = (32, 32)
    head_hidden: Tuple[int, ...] = (64,)
    clip_eps: float = DEFAULT_CLIP_EPS
    normalizer: Optional[Standardizer] = None

    @classmethod
    def create(cls, env: EnvSpec, state_hidden: Sequence[int] = (64, 64),
               action_hidden: Sequence[int] = (32, 32), head_hidden: Sequence[int] = (64,),
               clip_eps: float = DEFAULT_CLIP_EPS, seed: int = 0, zero_head: bool = False,
               normalizer: Optional[Standardizer] = None) -> "RankerModel":
        if not state_hidden or not action_hidden:
            raise StructureError("ranker encoders need at least one layer")
        rng = np.random.default_rng(seed)
        segments = init_mlp(rng, [env.obs_dim] + list(state_hidden), "state")
        segments += init_mlp(rng, [env.action_dim] + list(action_hidden), "action")
        head_in = state_hidden[-1] + 2 * action_hidden[-1]
        segments += init_mlp(rng, [head_in] + list(head_hidden) + [1], "head", zero_last=zero_head)
        return cls(env.obs_dim, env.action_dim, ParamVector(segments), tuple(state_hidden),
                   tuple(action_hidden), tuple(head_hidden), clip_eps, normalizer)

    def with_params(self, params: ParamVector) -> "RankerModel":
        self.params.check_same_structure(params, "ranker parameters")
        return RankerModel(self.obs_dim, self.action_dim, params, self.state_hidden, self.action_hidden,
                           self.head_hidden, self.clip_eps, self.normalizer)

    def normalize(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return self.normalizer.apply(states) if self.normalizer is not None else states

    def encode_action(self, params: Params, actions: Any) -> Tensor:
        return mlp(params, actions, "action", len(self.action_hidden), activate_last=True)

    def forward(self, params: Params, states: np.ndarray, a1: Any, a2: Any) -> Tensor:
        """Clipped ranker output for a batch, shape (N,)."""
        code_s = mlp(params, Tensor(self.normalize(states)), "state", len(self.state_hidden), activate_last=True)
        h = ad.concat([code_s, self.encode_action(params, a1), self.encode_action(params, a2)], axis=1)
        logit = mlp(params, h, "head", len(self.head_hidden) + 1)
        c = ad.sigmoid(ad.reshape(logit, (logit.shape[0],)))
        return ad.clip(c, self.clip_eps, 1.0 - self.clip_eps)

    def config(self) -> Dict[str, Any]:
        return {
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "state_hidden": list(self.state_hidden),
            "action_hidden": list(self.action_hidden),
            "head_hidden": list(self.head_hidden),
            "clip_eps": self.clip_eps,
            "normalizer": self.normalizer.to_dict() if self.normalizer is not None else None,
        }


@dataclass
class WeightValue:
    """Ranker outputs ``c`` and the thresholded weights ``w = 1[c > 1/2] * c``."""
    c: np.ndarray
    w: np.ndarray

    @property
    def zero_fraction(self) -> float:
        return float(np.mean(self.w == 0.0)) if self.w.size else 0.0


def policy_log_prob(policy: PolicyModel, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return policy.log_prob(policy.params, states, actions).value


def policy_action_for_ranker(policy: PolicyModel, states: np.ndarray, mode: str = EXPECTATION,
                             seed: Optional[int] = None) -> np.ndarray:
    rng = np.random.default_rng(seed) if mode == SAMPLE else None
    with ad.no_grad():
        return policy.action_for_ranker(policy.params, states, mode, rng).value


def ranker_forward(ranker: RankerModel, states: np.ndarray, a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return ranker.forward(ranker.params, states, a1, a2).value


def weight_tensor(ranker: RankerModel, psi: Params, states: np.ndarray, actions: Any, policy_actions: Any,
                  mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor, np.ndarray]:
    """
    Differentiable weights ``w = mask * c``; the indicator mask is a constant.

    Returns:
        Tuple of (w, c, mask)
    """
    c = ranker.forward(psi, states, actions, policy_actions)
    if mask is None:
        mask = (c.value > WEIGHT_THRESHOLD).astype(np.float64)
    return ad.mul(c, mask), c, mask


def weight(ranker: RankerModel, states: np.ndarray, actions: np.ndarray, policy: PolicyModel,
           mode: str = EXPECTATION, seed: Optional[int] = None) -> WeightValue:
    """Weights of dataset actions against the policy's own action."""
    policy_actions = policy_action_for_ranker(policy, states, mode, seed)
    with ad.no_grad():
        w, c, _ = weight_tensor(ranker, ranker.params, states, actions, policy_actions)
    return WeightValue(c=c.value, w=w.value)


def _graph_of(params: Params) -> Optional[CompGraph]:
    for value in params.values():
        if isinstance(value, Tensor) and value.requires_grad:
            return value.graph
    return None


def gradient_penalty(ranker: RankerModel, psi: Params, states: np.ndarray, a1: np.ndarray, a2: np.ndarray,
                     rng: np.random.Generator) -> Tensor:
    """
    Mean of ``(|grad_x C| - 1)^2`` over interpolated action pairs, state fixed.

    With ``u ~ U(0, 1)`` per row the ranker is queried at
    ``(u a1 + (1-u) a2, u a2 + (1-u) a1)`` and differentiated with respect to
    both action inputs. The result stays differentiable in ``psi``.
    """
    a1 = np.atleast_2d(np.asarray(a1, dtype=np.float64))
    a2 = np.atleast_2d(np.asarray(a2, dtype=np.float64))
    if a1.shape[0] == 0:
        raise StructureError("gradient penalty needs a non-empty batch")
    u = rng.random((a1.shape[0], 1))
    graph = _graph_of(psi) or CompGraph()
    # the input gradient needs a recorded forward pass even under no_grad
    with ad.enable_grad():
        x1 = graph.leaf(u * a1 + (1.0 - u) * a2, name="gp.x1")
        x2 = graph.leaf(u * a2 + (1.0 - u) * a1, name="gp.x2")
        out = ad.summation(ranker.forward(psi, states, x1, x2))
        g1, g2 = graph.gradients(out, [x1, x2], create_graph=True)
        sq = ad.add(ad.summation(ad.mul(g1, g1), axis=1), ad.summation(ad.mul(g2, g2), axis=1))
        # zero-gradient rows get norm 0 with a zero derivative instead of sqrt's singularity
        nonzero = (sq.value > 0.0).astype(np.float64)
        norm = ad.mul(ad.sqrt(ad.add(ad.mul(sq, nonzero), 1.0 - nonzero)), nonzero)
        return ad.mean(ad.square(ad.sub(norm, 1.0)))


@dataclass
class ClassifierModel:
    """Binary classifier ``D(s, a)``: probability that a pair comes from the expert set."""
    obs_dim: int
    action_dim: int
    params: ParamVector
    hidden: Tuple[int, ...] = (64, 64)
    clip_eps: float = DEFAULT_CLIP_EPS
    normalizer: Optional[Standardizer] = None

    @classmethod
    def create(cls, env: EnvSpec, hidden: Sequence[int] = (64, 64), clip_eps: float = DEFAULT_CLIP_EPS,
               seed: int = 0, normalizer: Optional[Standardizer] = None) -> "ClassifierModel":
        rng = np.random.default_rng(seed)
        segments = init_mlp(rng, [env.obs_dim + env.action_dim] + list(hidden) + [1], "clf")
        return cls(env.obs_dim, env.action_dim, ParamVector(segments), tuple(hidden), clip_eps, normalizer)

    def with_params(self, params: ParamVector) -> "ClassifierModel":
        self.params.check_same_structure(params, "classifier parameters")
        return ClassifierModel(self.obs_dim, self.action_dim, params, self.hidden, self.clip_eps, self.normalizer)

    def forward(self, params: Params, states: np.ndarray, actions: np.ndarray) -> Tensor:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.normalizer is not None:
            states = self.normalizer.apply(states)
        x = Tensor(np.concatenate([states, np.atleast_2d(actions)], axis=1))
        logit = mlp(params, x, "clf", len(self.hidden) + 1)
        c = ad.sigmoid(ad.reshape(logit, (logit.shape[0],)))
        return ad.clip(c, self.clip_eps, 1.0 - self.clip_eps)

    def config(self) -> Dict[str, Any]:
        return {
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "hidden": list(self.hidden),
            "clip_eps": self.clip_eps,
            "normalizer": self.normalizer.to_dict() if self.normalizer is not None else None,
        }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Header metadata plus named parameter groups."""
    header: Dict[str, Any]
    groups: Dict[str, ParamVector] = field(default_factory=dict)

    @property
    def iteration(self) -> int:
        return int(self.header.get("iteration", 0))


def save_checkpoint(path: Union[str, Path], header: Dict[str, Any], groups: Dict[str, ParamVector]) -> Path:
    """Write a header line then one line per parameter segment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(json.dumps({"schema": SCHEMA_VERSION, "kind": "checkpoint", **header}) + "\n")
        for group, params in groups.items():
            for record in params.to_records(group):
                f.write(json.dumps(record) + "\n")
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        DatasetFormatError: Missing file, wrong schema or a malformed segment line
    """
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"Checkpoint not found: {path}", path=str(path))
    header = None
    records: Dict[str, List[Dict[str, Any]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"Line {line_number}: invalid JSON ({e.msg})",
                                         line_number=line_number, path=str(path))
            if header is None:
                if record.get("schema") != SCHEMA_VERSION or record.get("kind") != "checkpoint":
                    raise DatasetFormatError(f"Line {line_number}: not a checkpoint header",
                                             line_number=line_number, path=str(path))
                header = record
                continue
            if any(k not in record for k in ("group", "name", "shape", "data")):
                raise DatasetFormatError(f"Line {line_number}: malformed segment",
                                         line_number=line_number, path=str(path))
            records.setdefault(record["group"], []).append(record)
    if header is None:
        raise DatasetFormatError("Empty checkpoint file", line_number=1, path=str(path))
    try:
        groups = {group: ParamVector.from_records(rs) for group, rs in records.items()}
    except StructureError as e:
        raise DatasetFormatError(str(e), path=str(path))
    return Checkpoint(header=header, groups=groups)


def _normalizer_from(config: Dict[str, Any]) -> Optional[Standardizer]:
    data = config.get("normalizer")
    return Standardizer.from_dict(data) if data else None


def policy_from_checkpoint(checkpoint: Checkpoint) -> PolicyModel:
    """Rebuild the policy stored in a checkpoint, verifying segment shapes."""
    config = checkpoint.header.get("policy")
    if config is None or "policy" not in checkpoint.groups:
        raise DatasetFormatError("Checkpoint holds no policy")
    env_like = ModelDims(config["obs_dim"], config["action_dim"], config["discrete"], config["action_bound"])
    template = PolicyModel.create(env_like, hidden=config["hidden"], normalizer=_normalizer_from(config))
    try:
        return template.with_params(checkpoint.groups["policy"])
    except StructureError as e:
        raise DatasetFormatError(f"Policy shapes do not match the checkpoint: {e}")


def ranker_from_checkpoint(checkpoint: Checkpoint) -> RankerModel:
    config = checkpoint.header.get("ranker")
    if config is None or "ranker" not in checkpoint.groups:
        raise DatasetFormatError("Checkpoint holds no ranker")
    env_like = ModelDims(config["obs_dim"], config["action_dim"], True, 1.0)
    template = RankerModel.create(env_like, config["state_hidden"], config["action_hidden"],
                                  config["head_hidden"], config["clip_eps"],
                                  normalizer=_normalizer_from(config))
    try:
        return template.with_params(checkpoint.groups["ranker"])
    except StructureError as e:
        raise DatasetFormatError(f"Ranker shapes do not match the checkpoint: {e}")


def classifier_from_checkpoint(checkpoint: Checkpoint) -> ClassifierModel:
    config = checkpoint.header.get("classifier")
    if config is None or "classifier" not in checkpoint.groups:
        raise DatasetFormatError("Checkpoint holds no classifier")
    env_like = ModelDims(config["obs_dim"], config["action_dim"], True, 1.0)
    template = ClassifierModel.create(env_like, config["hidden"], config["clip_eps"],
                                      normalizer=_normalizer_from(config))
    try:
        return template.with_params(checkpoint.groups["classifier"])
    except StructureError as e:
        raise DatasetFormatError(f"Classifier shapes do not match the checkpoint: {e}")


@dataclass
class ModelDims:
    obs_dim: int
    action_dim: int
    discrete: bool
    action_bound: float
