"""
Weighted behavior cloning with a learned action ranker.

One iteration samples an expert batch from D^E and a batch from D, takes a
weighted-BC policy step, and updates the discriminator with

    alpha * meta loss + beta * vanilla ranking loss

where the meta loss is the expert BC loss evaluated at the post-update policy
parameters. Its gradient with respect to the discriminator is obtained by
differentiating through a traced SGD step of the policy.

The same machinery drives the baselines: plain BC (unit weights) and the
expert-distribution weighted BC (weights from an expert-vs-supplementary
classifier, optionally with the meta term).
"""

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import CompGraph, ParamVector, Tensor, finite_diff_grad, grad, mixed_second_vjp
from .autodiff import relative_error, to_param_vector, value_and_grad
from .config import ModelConfig, TrainConfig
from .constants import (
    G2SQ_FLOOR,
    RANKER_MODES,
    REPORT_COLUMNS,
    THEOREM1_COLUMNS,
    WEIGHT_COLUMNS,
    PairKind,
    TrainMode,
)
from .data import DemoDataset, Standardizer, TrainingView
from .envs import EnvSpec, GridWorldSpec
from .evaluation import evaluate_policy
from .exceptions import NumericalError, StructureError, TrainingAborted
from .logging_config import get_logger
from .models import (
    EXPECTATION,
    Checkpoint,
    ClassifierModel,
    ModelDims,
    PolicyModel,
    RankerModel,
    gradient_penalty,
    load_checkpoint,
    save_checkpoint,
    weight_tensor,
)
from .optim import AdamState, adam_step, sgd_step
from .policies import reference_returns

logger = get_logger("training")

CHECKPOINT_FILE = "checkpoint.ckpt"
REPORT_FILE = "report.csv"
WEIGHTS_FILE = "weights.csv"
THEOREM1_FILE = "theorem1.csv"


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """State-action pairs drawn from the training view."""
    states: np.ndarray
    actions: np.ndarray
    sources: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


def sample_batch(view: TrainingView, pool: np.ndarray, n: int, rng: np.random.Generator) -> Batch:
    """Uniform draw with replacement from the rows listed in ``pool``."""
    if len(pool) == 0:
        raise StructureError("Cannot sample from an empty pool")
    idx = pool[rng.integers(len(pool), size=n)]
    return Batch(states=view.states[idx], actions=view.actions[idx], sources=view.source_ids[idx])


def random_actions(env: EnvSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Encoded actions of the uniform random policy."""
    if isinstance(env, GridWorldSpec):
        return np.eye(env.n_actions)[rng.integers(env.n_actions, size=n)]
    return rng.uniform(-env.action_bound, env.action_bound, size=(n, env.action_dim))


@dataclass
class PairBatch:
    """
    Ranking pairs where ``a1`` is not inferior to ``a2``.

    ``policy_slot`` is 1 where ``a1`` is the policy's action, 2 where ``a2``
    is, and 0 otherwise.
    """
    states: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    kinds: np.ndarray
    policy_slot: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def count(self, kind: str) -> int:
        return int(np.sum(self.kinds == kind))


def pair_counts(n: int) -> List[int]:
    """Split ``n`` pairs into three near-equal parts."""
    return [n // 3 + (1 if i < n % 3 else 0) for i in range(3)]


def sample_pairs(view: TrainingView, policy: PolicyModel, env: EnvSpec, n: int, rng: np.random.Generator,
                 mode: str = EXPECTATION) -> PairBatch:
    """
    Build ranking pairs in equal thirds.

    - expert-vs-policy: expert action against the policy's action, states from D^E
    - data-vs-random: dataset action against a random action, states from D
    - policy-vs-random: policy action against a random action, states from D

    Two dataset actions are never compared with each other.
    """
    n_ep, n_dr, n_pr = pair_counts(n)
    expert = sample_batch(view, view.expert_indices, n_ep, rng)
    data = sample_batch(view, np.arange(len(view)), n_dr, rng)
    policy_states = sample_batch(view, np.arange(len(view)), n_pr, rng).states

    def policy_actions(states: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return policy.action_for_ranker(policy.params, states, mode, rng).value

    states = np.concatenate([expert.states, data.states, policy_states])
    a1 = np.concatenate([expert.actions, data.actions, policy_actions(policy_states)])
    a2 = np.concatenate([policy_actions(expert.states), random_actions(env, n_dr, rng),
                         random_actions(env, n_pr, rng)])
    kinds = np.array([PairKind.EXPERT_VS_POLICY] * n_ep + [PairKind.DATA_VS_RANDOM] * n_dr
                     + [PairKind.POLICY_VS_RANDOM] * n_pr)
    slots = np.array([2] * n_ep + [0] * n_dr + [1] * n_pr, dtype=np.int64)
    return PairBatch(states=states, a1=a1, a2=a2, kinds=kinds, policy_slot=slots)


def pairs_in_theta(pairs: PairBatch, policy: PolicyModel, theta: Any, mode: str = EXPECTATION) -> Tuple[Any, Any]:
    """Pair actions with the policy slots recomputed from ``theta`` (expectation mode only)."""
    if mode != EXPECTATION or not np.any(pairs.policy_slot):
        return pairs.a1, pairs.a2
    live = policy.action_for_ranker(theta, pairs.states, EXPECTATION)
    m1 = (pairs.policy_slot == 1).astype(np.float64)[:, None]
    m2 = (pairs.policy_slot == 2).astype(np.float64)[:, None]
    a1 = ad.add(pairs.a1 * (1.0 - m1), ad.mul(live, m1))
    a2 = ad.add(pairs.a2 * (1.0 - m2), ad.mul(live, m2))
    return a1, a2


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def actor_loss(policy: PolicyModel, theta: Any, states: np.ndarray, actions: np.ndarray, weights: Any) -> Tensor:
    """Weighted negative log-likelihood ``-mean(w * log pi(a|s))``."""
    return ad.neg(ad.mean(ad.mul(weights, policy.log_prob(theta, states, actions))))


def bc_loss(policy: PolicyModel, theta: Any, states: np.ndarray, actions: np.ndarray) -> Tensor:
    return actor_loss(policy, theta, states, actions, np.ones(len(states)))


def meta_loss(policy: PolicyModel, theta_next: Any, states: np.ndarray, actions: np.ndarray,
              require_traced: bool = False) -> Tensor:
    """
    Expert BC loss at the post-update parameters.

    Raises:
        StructureError: ``require_traced`` is set but ``theta_next`` is not a traced tensor mapping
    """
    if require_traced and not any(isinstance(t, Tensor) and t.requires_grad for t in theta_next.values()):
        raise StructureError("meta loss needs traced post-update parameters to reach the discriminator")
    return bc_loss(policy, theta_next, states, actions)


def vanilla_nll(ranker: RankerModel, psi: Any, states: np.ndarray, a1: Any, a2: Any) -> Tensor:
    """``mean(-log C(s, a1, a2) - log(1 - C(s, a2, a1)))``."""
    forward = ranker.forward(psi, states, a1, a2)
    backward = ranker.forward(psi, states, a2, a1)
    return ad.mean(ad.neg(ad.add(ad.log(forward), ad.log(ad.sub(1.0, backward)))))


def antisymmetry_deviation(ranker: RankerModel, psi: Any, states: np.ndarray, a1: Any, a2: Any) -> float:
    """Mean ``|C(s, a1, a2) + C(s, a2, a1) - 1|``; zero for an exactly antisymmetric ranker."""
    with ad.no_grad():
        forward = ranker.forward(psi, states, a1, a2).value
        backward = ranker.forward(psi, states, a2, a1).value
    return float(np.mean(np.abs(forward + backward - 1.0)))


def vanilla_loss(ranker: RankerModel, psi: Any, pairs: PairBatch, gp_coef: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Pairwise ranking loss plus ``gp_coef`` times the gradient penalty."""
    if len(pairs) == 0:
        raise StructureError("vanilla loss needs at least one pair")
    loss = vanilla_nll(ranker, psi, pairs.states, pairs.a1, pairs.a2)
    if gp_coef > 0.0:
        if rng is None:
            raise ValueError("the gradient penalty needs a random generator")
        penalty = gradient_penalty(ranker, psi, pairs.states, pairs.a1, pairs.a2, rng)
        loss = ad.add(loss, ad.mul(penalty, gp_coef))
    return loss


def classifier_loss(classifier: ClassifierModel, params: Any, expert: Batch, other: Batch) -> Tensor:
    """Binary cross-entropy with D^E labelled 1 and D^S labelled 0."""
    p_e = classifier.forward(params, expert.states, expert.actions)
    p_s = classifier.forward(params, other.states, other.actions)
    return ad.neg(ad.add(ad.mean(ad.log(p_e)), ad.mean(ad.log(ad.sub(1.0, p_s)))))


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

def policy_update(theta: ParamVector, gradient: ParamVector, mu: float) -> ParamVector:
    """``theta - mu * gradient``."""
    return sgd_step(theta, gradient, mu)


def discriminator_update(psi: ParamVector, alpha: float, beta: float, meta_grad: Optional[ParamVector],
                         vanilla_grad: Optional[ParamVector], lr: float, optimizer: str = "adam",
                         state: Optional[AdamState] = None) -> Tuple[ParamVector, Optional[AdamState]]:
    """
    Step the discriminator along ``alpha * meta_grad + beta * vanilla_grad``.

    With ``alpha == beta == 0`` the parameters are returned unchanged.
    """
    if alpha == 0.0 and beta == 0.0:
        return psi, state
    total = psi.zeros_like()
    if alpha != 0.0 and meta_grad is not None:
        total = total.combine(meta_grad, lambda t, g: t + alpha * g)
    if beta != 0.0 and vanilla_grad is not None:
        total = total.combine(vanilla_grad, lambda t, g: t + beta * g)
    if optimizer == "sgd":
        return sgd_step(psi, total, lr), state
    state = state if state is not None else AdamState.zeros_like(psi)
    return adam_step(state, psi, total, lr)


WeightFn = Callable[[Dict[str, Tensor]], Tuple[Tensor, Tensor, np.ndarray]]


@dataclass
class MetaStep:
    """Result of one weighted policy step with its traced meta-gradient."""
    actor_loss: float
    theta_grad: ParamVector
    theta_next: ParamVector
    meta_loss: float
    meta_grad: Optional[ParamVector]
    c: np.ndarray
    w: np.ndarray
    mask: np.ndarray


def meta_step(policy: PolicyModel, theta: ParamVector, psi: ParamVector, weight_fn: WeightFn,
              batch: Batch, expert: Batch, mu: float, with_meta_grad: bool = True) -> MetaStep:
    """
    Weighted actor loss, its SGD lookahead and (optionally) the meta-gradient.

    Everything lives in one graph: ``theta_next = theta - mu * grad L_actor`` is
    traced with ``create_graph`` so the expert loss at ``theta_next`` can be
    differentiated back to the discriminator parameters.
    """
    graph = CompGraph()
    th = graph.watch(theta, prefix="theta.")
    ps = graph.watch(psi, prefix="psi.")
    w, c, mask = weight_fn(ps)
    l_actor = actor_loss(policy, th, batch.states, batch.actions, w)
    g_theta = graph.grad(l_actor, th, create_graph=with_meta_grad)
    theta_grad = to_param_vector(g_theta)

    if with_meta_grad:
        th_next = sgd_step(th, g_theta, mu, traced=True)
        l_meta = meta_loss(policy, th_next, expert.states, expert.actions, require_traced=True)
        meta_grad = to_param_vector(graph.grad(l_meta, ps))
        theta_next = to_param_vector(th_next)
        meta_value = l_meta.item()
    else:
        theta_next = sgd_step(theta, theta_grad, mu)
        with ad.no_grad():
            meta_value = meta_loss(policy, theta_next, expert.states, expert.actions).item()
        meta_grad = None

    return MetaStep(
        actor_loss=l_actor.item(),
        theta_grad=theta_grad,
        theta_next=theta_next,
        meta_loss=meta_value,
        meta_grad=meta_grad,
        c=np.asarray(c.value if isinstance(c, Tensor) else c, dtype=np.float64),
        w=np.asarray(w.value if isinstance(w, Tensor) else w, dtype=np.float64),
        mask=np.asarray(mask, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# alignment diagnostic
# ---------------------------------------------------------------------------

@dataclass
class Theorem1Report:
    """
    Alignment between the composite-loss gradient after a policy step and the
    actor gradient that produced the step.
    """
    inner: float
    g2sq: float
    implied_K: Optional[float]
    loss_before: float
    loss_after: float

    @property
    def loss_change(self) -> float:
        return self.loss_after - self.loss_before

    def to_row(self, iteration: int) -> Dict[str, Any]:
        return {"iter": iteration, "inner": self.inner, "g2sq": self.g2sq, "implied_K": self.implied_K,
                "loss_before": self.loss_before, "loss_after": self.loss_after}


LossFn = Callable[[Dict[str, Tensor]], Any]


def theorem1_diagnostic(theta_t: ParamVector, theta_next: ParamVector,
                        composite_loss: LossFn, actor_loss_fn: LossFn) -> Theorem1Report:
    """
    Inner product ``<grad L_C(theta_next), grad L_actor(theta_t)>``, the squared
    actor-gradient norm, their ratio and the realized change of ``L_C``.

    The ratio is undefined (``None``) when the squared norm is below ``G2SQ_FLOOR``.
    """
    loss_after, g_c = value_and_grad(composite_loss, theta_next)
    _, g_a = value_and_grad(actor_loss_fn, theta_t)
    with ad.no_grad():
        loss_before = ad.as_tensor(composite_loss({n: Tensor(v) for n, v in theta_t.items()})).item()
    inner = float(np.dot(g_c.flatten(), g_a.flatten()))
    g2sq = float(np.dot(g_a.flatten(), g_a.flatten()))
    implied = inner / g2sq if g2sq >= G2SQ_FLOOR else None
    return Theorem1Report(inner=inner, g2sq=g2sq, implied_K=implied, loss_before=loss_before, loss_after=loss_after)


def quadratic_theorem1_testbed(curvatures: Sequence[float], mu: float, steps: int = 10,
                               theta0: Optional[Sequence[float]] = None) -> List[Theorem1Report]:
    """
    Run gradient descent on ``0.5 * sum(h * theta^2)`` with the composite loss
    equal to the actor loss, reporting the alignment diagnostic at every step.

    With every curvature equal to ``L`` the implied K is ``1 - mu * L`` and the
    loss does not increase for ``mu <= 2 / L``.
    """
    h = np.asarray(curvatures, dtype=np.float64)
    theta = ParamVector({"theta": np.ones_like(h) if theta0 is None else np.asarray(theta0, dtype=np.float64)})

    def loss(p: Dict[str, Tensor]) -> Tensor:
        x = p["theta"]
        return ad.mul(ad.summation(ad.mul(ad.mul(x, x), h)), 0.5)

    reports = []
    for _ in range(steps):
        theta_next = sgd_step(theta, ParamVector({"theta": h * theta["theta"]}), mu)
        reports.append(theorem1_diagnostic(theta, theta_next, loss, loss))
        theta = theta_next
    return reports


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _parse(column: str, raw: str) -> Any:
    if column in ("iter",):
        return int(raw)
    if column == "source":
        return raw
    return None if raw == "" else float(raw)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def _read_csv(path: Path, upto: Optional[int]) -> List[Dict[str, Any]]:
    if not path.exists():
        return []
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        for raw in csv.DictReader(f):
            row = {k: _parse(k, v) for k, v in raw.items()}
            if upto is None or row["iter"] <= upto:
                rows.append(row)
    return rows


@dataclass
class TrainReport:
    """Append-only per-iteration metrics."""
    rows: List[Dict[str, Any]] = field(default_factory=list)
    weight_rows: List[Dict[str, Any]] = field(default_factory=list)
    diagnostics: List[Dict[str, Any]] = field(default_factory=list)

    def append(self, row: Dict[str, Any], weight_rows: Sequence[Dict[str, Any]] = (),
               diagnostic: Optional[Dict[str, Any]] = None) -> None:
        self.rows.append(row)
        self.weight_rows.extend(weight_rows)
        if diagnostic is not None:
            self.diagnostics.append(diagnostic)

    def __len__(self) -> int:
        return len(self.rows)

    def eval_curve(self) -> List[Tuple[int, float]]:
        return [(r["iter"], r["eval_score"]) for r in self.rows if r.get("eval_score") is not None]

    @property
    def final_score(self) -> Optional[float]:
        curve = self.eval_curve()
        return curve[-1][1] if curve else None

    def write(self, run_dir: Union[str, Path]) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(run_dir / REPORT_FILE, REPORT_COLUMNS, self.rows)
        _write_csv(run_dir / WEIGHTS_FILE, WEIGHT_COLUMNS, self.weight_rows)
        _write_csv(run_dir / THEOREM1_FILE, THEOREM1_COLUMNS, self.diagnostics)

    @classmethod
    def read(cls, run_dir: Union[str, Path], upto: Optional[int] = None) -> "TrainReport":
        """Load a report; rows past ``upto`` are dropped."""
        run_dir = Path(run_dir)
        return cls(rows=_read_csv(run_dir / REPORT_FILE, upto),
                   weight_rows=_read_csv(run_dir / WEIGHTS_FILE, upto),
                   diagnostics=_read_csv(run_dir / THEOREM1_FILE, upto))

    def equals(self, other: "TrainReport") -> bool:
        def same(a, b):
            return [[_fmt(r.get(k)) for k in sorted(r)] for r in a] == [[_fmt(r.get(k)) for k in sorted(r)] for r in b]
        return (same(self.rows, other.rows) and same(self.weight_rows, other.weight_rows)
                and same(self.diagnostics, other.diagnostics))


def weight_statistics(iteration: int, sources: np.ndarray, w: np.ndarray) -> List[Dict[str, Any]]:
    rows = []
    for source in sorted(set(sources.tolist())):
        picked = w[sources == source]
        rows.append({"iter": iteration, "source": source, "w_mean": float(np.mean(picked)),
                     "w_zero_frac": float(np.mean(picked == 0.0))})
    return rows


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: PolicyModel
    discriminator: Optional[Union[RankerModel, ClassifierModel]]
    report: TrainReport
    run_dir: Optional[Path] = None


class Trainer:
    """
    Runs one training configuration.

    Args:
        config: Training hyperparameters (mode, step sizes, coefficients)
        dataset: Mixed dataset; only its reward-free training view is used
        env: Environment spec, for random actions and evaluation rollouts
        model_config: Network sizes
        run_dir: Directory for report CSVs and checkpoints (nothing is written when None)
        refs: (random_ref, expert_ref) for the normalized score
        eval_seed: Seed of the evaluation episodes
    """

    def __init__(self, config: TrainConfig, dataset: DemoDataset, env: EnvSpec,
                 model_config: Optional[ModelConfig] = None, run_dir: Optional[Union[str, Path]] = None,
                 refs: Optional[Tuple[float, float]] = None, eval_seed: int = 2024):
        config.validate()
        self.config = config
        self.env = env
        self.model_config = model_config or ModelConfig()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.alpha, self.beta = config.coefficients()
        self.view = dataset.training_view(env)
        if len(self.view.expert_indices) == 0:
            raise StructureError("Training needs at least one expert trajectory in D^E")
        if config.uses_classifier and len(self.view.supplementary_indices) == 0:
            raise StructureError("The expert-distribution baseline needs a non-empty D^S")
        self.refs = refs
        self.eval_seed = eval_seed

        normalizer = Standardizer.fit(self.view.states) if config.normalize_obs else None
        seeds = [int(s) for s in np.random.SeedSequence(config.seed).generate_state(3)]
        mc = self.model_config
        self.policy = PolicyModel.create(env, mc.policy_hidden, seed=seeds[0], normalizer=normalizer)
        self.discriminator: Optional[Union[RankerModel, ClassifierModel]] = None
        if config.mode in RANKER_MODES:
            self.discriminator = RankerModel.create(
                env, mc.ranker_state_hidden, mc.ranker_action_hidden, mc.ranker_head_hidden,
                mc.clip_eps, seed=seeds[1], zero_head=mc.zero_head, normalizer=normalizer)
        elif config.uses_classifier:
            self.discriminator = ClassifierModel.create(env, mc.classifier_hidden, mc.clip_eps,
                                                        seed=seeds[1], normalizer=normalizer)
        self.rng = np.random.default_rng(seeds[2])
        self.policy_adam = AdamState.zeros_like(self.policy.params)
        self.disc_adam = AdamState.zeros_like(self.psi)
        self.report = TrainReport()
        self.iteration = 0

    @property
    def psi(self) -> ParamVector:
        return self.discriminator.params if self.discriminator is not None else ParamVector()

    # -- one iteration ------------------------------------------------------

    def _policy_actions(self, batch: Batch) -> Optional[np.ndarray]:
        """The policy's own actions on the batch, as the ranker sees them."""
        if self.config.mode == TrainMode.BC or not isinstance(self.discriminator, RankerModel):
            return None
        with ad.no_grad():
            return self.policy.action_for_ranker(
                self.policy.params, batch.states, self.config.ranker_input_mode, self.rng).value

    def _weight_fn(self, batch: Batch, policy_actions: Optional[np.ndarray]) -> WeightFn:
        if self.config.mode == TrainMode.BC:
            ones = np.ones(len(batch))
            return lambda ps: (Tensor(ones), Tensor(ones), ones)
        if isinstance(self.discriminator, ClassifierModel):
            clf = self.discriminator

            def classifier_weights(ps: Dict[str, Tensor]) -> Tuple[Tensor, Tensor, np.ndarray]:
                p = clf.forward(ps, batch.states, batch.actions)
                return p, p, np.ones(len(batch))

            return classifier_weights
        ranker = self.discriminator
        return lambda ps: weight_tensor(ranker, ps, batch.states, batch.actions, policy_actions)

    def _antisymmetry(self, batch: Batch, policy_actions: Optional[np.ndarray],
                      pairs: Optional[PairBatch]) -> Optional[float]:
        """Deviation on the ranking pairs, or on (dataset, policy) action pairs when none were drawn."""
        if not isinstance(self.discriminator, RankerModel):
            return None
        if pairs is not None and len(pairs):
            return antisymmetry_deviation(self.discriminator, self.psi, pairs.states, pairs.a1, pairs.a2)
        return antisymmetry_deviation(self.discriminator, self.psi, batch.states, batch.actions, policy_actions)

    def _discriminator_term(self, expert: Batch) -> Tuple[Optional[float], Optional[ParamVector], Any]:
        """Vanilla ranking loss (or classifier loss) and its gradient."""
        cfg = self.config
        if self.discriminator is None or self.beta == 0.0:
            return None, None, None
        graph = CompGraph()
        ps = graph.watch(self.psi, prefix="psi.")
        if isinstance(self.discriminator, ClassifierModel):
            other = sample_batch(self.view, self.view.supplementary_indices, cfg.n1, self.rng)
            loss = classifier_loss(self.discriminator, ps, expert, other)
            context = None
        else:
            pairs = sample_pairs(self.view, self.policy, self.env, cfg.n2, self.rng, cfg.ranker_input_mode)
            loss = vanilla_loss(self.discriminator, ps, pairs, cfg.gp_coef, self.rng)
            context = pairs
        return loss.item(), to_param_vector(graph.grad(loss, ps)), context

    def _diagnostic(self, theta_t: ParamVector, step: MetaStep, batch: Batch, expert: Batch,
                    pairs: Optional[PairBatch]) -> Theorem1Report:
        alpha, beta = self.alpha, self.beta
        psi = {n: Tensor(v) for n, v in self.psi.items()}
        weights = step.w
        mode = self.config.ranker_input_mode

        def composite(th: Dict[str, Tensor]) -> Tensor:
            total = ad.mul(bc_loss(self.policy, th, expert.states, expert.actions), alpha)
            if beta > 0.0 and pairs is not None and isinstance(self.discriminator, RankerModel):
                a1, a2 = pairs_in_theta(pairs, self.policy, th, mode)
                total = ad.add(total, ad.mul(vanilla_nll(self.discriminator, psi, pairs.states, a1, a2), beta))
            return total

        def actor(th: Dict[str, Tensor]) -> Tensor:
            return actor_loss(self.policy, th, batch.states, batch.actions, weights)

        return theorem1_diagnostic(theta_t, step.theta_next, composite, actor)

    def _iterate(self, iteration: int) -> Tuple[Dict[str, Any], List[Dict[str, Any]], Optional[Dict[str, Any]]]:
        cfg = self.config
        batch = sample_batch(self.view, np.arange(len(self.view)), cfg.n2, self.rng)
        expert = sample_batch(self.view, self.view.expert_indices, cfg.n1, self.rng)
        theta_t = self.policy.params

        policy_actions = self._policy_actions(batch)
        step = meta_step(self.policy, theta_t, self.psi, self._weight_fn(batch, policy_actions), batch, expert,
                         cfg.policy_lr, with_meta_grad=self.alpha > 0.0)
        l_disc, disc_grad, pairs = self._discriminator_term(expert)
        antisym = self._antisymmetry(batch, policy_actions, pairs)

        diagnostic = None
        if iteration % cfg.diagnostic_interval == 0:
            diagnostic = self._diagnostic(theta_t, step, batch, expert, pairs)

        if cfg.policy_optimizer == "sgd":
            theta_next = step.theta_next
        else:
            theta_next, self.policy_adam = adam_step(self.policy_adam, theta_t, step.theta_grad, cfg.policy_lr)
        if self.discriminator is not None:
            psi_next, self.disc_adam = discriminator_update(
                self.psi, self.alpha, self.beta, step.meta_grad, disc_grad, cfg.disc_lr,
                cfg.discriminator_optimizer, self.disc_adam)
            self.discriminator = self.discriminator.with_params(psi_next)
        self.policy = self.policy.with_params(theta_next)

        eval_score = None
        if iteration % cfg.eval_interval == 0 or iteration == cfg.iterations:
            result = evaluate_policy(self.policy, self.env, cfg.eval_episodes, self.eval_seed, self._refs())
            eval_score = result.normalized_score

        is_bc = self.discriminator is None
        l_meta = None if is_bc else step.meta_loss
        l_c = None if is_bc else self.alpha * step.meta_loss + self.beta * (l_disc or 0.0)
        row = {
            "iter": iteration,
            "L_actor": step.actor_loss,
            "L_vanilla": l_disc,
            "L_meta": l_meta,
            "L_C": l_c,
            "w_mean": float(np.mean(step.w)),
            "w_zero_frac": float(np.mean(step.w == 0.0)),
            "antisym_dev": antisym,
            "inner": diagnostic.inner if diagnostic else None,
            "g2sq": diagnostic.g2sq if diagnostic else None,
            "implied_K": diagnostic.implied_K if diagnostic else None,
            "eval_score": eval_score,
        }
        for key in ("L_actor", "L_vanilla", "L_meta", "L_C"):
            if row[key] is not None and not np.isfinite(row[key]):
                raise NumericalError(f"{key} is not finite at iteration {iteration}", op=key)
        weights = weight_statistics(iteration, batch.sources, step.w)
        return row, weights, diagnostic.to_row(iteration) if diagnostic else None

    def _refs(self) -> Tuple[float, float]:
        if self.refs is None:
            self.refs = reference_returns(self.env)
        return self.refs

    # -- persistence --------------------------------------------------------

    def _snapshot(self) -> Dict[str, Any]:
        return {
            "policy": self.policy,
            "discriminator": self.discriminator,
            "policy_adam": self.policy_adam,
            "disc_adam": self.disc_adam,
            "rng": copy.deepcopy(self.rng.bit_generator.state),
        }

    def _restore_snapshot(self, snapshot: Dict[str, Any]) -> None:
        self.policy = snapshot["policy"]
        self.discriminator = snapshot["discriminator"]
        self.policy_adam = snapshot["policy_adam"]
        self.disc_adam = snapshot["disc_adam"]
        self.rng.bit_generator.state = snapshot["rng"]

    @property
    def disc_group(self) -> str:
        return "classifier" if isinstance(self.discriminator, ClassifierModel) else "ranker"

    def save_checkpoint(self) -> Optional[Path]:
        if self.run_dir is None:
            return None
        header = {
            "iteration": self.iteration,
            "mode": self.config.mode,
            "rng_state": self.rng.bit_generator.state,
            "policy": self.policy.config(),
            "policy_adam_step": self.policy_adam.step,
            "disc_adam_step": self.disc_adam.step,
            "refs": list(self.refs) if self.refs is not None else None,
        }
        groups = {"policy": self.policy.params}
        if self.discriminator is not None:
            header[self.disc_group] = self.discriminator.config()
            groups[self.disc_group] = self.discriminator.params
        groups.update({
            "policy_adam.m": self.policy_adam.m, "policy_adam.v": self.policy_adam.v,
            "disc_adam.m": self.disc_adam.m, "disc_adam.v": self.disc_adam.v,
        })
        path = save_checkpoint(self.run_dir / CHECKPOINT_FILE, header, groups)
        self.report.write(self.run_dir)
        return path

    def restore(self, checkpoint: Checkpoint) -> None:
        """Resume from a checkpoint; report rows past its iteration are dropped."""
        header, groups = checkpoint.header, checkpoint.groups
        if header.get("mode") != self.config.mode:
            raise StructureError(f"Checkpoint mode {header.get('mode')} does not match {self.config.mode}")
        self.policy = self.policy.with_params(groups["policy"])
        if self.discriminator is not None:
            self.discriminator = self.discriminator.with_params(groups[self.disc_group])

        def moments(prefix: str, like: ParamVector, step: int) -> AdamState:
            if not len(like):
                return AdamState.zeros_like(like)
            return AdamState(m=groups[f"{prefix}.m"], v=groups[f"{prefix}.v"], step=int(step))

        self.policy_adam = moments("policy_adam", self.policy.params, header.get("policy_adam_step", 0))
        self.disc_adam = moments("disc_adam", self.psi, header.get("disc_adam_step", 0))
        self.rng.bit_generator.state = header["rng_state"]
        if header.get("refs") is not None:
            self.refs = tuple(header["refs"])
        self.iteration = checkpoint.iteration
        if self.run_dir is not None:
            self.report = TrainReport.read(self.run_dir, upto=self.iteration)
        logger.info(f"Resumed at iteration {self.iteration}")

    # -- main loop ----------------------------------------------------------

    def run(self, resume: bool = False) -> TrainResult:
        """
        Train for ``config.iterations`` iterations.

        Raises:
            TrainingAborted: A loss or intermediate value became non-finite; the
                state before the failing iteration is checkpointed
        """
        cfg = self.config
        if resume and self.run_dir is not None and (self.run_dir / CHECKPOINT_FILE).exists():
            self.restore(load_checkpoint(self.run_dir / CHECKPOINT_FILE))
        logger.info(f"Training mode={cfg.mode} alpha={self.alpha} beta={self.beta} "
                    f"iterations={cfg.iterations} seed={cfg.seed}")

        for iteration in range(self.iteration + 1, cfg.iterations + 1):
            snapshot = self._snapshot()
            try:
                row, weight_rows, diagnostic = self._iterate(iteration)
            except NumericalError as e:
                self._restore_snapshot(snapshot)
                path = self.save_checkpoint()
                logger.error(f"Aborting at iteration {iteration}: {e}")
                raise TrainingAborted(f"Non-finite value at iteration {iteration}: {e}",
                                      iteration=iteration, checkpoint_path=str(path) if path else None, cause=e)
            self.report.append(row, weight_rows, diagnostic)
            self.iteration = iteration
            if row["eval_score"] is not None:
                logger.info(f"iter={iteration} L_actor={row['L_actor']:.4f} score={row['eval_score']:.2f}")
            else:
                logger.debug(f"iter={iteration} L_actor={row['L_actor']:.4f} L_C={row['L_C']}")
            if iteration % cfg.checkpoint_interval == 0:
                self.save_checkpoint()

        self.save_checkpoint()
        return TrainResult(policy=self.policy, discriminator=self.discriminator,
                           report=self.report, run_dir=self.run_dir)


def train(config: TrainConfig, dataset: DemoDataset, env: EnvSpec, model_config: Optional[ModelConfig] = None,
          run_dir: Optional[Union[str, Path]] = None, resume: bool = False,
          refs: Optional[Tuple[float, float]] = None, eval_seed: int = 2024) -> TrainResult:
    """Train one configuration; see ``Trainer``."""
    return Trainer(config, dataset, env, model_config, run_dir, refs, eval_seed).run(resume=resume)


def expert_dist_weighted_bc(config: TrainConfig, dataset: DemoDataset, env: EnvSpec, with_meta_goal: bool = False,
                            **kwargs: Any) -> TrainResult:
    """Weighted BC with expert-vs-supplementary classifier weights, optionally with the meta term."""
    mode = TrainMode.EXPERT_DIST_WBC_META if with_meta_goal else TrainMode.EXPERT_DIST_WBC
    return train(TrainConfig.from_dict({**config.to_dict(), "mode": mode}), dataset, env, **kwargs)


# ---------------------------------------------------------------------------
# meta-gradient cross-checks
# ---------------------------------------------------------------------------

@dataclass
class GradcheckProblem:
    """A tiny policy/ranker pair with fixed batches, policy actions and weight mask."""
    policy: PolicyModel
    ranker: RankerModel
    theta: ParamVector
    psi: ParamVector
    states: np.ndarray
    actions: np.ndarray
    policy_actions: np.ndarray
    mask: np.ndarray
    expert_states: np.ndarray
    expert_actions: np.ndarray
    mu: float

    def actor(self, theta: Any, psi: Any) -> Tensor:
        w, _, _ = weight_tensor(self.ranker, psi, self.states, self.actions, self.policy_actions, self.mask)
        return actor_loss(self.policy, theta, self.states, self.actions, w)

    def meta(self, theta_next: Any) -> Tensor:
        return bc_loss(self.policy, theta_next, self.expert_states, self.expert_actions)


def make_gradcheck_problem(seed: int, obs_dim: int = 2, hidden: int = 4, n_actions: int = 4,
                           batch: int = 8, mu: float = 0.1) -> GradcheckProblem:
    """Random tiny nets (state dim 2, hidden 4 by default) on a discrete action space."""
    rng = np.random.default_rng(seed)
    dims = ModelDims(obs_dim, n_actions, discrete=True, action_bound=1.0)
    policy = PolicyModel.create(dims, (hidden,), seed=seed)
    ranker = RankerModel.create(dims, (hidden,), (hidden,), (hidden,), seed=seed + 1)
    states = rng.normal(size=(batch, obs_dim))
    actions = np.eye(n_actions)[rng.integers(n_actions, size=batch)]
    with ad.no_grad():
        policy_actions = policy.action_for_ranker(policy.params, states).value
        c = ranker.forward(ranker.params, states, actions, policy_actions).value
    mask = (c > 0.5).astype(np.float64)
    if not mask.any():
        mask = np.ones(batch)
    return GradcheckProblem(
        policy=policy, ranker=ranker, theta=policy.params, psi=ranker.params,
        states=states, actions=actions, policy_actions=policy_actions, mask=mask,
        expert_states=rng.normal(size=(batch, obs_dim)),
        expert_actions=np.eye(n_actions)[rng.integers(n_actions, size=batch)],
        mu=mu,
    )


def traced_meta_gradient(problem: GradcheckProblem) -> ParamVector:
    """Differentiate the meta loss through a traced SGD step."""
    graph = CompGraph()
    th = graph.watch(problem.theta, prefix="theta.")
    ps = graph.watch(problem.psi, prefix="psi.")
    g = graph.grad(problem.actor(th, ps), th, create_graph=True)
    th_next = sgd_step(th, g, problem.mu, traced=True)
    return to_param_vector(graph.grad(problem.meta(th_next), ps))


def explicit_meta_gradient(problem: GradcheckProblem) -> ParamVector:
    """
    Chain rule written out: ``-mu * d/dpsi [v . grad_theta L_actor]`` with
    ``v = grad L_meta(theta_next)``.
    """
    psi_const = {n: Tensor(v) for n, v in problem.psi.items()}
    g = grad(lambda th: problem.actor(th, psi_const), problem.theta)
    theta_next = sgd_step(problem.theta, g, problem.mu)
    v = grad(problem.meta, theta_next)
    mixed = mixed_second_vjp(v, problem.actor, problem.theta, problem.psi)
    return mixed.map(lambda x: -problem.mu * x)


def finite_diff_meta_gradient(problem: GradcheckProblem, step: float = 1e-5) -> ParamVector:
    """Central differences of the post-step meta loss over each discriminator coordinate."""
    def outer(ps: Dict[str, Tensor]) -> Tensor:
        with ad.enable_grad():
            g = grad(lambda th: problem.actor(th, ps), problem.theta)
        theta_next = sgd_step(problem.theta, g, problem.mu)
        return problem.meta(theta_next)

    return finite_diff_grad(outer, problem.psi, step)


@dataclass
class MetaGradientCheck:
    """Three meta-gradient estimates and their pairwise relative errors."""
    seed: int
    traced: ParamVector
    explicit: ParamVector
    finite_diff: ParamVector

    @property
    def errors(self) -> Dict[str, float]:
        return {
            "traced_vs_explicit": relative_error(self.traced, self.explicit),
            "traced_vs_finite_diff": relative_error(self.traced, self.finite_diff),
            "explicit_vs_finite_diff": relative_error(self.explicit, self.finite_diff),
        }

    def passed(self, exact_tol: float = 1e-6, fd_tol: float = 1e-4) -> bool:
        e = self.errors
        return (e["traced_vs_explicit"] <= exact_tol and e["traced_vs_finite_diff"] <= fd_tol
                and e["explicit_vs_finite_diff"] <= fd_tol)


ExplicitFn = Callable[[GradcheckProblem], ParamVector]


def meta_gradient_three_way(problem: GradcheckProblem, seed: int = 0,
                            explicit_fn: ExplicitFn = explicit_meta_gradient) -> MetaGradientCheck:
    return MetaGradientCheck(seed=seed, traced=traced_meta_gradient(problem),
                             explicit=explicit_fn(problem), finite_diff=finite_diff_meta_gradient(problem))


def run_gradcheck(trials: int = 10, seed: int = 0,
                  explicit_fn: ExplicitFn = explicit_meta_gradient) -> List[MetaGradientCheck]:
    """Three-way meta-gradient agreement on ``trials`` randomized tiny problems."""
    checks = []
    for k in range(trials):
        trial_seed = seed + 1000 * k
        check = meta_gradient_three_way(make_gradcheck_problem(trial_seed), trial_seed, explicit_fn)
        logger.debug(f"gradcheck trial {k}: {check.errors}")
        checks.append(check)
    return checks
