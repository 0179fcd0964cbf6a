"""
Batch execution of training runs.

Seeds and sweep cells are independent jobs: each one receives a plain
configuration dictionary, writes its own run directory and returns a small
summary row. ``SweepRunner`` fans jobs out over a process pool and hands the
rows back in submission order.
"""

import csv
from concurrent.futures import Executor, ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from .config import RunConfig
from .constants import HEATMAP_COLUMNS, HEATMAP_SUMMARY_COLUMNS, TrainMode
from .data import DemoDataset, MixtureSpec, build_mixture, dataset_stats, load, save
from .envs import env_from_dict
from .evaluation import emit_curves, mean_interval
from .exceptions import ConfigurationError, UsageError
from .logging_config import get_logger
from .policies import make_tier_policies, reference_returns
from .training import TrainReport, TrainResult, train
from .utils import format_value, prepare_output, run_directory, write_json

logger = get_logger("batch")

DATASET_FILE = "dataset.jsonl"
CONFIG_FILE = "config.yaml"
RUN_META_FILE = "run.json"
HEATMAP_FILE = "heatmap.csv"
HEATMAP_SUMMARY_FILE = "heatmap_summary.csv"
CURVES_DIR = "curves"


def task_label(config: RunConfig) -> str:
    """The task preset name, or ``ratio<r>`` when an explicit ratio is configured."""
    mixture = config.mixture
    return mixture.task if mixture.ratio is None else f"ratio{format_value(mixture.ratio)}"


def dataset_path(config: RunConfig) -> Path:
    return Path(config.out) / "data" / task_label(config) / DATASET_FILE


def build_dataset(config: RunConfig) -> DemoDataset:
    """Calibrate the tier policies and collect the mixed dataset described by ``config``."""
    env, mixture = config.env.spec, config.mixture
    counts = MixtureSpec(mixture.n_expert_in_de, mixture.n_expert_in_ds, mixture.suboptimal_ratio,
                         mixture.tier_fractions, mixture.seed).tier_counts()
    tiers = None
    if any(counts):
        tiers = make_tier_policies(env, mixture.tier_fractions, tolerance=mixture.calibration_tolerance,
                                   seed=mixture.seed)
    spec = MixtureSpec(
        n_expert_in_de=mixture.n_expert_in_de,
        n_expert_in_ds=mixture.n_expert_in_ds,
        suboptimal_ratio=mixture.suboptimal_ratio,
        tier_fractions=mixture.tier_fractions,
        seed=mixture.seed,
        tier_policies=tiers,
    )
    return build_mixture(spec, env)


def write_dataset(config: RunConfig, dataset: DemoDataset, force: bool = False) -> Path:
    """Write the dataset, its provenance summary and the config echo; returns the dataset path."""
    target = dataset_path(config)
    prepare_output(target.parent, force=force)
    save(dataset, target)
    write_json(target.parent / "provenance.json", {"provenance": dataset.provenance, "stats": dataset_stats(dataset)})
    config.save(target.parent / CONFIG_FILE)
    return target


def load_or_build_dataset(config: RunConfig) -> Tuple[DemoDataset, Path]:
    """Reuse the task's dataset under ``<out>/data`` or generate it."""
    target = dataset_path(config)
    if target.exists():
        dataset = load(target)
        if dataset.env is not None and env_from_dict(dataset.env) != config.env.spec:
            raise ConfigurationError(f"Dataset {target} was generated for a different environment", field="env")
        logger.info(f"Using dataset {target}")
        return dataset, target
    dataset = build_dataset(config)
    return dataset, write_dataset(config, dataset)


def environment_refs(config: RunConfig) -> Tuple[float, float]:
    return reference_returns(config.env.spec, n_episodes=config.eval.reference_episodes)


def train_job(config_data: Dict[str, Any], seed: int, run_dir: str, data_file: str,
              refs: Sequence[float], resume: bool = False) -> Dict[str, Any]:
    """
    Train one seed into ``run_dir``.

    Takes only plain values so it can run in a worker process.
    """
    config = RunConfig.from_dict(config_data).with_overrides([f"seeds=[{seed}]", f"train.seed={seed}"])
    run_path = Path(run_dir)
    run_path.mkdir(parents=True, exist_ok=True)
    config.save(run_path / CONFIG_FILE)
    write_json(run_path / RUN_META_FILE, {
        "dataset": str(Path(data_file).resolve()),
        "mode": config.train.mode,
        "task": task_label(config),
        "seed": seed,
        "refs": list(refs),
    })
    result: TrainResult = train(config.train, load(data_file), config.env.spec, config.model,
                                run_dir=run_path, resume=resume, refs=tuple(refs), eval_seed=config.eval.seed)
    return {
        "seed": seed,
        "alpha": config.train.alpha,
        "beta": config.train.beta,
        "mode": config.train.mode,
        "run_dir": str(run_path),
        "score": result.report.final_score,
    }


Job = Tuple[Callable[..., Dict[str, Any]], Tuple[Any, ...]]


class SweepRunner:
    """
    Run independent jobs serially or across a process pool.

    Args:
        max_workers: Pool size; ``1`` runs everything in the calling process
        executor_factory: Override the pool (tests use a thread pool)
    """

    def __init__(self, max_workers: int = 1, executor_factory: Optional[Callable[[int], Executor]] = None):
        if max_workers < 1:
            raise ValueError("max_workers must be at least 1")
        self.max_workers = max_workers
        self.executor_factory = executor_factory or (lambda n: ProcessPoolExecutor(max_workers=n))

    def run(self, jobs: Sequence[Job]) -> List[Dict[str, Any]]:
        """
        Execute ``(func, args)`` jobs and return their results in job order.

        Every job runs to completion; the first failure is re-raised afterwards.
        """
        if self.max_workers == 1 or len(jobs) <= 1:
            return [func(*args) for func, args in jobs]

        results: List[Optional[Dict[str, Any]]] = [None] * len(jobs)
        failures: List[Tuple[int, BaseException]] = []
        with self.executor_factory(self.max_workers) as executor:
            futures = {executor.submit(func, *args): k for k, (func, args) in enumerate(jobs)}
            for future in as_completed(futures):
                k = futures[future]
                try:
                    results[k] = future.result()
                    logger.info(f"Job {k + 1}/{len(jobs)} finished")
                except Exception as e:
                    logger.error(f"Job {k + 1}/{len(jobs)} failed: {e}")
                    failures.append((k, e))
        if failures:
            raise min(failures, key=lambda item: item[0])[1]
        return results


def train_seeds(config: RunConfig, resume: bool = False, force: bool = False,
                runner: Optional[SweepRunner] = None) -> List[Dict[str, Any]]:
    """
    One run per configured seed under ``<out>/<mode>/<task>/<seed>``.

    Per-seed evaluation curves and their cross-seed aggregate are written to
    ``<out>/<mode>/<task>/curves``.
    """
    _, data_file = load_or_build_dataset(config)
    refs = environment_refs(config)
    jobs = []
    for seed in config.seeds:
        run_dir = run_directory(config.out, config.train.mode, task_label(config), seed)
        if not resume:
            prepare_output(run_dir, force=force)
        jobs.append((train_job, (config.to_dict(), seed, str(run_dir), str(data_file), refs, resume)))
    rows = (runner or SweepRunner(config.sweep.workers)).run(jobs)
    write_curves(rows, curves_directory(config))
    return rows


def curves_directory(config: RunConfig) -> Path:
    return run_directory(config.out, config.train.mode, task_label(config), 0).parent / CURVES_DIR


def write_curves(rows: Sequence[Dict[str, Any]], out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Curve files of finished runs, labelled ``seed<k>``; runs without evaluations are skipped."""
    reports, labels = [], []
    for row in rows:
        report = TrainReport.read(row["run_dir"])
        if report.eval_curve():
            reports.append(report)
            labels.append(f"seed{row['seed']}")
    if not reports:
        logger.warning(f"No evaluated runs; no curves written to {out_dir}")
        return {}
    written = emit_curves(reports, out_dir, labels)
    logger.info(f"Wrote {len(reports)} curves and {written['aggregate']}")
    return written


def sweep_directory(config: RunConfig) -> Path:
    return Path(config.out) / "sweep" / task_label(config)


def run_sweep(config: RunConfig, force: bool = False, runner: Optional[SweepRunner] = None) -> Path:
    """
    Train every (alpha, beta) cell of the grid for every seed.

    Writes ``heatmap.csv`` (one row per cell and seed), ``heatmap_summary.csv``
    (mean and 95% interval per cell) and each cell's ``curves`` directory.

    Raises:
        UsageError: The grid has no cell other than (0, 0)
    """
    cells = config.sweep.cells()
    if not cells:
        raise UsageError("The sweep grid is empty once (0, 0) is excluded", {"field": "sweep"})
    _, data_file = load_or_build_dataset(config)
    refs = environment_refs(config)
    out_dir = sweep_directory(config)
    prepare_output(out_dir, force=force)
    config.save(out_dir / CONFIG_FILE)

    jobs = []
    for alpha, beta in cells:
        cell_config = config.with_overrides([
            f"train.mode={TrainMode.ILMAR}", f"train.alpha={alpha!r}", f"train.beta={beta!r}",
        ]).to_dict()
        for seed in config.seeds:
            run_dir = out_dir / cell_label(alpha, beta) / str(seed)
            jobs.append((train_job, (cell_config, seed, str(run_dir), str(data_file), refs, False)))
    logger.info(f"Sweeping {len(cells)} cells x {len(config.seeds)} seeds")
    rows = (runner or SweepRunner(config.sweep.workers)).run(jobs)
    for alpha, beta in cells:
        write_curves([r for r in rows if (r["alpha"], r["beta"]) == (alpha, beta)],
                     out_dir / cell_label(alpha, beta) / CURVES_DIR)
    write_heatmap_summary(out_dir / HEATMAP_SUMMARY_FILE, rows)
    return write_heatmap(out_dir / HEATMAP_FILE, rows)


def cell_label(alpha: float, beta: float) -> str:
    return f"a{format_value(alpha)}_b{format_value(beta)}"


def write_heatmap(path: Union[str, Path], rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(HEATMAP_COLUMNS)
        for row in rows:
            score = "" if row["score"] is None else repr(float(row["score"]))
            writer.writerow([repr(float(row["alpha"])), repr(float(row["beta"])), int(row["seed"]), score])
    return path


def write_heatmap_summary(path: Union[str, Path], rows: Sequence[Dict[str, Any]]) -> Path:
    """
    One row per (alpha, beta) cell: mean score and 95% interval across seeds.

    Seeds without a score are left out of ``n_seeds``; a cell with none gets
    empty score fields.
    """
    by_cell: Dict[Tuple[float, float], List[float]] = {}
    for row in rows:
        scores = by_cell.setdefault((float(row["alpha"]), float(row["beta"])), [])
        if row["score"] is not None:
            scores.append(float(row["score"]))
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(HEATMAP_SUMMARY_COLUMNS)
        for (alpha, beta), scores in sorted(by_cell.items()):
            stats = [repr(v) for v in mean_interval(scores)] if scores else ["", "", ""]
            writer.writerow([repr(alpha), repr(beta), *stats, len(scores)])
    return path
