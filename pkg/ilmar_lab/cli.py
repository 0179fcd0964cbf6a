"""
CLI for ilmar-lab

Usage:
    ilmar-lab gen-data --task T3            # Build the mixed demonstration dataset
    ilmar-lab train --mode ilmar --seed 0-4 # Train one run per seed
    ilmar-lab sweep --task T3               # alpha/beta grid, writes heatmap.csv
    ilmar-lab evaluate <run dir>            # Re-evaluate a checkpoint, writes eval.json
    ilmar-lab analyze <run dir>             # Weight quality + alignment summary
    ilmar-lab gradcheck                     # Three-way meta-gradient agreement

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .batch import (
    CONFIG_FILE,
    RUN_META_FILE,
    build_dataset,
    curves_directory,
    dataset_path,
    run_sweep,
    task_label,
    train_seeds,
    write_dataset,
)
from .config import RunConfig, load_config
from .constants import ALL_MODES, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, TASK_RATIOS
from .data import load
from .decorators import log_execution
from .evaluation import ADVANTAGE_VARIANT, RETURN_VARIANT, evaluate_policy, weight_quality
from .exceptions import (
    AnalysisError,
    CalibrationError,
    ConfigurationError,
    ConvergenceError,
    DatasetFormatError,
    IlmarError,
    NumericalError,
    TrainingAborted,
    UsageError,
)
from .logging_config import get_logger, setup_logging
from .models import classifier_from_checkpoint, load_checkpoint, policy_from_checkpoint, ranker_from_checkpoint
from .oracles import AdvantageOracle
from .summary import RunSummary, summarize_alignment, write_summary
from .training import CHECKPOINT_FILE, TrainReport, run_gradcheck
from .utils import parse_seeds, read_json, write_json

logger = get_logger("cli")


class GradcheckFailed(IlmarError):
    """The meta-gradient estimates disagree beyond tolerance."""


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """File values, then environment variables, then command-line flags."""
    config = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    config = RunConfig.from_env(config)
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "out", None):
        overrides.append(f"out={args.out}")
    if getattr(args, "mode", None):
        overrides.append(f"train.mode={args.mode}")
    if getattr(args, "task", None):
        overrides.append(f"mixture.task={args.task}")
    if getattr(args, "iterations", None) is not None:
        overrides.append(f"train.iterations={args.iterations}")
    if getattr(args, "seed", None):
        overrides.append(f"seeds={list(parse_seeds(args.seed))}")
    return config.with_overrides(overrides)


@log_execution(stage="gen-data")
def cmd_gen_data(args: argparse.Namespace) -> int:
    """Generate the mixed dataset for the configured task"""
    config = resolve_config(args)
    target = dataset_path(config)
    if target.exists() and not args.force:
        raise UsageError(f"Dataset already exists: {target} (use --force to overwrite)", {"path": str(target)})
    dataset = build_dataset(config)
    path = write_dataset(config, dataset, force=args.force)
    print(f"Wrote {path}")
    for split, sources in (("DE", dataset.provenance["DE"]), ("DS", dataset.provenance["DS"])):
        print(f"  {split}: " + ", ".join(f"{name}={count}" for name, count in sources.items()))
    return EXIT_OK


@log_execution(stage="train")
def cmd_train(args: argparse.Namespace) -> int:
    """Train one run per seed"""
    config = resolve_config(args)
    rows = train_seeds(config, resume=args.resume, force=args.force)
    for row in rows:
        score = "n/a" if row["score"] is None else f"{row['score']:.2f}"
        print(f"seed {row['seed']}: score={score}  ({row['run_dir']})")
    print(f"curves: {curves_directory(config)}")
    return EXIT_OK


@log_execution(stage="sweep")
def cmd_sweep(args: argparse.Namespace) -> int:
    """Train every cell of the alpha/beta grid"""
    config = resolve_config(args)
    if getattr(args, "alpha_grid", None):
        config = config.with_overrides([f"sweep.alpha_grid=[{args.alpha_grid}]"])
    if getattr(args, "beta_grid", None):
        config = config.with_overrides([f"sweep.beta_grid=[{args.beta_grid}]"])
    path = run_sweep(config, force=args.force)
    print(f"Wrote {path}")
    return EXIT_OK


def _run_context(run_dir: Path) -> Dict[str, Any]:
    if not (run_dir / CHECKPOINT_FILE).exists():
        raise UsageError(f"No checkpoint in {run_dir}", {"path": str(run_dir)})
    config = load_config(run_dir / CONFIG_FILE)
    meta = read_json(run_dir / RUN_META_FILE) if (run_dir / RUN_META_FILE).exists() else {}
    return {"config": config, "meta": meta, "checkpoint": load_checkpoint(run_dir / CHECKPOINT_FILE)}


@log_execution(stage="evaluate")
def cmd_evaluate(args: argparse.Namespace) -> int:
    """Evaluate a run's checkpointed policy"""
    run_dir = Path(args.run_dir)
    context = _run_context(run_dir)
    config: RunConfig = context["config"]
    policy = policy_from_checkpoint(context["checkpoint"])
    refs = context["checkpoint"].header.get("refs") or context["meta"].get("refs")
    n_episodes = args.episodes or config.eval.n_episodes
    result = evaluate_policy(policy, config.env.spec, n_episodes, config.eval.seed,
                             refs=tuple(refs) if refs else None)
    write_json(run_dir / "eval.json", {**result.to_dict(), "iteration": context["checkpoint"].iteration})
    score = "n/a" if result.normalized_score is None else f"{result.normalized_score:.2f}"
    print(f"mean return {result.mean_return:.3f} +/- {result.std_return:.3f}, normalized score {score}")
    return EXIT_OK


def _weights_fn(checkpoint: Any):
    """Classifier weights for the expert-distribution modes, ``None`` otherwise."""
    if "classifier" not in checkpoint.groups:
        return None
    classifier = classifier_from_checkpoint(checkpoint)

    def weights(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return classifier.forward(classifier.params, states, actions).value

    return weights


@log_execution(stage="analyze")
def cmd_analyze(args: argparse.Namespace) -> int:
    """Weight-quality correlations and alignment summary for one run"""
    run_dir = Path(args.run_dir)
    context = _run_context(run_dir)
    config: RunConfig = context["config"]
    checkpoint = context["checkpoint"]
    env = config.env.spec
    policy = policy_from_checkpoint(checkpoint)
    ranker = ranker_from_checkpoint(checkpoint) if "ranker" in checkpoint.groups else None
    weights_fn = _weights_fn(checkpoint)

    correlations: Dict[str, Dict[str, Any]] = {}
    if ranker is not None or weights_fn is not None:
        data_file = context["meta"].get("dataset") or str(dataset_path(config))
        dataset = load(data_file)
        oracle = AdvantageOracle(env, policy, n_rollouts=config.eval.oracle_rollouts, seed=config.eval.seed)
        for variant in (ADVANTAGE_VARIANT, RETURN_VARIANT):
            try:
                report = weight_quality(ranker, policy, dataset, oracle, env, variant=variant,
                                        max_pairs=config.eval.max_pairs, seed=config.eval.seed,
                                        mode=config.train.ranker_input_mode, weights_fn=weights_fn)
                correlations[variant] = report.to_dict()
            except AnalysisError as e:
                logger.warning(f"Weight quality ({variant}) undefined: {e}")
                correlations[variant] = {"variant": variant, "error": e.message}
    write_json(run_dir / "correlation.json", correlations)

    report = TrainReport.read(run_dir)
    alignment = summarize_alignment(report.diagnostics)
    write_json(run_dir / "theorem1.json", alignment.to_dict())

    last = max((r["iter"] for r in report.weight_rows), default=None)
    summary = RunSummary(
        run_dir=str(run_dir),
        mode=config.train.mode,
        task=context["meta"].get("task", task_label(config)),
        seed=config.train.seed,
        iterations=checkpoint.iteration,
        final_score=report.final_score,
        correlations=correlations,
        alignment=alignment,
        weights_by_source=[r for r in report.weight_rows if r["iter"] == last],
    )
    write_summary(run_dir / "summary.md", summary)
    for variant, c in correlations.items():
        print(f"{variant}: rho={c['rho']:.4f} (n={c['n']})" if "rho" in c else f"{variant}: {c['error']}")
    print(f"Wrote {run_dir / 'summary.md'}")
    return EXIT_OK


@log_execution(stage="gradcheck")
def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Compare traced, explicit and finite-difference meta-gradients"""
    checks = run_gradcheck(trials=args.trials, seed=args.seed_base)
    print(f"{'trial':>5}  {'traced/explicit':>16}  {'traced/fd':>12}  {'explicit/fd':>12}  status")
    for k, check in enumerate(checks):
        e = check.errors
        status = "ok" if check.passed() else "FAIL"
        print(f"{k:>5}  {e['traced_vs_explicit']:>16.2e}  {e['traced_vs_finite_diff']:>12.2e}  "
              f"{e['explicit_vs_finite_diff']:>12.2e}  {status}")
    failed = [k for k, check in enumerate(checks) if not check.passed()]
    if args.out:
        write_json(Path(args.out) / "gradcheck.json",
                   {"trials": [{"seed": c.seed, **c.errors, "passed": c.passed()} for c in checks]})
    if failed:
        raise GradcheckFailed(f"Meta-gradient check failed on trials {failed}", {"trials": failed})
    print(f"All {len(checks)} trials passed")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser, modes: bool = True) -> None:
    parser.add_argument("--config", "-c", help="YAML run configuration")
    parser.add_argument("--out", "-o", help="Output root directory")
    parser.add_argument("--seed", help="Seed list, e.g. 0,1,2 or 0-4")
    parser.add_argument("--task", choices=sorted(TASK_RATIOS), help="Dataset mixture preset")
    parser.add_argument("--force", action="store_true", help="Overwrite existing output")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="Override a config field (repeatable)")
    if modes:
        parser.add_argument("--mode", choices=ALL_MODES, help="Training mode")
        parser.add_argument("--iterations", type=int, help="Training iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ilmar-lab",
        description="Weighted imitation learning with a meta-trained action ranker",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  ilmar-lab gen-data --task T3 --out runs
  ilmar-lab train --mode bc --task T3 --seed 0-4 --out runs
  ilmar-lab train --mode ilmar --set train.alpha=0.7 --set train.beta=0.05
  ilmar-lab sweep --task T3 --alpha-grid 0,0.1,1 --beta-grid 0,1
  ilmar-lab evaluate runs/ilmar/T3/0
  ilmar-lab analyze runs/ilmar/T3/0
  ilmar-lab gradcheck
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help="Override the configured log level")
    parser.add_argument("--log-file", help="Also write log records to this file")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    p_gen = subparsers.add_parser("gen-data", help="Generate the mixed demonstration dataset")
    _add_common(p_gen, modes=False)
    p_gen.set_defaults(func=cmd_gen_data)

    p_train = subparsers.add_parser("train", help="Train one run per seed")
    _add_common(p_train)
    p_train.add_argument("--resume", action="store_true", help="Continue from existing checkpoints")
    p_train.set_defaults(func=cmd_train)

    p_sweep = subparsers.add_parser("sweep", help="Grid over the composite-loss coefficients")
    _add_common(p_sweep)
    p_sweep.add_argument("--alpha-grid", help="Comma-separated alpha values")
    p_sweep.add_argument("--beta-grid", help="Comma-separated beta values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_eval = subparsers.add_parser("evaluate", help="Evaluate a run's checkpoint")
    p_eval.add_argument("run_dir", help="Run directory holding checkpoint.ckpt")
    p_eval.add_argument("--episodes", type=int, help="Evaluation episodes (default from config)")
    p_eval.set_defaults(func=cmd_evaluate)

    p_analyze = subparsers.add_parser("analyze", help="Weight quality and alignment summary")
    p_analyze.add_argument("run_dir", help="Run directory holding checkpoint.ckpt")
    p_analyze.set_defaults(func=cmd_analyze)

    p_grad = subparsers.add_parser("gradcheck", help="Three-way meta-gradient agreement")
    p_grad.add_argument("--trials", type=int, default=10, help="Randomized problems (default: 10)")
    p_grad.add_argument("--seed-base", type=int, default=0, help="Seed of the first trial")
    p_grad.add_argument("--out", "-o", help="Directory for gradcheck.json")
    p_grad.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    if not args.command:
        parser.print_help()
        return EXIT_OK

    try:
        setup_logging(args.log_level or RunConfig.from_env().log_level, log_file=args.log_file)
        return args.func(args)
    except (UsageError, ConfigurationError, DatasetFormatError) as e:
        print(f"Error: {e.message}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, TrainingAborted, GradcheckFailed, ConvergenceError,
            CalibrationError, AnalysisError) as e:
        print(f"Numerical failure: {e.message}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
