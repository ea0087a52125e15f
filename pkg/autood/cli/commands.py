"""Subcommand handlers; each takes parsed arguments and returns an exit code."""
from argparse import Namespace
from pathlib import Path
from typing import Optional

import numpy as np
import structlog

from autood.config import Settings
from autood.models.run_config import RunConfig
from autood.services import experiments, metrics, reporting
from autood.services.datasets import Splits, load_dataset, load_task, save_dataset
from autood.services.detectors import ParamStore, build, describe, load_child, save_child, score, train_child
from autood.services.orchestrator import run_random_search, run_search
from autood.services.search_space import spec_from_json
from autood.services.validation import ValidationService

logger = structlog.get_logger(__name__)

CONFIG_SEARCH_DEPTH = 3
ABLATION_FILE = "ablation.csv"
ABLATION_SUMMARY_FILE = "ablation_summary.csv"


def resolve_config(args: Namespace, near: Optional[Path] = None) -> RunConfig:
    """File values, then CLI flags, then AUTOOD_OUT."""
    if getattr(args, "config", None):
        config = RunConfig.load(args.config)
    else:
        config = _config_near(near) or RunConfig(seed=Settings().DEFAULT_SEED)
    config = config.with_overrides(seed=getattr(args, "seed", None), out_dir=getattr(args, "out", None),
                                   workers=getattr(args, "workers", None), budget=getattr(args, "budget", None))
    env_out = Settings().OUT
    if env_out:
        config = config.with_overrides(out_dir=env_out)
    ValidationService.validate_config(config)
    return config


def _config_near(path: Optional[Path]) -> Optional[RunConfig]:
    """A run's config.json sitting next to (or above) a checkpoint directory."""
    if path is None:
        return None
    for directory in [path, *path.parents][:CONFIG_SEARCH_DEPTH]:
        candidate = directory / reporting.CONFIG_FILE
        if candidate.is_file():
            return RunConfig.load(candidate)
    return None


def prepare_data(config: RunConfig, data_dir: Optional[str] = None) -> Splits:
    splits = load_dataset(data_dir) if data_dir else load_task(config.data, config.seed)
    ValidationService.validate_splits(splits)
    return splits


def search_command(args: Namespace) -> int:
    config = resolve_config(args)
    splits = prepare_data(config, args.data)
    result = run_search(config, splits, out_dir=config.out_dir)
    print(reporting.format_top(result.top))
    return 0


def random_search_command(args: Namespace) -> int:
    config = resolve_config(args)
    splits = prepare_data(config, args.data)
    result = run_random_search(config, splits, out_dir=config.out_dir)
    print(reporting.format_top(result.top))
    return 0


def train_one_command(args: Namespace) -> int:
    """Train a single child from a spec file and report its validation metrics."""
    config = resolve_config(args)
    spec = spec_from_json(Path(args.spec).read_text())
    splits = prepare_data(config, args.data)
    out_dir = Path(config.out_dir)
    reporting.write_config(config, out_dir)

    model = build(spec, splits.sample_shape, ParamStore(config.seed))
    rng = np.random.default_rng(config.seed)
    result = train_child(model, splits.train.samples, config.child.budget_steps, config.child, rng)
    if result.failed:
        logger.error("Child training failed", error=result.error)
        return 3
    save_child(model, out_dir / "checkpoints" / "child")
    valid = splits.valid
    scores = score(model, valid.samples, config.child.lambda_reg, config.child.score_chunk)
    rows = metrics.metric_rows(scores.scores, valid.labels, scores.pixel_map, valid.masks)
    reporting.write_metrics_csv(rows, out_dir / reporting.METRICS_FILE)
    logger.info("Child trained", final_loss=result.final_loss, steps=result.steps,
                latent_dim=model.latent_dim(), operators=len(describe(model)["operators"]))
    for row in rows:
        print(f"{row.metric:<12} {row.value:.4f}")
    return 0


def evaluate_command(args: Namespace) -> int:
    checkpoint = Path(args.checkpoint)
    config = resolve_config(args, near=checkpoint)
    splits = prepare_data(config, args.data)
    model = load_child(checkpoint, seed=config.seed)
    if tuple(model.input_shape) != tuple(splits.sample_shape):
        logger.error("Checkpoint does not match data", checkpoint=list(model.input_shape),
                     data=list(splits.sample_shape))
        return 2
    part = splits[args.split]
    scores = score(model, part.samples, config.child.lambda_reg, config.child.score_chunk)
    rows = metrics.metric_rows(scores.scores, part.labels, scores.pixel_map, part.masks)
    path = reporting.write_metrics_csv(rows, Path(config.out_dir) / reporting.METRICS_FILE)
    logger.info("Checkpoint evaluated", split=args.split, path=str(path))
    for row in rows:
        print(f"{row.metric:<12} {row.value:.4f}")
    return 0


def report_command(args: Namespace) -> int:
    top = reporting.report(args.log, k=args.top, window=args.window)
    print(reporting.format_top(top))
    return 0


def make_data_command(args: Namespace) -> int:
    """Generate the configured task and save it as IDX files plus a manifest."""
    config = resolve_config(args)
    splits = prepare_data(config)
    directory = save_dataset(splits, Path(config.out_dir) / "data")
    reporting.write_config(config, config.out_dir)
    logger.info("Dataset written", path=str(directory), train=len(splits.train), valid=len(splits.valid),
                test=len(splits.test))
    return 0


def ablate_command(args: Namespace) -> int:
    """Run every arm on every seed; write per-seed rows and the mean/std summary."""
    config = resolve_config(args)
    saved = prepare_data(config, args.data) if args.data else None

    def splits_for(seed: int) -> Splits:
        return saved if saved is not None else prepare_data(config.with_overrides(seed=seed))

    out_dir = Path(config.out_dir)
    frame = experiments.run_comparison(config, args.seeds, args.arms, args.at, out_dir=out_dir,
                                       splits_for=splits_for)
    summary = experiments.summarize(frame)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / ABLATION_FILE, index=False)
    summary.to_csv(out_dir / ABLATION_SUMMARY_FILE, index=False)
    reporting.write_config(config, out_dir)
    if "autood" in args.arms and "random" in args.arms:
        logger.info("Paired comparison", wins=experiments.paired_wins(frame, "autood", "random"),
                    seeds=len(args.seeds))
    print(summary.to_string(index=False))
    return 0
