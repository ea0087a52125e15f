"""Paired-seed comparisons: controller search against random search and its ablations.

Every arm of a comparison sees the same seeds and, per seed, the same data
splits, so rows can be compared seed by seed.
"""
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog

from autood.errors import AutoODError, ContractError
from autood.models.run_config import RunConfig
from autood.services import metrics
from autood.services.datasets import Splits, load_task
from autood.services.detectors import build, score
from autood.services.orchestrator import SearchLog, SearchResult, run_random_search, run_search, top_models
from autood.services.search_space import decode

logger = structlog.get_logger(__name__)

DEFAULT_ARMS = ("autood", "random", "no-explore", "no-buffer")
DEFAULT_EPOCHS = (20, 100, 200)
TOP_K = 5


def _with_search(config: RunConfig, **changes) -> RunConfig:
    return config.model_copy(update={"search": config.search.model_copy(update=changes)})


ARMS: Dict[str, Callable[[RunConfig], tuple]] = {
    "autood": lambda c: (run_search, c),
    "random": lambda c: (run_random_search, c),
    "no-explore": lambda c: (run_search, _with_search(c, eta_explore=0.0)),
    "no-buffer": lambda c: (run_search, _with_search(c, buffer_capacity=0)),
}


def arm_config(arm: str, config: RunConfig):
    """The runner and the config an arm uses on top of the shared base config."""
    if arm not in ARMS:
        raise ContractError(f"unknown arm '{arm}', expected one of {sorted(ARMS)}")
    return ARMS[arm](config)


def checkpoint_epochs(requested: Iterable[int], epochs: int) -> List[int]:
    """Requested epoch counts within the run, plus the final epoch."""
    return sorted({e for e in requested if 0 < e <= epochs} | {epochs})


def top_mean_at(log: SearchLog, epoch: int, k: int = TOP_K) -> Dict[str, float]:
    """Top-k mean and best validation reward over the first ``epoch`` epochs."""
    seen = SearchLog([r for r in log if r.epoch < epoch])
    top = top_models(seen, k)
    if not top:
        return {"top_mean": float("nan"), "best": float("nan")}
    rewards = [t.reward for t in top]
    return {"top_mean": float(np.mean(rewards)), "best": float(max(rewards))}


def best_test_auroc(result: SearchResult, config: RunConfig, splits: Splits) -> float:
    """Test AUROC of the top-1 child rebuilt from the final shared weights."""
    if not result.top:
        return float("nan")
    try:
        model = build(decode(result.top[0].actions), splits.sample_shape, result.store)
        maps = score(model, splits.test.samples, config.child.lambda_reg, config.child.score_chunk)
        return metrics.auroc(maps.scores, splits.test.labels)
    except AutoODError as exc:
        logger.warning("Best child could not be scored on test", error=exc.message, code=exc.code)
        return float("nan")


def run_comparison(config: RunConfig, seeds: Sequence[int], arms: Sequence[str] = DEFAULT_ARMS,
                   at_epochs: Iterable[int] = DEFAULT_EPOCHS, out_dir: Optional[Union[str, Path]] = None,
                   splits_for: Optional[Callable[[int], Splits]] = None) -> pd.DataFrame:
    """One row per (seed, arm, epoch checkpoint).

    Columns: seed, arm, epoch, top_mean, best, test_auroc. ``test_auroc`` is
    filled on the final-epoch row only.
    """
    if not seeds:
        raise ContractError("at least one seed is required")
    for arm in arms:
        arm_config(arm, config)
    epochs = checkpoint_epochs(at_epochs, config.search.epochs)
    splits_for = splits_for or (lambda seed: load_task(config.data, seed))

    rows = []
    for seed in seeds:
        splits = splits_for(seed)
        for arm in arms:
            runner, arm_cfg = arm_config(arm, config.with_overrides(seed=seed))
            target = Path(out_dir) / arm / f"seed-{seed}" if out_dir is not None else None
            result = runner(arm_cfg, splits, target)
            test_auroc = best_test_auroc(result, arm_cfg, splits)
            for epoch in epochs:
                row = {"seed": seed, "arm": arm, "epoch": epoch, **top_mean_at(result.log, epoch)}
                row["test_auroc"] = test_auroc if epoch == arm_cfg.search.epochs else float("nan")
                rows.append(row)
            logger.info("Arm finished", arm=arm, seed=seed, evaluations=len(result.log), test_auroc=test_auroc)
    return pd.DataFrame(rows, columns=["seed", "arm", "epoch", "top_mean", "best", "test_auroc"])


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and std across seeds per arm and epoch."""
    grouped = frame.groupby(["arm", "epoch"], sort=True)
    summary = grouped[["top_mean", "best", "test_auroc"]].agg(["mean", "std"])
    summary.columns = [f"{column}_{stat}" for column, stat in summary.columns]
    return summary.reset_index()


def paired_wins(frame: pd.DataFrame, arm: str, against: str, column: str = "top_mean",
                epoch: Optional[int] = None) -> int:
    """Seeds on which ``arm`` scores at least as well as ``against`` at ``epoch`` (default: last)."""
    epoch = int(frame["epoch"].max()) if epoch is None else epoch
    at = frame[frame["epoch"] == epoch].pivot(index="seed", columns="arm", values=column)
    if arm not in at or against not in at:
        raise ContractError(f"arms '{arm}' and '{against}' must both be in the comparison")
    return int((at[arm] >= at[against]).sum())
