"""Run artifacts: search log, per-window summary, top-5 table and checkpoints."""
import json
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import pandas as pd
import structlog

from autood.errors import ContractError
from autood.models.records import MetricRow, SummaryRow, TopModel
from autood.models.run_config import RunConfig
from autood.services.controller import save_controller
from autood.services.datasets import Splits
from autood.services.detectors import build, save_child
from autood.services.orchestrator import SearchLog, SearchResult, top_models
from autood.services.search_space import decode

logger = structlog.get_logger(__name__)

LOG_FILE = "searchlog.jsonl"
SUMMARY_FILE = "summary.csv"
TOP_FILE = "top5.json"
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.csv"
SUMMARY_WINDOW = 20


def summary_rows(log: SearchLog, window: int = SUMMARY_WINDOW) -> List[SummaryRow]:
    """Best, mean and std of sampled-candidate rewards per block of ``window`` epochs.

    Replayed retrainings are excluded; a trailing partial block still gets a
    row. Each row is labelled with the last epoch of its block.
    """
    if window < 1:
        raise ContractError("summary window must be >= 1")
    frame = pd.DataFrame([{"epoch": r.epoch, "reward": r.raw_reward or 0.0}
                          for r in log if r.buffer_event != "replayed"])
    if frame.empty:
        return []
    frame["block"] = frame["epoch"] // window
    grouped = frame.groupby("block")
    rows = []
    for block, group in grouped:
        rewards = group["reward"].to_numpy()
        rows.append(SummaryRow(epoch=int(group["epoch"].max()), best=float(rewards.max()),
                               mean=float(rewards.mean()), std=float(rewards.std())))
    return rows


def write_summary_csv(rows: Sequence[SummaryRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([r.model_dump() for r in rows], columns=["epoch", "best", "mean", "std"]).to_csv(path, index=False)
    return path


def write_metrics_csv(rows: Sequence[MetricRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([r.model_dump() for r in rows], columns=["metric", "value", "n_pos", "n_neg"]).to_csv(path, index=False)
    return path


def write_top(top: Sequence[TopModel], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([t.model_dump() for t in top], indent=2))
    return path


def read_top(path: Union[str, Path]) -> List[TopModel]:
    return [TopModel.model_validate(item) for item in json.loads(Path(path).read_text())]


def write_config(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / CONFIG_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2))
    return path


def format_top(top: Sequence[TopModel]) -> str:
    """Plain-text top-k table: rank, reward, and the decoded architecture."""
    lines = [f"{'rank':>4}  {'reward':>8}  architecture"]
    for model in top:
        spec = decode(model.actions)
        layers = " | ".join(
            f"{layer.out_channels}c k{layer.conv_kernel} {layer.pool_type.value}{layer.pool_kernel} "
            f"{layer.norm.value} {layer.activation.value}"
            for layer in spec.layers
        )
        lines.append(f"{model.rank:>4}  {model.reward:>8.4f}  {spec.hypothesis.value}/{spec.distance.value}  {layers}")
    return "\n".join(lines)


def report(log_dir: Union[str, Path], k: int = 5, window: int = SUMMARY_WINDOW) -> List[TopModel]:
    """Rebuild summary.csv and top5.json from a searchlog.jsonl in ``log_dir``."""
    log_dir = Path(log_dir)
    log = SearchLog.from_jsonl(log_dir / LOG_FILE)
    write_summary_csv(summary_rows(log, window), log_dir / SUMMARY_FILE)
    top = top_models(log, k)
    write_top(top, log_dir / TOP_FILE)
    logger.info("Report written", path=str(log_dir), records=len(log), top=len(top))
    return top


def write_artifacts(result: SearchResult, config: RunConfig, splits: Splits, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(config, out_dir)
    result.log.to_jsonl(out_dir / LOG_FILE)
    write_summary_csv(summary_rows(result.log, config.search.summary_window), out_dir / SUMMARY_FILE)
    write_top(result.top, out_dir / TOP_FILE)
    checkpoints = out_dir / "checkpoints"
    if result.controller is not None:
        save_controller(result.controller, checkpoints / "controller.aodt")
    if result.top:
        best = build(decode(result.top[0].actions), splits.sample_shape, result.store)
        save_child(best, checkpoints / "best")
    rewards = [r.raw_reward or 0.0 for r in result.log]
    logger.info("Artifacts written", path=str(out_dir), records=len(result.log),
                best=float(np.max(rewards)) if rewards else None)
    return out_dir
