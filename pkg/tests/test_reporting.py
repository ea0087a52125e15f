import json

import pandas as pd
import pytest

from autood.models.records import SearchRecord
from autood.services import reporting
from autood.services.orchestrator import SearchLog, run_search, top_models

from conftest import MNIST_ACTIONS


def _log(epochs, per_epoch=2):
    log = SearchLog()
    for epoch in range(epochs):
        for i in range(per_epoch):
            log.append(SearchRecord(step=log.next_step, epoch=epoch, phase="search",
                                    actions=MNIST_ACTIONS, raw_reward=(epoch + i) / 100.0))
        log.append(SearchRecord(step=log.next_step, epoch=epoch, phase="imitation", actions=MNIST_ACTIONS,
                                raw_reward=1.0, buffer_event="replayed"))
    return log


def test_forty_epochs_give_two_summary_rows():
    rows = reporting.summary_rows(_log(40))
    assert [row.epoch for row in rows] == [19, 39]
    assert rows[0].best == pytest.approx(0.20)
    assert rows[1].mean == pytest.approx((sum(range(20, 40)) * 2 + 20) / 40 / 100.0)


def test_partial_window_still_reported():
    assert len(reporting.summary_rows(_log(45))) == 3
    assert reporting.summary_rows(SearchLog()) == []


def test_top_models_rank_distinct_sequences():
    log = SearchLog()
    rewards = [0.4, 0.9, 0.9, 0.7]
    for step, reward in enumerate(rewards):
        actions = list(MNIST_ACTIONS)
        actions[0] = step % 4
        log.append(SearchRecord(step=step, epoch=0, phase="search", actions=actions, raw_reward=reward))
    top = top_models(log, k=3)
    assert [t.reward for t in top] == [0.9, 0.9, 0.7]
    assert [t.actions[0] for t in top] == [1, 2, 3]
    assert top[0].spec["hypothesis"] == "cluster"


def test_report_rebuilds_artifacts_from_a_log(tmp_path):
    _log(25).to_jsonl(tmp_path / reporting.LOG_FILE)
    top = reporting.report(tmp_path)
    summary = pd.read_csv(tmp_path / reporting.SUMMARY_FILE)
    assert list(summary.columns) == ["epoch", "best", "mean", "std"] and len(summary) == 2
    assert reporting.read_top(tmp_path / reporting.TOP_FILE) == top
    assert "reconstruction/l1" in reporting.format_top(top)


def test_search_artifacts_on_disk(tmp_path, tiny_config, tiny_splits):
    run_search(tiny_config, tiny_splits, out_dir=tmp_path)
    for name in ("config.json", "searchlog.jsonl", "summary.csv", "top5.json"):
        assert (tmp_path / name).is_file()
    assert (tmp_path / "checkpoints" / "controller.aodt").is_file()
    assert (tmp_path / "checkpoints" / "best" / "spec.json").is_file()
    echoed = json.loads((tmp_path / "config.json").read_text())
    assert echoed["seed"] == tiny_config.seed and echoed["search"]["epochs"] == 2
