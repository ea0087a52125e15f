import json

import numpy as np
import pandas as pd
import pytest

from autood.errors import ContractError
from autood.main import EXIT_OK, main
from autood.models.records import SearchRecord
from autood.services import experiments
from autood.services.orchestrator import SearchLog

from conftest import tiny_payload


@pytest.fixture
def comparison(tiny_config, tiny_splits):
    return experiments.run_comparison(tiny_config, [0, 1], at_epochs=[1, 2],
                                      splits_for=lambda seed: tiny_splits)


def test_every_arm_runs_on_every_seed(comparison):
    assert list(comparison.columns) == ["seed", "arm", "epoch", "top_mean", "best", "test_auroc"]
    assert len(comparison) == 2 * len(experiments.DEFAULT_ARMS) * 2
    assert set(comparison["arm"]) == set(experiments.DEFAULT_ARMS)
    assert comparison["top_mean"].between(0.0, 1.0).all()
    assert (comparison["best"] >= comparison["top_mean"]).all()

    final = comparison[comparison["epoch"] == 2]
    assert final["test_auroc"].between(0.0, 1.0).all()
    assert comparison.loc[comparison["epoch"] == 1, "test_auroc"].isna().all()


def test_summary_and_paired_wins(comparison):
    summary = experiments.summarize(comparison)
    assert len(summary) == len(experiments.DEFAULT_ARMS) * 2
    assert {"arm", "epoch", "top_mean_mean", "top_mean_std", "best_mean", "test_auroc_mean"} <= set(summary.columns)
    assert 0 <= experiments.paired_wins(comparison, "autood", "random") <= 2
    assert experiments.paired_wins(comparison, "autood", "autood") == 2
    with pytest.raises(ContractError):
        experiments.paired_wins(comparison, "autood", "missing")


def test_arms_and_seeds_are_checked(tiny_config):
    with pytest.raises(ContractError):
        experiments.arm_config("greedy", tiny_config)
    with pytest.raises(ContractError):
        experiments.run_comparison(tiny_config, [])
    _, no_buffer = experiments.arm_config("no-buffer", tiny_config)
    assert no_buffer.search.buffer_capacity == 0 and tiny_config.search.buffer_capacity > 0
    _, no_explore = experiments.arm_config("no-explore", tiny_config)
    assert no_explore.search.eta_explore == 0.0


def test_checkpoint_epochs_clip_to_the_run():
    assert experiments.checkpoint_epochs([20, 100, 200], 100) == [20, 100]
    assert experiments.checkpoint_epochs([0, 5], 3) == [3]


def test_top_mean_only_counts_earlier_epochs():
    log = SearchLog([
        SearchRecord(step=0, epoch=0, phase="search", actions=[2, 1, 1, 1, 0, 1, 0, 2], raw_reward=0.6),
        SearchRecord(step=1, epoch=1, phase="search", actions=[3, 1, 1, 1, 0, 0, 2, 3], raw_reward=0.9),
    ])
    assert experiments.top_mean_at(log, 1) == {"top_mean": pytest.approx(0.6), "best": pytest.approx(0.6)}
    assert experiments.top_mean_at(log, 2)["best"] == pytest.approx(0.9)
    assert np.isnan(experiments.top_mean_at(log, 0)["top_mean"])


def test_ablate_command_writes_both_tables(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("AUTOOD_OUT", raising=False)
    config = tmp_path / "run.json"
    config.write_text(json.dumps(tiny_payload()))
    out = tmp_path / "ablation"
    assert main(["ablate", "--config", str(config), "--seeds", "0", "--arms", "autood", "random",
                 "--at", "1", "--out", str(out)]) == EXIT_OK
    frame = pd.read_csv(out / "ablation.csv")
    assert len(frame) == 4 and set(frame["arm"]) == {"autood", "random"}
    assert len(pd.read_csv(out / "ablation_summary.csv")) == 4
    assert (out / "autood" / "seed-0" / "searchlog.jsonl").is_file()
    assert "top_mean_mean" in capsys.readouterr().out
