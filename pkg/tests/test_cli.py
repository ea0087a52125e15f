import json

import pandas as pd
import pytest

from autood.main import EXIT_OK, EXIT_USAGE, main
from autood.services.orchestrator import SearchLog
from autood.services.search_space import decode, spec_to_json

from conftest import MNIST_ACTIONS, tiny_payload


@pytest.fixture(autouse=True)
def no_env_out(monkeypatch):
    monkeypatch.delenv("AUTOOD_OUT", raising=False)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_payload()))
    return path


def test_search_writes_artifacts_and_is_reproducible(tmp_path, config_file):
    first, second = tmp_path / "first", tmp_path / "second"
    for out in (first, second):
        assert main(["search", "--config", str(config_file), "--seed", "7", "--out", str(out)]) == EXIT_OK
    assert json.loads((first / "config.json").read_text())["seed"] == 7
    logs = [SearchLog.from_jsonl(out / "searchlog.jsonl") for out in (first, second)]
    assert logs[0].comparable() == logs[1].comparable()
    assert (first / "checkpoints" / "best").is_dir()


def test_random_search_runs(tmp_path, config_file):
    out = tmp_path / "random"
    assert main(["random-search", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
    assert {r.phase for r in SearchLog.from_jsonl(out / "searchlog.jsonl")} == {"random"}


def test_usage_errors_exit_with_two(tmp_path):
    assert main(["search", "--no-such-flag"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["search", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(tiny_payload(candidates=3, children_per_step=2)))
    assert main(["search", "--config", str(bad), "--out", str(tmp_path / "bad")]) == EXIT_USAGE
    assert not (tmp_path / "bad").exists()

    tiny = tmp_path / "tiny.json"
    payload = tiny_payload()
    payload["data"]["n_samples"] = 10
    tiny.write_text(json.dumps(payload))
    assert main(["search", "--config", str(tiny)]) == EXIT_USAGE


def test_version_exits_cleanly(capsys):
    assert main(["--version"]) == EXIT_OK
    assert "autood" in capsys.readouterr().out


def test_environment_overrides_the_output_directory(tmp_path, config_file, monkeypatch):
    monkeypatch.setenv("AUTOOD_OUT", str(tmp_path / "env"))
    assert main(["search", "--config", str(config_file), "--out", str(tmp_path / "flag")]) == EXIT_OK
    assert (tmp_path / "env" / "searchlog.jsonl").is_file()
    assert not (tmp_path / "flag").exists()


def test_train_one_reports_validation_metrics(tmp_path, config_file, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(spec_to_json(decode(MNIST_ACTIONS)))
    out = tmp_path / "one"
    assert main(["train-one", "--config", str(config_file), "--spec", str(spec), "--out", str(out),
                 "--budget", "1"]) == EXIT_OK
    frame = pd.read_csv(out / "metrics.csv")
    assert {"auroc", "aupr_out", "aupr_in"} <= set(frame["metric"])
    assert "auroc" in capsys.readouterr().out
    assert (out / "checkpoints" / "child" / "spec.json").is_file()


def test_evaluate_finds_the_run_config_next_to_the_checkpoint(tmp_path, config_file):
    out = tmp_path / "run"
    assert main(["search", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
    assert main(["evaluate", "--checkpoint", str(out / "checkpoints" / "best"), "--split", "valid"]) == EXIT_OK
    frame = pd.read_csv(out / "metrics.csv")
    assert frame.loc[frame["metric"] == "auroc", "value"].between(0.0, 1.0).all()


def test_report_summarises_a_log_directory(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    assert main(["search", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
    (out / "summary.csv").unlink()
    capsys.readouterr()
    assert main(["report", "--log", str(out), "--top", "1", "--window", "1"]) == EXIT_OK
    assert len(pd.read_csv(out / "summary.csv")) == 2
    assert len(capsys.readouterr().out.strip().splitlines()) == 2
    assert main(["report", "--log", str(tmp_path / "nowhere")]) == EXIT_USAGE


def test_make_data_then_search_on_saved_splits(tmp_path, config_file):
    out = tmp_path / "made"
    assert main(["make-data", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
    assert (out / "data" / "manifest.json").is_file()
    run = tmp_path / "from-disk"
    assert main(["search", "--config", str(config_file), "--data", str(out / "data"), "--out", str(run)]) == EXIT_OK
    assert (run / "top5.json").is_file()
