import json

import pytest

from autood.config import Settings
from autood.errors import ConfigError, ContractError
from autood.models.run_config import RunConfig
from autood.services.datasets import load_task
from autood.services.validation import ValidationService

from conftest import tiny_payload


def test_defaults_follow_the_reference_setup():
    config = RunConfig()
    assert config.controller.learning_rate == pytest.approx(3.5e-4)
    assert config.controller.hidden_size == 50
    assert config.controller.temperature == 5.0 and config.controller.tanh_constant == 2.5
    assert config.search.buffer_capacity == 10 and config.search.epochs == 500
    assert config.child.batch_size == 64 and config.child.momentum == 0.9
    assert config.search.reward_metric == "auroc"


def test_candidate_arithmetic_is_validated():
    with pytest.raises(ConfigError):
        RunConfig.from_payload(tiny_payload(top_k=3, candidates=2))
    with pytest.raises(ConfigError) as excinfo:
        RunConfig.from_payload(tiny_payload(candidates=3, children_per_step=2))
    assert excinfo.value.code == "CONFIG_ERROR" and excinfo.value.details["errors"]


def test_unknown_keys_and_bad_splits_are_rejected():
    payload = tiny_payload()
    payload["search"]["learning_rate"] = 0.1
    with pytest.raises(ConfigError):
        RunConfig.from_payload(payload)
    payload = tiny_payload()
    payload["data"]["split"] = [0.5, 0.5, 0.5]
    with pytest.raises(ConfigError):
        RunConfig.from_payload(payload)


def test_load_reports_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(broken)
    good = tmp_path / "good.json"
    good.write_text(json.dumps(tiny_payload()))
    assert RunConfig.load(good).seed == 3


def test_overrides_replace_only_what_is_given(tiny_config):
    changed = tiny_config.with_overrides(seed=11, budget=7)
    assert changed.seed == 11 and changed.child.budget_steps == 7
    assert changed.out_dir == tiny_config.out_dir and changed.workers == tiny_config.workers
    assert tiny_config.seed == 3
    with pytest.raises(ConfigError):
        tiny_config.with_overrides(workers=0)


def test_config_errors_are_contract_errors():
    assert issubclass(ConfigError, ContractError) and issubclass(ConfigError, ValueError)


def test_cross_section_validation(tiny_config):
    ValidationService.validate_config(tiny_config)

    too_few = tiny_payload()
    too_few["data"]["n_samples"] = 10
    with pytest.raises(ConfigError):
        ValidationService.validate_config(RunConfig.from_payload(too_few))

    no_outliers = tiny_payload()
    no_outliers["data"]["contamination"] = 0.01
    with pytest.raises(ConfigError):
        ValidationService.validate_split_sizes(RunConfig.from_payload(no_outliers))

    with pytest.raises(ConfigError):
        ValidationService.validate_reward_metric(RunConfig.from_payload(tiny_payload(reward_metric="rpro")))

    tiny_image = tiny_payload()
    tiny_image["data"]["image_size"] = 1
    with pytest.raises(ConfigError):
        ValidationService.validate_image_size(RunConfig.from_payload(tiny_image))


def test_split_validation(tiny_config, tiny_splits):
    ValidationService.validate_splits(tiny_splits)
    tiny_splits.valid.labels[:] = 0
    with pytest.raises(ContractError):
        ValidationService.validate_splits(tiny_splits)


def test_generated_splits_pass_validation(tiny_config):
    defects = tiny_payload(reward_metric="rpro")
    defects["data"].update(task="defects", image_size=16, n_samples=40)
    config = RunConfig.from_payload(defects)
    ValidationService.validate_config(config)
    ValidationService.validate_splits(load_task(config.data, config.seed))


def test_settings_read_the_prefixed_environment(monkeypatch):
    monkeypatch.setenv("AUTOOD_OUT", "/tmp/elsewhere")
    monkeypatch.setenv("AUTOOD_DEFAULT_SEED", "42")
    monkeypatch.setenv("AUTOOD_LOG_LEVEL", "debug")
    settings = Settings()
    assert settings.OUT == "/tmp/elsewhere"
    assert settings.DEFAULT_SEED == 42 and settings.LOG_LEVEL == "debug"
    monkeypatch.delenv("AUTOOD_OUT")
    assert Settings().OUT is None
