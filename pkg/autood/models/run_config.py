import json
from pathlib import Path
from typing import Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from autood.errors import ConfigError


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: Literal["planted", "defects"] = "planted"
    in_family: Literal["blobs", "textures"] = "blobs"
    n_samples: int = Field(default=1000, gt=0)
    image_size: int = Field(default=16, gt=0)
    channels: int = Field(default=1, gt=0)
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    contamination: float = Field(default=0.05, ge=0, lt=1)

    @model_validator(mode="after")
    def _split_sums_to_one(self):
        if abs(sum(self.split) - 1.0) > 1e-6 or min(self.split) <= 0:
            raise ValueError(f"split ratios {self.split} must be positive and sum to 1")
        return self


class ChildConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_layers: int = Field(default=3, gt=0)
    budget_steps: int = Field(default=100, ge=0)
    batch_size: int = Field(default=64, gt=0)
    optimizer: Literal["adam", "sgd-momentum"] = "adam"
    learning_rate: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    lambda_reg: float = Field(default=0.1, ge=0)
    mixture_components: int = Field(default=4, gt=0)
    clusters: int = Field(default=4, gt=0)
    sigma_min: float = Field(default=1e-3, gt=0)
    radius_quantile: float = Field(default=0.9, gt=0, le=1)
    state_samples: int = Field(default=256, gt=0)
    divergence_threshold: float = Field(default=1e6, gt=0)
    score_chunk: int = Field(default=256, gt=0)


class ControllerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_size: int = Field(default=50, gt=0)
    learning_rate: float = Field(default=3.5e-4, gt=0)
    init_range: float = Field(default=0.1, gt=0)
    sigma_init: float = Field(default=0.05, gt=0)
    sigma_prior: float = Field(default=0.1, gt=0)
    hyperprior_scale: float = Field(default=1.0, gt=0)
    eta_lr_init: float = Field(default=1e-2, ge=0)
    temperature: float = Field(default=5.0, gt=0)
    tanh_constant: float = Field(default=2.5, gt=0)


class SearchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=500, gt=0)
    children_per_step: int = Field(default=5, gt=0)
    candidates: int = Field(default=10, gt=0)
    top_k: int = Field(default=3, gt=0)
    eta_explore: float = Field(default=0.01, ge=0)
    buffer_capacity: int = Field(default=10, ge=0)
    baseline_decay: float = Field(default=0.95, ge=0, lt=1)
    sim_steps: int = Field(default=1, ge=0)
    sim_batch: int = Field(default=2, gt=0)
    reward_metric: Literal["auroc", "aupr", "rpro"] = "auroc"
    report_top: int = Field(default=5, gt=0)
    summary_window: int = Field(default=20, gt=0)

    @model_validator(mode="after")
    def _candidate_arithmetic(self):
        if self.top_k > self.candidates:
            raise ValueError(f"top_k {self.top_k} exceeds candidates {self.candidates}")
        if self.candidates % self.children_per_step:
            raise ValueError("candidates must be a multiple of children_per_step")
        return self


class RunConfig(BaseModel):
    """Everything a search run needs; validated before any work starts."""

    model_config = ConfigDict(extra="forbid")

    data: DataConfig = Field(default_factory=DataConfig)
    child: ChildConfig = Field(default_factory=ChildConfig)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = Field(default=1, gt=0)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        try:
            payload = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        return cls.from_payload(payload)

    @classmethod
    def from_payload(cls, payload: dict) -> "RunConfig":
        try:
            return cls.model_validate(payload)
        except ValidationError as exc:
            raise ConfigError(f"invalid run configuration: {exc.error_count()} error(s)",
                              errors=exc.errors(include_url=False)) from exc

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None,
                       workers: Optional[int] = None, budget: Optional[int] = None) -> "RunConfig":
        payload = self.model_dump()
        if seed is not None:
            payload["seed"] = seed
        if out_dir is not None:
            payload["out_dir"] = out_dir
        if workers is not None:
            payload["workers"] = workers
        if budget is not None:
            payload["child"]["budget_steps"] = budget
        return RunConfig.from_payload(payload)
