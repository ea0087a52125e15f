import math

import numpy as np

from autood.errors import ConfigError, ContractError
from autood.models.run_config import RunConfig
from autood.services.datasets import Splits, defect_side_range, split_sizes


class ValidationService:
    @staticmethod
    def validate_image_size(config: RunConfig) -> None:
        """Every layer may halve the spatial size; defect patches need room too"""
        size = config.data.image_size
        if size < 2:
            raise ConfigError(f"image_size {size} is too small for a convolutional child")
        if config.data.task == "defects":
            try:
                defect_side_range(size, size)
            except ContractError as exc:
                raise ConfigError(exc.message) from exc

    @staticmethod
    def validate_split_sizes(config: RunConfig) -> None:
        """Valid and test need at least one outlier each"""
        n_train, n_valid, n_test = split_sizes(config.data.n_samples, config.data.split)
        if min(n_train, n_valid, n_test) < 2:
            raise ConfigError(f"n_samples {config.data.n_samples} leaves a split with fewer than 2 samples")
        if config.data.task == "planted":
            contamination = config.data.contamination
            if math.floor(contamination * n_valid) < 1 or math.floor(contamination * n_test) < 1:
                raise ConfigError("contamination leaves no outlier in the validation or test split")

    @staticmethod
    def validate_reward_metric(config: RunConfig) -> None:
        if config.search.reward_metric == "rpro" and config.data.task != "defects":
            raise ConfigError("rpro rewards need pixel masks; use the defects task")

    @staticmethod
    def validate_config(config: RunConfig) -> None:
        """Cross-section checks that the individual config models cannot express"""
        ValidationService.validate_image_size(config)
        ValidationService.validate_split_sizes(config)
        ValidationService.validate_reward_metric(config)

    @staticmethod
    def validate_splits(splits: Splits) -> None:
        """Train must be non-empty; valid and test must hold both classes"""
        if len(splits.train) == 0:
            raise ContractError("train split is empty")
        for name in ("valid", "test"):
            labels = splits[name].labels
            if labels is None:
                raise ContractError(f"{name} split has no labels")
            labels = np.asarray(labels)
            if labels.all() or not labels.any():
                raise ContractError(f"{name} split must contain inliers and outliers")
