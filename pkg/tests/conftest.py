import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from autood.models.run_config import RunConfig  # noqa: E402
from autood.services.datasets import load_task  # noqa: E402

# Reference architecture discovered for MNIST: reconstruction + l1,
# (32, 5x5, mean pool 1, no norm, relu), (8, 3x3, mean 1, none, elu),
# (8, 7x7, mean 5, none, relu6).
MNIST_ACTIONS = [3, 0, 3, 2, 1, 0, 2, 2, 1, 1, 1, 0, 2, 7, 1, 3, 1, 2, 2, 6]


def tiny_payload(**search):
    """A run small enough for unit tests: 8x8 images, two-layer children."""
    payload = {
        "data": {"n_samples": 100, "image_size": 8, "contamination": 0.1},
        "child": {"n_layers": 2, "budget_steps": 2, "batch_size": 16, "state_samples": 32,
                  "mixture_components": 2, "clusters": 2},
        "controller": {"hidden_size": 8},
        "search": {"epochs": 2, "candidates": 2, "children_per_step": 1, "top_k": 1, "sim_batch": 1},
        "seed": 3,
    }
    payload["search"].update(search)
    return payload


@pytest.fixture
def tiny_config():
    return RunConfig.from_payload(tiny_payload())


@pytest.fixture
def tiny_splits(tiny_config):
    return load_task(tiny_config.data, tiny_config.seed)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
