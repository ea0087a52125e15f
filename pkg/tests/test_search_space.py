import json

import numpy as np
import pytest

from autood.errors import ContractError, DecodeError, EncodeError
from autood.models.spec import Activation, Hypothesis, NormType, PoolType
from autood.services.search_space import (
    GOLDEN_ORDER,
    cardinality,
    decode,
    depth_of,
    encode,
    random_actions,
    slot_sizes,
    spec_from_json,
    spec_to_json,
    vocabularies,
)

from conftest import MNIST_ACTIONS


def test_golden_slot_order():
    vocab = vocabularies(1)
    assert [(v.name, v.tokens) for v in vocab] == list(GOLDEN_ORDER)
    assert slot_sizes(2) == [4, 4, 7, 4, 2, 4, 3, 8, 7, 4, 2, 4, 3, 8]


def test_cardinality_matches_closed_form():
    assert cardinality(1) == 16 * 5376
    assert cardinality(6) == 16 * 5376 ** 6
    assert f"{cardinality(6):.1e}" == "3.9e+23"


def test_depth_of_rejects_bad_lengths():
    assert depth_of([0] * 20) == 3
    for length in (0, 2, 7, 9, 13):
        with pytest.raises(ContractError):
            depth_of([0] * length)


def test_decode_reference_architecture():
    spec = decode(MNIST_ACTIONS)
    assert spec.hypothesis == Hypothesis.RECONSTRUCTION
    assert spec.distance.value == "l1"
    first, second, third = spec.layers
    assert (first.out_channels, first.conv_kernel, first.pool_kernel) == (32, 5, 1)
    assert first.pool_type == PoolType.AVERAGE and first.norm == NormType.NONE
    assert second.activation == Activation.ELU and second.out_channels == 8
    assert (third.conv_kernel, third.pool_kernel, third.activation) == (7, 5, Activation.RELU6)


def test_decode_names_the_bad_slot():
    actions = list(MNIST_ACTIONS)
    actions[4] = 2  # pool-type has two choices
    with pytest.raises(DecodeError) as excinfo:
        decode(actions)
    assert excinfo.value.slot == 4


def test_encode_inverts_decode_on_random_sequences():
    rng = np.random.default_rng(11)
    for _ in range(500):
        n = int(rng.integers(1, 5))
        actions = random_actions(n, rng)
        assert encode(decode(actions)) == actions


def test_spec_json_round_trip_and_published_aliases():
    spec = decode(MNIST_ACTIONS)
    assert spec_from_json(spec_to_json(spec)) == spec

    payload = json.loads(spec_to_json(spec))
    payload["layers"][0]["pool_type"] = "mean"
    payload["layers"][0]["norm"] = "no"
    assert encode(spec_from_json(json.dumps(payload))) == MNIST_ACTIONS


def test_spec_from_json_rejects_unknown_tokens():
    payload = json.loads(spec_to_json(decode(MNIST_ACTIONS)))
    payload["layers"][0]["out_channels"] = 12
    with pytest.raises(EncodeError):
        spec_from_json(json.dumps(payload))


def test_random_actions_are_uniform_per_slot():
    rng = np.random.default_rng(5)
    draws = np.array([random_actions(1, rng) for _ in range(4000)])
    for slot, size in enumerate(slot_sizes(1)):
        counts = np.bincount(draws[:, slot], minlength=size)
        expected = len(draws) / size
        chi2 = ((counts - expected) ** 2 / expected).sum()
        # 99.9th percentile of chi-square with up to 7 degrees of freedom
        assert chi2 < 24.3


def test_decode_rejects_boolean_tokens():
    actions = list(MNIST_ACTIONS)
    actions[1] = True
    with pytest.raises(DecodeError) as excinfo:
        decode(actions)
    assert excinfo.value.slot == 1
    actions[1] = np.int64(MNIST_ACTIONS[1])
    assert decode(actions) == decode(MNIST_ACTIONS)
