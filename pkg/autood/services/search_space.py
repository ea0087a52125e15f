"""Action vocabularies and the (6N+2)-token model tuple.

Slot order is part of the controller contract: two global slots
(hypothesis, distance) followed by six local slots per encoder layer.
Choice order inside every slot is fixed as well, since controller heads
index choices by position.
"""
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from autood.errors import ContractError, DecodeError, EncodeError
from autood.models.spec import (
    KERNEL_SIZES,
    OUTPUT_CHANNELS,
    Activation,
    Distance,
    Hypothesis,
    LayerSpec,
    ModelSpec,
    NormType,
    PoolType,
)

GLOBAL_SLOTS = ("definition-hypothesis", "distance")
LOCAL_SLOTS = ("output-channel", "conv-kernel", "pool-type", "pool-kernel", "norm-type", "activation")

# (slot name, LayerSpec/ModelSpec field, ordered choices)
_CHOICES = {
    "definition-hypothesis": ("hypothesis", tuple(Hypothesis)),
    "distance": ("distance", tuple(Distance)),
    "output-channel": ("out_channels", OUTPUT_CHANNELS),
    "conv-kernel": ("conv_kernel", KERNEL_SIZES),
    "pool-type": ("pool_type", tuple(PoolType)),
    "pool-kernel": ("pool_kernel", KERNEL_SIZES),
    "norm-type": ("norm", tuple(NormType)),
    "activation": ("activation", tuple(Activation)),
}

# Golden canonical order for N = 1; changing it breaks saved controllers.
GOLDEN_ORDER = (
    ("definition-hypothesis", ("density", "cluster", "centroid", "reconstruction")),
    ("distance", ("l1", "l2", "l21", "ssim")),
    ("output-channel", ("3", "8", "16", "32", "64", "128", "256")),
    ("conv-kernel", ("1", "3", "5", "7")),
    ("pool-type", ("max", "average")),
    ("pool-kernel", ("1", "3", "5", "7")),
    ("norm-type", ("batch", "instance", "none")),
    ("activation", ("sigmoid", "tanh", "relu", "linear", "softplus", "leakyrelu", "relu6", "elu")),
)


@dataclass(frozen=True)
class SlotVocabulary:
    slot_id: int
    name: str
    choices: Tuple

    @property
    def size(self) -> int:
        return len(self.choices)

    @property
    def tokens(self) -> Tuple[str, ...]:
        """Lowercase token names as they appear in spec JSON."""
        return tuple(c.value if hasattr(c, "value") else str(c) for c in self.choices)


def _check_depth(n_layers: int) -> None:
    if not isinstance(n_layers, (int, np.integer)) or n_layers < 1:
        raise ContractError(f"number of layers must be >= 1, got {n_layers}")


@lru_cache(maxsize=None)
def vocabularies(n_layers: int) -> Tuple[SlotVocabulary, ...]:
    _check_depth(n_layers)
    names = list(GLOBAL_SLOTS) + list(LOCAL_SLOTS) * n_layers
    return tuple(SlotVocabulary(slot_id=i, name=name, choices=_CHOICES[name][1])
                 for i, name in enumerate(names))


def slot_sizes(n_layers: int) -> List[int]:
    return [v.size for v in vocabularies(n_layers)]


def depth_of(actions: Sequence[int]) -> int:
    length = len(actions)
    if length < 8 or (length - 2) % 6:
        raise ContractError(f"action sequence length {length} is not 6N+2 for any N >= 1")
    return (length - 2) // 6


def decode(actions: Sequence[int]) -> ModelSpec:
    vocab = vocabularies(depth_of(actions))
    chosen = []
    for slot, token in zip(vocab, actions):
        is_index = isinstance(token, (int, np.integer)) and not isinstance(token, bool)
        if not is_index or not 0 <= token < slot.size:
            raise DecodeError(f"token {token} outside [0, {slot.size}) for '{slot.name}'", slot=slot.slot_id)
        chosen.append(slot.choices[int(token)])

    layers = []
    for start in range(2, len(chosen), len(LOCAL_SLOTS)):
        fields = {_CHOICES[name][0]: value for name, value in zip(LOCAL_SLOTS, chosen[start:start + 6])}
        layers.append(LayerSpec(**fields))
    return ModelSpec(hypothesis=chosen[0], distance=chosen[1], layers=layers)


def encode(spec: ModelSpec) -> List[int]:
    vocab = vocabularies(spec.depth)
    values = [spec.hypothesis, spec.distance]
    for layer in spec.layers:
        values.extend(getattr(layer, _CHOICES[name][0]) for name in LOCAL_SLOTS)
    actions = []
    for slot, value in zip(vocab, values):
        try:
            actions.append(slot.choices.index(value))
        except ValueError as exc:
            raise EncodeError(f"'{value}' is not a '{slot.name}' choice", slot=slot.slot_id) from exc
    return actions


def cardinality(n_layers: int) -> int:
    """Exact number of points: 4·4·(7·4·2·4·3·8)^N."""
    return math.prod(v.size for v in vocabularies(n_layers))


def random_actions(n_layers: int, rng: np.random.Generator) -> List[int]:
    return [int(rng.integers(v.size)) for v in vocabularies(n_layers)]


def spec_to_json(spec: ModelSpec) -> str:
    return spec.to_json()


def spec_from_json(text: str) -> ModelSpec:
    try:
        return ModelSpec.from_json(text)
    except ValidationError as exc:
        raise EncodeError(f"invalid model spec: {exc.error_count()} error(s)",
                          errors=exc.errors(include_url=False)) from exc
