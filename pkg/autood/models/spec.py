from enum import Enum
from typing import List

from pydantic import BaseModel, ConfigDict, Field, field_validator


class Hypothesis(str, Enum):
    DENSITY = "density"
    CLUSTER = "cluster"
    CENTROID = "centroid"
    RECONSTRUCTION = "reconstruction"


class Distance(str, Enum):
    L1 = "l1"
    L2 = "l2"
    L21 = "l21"
    SSIM = "ssim"


class PoolType(str, Enum):
    MAX = "max"
    AVERAGE = "average"


class NormType(str, Enum):
    BATCH = "batch"
    INSTANCE = "instance"
    NONE = "none"


class Activation(str, Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    LINEAR = "linear"
    SOFTPLUS = "softplus"
    LEAKYRELU = "leakyrelu"
    RELU6 = "relu6"
    ELU = "elu"


OUTPUT_CHANNELS = (3, 8, 16, 32, 64, 128, 256)
KERNEL_SIZES = (1, 3, 5, 7)

# Spellings used in published architecture tables.
POOL_ALIASES = {"mean": "average", "avg": "average"}
ACTIVATION_ALIASES = {"leaky_relu": "leakyrelu", "identity": "linear"}
NORM_ALIASES = {"no": "none"}


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    out_channels: int
    conv_kernel: int
    pool_type: PoolType
    pool_kernel: int
    norm: NormType
    activation: Activation

    @field_validator("out_channels")
    @classmethod
    def _channels_in_vocabulary(cls, value: int) -> int:
        if value not in OUTPUT_CHANNELS:
            raise ValueError(f"out_channels {value} not in {OUTPUT_CHANNELS}")
        return value

    @field_validator("conv_kernel", "pool_kernel")
    @classmethod
    def _kernel_in_vocabulary(cls, value: int) -> int:
        if value not in KERNEL_SIZES:
            raise ValueError(f"kernel {value} not in {KERNEL_SIZES}")
        return value

    @field_validator("pool_type", mode="before")
    @classmethod
    def _pool_alias(cls, value):
        return POOL_ALIASES.get(value, value) if isinstance(value, str) else value

    @field_validator("norm", mode="before")
    @classmethod
    def _norm_alias(cls, value):
        return NORM_ALIASES.get(value, value) if isinstance(value, str) else value

    @field_validator("activation", mode="before")
    @classmethod
    def _activation_alias(cls, value):
        if isinstance(value, str):
            value = value.lower()
            return ACTIVATION_ALIASES.get(value, value)
        return value


class ModelSpec(BaseModel):
    """A decoded point of the search space; the decoder mirrors ``layers``."""

    model_config = ConfigDict(frozen=True)

    hypothesis: Hypothesis
    distance: Distance
    layers: List[LayerSpec] = Field(..., min_length=1)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.model_validate_json(text)
