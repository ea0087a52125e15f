"""Synthetic image datasets, outlier planting and on-disk persistence.

Every generator is a pure function of its arguments and seed. Images are
float64 arrays of shape (n, C, H, W) with values in [0, 1].
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from autood.errors import ContractError
from autood.models.run_config import DataConfig
from autood.services.idx import load_idx, save_idx

logger = structlog.get_logger(__name__)

MANIFEST = "manifest.json"
SPLIT_NAMES = ("train", "valid", "test")
TEXTURE_AMPLITUDE = 0.3
DEFECT_AREA = (0.04, 0.15)


@dataclass
class Dataset:
    samples: np.ndarray
    labels: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None
    provenance: Dict[str, object] = field(default_factory=dict)
    sources: List[Tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.samples)
        if self.labels is not None and len(self.labels) != n:
            raise ContractError(f"{len(self.labels)} labels for {n} samples")
        if self.masks is not None and len(self.masks) != n:
            raise ContractError(f"{len(self.masks)} masks for {n} samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.samples.shape[1:])


@dataclass
class Splits:
    train: Dataset
    valid: Dataset
    test: Dataset

    def __getitem__(self, name: str) -> Dataset:
        if name not in SPLIT_NAMES:
            raise ContractError(f"unknown split '{name}'")
        return getattr(self, name)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return self.train.sample_shape


def _shape(shape: Sequence[int]) -> Tuple[int, int, int]:
    if len(shape) != 3 or min(shape) < 1:
        raise ContractError(f"image shape must be (C, H, W) with positive sizes, got {tuple(shape)}")
    return tuple(int(s) for s in shape)


def _check_count(n: int, minimum: int = 1) -> None:
    if n < minimum:
        raise ContractError(f"need at least {minimum} samples, got {n}")


def synth_noise(kind: str, n: int, shape: Sequence[int], seed: int) -> Dataset:
    _check_count(n)
    shape = _shape(shape)
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        samples = np.clip(rng.normal(0.5, 1.0, size=(n,) + shape), 0.0, 1.0)
    elif kind == "uniform":
        samples = rng.uniform(0.0, 1.0, size=(n,) + shape)
    else:
        raise ContractError(f"unknown noise kind '{kind}'")
    return Dataset(samples=samples, provenance={"generator": f"noise/{kind}", "seed": seed},
                   sources=[(f"noise/{kind}", i) for i in range(n)])


def _blobs(n: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    anchors = np.array([(0.3, 0.3), (0.3, 0.7), (0.7, 0.3), (0.7, 0.7)]) * np.array([height - 1, width - 1])
    spread = max(min(height, width) / 6.0, 0.75)
    images = np.empty((n, height, width))
    for i in range(n):
        center = anchors[rng.integers(len(anchors))] + rng.uniform(-1.0, 1.0, size=2)
        echo = anchors[rng.integers(len(anchors))] + rng.uniform(-1.0, 1.0, size=2)
        bump = np.exp(-((ys - center[0]) ** 2 + (xs - center[1]) ** 2) / (2 * spread ** 2))
        bump += 0.4 * np.exp(-((ys - echo[0]) ** 2 + (xs - echo[1]) ** 2) / (2 * (0.6 * spread) ** 2))
        images[i] = bump / bump.max()
    return images


def _textures(n: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    images = np.empty((n, height, width))
    for i in range(n):
        period = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0.0, 2 * np.pi, size=2)
        if rng.random() < 0.5:
            axis = ys if rng.random() < 0.5 else xs
            wave = np.sin(2 * np.pi * axis / period + phase[0])
        else:
            wave = np.sin(2 * np.pi * ys / period + phase[0]) * np.sin(2 * np.pi * xs / period + phase[1])
        images[i] = 0.5 + TEXTURE_AMPLITUDE * wave
    return images


def make_indist(family: str, n: int, shape: Sequence[int], seed: int) -> Dataset:
    """Blobs (smooth bumps at jittered anchor positions) or stripe/check textures."""
    _check_count(n)
    channels, height, width = _shape(shape)
    rng = np.random.default_rng(seed)
    if family == "blobs":
        planes = _blobs(n, height, width, rng)
    elif family == "textures":
        planes = _textures(n, height, width, rng)
    else:
        raise ContractError(f"unknown in-distribution family '{family}'")
    samples = np.repeat(planes[:, None], channels, axis=1)
    return Dataset(samples=samples, provenance={"generator": f"indist/{family}", "seed": seed},
                   sources=[(family, i) for i in range(n)])


def split_sizes(n: int, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> Tuple[int, int, int]:
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    return n_train, n_valid, n - n_train - n_valid


def _take(data: Dataset, index: np.ndarray) -> Tuple[np.ndarray, List[Tuple[str, int]]]:
    sources = data.sources or [(str(data.provenance.get("generator", "data")), i) for i in range(len(data))]
    return data.samples[index], [sources[i] for i in index]


def plant_outliers(in_data: Dataset, out_data: Dataset, ratios: Sequence[float] = (0.6, 0.2, 0.2),
                   contamination: float = 0.05, seed: int = 0) -> Splits:
    """Outlier-free train split plus valid/test splits holding ⌊contamination·n⌋ labelled outliers."""
    n_train, n_valid, n_test = split_sizes(len(in_data), ratios)
    out_valid = int(math.floor(contamination * n_valid))
    out_test = int(math.floor(contamination * n_test))
    if len(out_data) < out_valid + out_test:
        raise ContractError(f"need {out_valid + out_test} outliers ({out_valid} valid, {out_test} test), "
                            f"got {len(out_data)}")
    if out_data.sample_shape != in_data.sample_shape:
        raise ContractError(f"outlier shape {out_data.sample_shape} != inlier shape {in_data.sample_shape}")

    rng = np.random.default_rng(seed)
    inliers = rng.permutation(len(in_data))
    outliers = rng.permutation(len(out_data))
    bounds = np.cumsum([n_train, n_valid - out_valid, n_test - out_test])
    train_idx, valid_in, test_in = np.split(inliers[:bounds[-1]], bounds[:-1])

    def assemble(name: str, in_index: np.ndarray, out_index: np.ndarray) -> Dataset:
        x_in, src_in = _take(in_data, in_index)
        x_out, src_out = _take(out_data, out_index)
        samples = np.concatenate([x_in, x_out], axis=0)
        labels = np.r_[np.zeros(len(in_index), dtype=np.int64), np.ones(len(out_index), dtype=np.int64)]
        order = rng.permutation(len(samples))
        sources = src_in + src_out
        return Dataset(samples=samples[order], labels=labels[order],
                       provenance={"split": name, "seed": seed, "inliers": in_data.provenance,
                                   "outliers": out_data.provenance},
                       sources=[sources[i] for i in order])

    splits = Splits(
        train=assemble("train", train_idx, np.array([], dtype=np.int64)),
        valid=assemble("valid", valid_in, outliers[:out_valid]),
        test=assemble("test", test_in, outliers[out_valid:out_valid + out_test]),
    )
    logger.info("Outliers planted", train=len(splits.train), valid=len(splits.valid), test=len(splits.test),
                valid_outliers=out_valid, test_outliers=out_test)
    return splits


def defect_side_range(height: int, width: int) -> Tuple[int, int]:
    area = height * width
    low = math.ceil(math.sqrt(DEFECT_AREA[0] * area))
    high = math.floor(math.sqrt(DEFECT_AREA[1] * area))
    if low > high or high > min(height, width):
        raise ContractError(f"image {height}x{width} too small for a defect patch")
    return low, high


def synth_defects(n: int, shape: Sequence[int], seed: int) -> Dataset:
    """Textures where every other image carries a square bright or dark patch and its exact mask."""
    _check_count(n, minimum=2)
    channels, height, width = _shape(shape)
    base = make_indist("textures", n, (channels, height, width), seed)
    rng = np.random.default_rng([seed, 1])
    samples = base.samples.copy()
    masks = np.zeros((n, height, width), dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    low, high = defect_side_range(height, width)
    for i in range(1, n, 2):
        side = int(rng.integers(low, high + 1))
        top = int(rng.integers(0, height - side + 1))
        left = int(rng.integers(0, width - side + 1))
        level = 0.95 if rng.random() < 0.5 else 0.05
        patch = np.clip(level + rng.uniform(-0.02, 0.02, size=(side, side)), 0.0, 1.0)
        samples[i, :, top:top + side, left:left + side] = patch
        masks[i, top:top + side, left:left + side] = 1
        labels[i] = 1
    return Dataset(samples=samples, labels=labels, masks=masks,
                   provenance={"generator": "defects", "seed": seed},
                   sources=[("defects", i) for i in range(n)])


def planted_task(config: DataConfig, seed: int) -> Splits:
    """In-distribution family vs. the other family plus Gaussian and uniform noise."""
    shape = (config.channels, config.image_size, config.image_size)
    in_data = make_indist(config.in_family, config.n_samples, shape, seed)
    _, n_valid, n_test = split_sizes(config.n_samples, config.split)
    need = max(int(math.floor(config.contamination * n_valid)) + int(math.floor(config.contamination * n_test)), 1)
    other = "textures" if config.in_family == "blobs" else "blobs"
    pools = [make_indist(other, need, shape, seed + 1), synth_noise("gaussian", need, shape, seed + 2),
             synth_noise("uniform", need, shape, seed + 3)]
    out_data = Dataset(samples=np.concatenate([p.samples for p in pools]),
                       provenance={"generator": "mixture", "parts": [p.provenance for p in pools]},
                       sources=[s for p in pools for s in p.sources])
    return plant_outliers(in_data, out_data, config.split, config.contamination, seed)


def defect_task(config: DataConfig, seed: int) -> Splits:
    """Clean textures for training; valid/test drawn from the defect generator."""
    shape = (config.channels, config.image_size, config.image_size)
    n_train, n_valid, n_test = split_sizes(config.n_samples, config.split)
    train = make_indist("textures", n_train, shape, seed)
    train.labels = np.zeros(n_train, dtype=np.int64)
    train.masks = np.zeros((n_train,) + shape[1:], dtype=np.int64)
    evaluation = synth_defects(n_valid + n_test, shape, seed + 1)
    order = np.random.default_rng(seed).permutation(len(evaluation))

    def part(name: str, index: np.ndarray) -> Dataset:
        return Dataset(samples=evaluation.samples[index], labels=evaluation.labels[index],
                       masks=evaluation.masks[index], provenance={"split": name, **evaluation.provenance},
                       sources=[evaluation.sources[i] for i in index])

    return Splits(train=train, valid=part("valid", order[:n_valid]), test=part("test", order[n_valid:]))


def load_task(config: DataConfig, seed: int) -> Splits:
    return defect_task(config, seed) if config.task == "defects" else planted_task(config, seed)


# -- persistence ---------------------------------------------------------------

def save_dataset(splits: Splits, directory: Union[str, Path]) -> Path:
    """IDX files per split plus a JSON manifest; images are stored as u8 (n, C·H, W)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, object] = {"sample_shape": list(splits.sample_shape), "splits": {}}
    for name in SPLIT_NAMES:
        data = splits[name]
        channels, height, width = data.sample_shape
        entry: Dict[str, object] = {
            "images": f"{name}-images.idx",
            "count": len(data),
            "provenance": data.provenance,
            "members": [[source, int(index)] for source, index in data.sources],
        }
        save_idx(directory / entry["images"], data.samples.reshape(len(data), channels * height, width))
        if data.labels is not None:
            entry["labels"] = f"{name}-labels.idx"
            entry["label_values"] = [int(v) for v in data.labels]
            save_idx(directory / entry["labels"], data.labels.astype(np.uint8))
        if data.masks is not None:
            entry["masks"] = f"{name}-masks.idx"
            save_idx(directory / entry["masks"], data.masks.astype(np.uint8))
        manifest["splits"][name] = entry
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, default=str))
    return directory


def load_dataset(directory: Union[str, Path]) -> Splits:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    channels, height, width = manifest["sample_shape"]
    parts = {}
    for name in SPLIT_NAMES:
        entry = manifest["splits"][name]
        samples = load_idx(directory / entry["images"]).reshape(-1, channels, height, width)
        labels = load_idx(directory / entry["labels"], scale=False).astype(np.int64) if "labels" in entry else None
        masks = load_idx(directory / entry["masks"], scale=False).astype(np.int64) if "masks" in entry else None
        parts[name] = Dataset(samples=samples, labels=labels, masks=masks, provenance=entry["provenance"],
                              sources=[(source, index) for source, index in entry["members"]])
    return Splits(**parts)
