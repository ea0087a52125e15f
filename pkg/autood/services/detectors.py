"""Weight-shared child autoencoders built from model specs.

All children draw their parameters from one ``ParamStore``. A parameter's
key encodes role, layer index, operator and channel/kernel signature, so two
specs that agree on a layer's convolution reuse the same tensor no matter
which activation, pooling or normalisation surrounds it.
"""
import copy
import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np
import structlog

from autood.errors import BuildError, ContractError, GraphConstructionError, NumericError
from autood.models.run_config import ChildConfig
from autood.models.spec import Hypothesis, ModelSpec, NormType, PoolType
from autood.services.hypotheses import HypothesisState, distance, regularizer, update_state
from autood.substrate import optim
from autood.substrate.checkpoint import load_tensors, save_tensors
from autood.substrate.functional import RunningStats, pool_geometry, pooled_size
from autood.substrate.graph import Graph, backward, forward
from autood.substrate.tensor import Tensor

logger = structlog.get_logger(__name__)

CHECKPOINT_FILE = "child.aodt"
SPEC_FILE = "spec.json"


def conv_key(role: str, layer: int, cin: int, cout: int, kernel: int) -> str:
    op = "conv" if role == "enc" else "deconv"
    return f"{role}/{layer}/{op}/{cin}-{cout}/k{kernel}"


def norm_key(role: str, layer: int, norm: NormType, channels: int) -> str:
    return f"{role}/{layer}/{norm.value}_norm/{channels}"


class ParamStore:
    """The shared parameter pool ω plus everything children share with it."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.tensors: Dict[str, Tensor] = {}
        self.running: Dict[str, RunningStats] = {}
        self.states: Dict[str, HypothesisState] = {}
        self.optimizer: Optional[optim.OptimizerState] = None
        self.touched: Set[str] = set()

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, key: str) -> bool:
        return key in self.tensors

    def fetch(self, key: str, shape: Sequence[int], init: str = "he", fan_in: int = 1) -> Tensor:
        shape = tuple(shape)
        tensor = self.tensors.get(key)
        if tensor is None:
            tensor = Tensor(self._initial(key, shape, init, fan_in), requires_grad=True, name=key)
            self.tensors[key] = tensor
        elif tensor.shape != shape:
            raise ContractError(f"parameter '{key}' has shape {tensor.shape}, requested {shape}")
        return tensor

    def _initial(self, key: str, shape: Tuple[int, ...], init: str, fan_in: int) -> np.ndarray:
        if init == "zeros":
            return np.zeros(shape)
        if init == "ones":
            return np.ones(shape)
        # seeded per key so creation order never changes the values
        rng = np.random.default_rng([self.seed, zlib.crc32(key.encode("utf-8"))])
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def running_stats(self, key: str, channels: int) -> RunningStats:
        if key not in self.running:
            self.running[key] = RunningStats.for_channels(channels)
        return self.running[key]

    def state(self, key: str, hypothesis: Hypothesis) -> HypothesisState:
        if key not in self.states:
            self.states[key] = HypothesisState(hypothesis=hypothesis)
        return self.states[key]

    def child_optimizer(self, config: ChildConfig) -> optim.OptimizerState:
        if self.optimizer is None:
            self.optimizer = optim.OptimizerState(kind=config.optimizer, learning_rate=config.learning_rate,
                                                  momentum=config.momentum)
        return self.optimizer

    def copy(self) -> "ParamStore":
        """Isolated snapshot for a parallel worker."""
        clone = ParamStore(self.seed)
        clone.tensors = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()}
        clone.running = {k: RunningStats(v.mean.copy(), v.var.copy(), v.momentum) for k, v in self.running.items()}
        clone.states = {k: v.copy() for k, v in self.states.items()}
        clone.optimizer = copy.deepcopy(self.optimizer)
        return clone

    def merge(self, worker: "ParamStore") -> None:
        """Write back everything ``worker`` touched; later merges overwrite earlier ones."""
        for key in sorted(worker.touched):
            if key in worker.tensors:
                if key in self.tensors:
                    self.tensors[key].data = worker.tensors[key].data.copy()
                else:
                    self.tensors[key] = Tensor(worker.tensors[key].data.copy(), requires_grad=True, name=key)
            if key in worker.running:
                stats = worker.running[key]
                self.running[key] = RunningStats(stats.mean.copy(), stats.var.copy(), stats.momentum)
            if key in worker.states:
                self.states[key] = worker.states[key].copy()
            if worker.optimizer is not None:
                if self.optimizer is None:
                    self.optimizer = optim.OptimizerState(kind=worker.optimizer.kind,
                                                          learning_rate=worker.optimizer.learning_rate,
                                                          momentum=worker.optimizer.momentum)
                for moments in ("first_moment", "second_moment", "steps"):
                    source = getattr(worker.optimizer, moments)
                    if key in source:
                        getattr(self.optimizer, moments)[key] = copy.deepcopy(source[key])
        self.touched |= worker.touched


@dataclass
class ChildModel:
    spec: ModelSpec
    graph: Graph
    input_shape: Tuple[int, int, int]
    store: ParamStore
    state_key: str
    running_keys: List[str] = field(default_factory=list)

    @property
    def hypothesis_state(self) -> HypothesisState:
        return self.store.state(self.state_key, self.spec.hypothesis)

    @property
    def parameters(self) -> Dict[str, Tensor]:
        return self.graph.parameters

    def latent_dim(self) -> int:
        return int(np.prod(self.graph.shape_of("latent")))


class ScoreMap(NamedTuple):
    scores: np.ndarray
    pixel_map: np.ndarray


class Objective(NamedTuple):
    loss: Tensor
    distance: Tensor
    regularizer: Tensor
    per_sample: np.ndarray


class TrainResult(NamedTuple):
    initial_loss: Optional[float]
    final_loss: Optional[float]
    steps: int
    failed: bool
    error: Optional[str] = None
    wall_time: float = 0.0


def encoder_signature(spec: ModelSpec, input_shape: Sequence[int]) -> str:
    layers = "|".join(f"{l.out_channels}.{l.conv_kernel}.{l.pool_type.value}.{l.pool_kernel}."
                      f"{l.norm.value}.{l.activation.value}" for l in spec.layers)
    return f"{'x'.join(str(d) for d in input_shape)}:{layers}"


def _add_norm(graph: Graph, store: ParamStore, name: str, source: str, role: str, layer: int,
              norm: NormType, channels: int, running_keys: List[str]) -> str:
    if norm == NormType.NONE:
        return source
    key = norm_key(role, layer, norm, channels)
    gamma = graph.parameter(f"{key}/gamma", store.fetch(f"{key}/gamma", (channels,), init="ones"))
    beta = graph.parameter(f"{key}/beta", store.fetch(f"{key}/beta", (channels,), init="zeros"))
    if norm == NormType.BATCH:
        running_keys.append(key)
        return graph.add(name, "batch_norm", [source, gamma, beta], running=store.running_stats(key, channels))
    return graph.add(name, "instance_norm", [source, gamma, beta])


def build(spec: ModelSpec, input_shape: Sequence[int], store: ParamStore) -> ChildModel:
    """Realise ``spec`` as an encoder/mirrored-decoder graph over shared parameters."""
    channels, height, width = (int(d) for d in input_shape)
    if min(channels, height, width) < 1:
        raise BuildError(f"input shape {tuple(input_shape)} has an empty axis", layer=0)

    graph = Graph(name="child")
    running_keys: List[str] = []
    source = graph.input("x", (channels, height, width))
    widths = [channels]
    sizes = [(height, width)]

    for i, layer in enumerate(spec.layers):
        try:
            cin, cout, k = widths[-1], layer.out_channels, layer.conv_kernel
            key = conv_key("enc", i, cin, cout, k)
            w = graph.parameter(f"{key}/w", store.fetch(f"{key}/w", (cout, cin, k, k), fan_in=cin * k * k))
            b = graph.parameter(f"{key}/b", store.fetch(f"{key}/b", (cout,), init="zeros"))
            source = graph.add(f"enc{i}.conv", "conv2d", [source, w, b])
            stride, padding = pool_geometry(layer.pool_kernel)
            size = tuple(pooled_size(s, layer.pool_kernel, stride, padding) for s in sizes[-1])
            if min(size) < 1:
                raise BuildError(f"pooling collapses {sizes[-1]} below 1x1", layer=i)
            if layer.pool_kernel > 1:
                op = "max_pool2d" if layer.pool_type == PoolType.MAX else "avg_pool2d"
                source = graph.add(f"enc{i}.pool", op, [source], kernel=layer.pool_kernel)
            source = _add_norm(graph, store, f"enc{i}.norm", source, "enc", i, layer.norm, cout, running_keys)
            source = graph.add(f"enc{i}.act", layer.activation.value, [source])
        except GraphConstructionError as exc:
            raise BuildError(exc.message, layer=i) from exc
        widths.append(cout)
        sizes.append(graph.shape_of(source)[1:])

    graph.add("latent", "flatten", [source])

    for i in reversed(range(spec.depth)):
        layer = spec.layers[i]
        try:
            cin, cout, k = widths[i + 1], widths[i], layer.conv_kernel
            key = conv_key("dec", i, cin, cout, k)
            w = graph.parameter(f"{key}/w", store.fetch(f"{key}/w", (cin, cout, k, k), fan_in=cin * k * k))
            b = graph.parameter(f"{key}/b", store.fetch(f"{key}/b", (cout,), init="zeros"))
            source = graph.add(f"dec{i}.deconv", "conv_transpose2d", [source, w, b])
            if layer.pool_kernel > 1:
                source = graph.add(f"dec{i}.unpool", "unpool_nearest", [source], size=tuple(sizes[i]))
            source = _add_norm(graph, store, f"dec{i}.norm", source, "dec", i, layer.norm, cout, running_keys)
            source = graph.add(f"dec{i}.act", layer.activation.value, [source])
        except GraphConstructionError as exc:
            raise BuildError(exc.message, layer=i) from exc

    graph.add("recon", "identity", [source])
    state_key = f"{spec.hypothesis.value}@{encoder_signature(spec, input_shape)}"
    return ChildModel(spec=spec, graph=graph, input_shape=(channels, height, width), store=store,
                      state_key=state_key, running_keys=running_keys)


def _run(model: ChildModel, batch: np.ndarray, training: bool) -> Tuple[Tensor, Tensor]:
    out = forward(model.graph, {"x": batch}, outputs=["latent", "recon"], training=training)
    return out["latent"], out["recon"]


def objective(model: ChildModel, batch: np.ndarray, lambda_reg: float, training: bool = False) -> Objective:
    """Training loss ``distance + lambda_reg * regularizer`` on one batch."""
    x = Tensor(batch)
    latent, recon = _run(model, batch, training)
    try:
        dist = distance(model.spec.distance, x, recon)
    except NumericError as exc:
        raise NumericError(exc.message, where="distance") from exc
    try:
        reg = regularizer(model.spec.hypothesis, latent, model.hypothesis_state, residual=recon - x)
    except NumericError as exc:
        raise NumericError(exc.message, where="regularizer") from exc
    per_sample = dist.per_sample.data + lambda_reg * reg.per_sample.data
    return Objective(loss=dist.value + lambda_reg * reg.value, distance=dist.per_sample,
                     regularizer=reg.per_sample, per_sample=per_sample)


def embed(model: ChildModel, data: np.ndarray, chunk: int = 256) -> np.ndarray:
    parts = [_run(model, data[i:i + chunk], training=False)[0].data for i in range(0, len(data), chunk)]
    return np.concatenate(parts, axis=0)


def score(model: ChildModel, batch: np.ndarray, lambda_reg: float = 0.1, chunk: int = 256) -> ScoreMap:
    """Per-sample anomaly scores (higher is more anomalous) and per-pixel maps."""
    scores, maps = [], []
    for start in range(0, len(batch), chunk):
        part = batch[start:start + chunk]
        x = Tensor(part)
        latent, recon = _run(model, part, training=False)
        try:
            dist = distance(model.spec.distance, x, recon)
        except NumericError as exc:
            raise NumericError(exc.message, where="distance") from exc
        try:
            reg = regularizer(model.spec.hypothesis, latent, model.hypothesis_state, residual=recon - x)
        except NumericError as exc:
            raise NumericError(exc.message, where="regularizer") from exc
        if not np.all(np.isfinite(dist.per_sample.data)):
            raise NumericError("non-finite score", where="distance")
        if not np.all(np.isfinite(reg.per_sample.data)):
            raise NumericError("non-finite score", where="regularizer")
        scores.append(dist.per_sample.data + lambda_reg * reg.per_sample.data)
        maps.append(dist.pixel_map)
    return ScoreMap(scores=np.concatenate(scores), pixel_map=np.concatenate(maps, axis=0))


def refresh_state(model: ChildModel, data: np.ndarray, config: ChildConfig, rng: np.random.Generator,
                  epoch: int = 0) -> HypothesisState:
    if model.spec.hypothesis == Hypothesis.RECONSTRUCTION:
        return model.hypothesis_state
    sample = data[rng.permutation(len(data))[:config.state_samples]]
    state = update_state(model.spec.hypothesis, embed(model, sample, config.score_chunk), model.hypothesis_state,
                         components=config.mixture_components, clusters=config.clusters,
                         sigma_min=config.sigma_min, radius_quantile=config.radius_quantile, epoch=epoch)
    model.store.states[model.state_key] = state
    model.store.touched.add(model.state_key)
    return state


def train_child(model: ChildModel, train_data: np.ndarray, steps: int, config: ChildConfig,
                rng: np.random.Generator, epoch: int = 0, progress: Optional[float] = None) -> TrainResult:
    """Minibatch training of the shared parameters a child uses.

    The hypothesis state is refreshed first (even for zero steps). ``progress``
    drives the learning-rate schedule; without it the schedule follows this
    call's own step count. Divergence marks the child failed and leaves the
    store as it was after the last good update.
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    started = time.perf_counter()
    store = model.store
    state = store.child_optimizer(config)
    store.touched.update(model.graph.parameters)
    store.touched.update(model.running_keys)

    initial: Optional[float] = None
    last: Optional[float] = None
    try:
        refresh_state(model, train_data, config, rng, epoch)
        for step in range(steps):
            batch = train_data[rng.choice(len(train_data), size=min(config.batch_size, len(train_data)),
                                          replace=False)]
            loss = objective(model, batch, config.lambda_reg, training=True).loss
            value = loss.item()
            if initial is None:
                initial = value
            if not np.isfinite(value) or value > config.divergence_threshold:
                raise NumericError(f"training loss diverged ({value:.3g})", where="loss")
            fraction = progress if progress is not None else step / steps
            optim.step(state, model.graph.parameters, backward(model.graph, loss),
                       learning_rate=optim.step_schedule(config.learning_rate, fraction))
            last = value
        if steps == 0:
            head = train_data[:min(config.batch_size, len(train_data))]
            initial = last = objective(model, head, config.lambda_reg, training=False).loss.item()
    except NumericError as exc:
        logger.warning("Child training failed", error=exc.message, code=exc.code)
        return TrainResult(initial, last, steps, failed=True, error=exc.message,
                           wall_time=time.perf_counter() - started)
    return TrainResult(initial, last, steps, failed=False, wall_time=time.perf_counter() - started)


# -- checkpoints ---------------------------------------------------------------

def save_child(model: ChildModel, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {key: tensor.data for key, tensor in model.graph.parameters.items()}
    for key in model.running_keys:
        stats = model.store.running[key]
        tensors[f"running/{key}/mean"] = stats.mean
        tensors[f"running/{key}/var"] = stats.var
    for name, value in model.hypothesis_state.tensors().items():
        tensors[f"hyp/{name}"] = value
    tensors["meta/input_shape"] = np.array(model.input_shape, dtype=np.float64)
    save_tensors(directory / CHECKPOINT_FILE, tensors)
    (directory / SPEC_FILE).write_text(model.spec.to_json())
    logger.info("Child checkpoint saved", path=str(directory), parameters=len(model.graph.parameters))
    return directory


def load_child(directory: Union[str, Path], seed: int = 0) -> ChildModel:
    directory = Path(directory)
    spec = ModelSpec.from_json((directory / SPEC_FILE).read_text())
    tensors = load_tensors(directory / CHECKPOINT_FILE)
    store = ParamStore(seed)
    hyp: Dict[str, np.ndarray] = {}
    running: Dict[str, Dict[str, np.ndarray]] = {}
    for name, value in tensors.items():
        if name.startswith("hyp/"):
            hyp[name[len("hyp/"):]] = value
        elif name.startswith("running/"):
            key, _, which = name[len("running/"):].rpartition("/")
            running.setdefault(key, {})[which] = value
        elif not name.startswith("meta/"):
            store.tensors[name] = Tensor(value, requires_grad=True, name=name)
    for key, stats in running.items():
        store.running[key] = RunningStats(mean=stats["mean"], var=stats["var"])
    input_shape = tuple(int(d) for d in tensors["meta/input_shape"])
    model = build(spec, input_shape, store)
    store.states[model.state_key] = HypothesisState.from_tensors(spec.hypothesis, hyp)
    return model


def describe(model: ChildModel) -> Dict[str, object]:
    return {
        "spec": json.loads(model.spec.to_json()),
        "input_shape": list(model.input_shape),
        "latent_dim": model.latent_dim(),
        "operators": model.graph.audit(),
    }
