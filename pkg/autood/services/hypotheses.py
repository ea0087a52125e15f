"""Reconstruction distances and definition-hypothesis regularizers.

A child's anomaly score is ``distance + lambda_reg * regularizer``. Distances
compare an input batch with its reconstruction; regularizers act on the
flattened bottleneck latent ``Z`` of shape (batch, d) and read a
``HypothesisState`` whose statistics are estimated outside the gradient
path by ``update_state``.
"""
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional

import numpy as np
import structlog
from scipy.cluster.vq import kmeans2
from scipy.ndimage import uniform_filter
from scipy.special import logsumexp

from autood.errors import ContractError
from autood.models.spec import Distance, Hypothesis
from autood.substrate import functional as F
from autood.substrate.tensor import Tensor, as_tensor, log, maximum, norm, reduce_sum

logger = structlog.get_logger(__name__)

SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CENTER_EPS = 0.1
DENSITY_FLOOR = -1e3
LOG_EPS = 1e-12
CLUSTER_ITERATIONS = 5


class DistanceTerm(NamedTuple):
    per_sample: Tensor
    value: Tensor
    pixel_map: np.ndarray


class RegularizerTerm(NamedTuple):
    per_sample: Tensor
    value: Tensor


@dataclass
class HypothesisState:
    """Fitted statistics a regularizer reads; empty for reconstruction."""

    hypothesis: Hypothesis
    weights: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    variances: Optional[np.ndarray] = None
    centroids: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = 0.0
    refreshed_epoch: int = -1

    @property
    def initialized(self) -> bool:
        if self.hypothesis == Hypothesis.DENSITY:
            return self.means is not None
        if self.hypothesis == Hypothesis.CLUSTER:
            return self.centroids is not None
        if self.hypothesis == Hypothesis.CENTROID:
            return self.center is not None
        return True

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in ("weights", "means", "variances", "centroids", "center"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.hypothesis == Hypothesis.CENTROID:
            out["radius"] = np.array([self.radius])
        return out

    @classmethod
    def from_tensors(cls, hypothesis: Hypothesis, tensors: Dict[str, np.ndarray]) -> "HypothesisState":
        state = cls(hypothesis=Hypothesis(hypothesis))
        for name, value in tensors.items():
            if name == "radius":
                state.radius = float(value.reshape(-1)[0])
            else:
                setattr(state, name, np.array(value))
        return state

    def copy(self) -> "HypothesisState":
        return HypothesisState.from_tensors(self.hypothesis, {k: v.copy() for k, v in self.tensors().items()})


# -- distances -----------------------------------------------------------------

def _check_pair(x: Tensor, x_hat: Tensor) -> None:
    if x.shape != x_hat.shape:
        raise ContractError(f"distance operands differ in shape: {x.shape} vs {x_hat.shape}")
    if x.ndim != 4:
        raise ContractError(f"distance expects NCHW batches, got shape {x.shape}")


def _ssim_window(height: int, width: int) -> int:
    window = min(SSIM_WINDOW, height, width)
    return window if window % 2 else window - 1


def _ssim_map(x: Tensor, x_hat: Tensor, window: int) -> Tensor:
    pool = lambda t: F.avg_pool2d(t, window, stride=1, padding=0)  # noqa: E731
    mu_x, mu_y = pool(x), pool(x_hat)
    var_x = pool(x * x) - mu_x * mu_x
    var_y = pool(x_hat * x_hat) - mu_y * mu_y
    cov = pool(x * x_hat) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return numerator / denominator


def _ssim_pixels(x: np.ndarray, y: np.ndarray, window: int) -> np.ndarray:
    """Dense per-pixel SSIM dissimilarity, averaged over channels."""
    box = lambda a: uniform_filter(a, size=(1, 1, window, window), mode="reflect")  # noqa: E731
    mu_x, mu_y = box(x), box(y)
    var_x = box(x * x) - mu_x ** 2
    var_y = box(y * y) - mu_y ** 2
    cov = box(x * y) - mu_x * mu_y
    ssim = ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / \
        ((mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2))
    return (1.0 - ssim).mean(axis=1)


def distance(name, x, x_hat) -> DistanceTerm:
    """Per-sample distance, its batch mean, and a (batch, H, W) pixel map.

    l1 and l2 sum absolute and squared residuals per sample; l21 sums the
    Euclidean norm of each pixel's channel vector; ssim is one minus the
    mean structural similarity over valid 7×7 windows.
    """
    name = Distance(name)
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    _check_pair(x, x_hat)
    residual = x_hat - x
    r = residual.data

    if name == Distance.L1:
        per_sample = residual.abs().sum(axis=(1, 2, 3))
        pixel_map = np.abs(r).sum(axis=1)
    elif name == Distance.L2:
        per_sample = (residual * residual).sum(axis=(1, 2, 3))
        pixel_map = (r * r).sum(axis=1)
    elif name == Distance.L21:
        per_sample = norm(residual, axis=1).sum(axis=(1, 2))
        pixel_map = np.sqrt((r * r).sum(axis=1))
    else:
        window = _ssim_window(x.shape[2], x.shape[3])
        per_sample = 1.0 - _ssim_map(x, x_hat, window).mean(axis=(1, 2, 3))
        pixel_map = _ssim_pixels(x.data, x_hat.data, window)
    return DistanceTerm(per_sample=per_sample, value=per_sample.mean(), pixel_map=pixel_map)


# -- regularizers --------------------------------------------------------------

def _require(state: HypothesisState, hypothesis: Hypothesis) -> None:
    if state is None or state.hypothesis != hypothesis:
        raise ContractError(f"no {hypothesis.value} state supplied")
    if not state.initialized:
        raise ContractError(f"{hypothesis.value} state used before update_state")


def _squared_distances(z: Tensor, points: np.ndarray, scale: Optional[np.ndarray] = None) -> Tensor:
    """(batch, k) matrix of (optionally variance-scaled) squared distances via matmuls."""
    if scale is None:
        scale = np.ones_like(points)
    inv = 1.0 / scale
    quad = (z * z) @ inv.T - 2.0 * (z @ (points * inv).T)
    return quad + (points * points * inv).sum(axis=1)


def _density(z: Tensor, state: HypothesisState) -> Tensor:
    quad = _squared_distances(z, state.means, state.variances)
    log_norm = np.log(state.weights + LOG_EPS) - 0.5 * np.log(2 * np.pi * state.variances).sum(axis=1)
    scores = log_norm - 0.5 * quad
    shift = np.max(scores.data, axis=1, keepdims=True)
    energy = -(log(reduce_sum((scores - shift).exp(), axis=1)) + shift[:, 0])
    if np.min(energy.data) < DENSITY_FLOOR:
        logger.warning("Density energy below sanity floor", minimum=float(np.min(energy.data)),
                       floor=DENSITY_FLOOR)
    return energy


def _cluster(z: Tensor, state: HypothesisState) -> Tensor:
    kernel = 1.0 / (1.0 + maximum(_squared_distances(z, state.centroids), 0.0))
    q = kernel / kernel.sum(axis=1, keepdims=True)
    weight = q * q / q.sum(axis=0, keepdims=True)
    p = weight / weight.sum(axis=1, keepdims=True)
    return (p * (log(p + LOG_EPS) - log(q + LOG_EPS))).sum(axis=1)


def _centroid(z: Tensor, state: HypothesisState) -> RegularizerTerm:
    offset = z - state.center
    hinge = maximum((offset * offset).sum(axis=1) - state.radius ** 2, 0.0)
    return RegularizerTerm(per_sample=hinge, value=hinge.mean() + state.radius ** 2)


def regularizer(hypothesis, latent, state: Optional[HypothesisState] = None,
                residual=None) -> RegularizerTerm:
    """Per-sample regularizer values and their batch value.

    ``latent`` is (batch, d). The reconstruction hypothesis reads
    ``residual`` (reconstruction minus input) instead of the latent.
    """
    hypothesis = Hypothesis(hypothesis)
    z = as_tensor(latent)
    if hypothesis == Hypothesis.RECONSTRUCTION:
        if residual is None:
            raise ContractError("reconstruction regularizer needs the reconstruction residual")
        r = as_tensor(residual)
        per_sample = (r * r).reshape(r.shape[0], -1).sum(axis=1)
        return RegularizerTerm(per_sample=per_sample, value=per_sample.mean())

    if z.ndim != 2:
        raise ContractError(f"latent batch must be (batch, d), got {z.shape}")
    _require(state, hypothesis)
    if hypothesis == Hypothesis.CENTROID:
        return _centroid(z, state)
    per_sample = _density(z, state) if hypothesis == Hypothesis.DENSITY else _cluster(z, state)
    return RegularizerTerm(per_sample=per_sample, value=per_sample.mean())


# -- state estimation ----------------------------------------------------------

def farthest_points(points: np.ndarray, k: int) -> np.ndarray:
    """Deterministic seeding: start from the point farthest from the mean."""
    mean = points.mean(axis=0)
    chosen = [int(np.argmax(((points - mean) ** 2).sum(axis=1)))]
    nearest = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        index = int(np.argmax(nearest))
        chosen.append(index)
        nearest = np.minimum(nearest, ((points - points[index]) ** 2).sum(axis=1))
    return points[chosen].copy()


def em_sweep(z: np.ndarray, state: HypothesisState, sigma_min: float) -> HypothesisState:
    """One expectation-maximisation pass of a diagonal Gaussian mixture."""
    inv = 1.0 / state.variances
    quad = (z * z) @ inv.T - 2.0 * z @ (state.means * inv).T + (state.means ** 2 * inv).sum(axis=1)
    log_joint = np.log(state.weights + LOG_EPS) - 0.5 * np.log(2 * np.pi * state.variances).sum(axis=1) - 0.5 * quad
    resp = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))

    mass = resp.sum(axis=0) + LOG_EPS
    state.weights = mass / mass.sum()
    state.means = (resp.T @ z) / mass[:, None]
    second = (resp.T @ (z * z)) / mass[:, None]
    state.variances = np.maximum(second - state.means ** 2, sigma_min)
    return state


def update_state(hypothesis, latent: np.ndarray, state: Optional[HypothesisState] = None,
                 components: int = 4, clusters: int = 4, sigma_min: float = 1e-3,
                 radius_quantile: float = 0.9, epoch: int = 0) -> HypothesisState:
    """Refresh the statistics a regularizer reads from a latent batch.

    density: one EM sweep (farthest-point seeded on first use).
    cluster: five k-means iterations once per epoch, then held.
    centroid: center fixed on first use, radius = quantile of distances.
    """
    hypothesis = Hypothesis(hypothesis)
    state = state if state is not None else HypothesisState(hypothesis=hypothesis)
    if hypothesis == Hypothesis.RECONSTRUCTION:
        return state
    z = np.asarray(latent, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ContractError(f"update_state needs a non-empty (batch, d) latent, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ContractError("latent batch contains non-finite values")

    if hypothesis == Hypothesis.DENSITY:
        if z.shape[0] < components:
            raise ContractError(f"batch of {z.shape[0]} is smaller than {components} mixture components")
        if state.means is None:
            state.means = farthest_points(z, components)
            state.weights = np.full(components, 1.0 / components)
            state.variances = np.maximum(np.tile(z.var(axis=0), (components, 1)), sigma_min)
        em_sweep(z, state, sigma_min)
    elif hypothesis == Hypothesis.CLUSTER:
        if z.shape[0] < clusters:
            raise ContractError(f"batch of {z.shape[0]} is smaller than {clusters} clusters")
        if state.refreshed_epoch != epoch or state.centroids is None:
            seeds = state.centroids if state.centroids is not None else farthest_points(z, clusters)
            state.centroids, _ = kmeans2(z, seeds, iter=CLUSTER_ITERATIONS, minit="matrix", missing="warn")
            state.refreshed_epoch = epoch
    else:
        if state.center is None:
            center = z.mean(axis=0)
            center[(np.abs(center) < CENTER_EPS) & (center < 0)] = -CENTER_EPS
            center[(np.abs(center) < CENTER_EPS) & (center > 0)] = CENTER_EPS
            state.center = center
        state.radius = float(np.quantile(np.sqrt(((z - state.center) ** 2).sum(axis=1)), radius_quantile))
    return state
