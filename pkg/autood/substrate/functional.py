"""Differentiable operators used by child models and the controller.

Convolutions are NCHW with odd square kernels and "same" zero padding.
They are evaluated as a sum of per-offset matrix products, which keeps
memory at one shifted copy of the input instead of a full im2col matrix.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from autood.errors import ShapeError
from autood.substrate.tensor import (
    Tensor,
    as_tensor,
    concat,
    exp,
    log,
    make,
    reduce_sum,
    sqrt,
)

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.99
NORM_EPS = 1e-5


# -- dense -----------------------------------------------------------------

def dense(x, w, b=None) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense input width {x.shape[-1]} does not match weight {w.shape}")
    out = x @ w
    return out + b if b is not None else out


# -- convolution -------------------------------------------------------------

def _check_conv(x: Tensor, w: Tensor, in_axis: int) -> int:
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"expected odd square kernel, got weight shape {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {w.shape[in_axis]}")
    return w.shape[2] // 2


def _pad(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _correlate(xp: np.ndarray, w: np.ndarray, height: int, width: int) -> np.ndarray:
    """out[b,o,h,w] = sum_{c,i,j} xp[b,c,h+i,w+j] * w[o,c,i,j]"""
    k = w.shape[2]
    out = np.zeros((xp.shape[0], height, width, w.shape[0]))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + height, j:j + width]
            out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))
    return out.transpose(0, 3, 1, 2)


def _scatter(g: np.ndarray, w: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of ``_correlate`` with respect to the (unpadded) input."""
    batch, _, height, width = g.shape
    k = w.shape[2]
    out = np.zeros((batch, height + 2 * p, width + 2 * p, w.shape[1]))
    for i in range(k):
        for j in range(k):
            out[:, i:i + height, j:j + width, :] += np.tensordot(g, w[:, :, i, j], axes=([1], [0]))
    out = out.transpose(0, 3, 1, 2)
    return out[:, :, p:p + height, p:p + width]


def _kernel_grad(g: np.ndarray, xp: np.ndarray, k: int) -> np.ndarray:
    """d/dw of ``_correlate``: sum over batch and space of g ⊗ shifted input."""
    _, _, height, width = g.shape
    out = np.empty((g.shape[1], xp.shape[1], k, k))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + height, j:j + width]
            out[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
    return out


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 "same" convolution; ``w`` is (out, in, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    p = _check_conv(x, w, in_axis=1)
    xp = _pad(x.data, p)
    height, width = x.shape[2], x.shape[3]
    out = _correlate(xp, w.data, height, width)

    def vjp(g):
        return _scatter(g, w.data, p), _kernel_grad(g, xp, w.shape[2])

    y = make(out, (x, w), vjp, "conv2d")
    return y + as_tensor(b).reshape(1, -1, 1, 1) if b is not None else y


def conv_transpose2d(x, w, b=None) -> Tensor:
    """Stride-1 "same" transposed convolution; ``w`` is (in, out, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    p = _check_conv(x, w, in_axis=0)
    out = _scatter(x.data, w.data, p)

    def vjp(g):
        gp = _pad(g, p)
        return _correlate(gp, w.data, x.shape[2], x.shape[3]), _kernel_grad(x.data, gp, w.shape[2])

    y = make(out, (x, w), vjp, "conv_transpose2d")
    return y + as_tensor(b).reshape(1, -1, 1, 1) if b is not None else y


# -- pooling -----------------------------------------------------------------

def pool_geometry(kernel: int) -> Tuple[int, int]:
    """(stride, padding) for a pooling stage: 1×1 is the identity, larger kernels halve."""
    if kernel == 1:
        return 1, 0
    return 2, kernel // 2


def pooled_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    return sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_pool(x: Tensor, kernel: int, stride: int, padding: int) -> Tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    ho = pooled_size(x.shape[2], kernel, stride, padding)
    wo = pooled_size(x.shape[3], kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool kernel {kernel} collapses spatial size {x.shape[2:]}")
    return ho, wo


def avg_pool2d(x, kernel: int, stride: Optional[int] = None, padding: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    default_stride, default_padding = pool_geometry(kernel)
    stride = default_stride if stride is None else stride
    padding = default_padding if padding is None else padding
    ho, wo = _check_pool(x, kernel, stride, padding)
    xp = _pad(x.data, padding)
    out = _windows(xp, kernel, stride)[:, :, :ho, :wo].mean(axis=(-2, -1))

    def vjp(g):
        gx = np.zeros_like(xp)
        share = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        return (gx[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]],)

    return make(out, (x,), vjp, "avg_pool2d")


def max_pool2d(x, kernel: int, stride: Optional[int] = None, padding: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    default_stride, default_padding = pool_geometry(kernel)
    stride = default_stride if stride is None else stride
    padding = default_padding if padding is None else padding
    ho, wo = _check_pool(x, kernel, stride, padding)
    xp = _pad(x.data, padding, value=-np.inf)
    flat = _windows(xp, kernel, stride)[:, :, :ho, :wo].reshape(x.shape[0], x.shape[1], ho, wo, -1)
    winner = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros(xp.shape)
        for i in range(kernel):
            for j in range(kernel):
                hit = winner == i * kernel + j
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * hit
        return (gx[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]],)

    return make(out, (x,), vjp, "max_pool2d")


def unpool_nearest(x, size: Tuple[int, int], factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by ``factor``, cropped to ``size``."""
    x = as_tensor(x)
    height, width = size
    if x.shape[2] * factor < height or x.shape[3] * factor < width:
        raise ShapeError(f"cannot unpool {x.shape[2:]} by {factor} to {size}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)[:, :, :height, :width]

    def vjp(g):
        full = np.zeros((g.shape[0], g.shape[1], x.shape[2] * factor, x.shape[3] * factor))
        full[:, :, :height, :width] = g
        full = full.reshape(g.shape[0], g.shape[1], x.shape[2], factor, x.shape[3], factor)
        return (full.sum(axis=(3, 5)),)

    return make(out, (x,), vjp, "unpool_nearest")


# -- normalisation -----------------------------------------------------------

@dataclass
class RunningStats:
    """Evaluation-time statistics of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def for_channels(cls, channels: int) -> "RunningStats":
        return cls(mean=np.zeros(channels), var=np.ones(channels))

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.mean = self.momentum * self.mean + (1.0 - self.momentum) * mean
        self.var = self.momentum * self.var + (1.0 - self.momentum) * var


def batch_norm(x, gamma, beta, running: Optional[RunningStats] = None, training: bool = True,
               eps: float = NORM_EPS) -> Tensor:
    x = as_tensor(x)
    gamma = as_tensor(gamma).reshape(1, -1, 1, 1)
    beta = as_tensor(beta).reshape(1, -1, 1, 1)
    if training or running is None:
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        if training and running is not None:
            running.update(mean.data.reshape(-1), var.data.reshape(-1))
        return centered / sqrt(var + eps) * gamma + beta
    mean = running.mean.reshape(1, -1, 1, 1)
    scale = 1.0 / np.sqrt(running.var.reshape(1, -1, 1, 1) + eps)
    return (x - mean) * scale * gamma + beta


def instance_norm(x, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    x = as_tensor(x)
    mean = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    return centered / sqrt(var + eps) * as_tensor(gamma).reshape(1, -1, 1, 1) \
        + as_tensor(beta).reshape(1, -1, 1, 1)


# -- activations -------------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    return make(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),), "relu")


def linear(x) -> Tensor:
    return as_tensor(x)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),), "softplus")


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    local = np.where(x.data > 0, 1.0, np.where(x.data < 0, slope, 0.0))
    return make(np.where(x.data > 0, x.data, slope * x.data), (x,), lambda g: (g * local,), "leaky_relu")


def relu6(x) -> Tensor:
    x = as_tensor(x)
    inside = (x.data > 0) & (x.data < 6)
    return make(np.clip(x.data, 0.0, 6.0), (x,), lambda g: (g * inside,), "relu6")


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    negative = alpha * np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, negative)
    local = np.where(x.data > 0, 1.0, negative + alpha)
    return make(out, (x,), lambda g: (g * local,), "elu")


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "linear": linear,
    "softplus": softplus,
    "leakyrelu": leaky_relu,
    "relu6": relu6,
    "elu": elu,
}


# -- probability -------------------------------------------------------------

def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = x - np.max(x.data, axis=axis, keepdims=True)
    return shift - log(reduce_sum(exp(shift), axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


# -- recurrent ---------------------------------------------------------------

def lstm_cell(x, h, c, w, b) -> Tuple[Tensor, Tensor]:
    """One LSTM step; ``w`` maps [x, h] to the four gates (i, f, g, o)."""
    gates = concat([as_tensor(x), as_tensor(h)], axis=-1) @ as_tensor(w) + b
    hidden = as_tensor(h).shape[-1]
    i = sigmoid(gates[..., 0:hidden])
    f = sigmoid(gates[..., hidden:2 * hidden])
    g = tanh(gates[..., 2 * hidden:3 * hidden])
    o = sigmoid(gates[..., 3 * hidden:4 * hidden])
    c_next = f * c + i * g
    return o * tanh(c_next), c_next
