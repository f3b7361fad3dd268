"""
Differentiable primitives on ``Tensor``.

Binary elementwise ops accept identical shapes or a trailing channel vector
only. Contractions go through ``contract``: float64 graphs use einsum's
fixed-order loops so results do not depend on BLAS threading, float32 graphs
use the optimized BLAS-backed paths.
"""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, DomainError
from .tensor import Function, Tensor

logger = logging.getLogger(__name__)


def contract(subscripts: str, *operands: np.ndarray) -> np.ndarray:
    if operands[0].dtype == np.float64:
        return np.einsum(subscripts, *operands, optimize=False)
    return np.einsum(subscripts, *operands, optimize=True)


def moments(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over every axis but the last."""
    flat = x.reshape(-1, x.shape[-1])
    return flat.mean(axis=0), flat.var(axis=0)


def _check_broadcast(name: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> None:
    if a == b or (len(b) == 1 and len(a) >= 1 and b[0] == a[-1]):
        return
    raise DimensionError(f"{name}: operands must match or broadcast a channel vector", a, b)


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[0]).sum(axis=0)


def _out_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (B, Ho, Wo, C, k, k) view over a padded NHWC array
    return sliding_window_view(xp, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)), constant_values=value)


def _check_nhwc(name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name}: expected a (batch, height, width, channel) tensor", x.shape)


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(self.name, a.shape, b.shape)
        self.b_shape = b.shape
        return a + b

    def apply(self, grad_output):
        return grad_output, _reduce_to(grad_output, self.b_shape)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(self.name, a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def apply(self, grad_output):
        return grad_output * self.b, _reduce_to(grad_output * self.a, self.b.shape)


class Scale(Function):
    name = "scale"

    def __init__(self, factor: float):
        self.factor = factor

    def forward(self, a):
        return a * self.factor

    def apply(self, grad_output):
        return (grad_output * self.factor,)


class ReLU(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def apply(self, grad_output):
        return (np.where(self.mask, grad_output, 0.0),)


class Reshape(Function):
    name = "reshape"

    def __init__(self, shape: Sequence[int]):
        self.shape = tuple(shape)

    def forward(self, a):
        self.in_shape = a.shape
        try:
            return a.reshape(self.shape)
        except ValueError:
            raise DimensionError("reshape: element counts differ", a.shape, self.shape)

    def apply(self, grad_output):
        return (grad_output.reshape(self.in_shape),)


class Transpose(Function):
    name = "transpose"

    def __init__(self, axes: Sequence[int]):
        self.axes = tuple(axes)

    def forward(self, a):
        return np.ascontiguousarray(a.transpose(self.axes))

    def apply(self, grad_output):
        return (np.ascontiguousarray(grad_output.transpose(np.argsort(self.axes))),)


class Subsample(Function):
    """Keep every ``stride``-th position along one axis, starting at 0."""
    name = "subsample"

    def __init__(self, axis: int, stride: int):
        self.axis = axis
        self.stride = stride

    def _slicer(self, ndim: int):
        index = [slice(None)] * ndim
        index[self.axis] = slice(None, None, self.stride)
        return tuple(index)

    def forward(self, a):
        self.in_shape = a.shape
        return np.ascontiguousarray(a[self._slicer(a.ndim)])

    def apply(self, grad_output):
        g = np.zeros(self.in_shape, dtype=grad_output.dtype)
        g[self._slicer(g.ndim)] = grad_output
        return (g,)


class Concat(Function):
    name = "concat"

    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=self.axis)
        except ValueError:
            raise DimensionError("concat: non-concatenated extents differ", *(a.shape for a in arrays))

    def apply(self, grad_output):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(grad_output, cuts, axis=self.axis))


class Sum(Function):
    name = "sum"

    def __init__(self, axis=None):
        self.axis = axis

    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.sum(axis=self.axis))

    def apply(self, grad_output):
        if self.axis is not None:
            grad_output = np.expand_dims(grad_output, self.axis)
        return (np.broadcast_to(grad_output, self.in_shape).copy(),)


class Mean(Function):
    name = "mean"

    def __init__(self, axis=None):
        self.axis = axis

    def forward(self, a):
        self.in_shape = a.shape
        self.count = a.size if self.axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(self.axis)]))
        if self.count == 0:
            raise DomainError(f"mean over an empty extent of {a.shape}")
        return np.asarray(a.mean(axis=self.axis))

    def apply(self, grad_output):
        if self.axis is not None:
            grad_output = np.expand_dims(grad_output, self.axis)
        return (np.broadcast_to(grad_output / self.count, self.in_shape).copy(),)


class MatMul(Function):
    """(..., K) x (K, N): leading axes of ``a`` are flattened into rows."""
    name = "matmul"

    def forward(self, a, b):
        if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
            raise DimensionError("matmul: inner extents differ", a.shape, b.shape)
        self.a_shape = a.shape
        self.a2, self.b = a.reshape(-1, a.shape[-1]), b
        return contract("ik,kj->ij", self.a2, b).reshape(a.shape[:-1] + (b.shape[1],))

    def apply(self, grad_output):
        g2 = grad_output.reshape(-1, self.b.shape[1])
        ga = contract("ij,kj->ik", g2, self.b).reshape(self.a_shape)
        gb = contract("ik,ij->kj", self.a2, g2)
        return ga, gb


class Linear(Function):
    """Per-position map x @ w.T with w stored as (out, in)."""
    name = "linear"

    def forward(self, x, w):
        if w.ndim != 2 or x.shape[-1] != w.shape[1]:
            raise DimensionError("linear: input channels differ from weight fan-in", x.shape, w.shape)
        self.x_shape = x.shape
        self.x2, self.w = x.reshape(-1, x.shape[-1]), w
        return contract("ik,jk->ij", self.x2, w).reshape(x.shape[:-1] + (w.shape[0],))

    def apply(self, grad_output):
        g2 = grad_output.reshape(-1, self.w.shape[0])
        gx = contract("ij,jk->ik", g2, self.w).reshape(self.x_shape)
        gw = contract("ij,ik->jk", g2, self.x2)
        return gx, gw


class Softmax(Function):
    name = "softmax"

    def forward(self, a):
        if a.ndim == 0 or a.shape[-1] == 0:
            raise DomainError(f"softmax over an empty axis, shape {a.shape}")
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def apply(self, grad_output):
        s = self.out
        return (s * (grad_output - (grad_output * s).sum(axis=-1, keepdims=True)),)


class Conv2d(Function):
    """NHWC convolution with an HWIO kernel of shape (k, k, c_in, c_out)."""
    name = "conv2d"

    def __init__(self, stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding

    def forward(self, x, w):
        _check_nhwc(self.name, x)
        if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[2] != x.shape[3]:
            raise DimensionError("conv2d: kernel does not fit input channels", x.shape, w.shape)
        k, s, p = w.shape[0], self.stride, self.padding
        b, h, wd, c = x.shape
        ho, wo = _out_size(h, k, s, p), _out_size(wd, k, s, p)
        if ho < 1 or wo < 1:
            raise DimensionError("conv2d: kernel larger than padded input", x.shape, w.shape)
        windows = _windows(_pad(x, p), k, s)[:, :ho, :wo]
        self.cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, k * k * c)
        self.w2 = w.reshape(k * k * c, w.shape[3])
        self.x_shape, self.w_shape, self.out_hw = x.shape, w.shape, (ho, wo)
        return contract("ik,kj->ij", self.cols, self.w2).reshape(b, ho, wo, w.shape[3])

    def apply(self, grad_output):
        b, h, wd, c = self.x_shape
        k, s, p = self.w_shape[0], self.stride, self.padding
        ho, wo = self.out_hw
        g2 = grad_output.reshape(-1, self.w_shape[3])
        gw = contract("ik,ij->kj", self.cols, g2).reshape(self.w_shape)
        gcols = contract("ij,kj->ik", g2, self.w2).reshape(b, ho, wo, k, k, c)
        gxp = np.zeros((b, h + 2 * p, wd + 2 * p, c), dtype=grad_output.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += gcols[:, :, :, i, j, :]
        return gxp[:, p:p + h, p:p + wd, :], gw


class MaxPool2d(Function):
    name = "max_pool2d"

    def __init__(self, kernel: int, stride: int, padding: int = 0):
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        _check_nhwc(self.name, x)
        k, s, p = self.kernel, self.stride, self.padding
        b, h, w, c = x.shape
        ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
        windows = _windows(_pad(x, p, -np.inf), k, s)[:, :ho, :wo].reshape(b, ho, wo, c, k * k)
        self.argmax = windows.argmax(axis=-1)
        self.x_shape = x.shape
        return np.take_along_axis(windows, self.argmax[..., None], axis=-1)[..., 0]

    def apply(self, grad_output):
        b, h, w, c = self.x_shape
        k, s, p = self.kernel, self.stride, self.padding
        bi, hi, wi, ci = np.indices(self.argmax.shape)
        rows = hi * s + self.argmax // k
        cols = wi * s + self.argmax % k
        gxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=grad_output.dtype)
        np.add.at(gxp, (bi, rows, cols, ci), grad_output)
        return (gxp[:, p:p + h, p:p + w, :],)


class AvgPool2d(Function):
    """Average pooling; zero padding is excluded from each window's mean."""
    name = "avg_pool2d"

    def __init__(self, kernel: int, stride: int, padding: int = 0):
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        _check_nhwc(self.name, x)
        k, s, p = self.kernel, self.stride, self.padding
        b, h, w, c = x.shape
        ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
        sums = _windows(_pad(x, p), k, s)[:, :ho, :wo].sum(axis=(-2, -1))
        ones = _pad(np.ones((1, h, w, 1), dtype=x.dtype), p)
        self.counts = _windows(ones, k, s)[:, :ho, :wo].sum(axis=(-2, -1))
        self.x_shape = x.shape
        return sums / self.counts

    def apply(self, grad_output):
        b, h, w, c = self.x_shape
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = grad_output.shape[1:3]
        share = grad_output / self.counts
        gxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=grad_output.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += share
        return (gxp[:, p:p + h, p:p + w, :],)


class SoftmaxCrossEntropy(Function):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    name = "softmax_cross_entropy"

    def __init__(self, labels: np.ndarray):
        self.labels = np.asarray(labels)

    def forward(self, logits):
        if logits.ndim != 2 or self.labels.shape != (logits.shape[0],):
            raise DimensionError("softmax_cross_entropy: labels must be one per logit row", logits.shape, self.labels.shape)
        if logits.shape[0] == 0 or logits.shape[1] == 0:
            raise DomainError(f"cross-entropy over an empty batch or class axis, shape {logits.shape}")
        if self.labels.min() < 0 or self.labels.max() >= logits.shape[1]:
            raise ConfigError(f"labels outside [0, {logits.shape[1]})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        self.probs = np.exp(log_p)
        rows = np.arange(logits.shape[0])
        return np.asarray(-log_p[rows, self.labels].mean())

    def apply(self, grad_output):
        n = self.probs.shape[0]
        g = self.probs.copy()
        g[np.arange(n), self.labels] -= 1.0
        return (g * (grad_output / n),)


class BatchNorm(Function):
    """
    Per-channel affine normalization over every axis but the last.

    With ``batch_statistics`` the supplied mean/var are the batch moments
    and the backward pass differentiates through them.
    """
    name = "batch_norm"

    def __init__(self, mean: np.ndarray, var: np.ndarray, eps: float, batch_statistics: bool):
        self.mean, self.var, self.eps = mean, var, eps
        self.batch_statistics = batch_statistics

    def forward(self, x, gamma, beta):
        c = x.shape[-1]
        if gamma.shape != (c,) or beta.shape != (c,) or self.mean.shape != (c,):
            raise DimensionError("batch_norm: state does not match input channels", x.shape, gamma.shape)
        self.inv_std = 1.0 / np.sqrt(self.var + self.eps)
        self.xhat = (x - self.mean) * self.inv_std
        self.gamma = gamma
        return gamma * self.xhat + beta

    def apply(self, grad_output):
        c = grad_output.shape[-1]
        g2 = grad_output.reshape(-1, c)
        xh2 = self.xhat.reshape(-1, c)
        g_beta = g2.sum(axis=0)
        g_gamma = (g2 * xh2).sum(axis=0)
        if self.batch_statistics:
            n = g2.shape[0]
            gx = (self.gamma * self.inv_std / n) * (n * g2 - g_beta - xh2 * g_gamma)
        else:
            gx = g2 * (self.gamma * self.inv_std)
        return gx.reshape(grad_output.shape), g_gamma, g_beta


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add()(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul()(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale(factor)(a)


def relu(a: Tensor) -> Tensor:
    return ReLU()(a)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape(shape)(a)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose(axes)(a)


def subsample(a: Tensor, axis: int, stride: int) -> Tensor:
    if stride == 1:
        return a
    return Subsample(axis, stride)(a)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat(axis)(*tensors)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    return Sum(axis)(a)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    return Mean(axis)(a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul()(a, b)


def linear(x: Tensor, w: Tensor) -> Tensor:
    return Linear()(x, w)


def softmax_lastaxis(logits: Tensor) -> Tensor:
    return Softmax()(logits)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d(stride, padding)(x, w)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    return MaxPool2d(kernel, stride, padding)(x)


def avg_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    return AvgPool2d(kernel, stride, padding)(x)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_nhwc("global_avg_pool", x.data)
    return Mean((1, 2))(x)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return SoftmaxCrossEntropy(labels)(logits)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: Optional[np.ndarray] = None,
               var: Optional[np.ndarray] = None, eps: float = 1e-5) -> Tensor:
    """Normalize with the given statistics, or with the batch moments when none are given."""
    batch_statistics = mean is None
    if batch_statistics:
        mean, var = moments(x.data)
    if var is None:
        raise ConfigError("batch_norm needs both mean and var, or neither")
    return BatchNorm(mean.astype(x.dtype), var.astype(x.dtype), eps, batch_statistics)(x, gamma, beta)
