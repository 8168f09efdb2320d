"""Differentiable operators on dense rank-4 arrays.

Every operator works on plain ``numpy.ndarray`` values laid out as
``(batch, channels, height, width)`` in C order, and comes with an explicit
backward function that returns the adjoint for each differentiable input.
There is no tape: callers (the layers) keep whatever the backward needs.

Forward convolution and involution accumulate their taps in a fixed loop
nesting (input channel, kernel row, kernel column) so that the result of a
call is bit-identical to a scalar nested-loop evaluation in the same order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when an operator receives arrays of incompatible shapes."""

    def __init__(self, op: str, dim: str, expected, got):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {dim} mismatch (expected {expected}, got {got})")


def check4(x: np.ndarray, op: str, name: str = "x") -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ShapeError(op, f"{name}.ndim", 4, x.ndim)
    if min(x.shape) < 1:
        raise ShapeError(op, f"{name}.shape", "all dims >= 1", x.shape)
    return x.shape


def _same_shape(a, b, op, name="grad_out"):
    if a.shape != b.shape:
        raise ShapeError(op, f"{name}.shape", a.shape, b.shape)


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0,
                     dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap(xp, u, v, dilation, stride, ho, wo):
    """Strided view of the padded input seen by kernel tap (u, v)."""
    r0, c0 = u * dilation, v * dilation
    return xp[..., r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> np.ndarray:
    """Dilated 2-D cross-correlation.

    ``weight`` is ``(out_channels, in_channels, kh, kw)``. Each output element
    is ``((0 + w*x) + w*x ...) + bias`` with taps visited channel-major, then
    row, then column.
    """
    n, c, h, w = check4(x, "conv2d")
    co, ci, kh, kw = check4(weight, "conv2d", "weight")
    if ci != c:
        raise ShapeError("conv2d", "in_channels", ci, c)
    if bias is not None and bias.shape != (co,):
        raise ShapeError("conv2d", "bias.shape", (co,), bias.shape)
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", "output size", ">= 1", (ho, wo))

    xp = _pad(x, padding)
    dtype = np.result_type(x, weight)
    out = np.zeros((n, co, ho, wo), dtype=dtype)
    tmp = np.empty_like(out)
    for k in range(c):
        for u in range(kh):
            for v in range(kw):
                patch = _tap(xp[:, k], u, v, dilation, stride, ho, wo)
                np.multiply(weight[:, k, u, v][None, :, None, None], patch[:, None], out=tmp)
                out += tmp
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_backward(x, weight, grad_out, stride=1, padding=0, dilation=1):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv2d`."""
    n, c, h, w = check4(x, "conv2d_backward")
    co, ci, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if grad_out.shape != (n, co, ho, wo):
        raise ShapeError("conv2d_backward", "grad_out.shape", (n, co, ho, wo), grad_out.shape)

    xp = _pad(x, padding)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = _tap(xp, u, v, dilation, stride, ho, wo)

    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 4, 5]))
    gcols = np.tensordot(weight, grad_out, axes=([0], [1]))  # (c, kh, kw, n, ho, wo)
    gxp = np.zeros_like(xp, dtype=gcols.dtype)
    for u in range(kh):
        for v in range(kw):
            _tap(gxp, u, v, dilation, stride, ho, wo)[...] += gcols[:, u, v].transpose(1, 0, 2, 3)
    grad_x = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# --------------------------------------------------------------------------
# involution
# --------------------------------------------------------------------------

def _involution_geometry(x, kernels, kernel_size, groups, stride, dilation, op):
    n, c, h, w = check4(x, op)
    if kernel_size % 2 != 1:
        raise ShapeError(op, "kernel_size parity", "odd", kernel_size)
    if c % groups:
        raise ShapeError(op, "channels % groups", 0, c % groups)
    pad = dilation * (kernel_size - 1) // 2
    ho = conv_output_size(h, kernel_size, stride, pad, dilation)
    wo = conv_output_size(w, kernel_size, stride, pad, dilation)
    expected = (n, groups * kernel_size * kernel_size, ho, wo)
    if kernels.shape != expected:
        raise ShapeError(op, "kernels.shape", expected, kernels.shape)
    return n, c, h, w, pad, ho, wo


def involution2d(x: np.ndarray, kernels: np.ndarray, kernel_size: int, groups: int = 1,
                 stride: int = 1, dilation: int = 1) -> np.ndarray:
    """Apply a per-pixel kernel field to ``x``.

    ``kernels[b, g*K*K + u*K + v, i, j]`` weights the neighbour at offset
    ``dilation * (u - K//2, v - K//2)`` of output pixel ``(i, j)`` for every
    channel in group ``g``. Out-of-bounds neighbours read as zero.
    """
    n, c, h, w, pad, ho, wo = _involution_geometry(
        x, kernels, kernel_size, groups, stride, dilation, "involution2d")
    K = kernel_size
    xp = _pad(x, pad).reshape(n, groups, c // groups, h + 2 * pad, w + 2 * pad)
    kern = kernels.reshape(n, groups, K * K, ho, wo)
    out = np.zeros((n, groups, c // groups, ho, wo), dtype=np.result_type(x, kernels))
    tmp = np.empty_like(out)
    for u in range(K):
        for v in range(K):
            patch = _tap(xp, u, v, dilation, stride, ho, wo)
            np.multiply(kern[:, :, None, u * K + v], patch, out=tmp)
            out += tmp
    return out.reshape(n, c, ho, wo)


def involution2d_backward(x, kernels, kernel_size, groups, stride, dilation, grad_out):
    """Return ``(grad_x, grad_kernels)`` for :func:`involution2d`."""
    n, c, h, w, pad, ho, wo = _involution_geometry(
        x, kernels, kernel_size, groups, stride, dilation, "involution2d_backward")
    if grad_out.shape != (n, c, ho, wo):
        raise ShapeError("involution2d_backward", "grad_out.shape", (n, c, ho, wo), grad_out.shape)
    K = kernel_size
    cg = c // groups
    xp = _pad(x, pad).reshape(n, groups, cg, h + 2 * pad, w + 2 * pad)
    kern = kernels.reshape(n, groups, K * K, ho, wo)
    g = grad_out.reshape(n, groups, cg, ho, wo)
    gxp = np.zeros(xp.shape, dtype=np.result_type(x, grad_out))
    gk = np.empty((n, groups, K * K, ho, wo), dtype=np.result_type(x, grad_out))
    for u in range(K):
        for v in range(K):
            patch = _tap(xp, u, v, dilation, stride, ho, wo)
            gk[:, :, u * K + v] = np.einsum("ngchw,ngchw->nghw", g, patch)
            _tap(gxp, u, v, dilation, stride, ho, wo)[...] += kern[:, :, None, u * K + v] * g
    gxp = gxp.reshape(n, c, h + 2 * pad, w + 2 * pad)
    grad_x = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
    return np.ascontiguousarray(grad_x), gk.reshape(kernels.shape)


# --------------------------------------------------------------------------
# pooling / resampling
# --------------------------------------------------------------------------

def _windows(x, k, stride, op):
    n, c, h, w = check4(x, op)
    if h < k or w < k:
        raise ShapeError(op, "spatial size", f">= {k}", (h, w))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.reshape(*win.shape[:4], k * k)


def maxpool2d(x: np.ndarray, k: int = 2, stride: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Window maxima plus the flat in-window argmax (first occurrence wins)."""
    win = _windows(x, k, stride, "maxpool2d")
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2d_backward(x_shape, argmax, grad_out, k=2, stride=2):
    _same_shape(argmax, grad_out, "maxpool2d_backward")
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    ho, wo = grad_out.shape[2:]
    for pos in range(k * k):
        u, v = divmod(pos, k)
        _tap(grad_x, u, v, 1, stride, ho, wo)[...] += np.where(argmax == pos, grad_out, 0)
    return grad_x


def avgpool2d(x: np.ndarray, k: int, stride: int | None = None) -> np.ndarray:
    stride = k if stride is None else stride
    return _windows(x, k, stride, "avgpool2d").mean(axis=-1)


def avgpool2d_backward(x_shape, grad_out, k, stride=None):
    stride = k if stride is None else stride
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    ho, wo = grad_out.shape[2:]
    share = grad_out / (k * k)
    for u in range(k):
        for v in range(k):
            _tap(grad_x, u, v, 1, stride, ho, wo)[...] += share
    return grad_x


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling."""
    check4(x, "upsample2x")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = check4(grad_out, "upsample2x_backward")
    if h % 2 or w % 2:
        raise ShapeError("upsample2x_backward", "spatial parity", "even", (h, w))
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(xs, axis=1)


def concat_channels_backward(grad_out, sizes):
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, bounds, axis=1)]


# --------------------------------------------------------------------------
# batch normalisation
# --------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    invstd: np.ndarray
    gamma: np.ndarray
    training: bool


def batchnorm2d(x, gamma, beta, running_mean, running_var, training: bool,
                eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, as is
    conventional). Returns ``(out, cache)``.
    """
    n, c, h, w = check4(x, "batchnorm2d")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d", "channels", c, (gamma.shape, beta.shape))
    if training:
        count = n * h * w
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, BatchNormCache(xhat, invstd, gamma, training)


def batchnorm2d_backward(cache: BatchNormCache, grad_out):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    _same_shape(cache.xhat, grad_out, "batchnorm2d_backward")
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * cache.xhat).sum(axis=(0, 2, 3))
    scale = (cache.gamma * cache.invstd)[None, :, None, None]
    if not cache.training:
        return grad_out * scale, grad_gamma, grad_beta
    n, _, h, w = grad_out.shape
    count = n * h * w
    mean_g = (grad_beta / count)[None, :, None, None]
    mean_gx = (grad_gamma / count)[None, :, None, None]
    grad_x = scale * (grad_out - mean_g - cache.xhat * mean_gx)
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# pointwise
# --------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    _same_shape(x, grad_out, "relu_backward")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(x):
    """Logistic function, kept strictly inside (0, 1) even where it saturates."""
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    lo = np.finfo(y.dtype).tiny
    return np.clip(y, lo, np.nextafter(y.dtype.type(1), y.dtype.type(0)))


def sigmoid_backward(y, grad_out):
    """Adjoint of sigmoid given its output ``y``."""
    _same_shape(y, grad_out, "sigmoid_backward")
    return grad_out * y * (1 - y)


def add(a, b):
    _same_shape(a, b, "add", "b")
    return a + b


def add_backward(grad_out):
    return grad_out, grad_out


def mul(a, b):
    _same_shape(a, b, "mul", "b")
    return a * b


def mul_backward(a, b, grad_out):
    _same_shape(a, grad_out, "mul_backward")
    return grad_out * b, grad_out * a


def eltwise(kind: str, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if b is None:
        raise ShapeError(kind, "second operand", "array", None)
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown eltwise kind {kind!r}")
