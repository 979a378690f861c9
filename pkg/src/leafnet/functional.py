"""Fused layer kernels with explicit backward rules.

Convolution is cross-correlation computed through an im2col window view and a
single matrix product; pooling and batch normalisation operate on NCHW arrays.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, make_result, matmul, reduce, relu, transpose

__all__ = [
    "conv_output_size",
    "conv2d",
    "max_pool2d",
    "adaptive_avg_pool2d",
    "batch_norm2d",
    "linear",
    "relu",
    "softmax",
    "log_softmax",
    "cross_entropy",
]


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def _pad(x: np.ndarray, padding: tuple, value: float = 0.0) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _windows(xp: np.ndarray, kernel: tuple, stride: tuple, out_hw: tuple) -> np.ndarray:
    """Strided view of shape (N, C, OH, OW, kH, kW)."""
    win = sliding_window_view(xp, kernel, axis=(2, 3))
    sh, sw = stride
    oh, ow = out_hw
    return win[:, :, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]


def _scatter_windows(dwin: np.ndarray, padded_shape: tuple, stride: tuple) -> np.ndarray:
    """Adjoint of ``_windows``: add (N, C, OH, OW, kH, kW) values back into the padded input."""
    n, c, oh, ow, kh, kw = dwin.shape
    sh, sw = stride
    out = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw] += dwin[
                :, :, :, :, i, j
            ]
    return out


def _check_nchw(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an [N, C, H, W] input, got shape {x.shape}")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
) -> Tensor:
    x = as_tensor(x)
    _check_nchw(x, "conv2d")
    out_ch, in_ch, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != in_ch:
        raise ShapeError(f"conv2d expects {in_ch} input channels, got {c}")
    stride, padding = _pair(stride), _pair(padding)
    oh = conv_output_size(h, kh, stride[0], padding[0])
    ow = conv_output_size(w, kw, stride[1], padding[1])
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be {oh}x{ow} for input {h}x{w} and kernel {kh}x{kw}")

    xp = _pad(x.data, padding)
    win = _windows(xp, (kh, kw), stride, (oh, ow))
    # rows: one per output pixel; columns: (C, kH, kW) patch
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(out_ch, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, out_ch).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = _scatter_windows(dcols, xp.shape, stride)
            ph, pw = padding
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, inputs, lambda g: backward(g)[: len(inputs)])


def max_pool2d(x: Tensor, kernel_size, stride=None, padding=0) -> Tensor:
    """Max pooling; padded cells never win. Gradient goes to the first maximal cell."""
    _check_nchw(x, "max_pool2d")
    kernel = _pair(kernel_size)
    stride = _pair(stride if stride is not None else kernel_size)
    padding = _pair(padding)
    n, c, h, w = x.shape
    oh = conv_output_size(h, kernel[0], stride[0], padding[0])
    ow = conv_output_size(w, kernel[1], stride[1], padding[1])
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2d output would be {oh}x{ow} for input {h}x{w}")

    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, stride, (oh, ow)).reshape(n, c, oh, ow, -1)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        kh, kw = kernel
        onehot = (arg[..., None] == np.arange(kh * kw)).astype(g.dtype)
        dwin = (onehot * g[..., None]).reshape(n, c, oh, ow, kh, kw)
        gxp = _scatter_windows(dwin, xp.shape, stride)
        ph, pw = padding
        return (gxp[:, :, ph : ph + h, pw : pw + w],)

    return make_result("max_pool2d", np.ascontiguousarray(out), (x,), backward)


def adaptive_avg_pool2d(x: Tensor) -> Tensor:
    """Average each feature map down to 1x1."""
    _check_nchw(x, "adaptive_avg_pool2d")
    return reduce("mean", x, axis=(2, 3), keepdims=True)


def batch_norm2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are blended in place: ``new = (1 - momentum) * old +
    momentum * batch`` with the unbiased batch variance. Eval mode reads the
    running statistics and leaves them alone.
    """
    _check_nchw(x, "batch_norm2d")
    n, c, h, w = x.shape
    if c != weight.shape[0]:
        raise ShapeError(f"batch_norm2d expects {weight.shape[0]} channels, got {c}")
    if n == 0:
        raise ContractError("batch_norm2d received an empty batch")
    xd = x.data
    gamma = weight.data.reshape(1, c, 1, 1)
    beta = bias.data.reshape(1, c, 1, 1)

    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        centred = xd - mu
        var = (centred * centred).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centred * inv_std
        out = xhat * gamma + beta
        unbiased = var.reshape(c) * (m / (m - 1)) if m > 1 else var.reshape(c)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            gg = g.sum(axis=(0, 2, 3))
            gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (
                    gamma
                    * inv_std
                    / m
                    * (m * g - gg.reshape(1, c, 1, 1) - xhat * gxhat_sum.reshape(1, c, 1, 1))
                )
            return gx, gxhat_sum, gg

    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        inv_std = (1.0 / np.sqrt(running_var.astype(xd.dtype) + eps)).reshape(1, c, 1, 1)
        xhat = (xd - mu) * inv_std
        out = xhat * gamma + beta

        def backward(g):
            gx = g * gamma * inv_std if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result("batch_norm2d", out.astype(xd.dtype, copy=False), (x, weight, bias), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.ndim != 2:
        raise ShapeError(f"linear expects [N, features], got shape {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} input features, got {x.shape[1]}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = out + bias
    return out


def _log_softmax_array(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> Tensor:
    """Row-wise softmax computed with max subtraction."""
    logits = as_tensor(logits)
    if logits.ndim == 0 or logits.shape[axis] < 1:
        raise ShapeError(f"softmax needs at least one class along axis {axis}")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", p, (logits,), backward)


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    out = _log_softmax_array(logits.data, axis)
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (logits,), backward)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, C] logits, got shape {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits")
    if n == 0:
        raise ContractError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c})")
    logp = _log_softmax_array(logits.data, axis=1)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return make_result("cross_entropy", loss, (logits,), backward)
