"""Differentiable network primitives on (batch, channel, height, width) tensors.

Convolution is cross-correlation (no kernel flip). Convolution kernels are
laid out (out_channels, in_channels, kh, kw); transposed-convolution kernels
are laid out (in_channels, out_channels, kh, kw) so that the same array
serves both directions of an adjoint pair.
"""

from __future__ import annotations

from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, NumericError
from .tensor import Tensor, add, matmul, reshape

Padding = int | tuple[int, int] | tuple[int, int, int, int]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# When a list, piecewise ops append their discrete branch choice (sign masks,
# pool argmax maps) so a gradient checker can spot perturbations that cross a
# kink. Only the checker sets this.
_branch_log: list[np.ndarray] | None = None


def _log_branch(pattern: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(pattern.copy())


def normalize_padding(pad: Padding) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right)."""
    if isinstance(pad, (int, np.integer)):
        p = int(pad)
        return (p, p, p, p)
    pad = tuple(int(p) for p in pad)
    if len(pad) == 2:
        return (pad[0], pad[0], pad[1], pad[1])
    if len(pad) == 4:
        return pad  # type: ignore[return-value]
    raise ConfigError(f"padding must have 1, 2 or 4 entries, got {pad}")


def conv_output_size(size: int, kernel: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    return (size + pad_lo + pad_hi - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    return (size - 1) * stride - pad_lo - pad_hi + kernel


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a channel-last (N, H, W, C) array as an (N*ho*wo, kh*kw*C) matrix."""
    n, c = xp.shape[0], xp.shape[3]
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, :hs:stride, :ws:stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int,
            stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add adjoint of :func:`_im2col` into an (N, H, W, C) array of ``shape``."""
    n, c = shape[0], shape[3]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + hs:stride, j:j + ws:stride] += cols[:, :, :, i, j]
    return out


def _pad_nhwc(x: np.ndarray, p: tuple[int, int, int, int]) -> np.ndarray:
    """Zero-pad the spatial axes of an NCHW array and return it channel-last."""
    n, c, h, w = x.shape
    out = np.zeros((n, h + p[0] + p[1], w + p[2] + p[3], c), dtype=x.dtype)
    out[:, p[0]:p[0] + h, p[2]:p[2] + w] = x.transpose(0, 2, 3, 1)
    return out


def _crop(x: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    """Crop the spatial axes of an NHWC array."""
    t, b, l, r = pad
    h, w = x.shape[1:3]
    return x[:, t:h - b, l:w - r]


def _to_nchw(a: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def _check4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ConfigError(f"{what} expects a 4-axis tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: Padding = 0) -> Tensor:
    _check4(x, "conv2d")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ConfigError(f"conv2d channel mismatch: input has {c}, kernels expect {ci}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    p = normalize_padding(pad)
    ho = conv_output_size(h, kh, stride, p[0], p[1])
    wo = conv_output_size(w, kw, stride, p[2], p[3])
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"conv2d output would be {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}")

    xp = _pad_nhwc(x.data, p)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    # kernel rows ordered (kh, kw, c) to match the patch layout
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = _to_nchw(out, n, ho, wo)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if weight.requires_grad:
            dw = (cols.T @ gm).T
            weight._accumulate(dw.reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=0))
        if x.requires_grad:
            dxp = _col2im(gm @ wmat, xp.shape, kh, kw, stride, ho, wo)
            x._accumulate(_crop(dxp, p).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     pad: Padding = 0) -> Tensor:
    """Transposed convolution; the adjoint of :func:`conv2d` with the same kernel array."""
    _check4(x, "conv_transpose2d")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if c != ci:
        raise ConfigError(f"conv_transpose2d channel mismatch: input has {c}, kernels expect {ci}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    p = normalize_padding(pad)
    ho = conv_transpose_output_size(h, kh, stride, p[0], p[1])
    wo = conv_transpose_output_size(w, kw, stride, p[2], p[3])
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"conv_transpose2d output would be {ho}x{wo}")

    full_shape = (n, (h - 1) * stride + kh, (w - 1) * stride + kw, o)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(ci, -1)
    xm = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    full = _col2im(xm @ wmat, full_shape, kh, kw, stride, h, w)
    out = _crop(full, p)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if not (x.requires_grad or weight.requires_grad):
            return
        gcols = _im2col(_pad_nhwc(g, p), kh, kw, stride, h, w)
        if weight.requires_grad:
            dw = (gcols.T @ xm).T
            weight._accumulate(dw.reshape(ci, kh, kw, o).transpose(0, 3, 1, 2))
        if x.requires_grad:
            x._accumulate(_to_nchw(gcols @ wmat.T, n, h, w))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def maxpool(x: Tensor, window: int, stride: int, pad: int = 0) -> tuple[Tensor, np.ndarray]:
    """Max-pool with ``-inf`` padding.

    Returns the pooled tensor and the argmax index map: for every output cell,
    the flat ``row * W + col`` position of the winning input element within
    its (batch, channel) plane. Ties go to the first element in row-major
    window order. Overlapping pooling results when ``stride < window``.
    """
    _check4(x, "maxpool")
    if window < 1 or stride < 1:
        raise ConfigError("pool window and stride must be >= 1")
    if pad < 0 or pad >= window:
        raise ConfigError(f"pool padding {pad} must be in [0, window)")
    n, c, h, w = x.shape
    if window > h + 2 * pad or window > w + 2 * pad:
        raise ConfigError(f"pool window {window} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = (h + 2 * pad - window) // stride + 1
    wo = (w + 2 * pad - window) // stride + 1

    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    views = [xp[:, :, i:i + hs:stride, j:j + ws:stride] for i in range(window) for j in range(window)]
    out = views[0].copy()
    k = np.zeros(out.shape, dtype=np.uint16)
    better = np.empty(out.shape, dtype=bool)
    for pos, view in enumerate(views[1:], start=1):
        # strict comparison, so ties keep the earliest window position
        np.greater(view, out, out=better)
        np.maximum(out, view, out=out)
        k *= ~better
        k += better * np.uint16(pos)
    if np.isneginf(out).any():
        raise ConfigError("a pooling window covers only padding")

    k = k.astype(np.intp)
    rows = np.arange(ho).reshape(ho, 1) * stride + k // window - pad
    cols = np.arange(wo).reshape(1, wo) * stride + k % window - pad
    index = rows * w + cols
    _log_branch(index)

    def backward(g):
        plane = (np.arange(n * c).reshape(n, c, 1, 1) * (h * w) + index).ravel()
        dx = np.bincount(plane, weights=g.ravel(), minlength=n * c * h * w)
        x._accumulate(dx.reshape(x.shape))

    return Tensor._make(out, (x,), backward), index


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
              eps: float = BN_EPS) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel batch normalization over (batch, height, width).

    Returns ``(output, new_running_mean, new_running_var)``; the running
    statistics passed in are never modified. In training mode the new
    statistics are ``momentum * old + (1 - momentum) * batch`` (the batch
    variance is the unbiased estimate); in eval mode they are returned
    unchanged.
    """
    _check4(x, "batchnorm")
    n, c, h, w = x.shape
    if np.any(running_var <= 0):
        raise ConfigError("batchnorm running variance must be strictly positive")
    shape = (1, c, 1, 1)
    if training:
        if n < 2:
            raise ConfigError("batchnorm in training mode needs a batch of at least 2")
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        new_mean = momentum * running_mean + (1 - momentum) * mu
        new_var = momentum * running_var + (1 - momentum) * var * (m / (m - 1))
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data.reshape(shape)
        if training:
            m = n * h * w
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            x._accumulate(inv_std.reshape(shape) / m * (m * dxhat - s1 - xhat * s2))
        else:
            x._accumulate(dxhat * inv_std.reshape(shape))

    return Tensor._make(out, (x, gamma, beta), backward), new_mean, new_var


Activation = Literal["relu", "leaky_relu", "tanh", "sigmoid"]


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._make(x.data * mask, (x,), backward)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0 < alpha < 1:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    positive = x.data > 0
    _log_branch(positive)
    slope = np.where(positive, 1.0, alpha).astype(x.dtype)

    def backward(g):
        x._accumulate(g * slope)

    return Tensor._make(x.data * slope, (x,), backward)


def _open_unit(dtype) -> float:
    return float(np.nextafter(dtype.type(1), dtype.type(0)))


def tanh(x: Tensor) -> Tensor:
    # saturated floats are pulled back inside the open interval (-1, 1)
    top = _open_unit(x.dtype)
    y = np.clip(np.tanh(x.data), -top, top)

    def backward(g):
        x._accumulate(g * (1 - y * y))

    return Tensor._make(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    y = np.clip(y, np.finfo(x.dtype).tiny, _open_unit(x.dtype))

    def backward(g):
        x._accumulate(g * y * (1 - y))

    return Tensor._make(y, (x,), backward)


def activate(x: Tensor, kind: Activation, alpha: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of a (batch, features) matrix; ``weight`` is (out, features)."""
    wt = reshape(weight, (weight.shape[0], -1))
    out = matmul(x, _transpose(wt))
    if bias is not None:
        out = add(out, bias)
    return out


def _transpose(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g.T)

    return Tensor._make(x.data.T, (x,), backward)


def check_finite(x: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite values in {where}")
    return x
