"""Differentiable operators over NCHW tensors.

Convolutions use im2col + a single matmul; "same" padding follows the
TensorFlow convention (output ceil(H / stride), extra padding at the bottom
and right when the total is odd).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from . import _kernels
from .tensor import Tensor, result


def _pad_amounts(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (pad_before, pad_after, out_size)."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    if padding == "valid":
        if size < k:
            raise ShapeError(f"input size {size} smaller than kernel {k}")
        return 0, 0, (size - k) // stride + 1
    raise ConfigError(f"unknown padding {padding!r}")


def _pad(x: np.ndarray, ph: tuple[int, int], pw: tuple[int, int], value=0.0) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), ph, pw), constant_values=value)


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, k, k)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


# --------------------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return result(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return result(out, (a, b), backward, "mul")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def sum_squares(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * g * x.data,)

    return result(np.asarray(np.sum(x.data * x.data), dtype=x.dtype), (x,), backward, "sum_squares")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return result(out, (x,), backward, "relu")


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a learned scalar."""
    out = x.data * s.data

    def backward(g):
        return g * s.data, np.asarray(np.sum(g * x.data), dtype=s.dtype).reshape(s.shape)

    return result(out, (x, s), backward, "scale")


def concat(xs: list[Tensor], axis: int = 1) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return grads

    return result(out, tuple(xs), backward, "concat")


# --------------------------------------------------------------------------- convolution


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Channel-major patches: (C * k * k, N * Ho * Wo)."""
    n, c = xp.shape[:2]
    return _windows(xp, k, stride, ho, wo).transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    """Gradient w.r.t. the padded input, as a full correlation of the (dilated) output
    gradient with the flipped kernel."""
    n, o, ho, wo = g.shape
    _, c, k, _ = w.shape
    if stride > 1:
        up = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
        up[:, :, ::stride, ::stride] = g
        g = up
    hs, ws = g.shape[2] + k - 1, g.shape[3] + k - 1
    gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    cols = _im2col(gp, k, 1, hs, ws)
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
    full = (wf @ cols).reshape(c, n, hs, ws).transpose(1, 0, 2, 3)
    if (hs, ws) == (hp, wp):
        return full
    dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
    dxp[:, :, :hs, :ws] = full
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation. x: (N, C, H, W); w: (O, C, k, k); b: (O,)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    k = kh
    ph0, ph1, ho = _pad_amounts(h, k, stride, padding)
    pw0, pw1, wo = _pad_amounts(wd, k, stride, padding)
    wmat = w.data.reshape(o, c * k * k)
    pointwise = k == 1 and stride == 1
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * wd)
    else:
        cols = _im2col(_pad(x.data, (ph0, ph1), (pw0, pw1)), k, stride, ho, wo)
    out2 = wmat @ cols
    if b is not None:
        out2 += b.data[:, None]
    out = np.ascontiguousarray(out2.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gc = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        dw = (gc @ cols.T).reshape(w.shape)
        dx = None
        if x.requires_grad:
            if pointwise:
                dx = (wmat.T @ gc).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
            else:
                dxp = _conv_input_grad(g, w.data, stride, h + ph0 + ph1, wd + pw0 + pw1)
                dx = dxp[:, :, ph0 : ph0 + h, pw0 : pw0 + wd]
        grads = [dx, dw]
        if b is not None:
            grads.append(gc.sum(axis=1))
        return grads

    return result(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel cross-correlation. x: (N, C, H, W); w: (C, k, k)."""
    n, c, h, wd = x.shape
    if w.data.ndim != 3 or w.shape[0] != c:
        raise ShapeError(f"depthwise kernel {w.shape} does not match {c} input channels")
    k = w.shape[1]
    if w.shape[2] != k or k % 2 == 0:
        raise ShapeError(f"depthwise kernel must be square and odd, got {w.shape[1:]}")
    ph0, ph1, ho = _pad_amounts(h, k, stride, padding)
    pw0, pw1, wo = _pad_amounts(wd, k, stride, padding)
    dtype = np.result_type(x.dtype, w.dtype)
    xp = np.ascontiguousarray(_pad(x.data, (ph0, ph1), (pw0, pw1)), dtype=dtype)
    wk = np.ascontiguousarray(w.data, dtype=dtype)
    out = _kernels.depthwise_forward(xp, wk, stride, ho, wo)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        dw = _kernels.depthwise_kernel_grad(xp, g, k, stride).astype(w.dtype)
        if not x.requires_grad:
            return None, dw
        if stride > 1:
            up = np.zeros((n, c, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=dtype)
            up[:, :, ::stride, ::stride] = g
            g = up
        hs, ws = g.shape[2] + k - 1, g.shape[3] + k - 1
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        full = _kernels.depthwise_forward(gp, np.ascontiguousarray(wk[:, ::-1, ::-1]), 1, hs, ws)
        dxp = np.zeros(xp.shape, dtype=dtype)
        dxp[:, :, :hs, :ws] = full
        return dxp[:, :, ph0 : ph0 + h, pw0 : pw0 + wd], dw

    return result(out, (x, w), backward, "depthwise_conv2d")


def separable_conv2d(
    x: Tensor, depth_kernel: Tensor, point_kernel: Tensor, b: Tensor | None = None, stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """Depthwise k x k then pointwise 1x1. point_kernel: (O, C, 1, 1)."""
    return conv2d(depthwise_conv2d(x, depth_kernel, stride, padding), point_kernel, b, 1, "same")


# --------------------------------------------------------------------------- normalisation / pooling


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation of an NCHW tensor.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    axes = (0, 2, 3)
    shp = (1, -1, 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.shape[1]
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shp).astype(x.dtype)) * inv_std.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def backward(g):
        dgamma = np.einsum("nchw,nchw->c", g, xhat)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shp)
        if training:
            m = x.data.size // x.shape[1]
            s1 = dxhat.sum(axis=axes).reshape(shp)
            s2 = np.einsum("nchw,nchw->c", dxhat, xhat).reshape(shp)
            dx = inv_std.reshape(shp) / m * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std.reshape(shp)
        return dx, dgamma, dbeta

    return result(out, (x, gamma, beta), backward, "batchnorm")


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: str = "same") -> Tensor:
    n, c, h, wd = x.shape
    ph0, ph1, ho = _pad_amounts(h, kernel, stride, padding)
    pw0, pw1, wo = _pad_amounts(wd, kernel, stride, padding)
    xp = _pad(x.data, (ph0, ph1), (pw0, pw1), value=-np.inf)
    out = _windows(xp, kernel, stride, ho, wo).max(axis=(4, 5))

    def backward(g):
        dxp = np.zeros_like(xp)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(kernel):
            for j in range(kernel):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                hit = (xp[sl] == out) & ~taken
                taken |= hit
                dxp[sl] += g * hit
        return (dxp[:, :, ph0 : ph0 + h, pw0 : pw0 + wd],)

    return result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return result(out, (x,), backward, "global_avgpool")


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: (N, F); w: (F, O)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"fully_connected: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return result(out, parents, backward, "fully_connected")


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not 0 < keep_prob <= 1:
        raise ConfigError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1:
        return x
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / keep_prob

    def backward(g):
        return (g * mask,)

    return result(x.data * mask, (x,), backward, "dropout")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")
