"""Forward/backward numpy kernels for the fixed layer set.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes ``(grad_out, cache)``.  Passing ``cache=None`` (no forward run)
raises :class:`StateError`.  Layout is NCHW; conv weights are OIHW.
Reductions accumulate in float64 and cast back to the input dtype.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatchError, EmptyBatchError, ShapeError, StateError


def _need(cache, name):
    if cache is None:
        raise StateError(f"{name} backward called without a cached forward pass")


def _pads(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        before, after = padding
    else:
        before = after = padding
    if before < 0 or after < 0:
        raise ShapeError(f"negative padding {padding}")
    return int(before), int(after)


def same_padding(k: int) -> tuple[int, int]:
    """(before, after) zero padding that keeps spatial size at stride 1."""
    return (k - 1) // 2, k - 1 - (k - 1) // 2


def _out_size(n, k, s, before, after):
    size = (n + before + after - k) // s + 1
    if k > n + before + after or size < 1:
        raise ShapeError(f"window {k} larger than padded input {n + before + after}")
    return size


def _windows(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _scatter_windows(dwin, x_shape_padded, stride, ho, wo, dtype):
    """Adjoint of ``_windows``: sum (N,C,Ho,Wo,kh,kw) window grads into the padded input."""
    n, c, hp, wp = x_shape_padded
    kh, kw = dwin.shape[-2:]
    dxp = np.zeros((n, c, hp, wp), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dwin[..., i, j]
    return dxp


# -- convolution -------------------------------------------------------------

def conv2d_forward(x, w, b=None, stride=1, padding=0):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weights")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, weights expect {ci}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    pt, pb = _pads(padding)
    ho = _out_size(h, kh, stride, pt, pb)
    wo = _out_size(wd, kw, stride, pt, pb)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pt, pb))) if (pt or pb) else x
    cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(o, -1).T
    if b is not None:
        out += b
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    cache = (x.shape, xp.shape, cols, w, stride, (pt, pb), ho, wo, b is not None)
    return np.ascontiguousarray(out), cache


def conv2d_backward(grad_out, cache):
    _need(cache, "conv2d")
    x_shape, xp_shape, cols, w, stride, (pt, pb), ho, wo, has_bias = cache
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g.T @ cols).reshape(w.shape)
    db = g.sum(axis=0, dtype=np.float64).astype(w.dtype) if has_bias else None
    dcols = (g @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = _scatter_windows(dcols, xp_shape, stride, ho, wo, grad_out.dtype)
    dx = dxp[:, :, pt:pt + h, pt:pt + wd]
    return np.ascontiguousarray(dx), dw, db


# -- batch normalization -----------------------------------------------------

def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects NC or NCHW input, got ndim={x.ndim}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training, eps=1e-5):
    axes, bshape = _bn_axes(x)
    if training:
        m = x.size // x.shape[1]
        if m < 2:
            raise DegenerateBatchError("batchnorm in train mode needs >= 2 elements per channel")
        mean = x.mean(axis=axes, dtype=np.float64)
        var = ((x - mean.reshape(bshape)) ** 2).mean(axis=axes, dtype=np.float64)
    else:
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x - mean.reshape(bshape)) * inv.reshape(bshape)).astype(x.dtype)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    cache = (xhat, gamma, inv.astype(x.dtype), axes, bshape, training)
    return out.astype(x.dtype), cache, mean, var


def batchnorm_backward(grad_out, cache):
    _need(cache, "batchnorm")
    xhat, gamma, inv, axes, bshape, training = cache
    dgamma = (grad_out * xhat).sum(axis=axes, dtype=np.float64).astype(gamma.dtype)
    dbeta = grad_out.sum(axis=axes, dtype=np.float64).astype(gamma.dtype)
    dxhat = grad_out * gamma.reshape(bshape)
    if not training:
        return dxhat * inv.reshape(bshape), dgamma, dbeta
    m = grad_out.size // grad_out.shape[1]
    s1 = dxhat.sum(axis=axes, dtype=np.float64).reshape(bshape)
    s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64).reshape(bshape)
    dx = (inv.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
    return dx.astype(grad_out.dtype), dgamma, dbeta


# -- elementwise / pooling ---------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(grad_out, cache):
    _need(cache, "relu")
    return grad_out * cache


def maxpool_forward(x, window, stride=None, padding=0):
    """Max pool with -inf padding.

    Runs as a row pass then a column pass (memory O(k) per output instead of
    O(k^2)); the winner is the row-major first maximum, same as a direct
    2-D argmax.
    """
    if window < 1:
        raise ShapeError("pool window must be >= 1")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    pt, pb = _pads(padding)
    ho = _out_size(h, window, stride, pt, pb)
    wo = _out_size(w, window, stride, pt, pb)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pt, pb)), constant_values=-np.inf) if (pt or pb) else x
    rows_win = sliding_window_view(xp, window, axis=3)[:, :, :, ::stride][:, :, :, :wo]
    col_arg = rows_win.argmax(axis=-1)                      # (N,C,Hp,Wo)
    row_max = np.take_along_axis(rows_win, col_arg[..., None], axis=-1)[..., 0]
    cols_win = sliding_window_view(row_max, window, axis=2)[:, :, ::stride][:, :, :ho]
    row_arg = cols_win.argmax(axis=-1)                      # (N,C,Ho,Wo)
    out = np.take_along_axis(cols_win, row_arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + row_arg
    cols = np.arange(wo)[None, :] * stride + np.take_along_axis(col_arg, rows, axis=2)
    base = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None, None] * (xp.shape[2] * xp.shape[3])
    flat = base + rows * xp.shape[3] + cols
    cache = (x.shape, xp.shape, (pt, pb), flat)
    return np.ascontiguousarray(out), cache


def maxpool_backward(grad_out, cache):
    _need(cache, "maxpool")
    x_shape, xp_shape, (pt, pb), flat = cache
    size = int(np.prod(xp_shape))
    dxp = np.bincount(flat.ravel(), weights=grad_out.ravel().astype(np.float64), minlength=size)
    dxp = dxp.reshape(xp_shape).astype(grad_out.dtype)
    h, w = x_shape[2:]
    return np.ascontiguousarray(dxp[:, :, pt:pt + h, pt:pt + w])


def meanpool_forward(x, window, stride=None, padding=0):
    """Average pool; zero padding counts toward the divisor."""
    if window < 1:
        raise ShapeError("pool window must be >= 1")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    pt, pb = _pads(padding)
    ho = _out_size(h, window, stride, pt, pb)
    wo = _out_size(w, window, stride, pt, pb)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pt, pb))) if (pt or pb) else x
    win = _windows(xp, window, window, stride, ho, wo)
    out = win.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)
    return out, (x.shape, xp.shape, (pt, pb), window, stride, ho, wo)


def meanpool_backward(grad_out, cache):
    _need(cache, "meanpool")
    x_shape, xp_shape, (pt, pb), window, stride, ho, wo = cache
    g = grad_out / (window * window)
    dwin = np.broadcast_to(g[..., None, None], g.shape + (window, window))
    dxp = _scatter_windows(dwin, xp_shape, stride, ho, wo, grad_out.dtype)
    h, w = x_shape[2:]
    return np.ascontiguousarray(dxp[:, :, pt:pt + h, pt:pt + w])


def global_meanpool_forward(x):
    return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype), x.shape


def global_meanpool_backward(grad_out, cache):
    _need(cache, "global_meanpool")
    n, c, h, w = cache
    return np.broadcast_to((grad_out / (h * w))[:, :, None, None], cache).astype(grad_out.dtype)


def upsample_forward(x, factor=2):
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    return x.repeat(factor, axis=2).repeat(factor, axis=3), factor


def upsample_backward(grad_out, cache):
    _need(cache, "upsample")
    f = cache
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))


def dense_forward(x, w, b=None):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def dense_backward(grad_out, cache):
    _need(cache, "dense")
    x, w, has_bias = cache
    db = grad_out.sum(axis=0, dtype=np.float64).astype(w.dtype) if has_bias else None
    return grad_out @ w.T, x.T @ grad_out, db


# -- losses -----------------------------------------------------------------

def log_softmax(logits, axis=1):
    z = logits.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, axis=1):
    return np.exp(log_softmax(logits, axis))


def weighted_softmax_ce_forward(logits, targets, weights):
    """Class ``t`` (1..C) maps to logit channel ``t-1``; class 0 is background.

    loss = sum_p w_p * -log softmax(logits_p)[t_p] / sum_p w_p
    """
    if logits.ndim == 2:
        logits4 = logits[:, :, None, None]
        targets = np.asarray(targets).reshape(-1, 1, 1)
        weights = np.asarray(weights).reshape(-1, 1, 1)
    else:
        logits4 = logits
    n, c = logits4.shape[:2]
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    if targets.shape != (n,) + logits4.shape[2:] or weights.shape != targets.shape:
        raise ShapeError(f"targets {targets.shape} / weights {weights.shape} do not match logits {logits4.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) > c:
        raise ShapeError(f"targets outside [0, {c}]")
    w = np.where(targets > 0, weights, 0.0)
    total = w.sum()
    if total <= 0:
        raise EmptyBatchError("all pixel weights are zero")
    logp = log_softmax(logits4, axis=1)
    idx = np.maximum(targets.astype(np.int64) - 1, 0)[:, None]
    picked = np.take_along_axis(logp, idx, axis=1)[:, 0]
    loss = float(-(w * picked).sum() / total)
    cache = (np.exp(logp), idx, w / total, logits.shape, logits.dtype)
    return loss, cache


def weighted_softmax_ce_backward(grad_out, cache):
    _need(cache, "weighted_softmax_ce")
    probs, idx, wn, shape, dtype = cache
    g = probs.copy()
    np.put_along_axis(g, idx, np.take_along_axis(g, idx, axis=1) - 1.0, axis=1)
    g *= wn[:, None] * grad_out
    return g.reshape(shape).astype(dtype)


def mse_forward(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target
    return float((diff ** 2).mean()), (diff, pred.dtype)


def mse_backward(grad_out, cache):
    _need(cache, "mse")
    diff, dtype = cache
    return (2.0 * grad_out * diff / diff.size).astype(dtype)
