"""Tensor with paired gradient and the reverse-mode ops over the fixed layer set."""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import NumericError, ShapeError
from . import kernels as K

_grad_enabled = True
_kink_log = None
DEFAULT_DTYPE = np.float32


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the ReLU sign patterns and max-pool winners of every op run inside.

    Two forward passes with equal logs lie in the same smooth piece of the graph.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class Tensor:
    def __init__(self, values, parents=(), backward=None, requires_grad=False, name=None):
        self.values = np.asarray(values)
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"non-finite values in {name or 'tensor'}")
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents)
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _result(values, parents, backward, name):
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        return Tensor(values, parents, backward, name=name)
    return Tensor(values, name=name)


def _acc(t: Tensor, g):
    if g is not None:
        t.grad = t.grad + g


def parameter(values, name=None) -> Tensor:
    return Tensor(np.asarray(values), requires_grad=True, name=name)


def constant(values, dtype=None) -> Tensor:
    arr = np.asarray(values)
    return Tensor(arr.astype(dtype or arr.dtype, copy=False))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    out, cache = K.conv2d_forward(x.values, w.values, None if b is None else b.values, stride, padding)

    def backward(g):
        dx, dw, db = K.conv2d_backward(g, cache)
        _acc(x, dx)
        _acc(w, dw)
        if b is not None:
            _acc(b, db)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: dict, training: bool,
              momentum=0.9, eps=1e-5) -> Tensor:
    """``state`` holds ``running_mean``/``running_var`` arrays, updated in train mode."""
    out, cache, mean, var = K.batchnorm_forward(x.values, gamma.values, beta.values,
                                                state["running_mean"], state["running_var"], training, eps)
    if training:
        rm, rv = state["running_mean"], state["running_var"]
        state["running_mean"] = (momentum * rm + (1 - momentum) * mean).astype(rm.dtype)
        state["running_var"] = (momentum * rv + (1 - momentum) * var).astype(rv.dtype)

    def backward(g):
        dx, dgamma, dbeta = K.batchnorm_backward(g, cache)
        _acc(x, dx)
        _acc(gamma, dgamma)
        _acc(beta, dbeta)

    return _result(out, (x, gamma, beta), backward, "batchnorm")


def relu(x: Tensor) -> Tensor:
    out, cache = K.relu_forward(x.values)
    if _kink_log is not None:
        _kink_log.append(np.packbits(cache))
    return _result(out, (x,), lambda g: _acc(x, K.relu_backward(g, cache)), "relu")


def maxpool(x: Tensor, window: int, stride=None, padding=0) -> Tensor:
    out, cache = K.maxpool_forward(x.values, window, stride, padding)
    if _kink_log is not None:
        _kink_log.append(cache[-1])
    return _result(out, (x,), lambda g: _acc(x, K.maxpool_backward(g, cache)), "maxpool")


def meanpool(x: Tensor, window: int, stride=None, padding=0) -> Tensor:
    out, cache = K.meanpool_forward(x.values, window, stride, padding)
    return _result(out, (x,), lambda g: _acc(x, K.meanpool_backward(g, cache)), "meanpool")


def global_meanpool(x: Tensor) -> Tensor:
    out, cache = K.global_meanpool_forward(x.values)
    return _result(out, (x,), lambda g: _acc(x, K.global_meanpool_backward(g, cache)), "global_meanpool")


def upsample(x: Tensor, factor=2) -> Tensor:
    out, cache = K.upsample_forward(x.values, factor)
    return _result(out, (x,), lambda g: _acc(x, K.upsample_backward(g, cache)), "upsample")


def add(*xs: Tensor) -> Tensor:
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ShapeError(f"add: shape {t.shape} != {shape}")
    out = xs[0].values.copy()
    for t in xs[1:]:
        out = out + t.values

    def backward(g):
        for t in xs:
            _acc(t, g)

    return _result(out, tuple(xs), backward, "add")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out, cache = K.dense_forward(x.values, w.values, None if b is None else b.values)

    def backward(g):
        dx, dw, db = K.dense_backward(g, cache)
        _acc(x, dx)
        _acc(w, dw)
        if b is not None:
            _acc(b, db)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "dense")


def weighted_softmax_ce(logits: Tensor, targets, weights) -> Tensor:
    loss, cache = K.weighted_softmax_ce_forward(logits.values, targets, weights)
    out = np.asarray(loss, dtype=np.float64)
    return _result(out, (logits,), lambda g: _acc(logits, K.weighted_softmax_ce_backward(g, cache)), "softmax_ce")


def mse(pred: Tensor, target) -> Tensor:
    loss, cache = K.mse_forward(pred.values, np.asarray(target))
    out = np.asarray(loss, dtype=np.float64)
    return _result(out, (pred,), lambda g: _acc(pred, K.mse_backward(g, cache)), "mse")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant; used to zero skip features in ablations."""
    return _result(x.values * factor, (x,), lambda g: _acc(x, g * factor), "scale")
