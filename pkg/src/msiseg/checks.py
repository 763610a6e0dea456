"""Finite-difference gradient suite over every layer kind and both segmentation graphs."""

from __future__ import annotations

import numpy as np

from .engine import ops
from .engine import tensor as T
from .engine.gradcheck import GradCheckReport, grad_check
from .models import mini_refinenet, mini_sharpmask


def _leaf(a):
    return T.parameter(np.asarray(a, np.float64))


def _scalar(y, rng):
    # squared error against a random target: every output coordinate carries gradient
    return ops.mse(y, rng.normal(size=y.shape))


def _layer_cases(rng):
    x4 = lambda *s: _leaf(rng.normal(size=s))
    x = x4(2, 3, 6, 6)
    w3, b3 = x4(4, 3, 3, 3), x4(4)
    ws, bs = x4(2, 3, 3, 3), x4(2)
    xd, wd, bd = x4(4, 5), x4(5, 3), x4(3)
    g, beta = _leaf(rng.uniform(0.5, 1.5, 3)), x4(3)
    z = x4(2, 4, 3, 3)
    tgt = rng.integers(0, 4, (2, 3, 3))
    cw = rng.uniform(0.2, 2.0, 4)[tgt]
    bn_state = {"running_mean": np.zeros(3), "running_var": np.ones(3)}
    return {
        "conv3x3": (lambda: _scalar(ops.conv2d(x, w3, b3, 1, 1), np.random.default_rng(1)),
                    {"x": x, "w": w3, "b": b3}),
        "conv3x3-stride2": (lambda: _scalar(ops.conv2d(x, ws, bs, 2, 1), np.random.default_rng(2)),
                            {"x": x, "w": ws, "b": bs}),
        "batchnorm-train": (lambda: _scalar(ops.batchnorm(x, g, beta, dict(bn_state), True),
                                            np.random.default_rng(3)), {"x": x, "gamma": g, "beta": beta}),
        "relu": (lambda: _scalar(ops.relu(x), np.random.default_rng(4)), {"x": x}),
        "maxpool2": (lambda: _scalar(ops.maxpool(x, 2), np.random.default_rng(5)), {"x": x}),
        "maxpool5-same": (lambda: _scalar(ops.maxpool(x, 5, 1, 2), np.random.default_rng(6)), {"x": x}),
        "meanpool2": (lambda: _scalar(ops.meanpool(x, 2), np.random.default_rng(7)), {"x": x}),
        "upsample2": (lambda: _scalar(ops.upsample(x, 2), np.random.default_rng(8)), {"x": x}),
        "global-meanpool": (lambda: _scalar(ops.global_meanpool(x), np.random.default_rng(9)), {"x": x}),
        "dense": (lambda: _scalar(ops.dense(xd, wd, bd), np.random.default_rng(10)),
                  {"x": xd, "w": wd, "b": bd}),
        "weighted-softmax-ce": (lambda: ops.weighted_softmax_ce(z, tgt, cw), {"logits": z}),
    }


def _graph_case(model, size, seed, batch=4):
    rng = np.random.default_rng(seed)
    model.astype(np.float64)
    model.train()
    x = T.constant(rng.normal(size=(batch, 6, size, size)))
    tgt = rng.integers(1, model.classes + 1, (batch, size, size))
    w = rng.uniform(0.2, 2.0, model.classes + 1)[tgt]
    return (lambda: T.weighted_softmax_ce(model(x), tgt, w)), model.named_parameters()


def gradient_suite(seed: int = 0, tolerance: float = 1e-3, graphs: bool = True,
                   max_per_tensor: int = 2) -> list[tuple[str, GradCheckReport]]:
    """(name, report) for every layer kind and, optionally, the mini SharpMask and RefineNet graphs."""
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, leaves) in _layer_cases(rng).items():
        out.append((name, grad_check(fn, leaves, tolerance, seed=seed)))
    if graphs:
        for name, model, s in (("sharpmask-graph", mini_sharpmask(), seed), ("refinenet-graph", mini_refinenet(),
                                                                             seed + 1)):
            fn, leaves = _graph_case(model, 32, s)
            out.append((name, grad_check(fn, leaves, tolerance, max_per_tensor=max_per_tensor, seed=s)))
    return out


def suite_lines(results) -> list[str]:
    lines = []
    for name, rep in results:
        verdict = "ok" if rep.passed else "FAIL"
        lines.append(f"{name:<22} tensors={len(rep.entries):<4d} max_rel_err={rep.max_rel_error:.3e} {verdict}")
    return lines
