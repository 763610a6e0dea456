"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, record_kinks


@dataclass
class GradCheckEntry:
    name: str
    checked: int
    max_rel_error: float
    worst_index: tuple
    shrunk: int = 0          # coordinates whose step was reduced to avoid a kink


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tolerance for e in self.entries)

    def lines(self):
        for e in self.entries:
            verdict = "ok" if e.max_rel_error < self.tolerance else "FAIL"
            yield (f"{e.name:<40} n={e.checked:<5d} max_rel_err={e.max_rel_error:.3e} "
                   f"shrunk={e.shrunk} {verdict}")


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _probe(loss_fn, track):
    if not track:
        return loss_fn().values.item(), None
    with record_kinks() as log:
        value = loss_fn().values.item()
    return value, log


def grad_check(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], tolerance=1e-3, eps=1e-4,
               max_per_tensor: int | None = None, seed=0, kink_aware=True, max_halvings=10) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``tensors`` are the leaves to check; their values are perturbed in place
    (and restored).  Tensors larger than ``max_per_tensor`` are checked on a
    seeded random subsample of coordinates.

    With ``kink_aware`` the ReLU/max-pool activation pattern is recorded at
    the base point and at both perturbed points; if a step crosses a switch
    of that pattern the difference quotient is not a derivative of the
    piece containing the base point, so the step is halved (up to
    ``max_halvings`` times) until both probes stay in that piece.
    """
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.zero_grad()
    with record_kinks() as base_log:
        loss = loss_fn()
    loss.backward()
    analytic = {k: t.grad.copy() for k, t in tensors.items()}
    report = GradCheckReport(tolerance)
    for name, t in tensors.items():
        size = t.values.size
        if max_per_tensor is not None and size > max_per_tensor:
            flat_idx = rng.choice(size, max_per_tensor, replace=False)
        else:
            flat_idx = np.arange(size)
        errs, shrunk = [], 0
        for fi in flat_idx:
            idx = np.unravel_index(fi, t.values.shape)
            orig = t.values[idx]
            h = eps
            for attempt in range(max_halvings + 1):
                t.values[idx] = orig + h
                plus, log_p = _probe(loss_fn, kink_aware)
                t.values[idx] = orig - h
                minus, log_m = _probe(loss_fn, kink_aware)
                t.values[idx] = orig
                if not kink_aware or (_same(log_p, base_log) and _same(log_m, base_log)):
                    break
                if attempt < max_halvings:
                    h /= 2
            shrunk += h < eps
            numeric = (plus - minus) / (2 * h)
            errs.append(float(relative_error(analytic[name][idx], numeric)))
        worst = int(np.argmax(errs)) if errs else 0
        report.entries.append(GradCheckEntry(
            name, len(errs), max(errs, default=0.0),
            tuple(int(i) for i in np.unravel_index(flat_idx[worst], t.values.shape)) if errs else (), shrunk))
    return report
