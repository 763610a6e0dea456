"""One-vs-rest linear SVM trained by stochastic subgradient descent.

Each binary machine minimizes

    lambda/2 |w|^2 + mean_i a_i * max(0, 1 - y_i w.x_i),   lambda = 1 / (C n)

with a_i the inverse-frequency weight of sample i's class.  A constant-1
feature carries the bias (and is regularized with the rest).  Steps follow
the Pegasos rule eta_t = 1/(lambda t) with projection onto the ball of
radius 1/sqrt(lambda); the returned weights average the second half of the
iterates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ArgumentError

C_GRID = tuple(2.0 ** e for e in range(-9, 17))


@dataclass
class SvmSpec:
    C: float = 1.0
    class_weights: np.ndarray | None = None   # per class 1..K; default inverse frequency
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> "SvmSpec":
        if not self.C > 0:
            raise ArgumentError("C must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError("epochs and batch_size must be >= 1")
        return self


def standardizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std per feature; constant features keep std 1 so they map to 0."""
    mean = x.mean(0)
    std = x.std(0)
    return mean, np.where(std > 0, std, 1.0)


def inverse_frequency(y: np.ndarray, classes: int) -> np.ndarray:
    counts = np.bincount(y, minlength=classes + 1)[1:].astype(np.float64)
    w = np.zeros(classes)
    present = counts > 0
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


@dataclass
class LinearSvm:
    weights: np.ndarray      # (K, D+1), last column multiplies the constant feature
    mean: np.ndarray
    std: np.ndarray

    @property
    def classes(self) -> int:
        return self.weights.shape[0]

    def _design(self, x):
        z = (np.asarray(x, np.float64) - self.mean) / self.std
        return np.hstack([z, np.ones((len(z), 1))])

    def decision_function(self, x) -> np.ndarray:
        return self._design(x) @ self.weights.T

    def predict(self, x) -> np.ndarray:
        return self.decision_function(x).argmax(1) + 1

    def to_arrays(self) -> dict:
        return {"weights": self.weights, "mean": self.mean, "std": self.std}

    @classmethod
    def from_arrays(cls, a) -> "LinearSvm":
        return cls(a["weights"].astype(np.float64), a["mean"].astype(np.float64), a["std"].astype(np.float64))


def svm_fit(x, y, spec: SvmSpec | None = None, classes: int | None = None) -> LinearSvm:
    """Labels are 1..K; K defaults to the largest label present."""
    spec = (spec or SvmSpec()).validate()
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.int64)
    if len(x) != len(y) or len(x) == 0:
        raise ArgumentError("x and y must be non-empty and equally long")
    if len(np.unique(y)) < 2:
        raise ArgumentError("SVM training needs >= 2 classes")
    classes = classes or int(y.max())
    mean, std = standardizer(x)
    model = LinearSvm(np.zeros((classes, x.shape[1] + 1)), mean, std)
    z = model._design(x)
    n = len(z)
    cw = inverse_frequency(y, classes) if spec.class_weights is None else np.asarray(spec.class_weights, float)
    a = cw[y - 1]
    sign = np.where(y[:, None] == np.arange(1, classes + 1)[None, :], 1.0, -1.0)
    lam = 1.0 / (spec.C * n)
    radius = 1.0 / np.sqrt(lam)
    rng = np.random.default_rng(spec.seed)
    W = np.zeros_like(model.weights)
    avg = np.zeros_like(W)
    n_avg = 0
    steps_per_epoch = -(-n // spec.batch_size)
    total = spec.epochs * steps_per_epoch
    t = 0
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        for s in range(0, n, spec.batch_size):
            idx = order[s:s + spec.batch_size]
            t += 1
            zb, sb, ab = z[idx], sign[idx], a[idx]
            margin = sb * (zb @ W.T)
            coef = np.where(margin < 1.0, sb * ab[:, None], 0.0)        # (B, K)
            grad = lam * W - coef.T @ zb / len(idx)
            W -= grad / (lam * t)
            norms = np.linalg.norm(W, axis=1, keepdims=True)
            W *= np.minimum(1.0, radius / np.maximum(norms, 1e-300))
            if t > total // 2:
                avg += W
                n_avg += 1
    model.weights = avg / n_avg
    return model


def svm_select_c(x, y, xv, yv, grid=C_GRID[::5], spec: SvmSpec | None = None, classes=None):
    """Cross-validate C by validation AA, then refit on train + val with the winner."""
    from ..trainer import evaluate

    spec = spec or SvmSpec()
    classes = classes or int(max(np.max(y), np.max(yv)))
    scores = {}
    for c in grid:
        m = svm_fit(x, y, SvmSpec(c, spec.class_weights, spec.epochs, spec.batch_size, spec.seed), classes)
        scores[c] = evaluate(m.predict(xv), np.asarray(yv), classes).aa
    best = max(scores, key=lambda c: (scores[c], -c))
    final = svm_fit(np.concatenate([x, xv]), np.concatenate([y, yv]),
                    SvmSpec(best, spec.class_weights, spec.epochs, spec.batch_size, spec.seed), classes)
    return final, best, scores
