"""Brute-force Euclidean k-nearest-neighbour classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ArgumentError


@dataclass
class KnnSpec:
    k: int = 1

    def validate(self) -> "KnnSpec":
        if not 1 <= self.k <= 15:
            raise ArgumentError("k must lie in 1..15")
        return self


def _vote(labels: np.ndarray, classes: int) -> np.ndarray:
    """Row-wise majority of an (M, k) label array; ties go to the smallest class."""
    counts = np.zeros((labels.shape[0], classes + 1), np.int64)
    np.add.at(counts, (np.repeat(np.arange(labels.shape[0]), labels.shape[1]), labels.ravel()), 1)
    return counts.argmax(1)


def knn_predict(train_x, train_y, test_x, k: int, chunk: int = 2048) -> np.ndarray:
    tx = np.asarray(train_x, np.float64)
    ty = np.asarray(train_y, np.int64)
    q = np.asarray(test_x, np.float64)
    if len(tx) == 0:
        raise ArgumentError("empty training set")
    if k > len(tx):
        raise ArgumentError(f"k={k} exceeds the {len(tx)} training points")
    classes = int(ty.max())
    sq = (tx * tx).sum(1)
    out = np.empty(len(q), np.int64)
    for s in range(0, len(q), chunk):
        qb = q[s:s + chunk]
        d = sq[None, :] - 2.0 * qb @ tx.T + (qb * qb).sum(1)[:, None]
        # stable sort keeps the lower training index first among equal distances
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        out[s:s + chunk] = _vote(ty[nn], classes)
    return out


@dataclass
class KnnModel:
    spec: KnnSpec
    x: np.ndarray
    y: np.ndarray

    def predict(self, x) -> np.ndarray:
        return knn_predict(self.x, self.y, x, self.spec.k)

    def to_arrays(self) -> dict:
        return {"k": np.array([self.spec.k]), "x": self.x, "y": self.y}

    @classmethod
    def from_arrays(cls, a) -> "KnnModel":
        return cls(KnnSpec(int(a["k"][0])), a["x"], a["y"].astype(np.int64))


def knn_fit(x, y, spec: KnnSpec | None = None) -> KnnModel:
    spec = (spec or KnnSpec()).validate()
    x = np.asarray(x, np.float64)
    if len(x) == 0:
        raise ArgumentError("empty training set")
    if spec.k > len(x):
        raise ArgumentError(f"k={spec.k} exceeds the {len(x)} training points")
    return KnnModel(spec, x, np.asarray(y, np.int64))


def select_k(x, y, xv, yv, ks=range(1, 16), score=None) -> tuple[int, dict]:
    """Pick k on a validation split; ``score(pred, truth)`` defaults to mean per-class accuracy."""
    from ..trainer import evaluate

    score = score or (lambda p, t: evaluate(p, t, int(max(t.max(), p.max()))).aa)
    results = {}
    for k in ks:
        if k > len(x):
            break
        results[k] = score(knn_predict(x, y, xv, k), np.asarray(yv))
    best = max(results, key=lambda k: (results[k], -k))
    return best, results
