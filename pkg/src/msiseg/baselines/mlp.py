"""Per-pixel MLP: batch norm, one ReLU hidden layer, softmax output."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..engine import tensor as T
from ..engine.layers import BatchNorm, Dense, Module
from ..engine.optim import NAdam
from ..errors import ArgumentError


@dataclass
class MlpSpec:
    hidden: int = 64
    epochs: int = 20
    batch_size: int = 256
    lr: float = 2e-3
    weight_decay: float = 1e-4
    mu: float = 0.15
    seed: int = 0

    def validate(self) -> "MlpSpec":
        if self.hidden < 1:
            raise ArgumentError("hidden units must be >= 1")
        if self.epochs < 1 or self.batch_size < 2 or self.lr < 0:
            raise ArgumentError("epochs >= 1, batch_size >= 2 and lr >= 0 required")
        return self


class Mlp(Module):
    def __init__(self, features, hidden, classes, rng):
        self.bn = BatchNorm(features)
        self.fc1 = Dense(features, hidden, rng)
        self.fc2 = Dense(hidden, classes, rng)
        self.classes = classes

    def forward(self, x):
        return self.fc2(T.relu(self.fc1(self.bn(x))))


@dataclass
class MlpModel:
    net: Mlp
    spec: MlpSpec

    @property
    def classes(self) -> int:
        return self.net.classes

    def scores(self, x, batch=4096) -> np.ndarray:
        self.net.eval()
        x = np.asarray(x, np.float32)
        with T.no_grad():
            return np.concatenate([self.net(T.constant(x[i:i + batch])).values for i in range(0, len(x), batch)])

    def predict(self, x) -> np.ndarray:
        return self.scores(x).argmax(1) + 1

    def to_arrays(self) -> dict:
        d = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        d["shape"] = np.array([self.net.fc1.weight.shape[0], self.spec.hidden, self.classes])
        return d

    @classmethod
    def from_arrays(cls, a) -> "MlpModel":
        f, h, k = (int(v) for v in a["shape"])
        net = Mlp(f, h, k, np.random.default_rng(0))
        net.load_state_dict({k2[4:]: v for k2, v in a.items() if k2.startswith("net.")})
        return cls(net.eval(), MlpSpec(hidden=h))


def mlp_fit(x, y, spec: MlpSpec | None = None, classes: int | None = None) -> MlpModel:
    """Fixed-epoch NAdam training with log-frequency class weights."""
    from ..trainer import class_weights

    spec = (spec or MlpSpec()).validate()
    x = np.asarray(x, np.float32)
    y = np.asarray(y, np.int64)
    if len(x) != len(y) or len(x) < 2:
        raise ArgumentError("need >= 2 samples with matching labels")
    if len(np.unique(y)) < 2:
        raise ArgumentError("MLP training needs >= 2 classes")
    classes = classes or int(y.max())
    rng = np.random.default_rng(spec.seed)
    net = Mlp(x.shape[1], spec.hidden, classes, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w = class_weights(np.bincount(y, minlength=classes + 1)[1:], spec.mu).per_label
    if not np.any(w[y] > 0):
        # a single dominant class gets log10(1) = 0; fall back to uniform weights
        w = np.ones_like(w)
    opt = NAdam(net.named_parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    net.train()
    for _ in range(spec.epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), spec.batch_size):
            idx = order[s:s + spec.batch_size]
            if len(idx) < 2 or not np.any(w[y[idx]] > 0):
                continue
            net.zero_grad()
            loss = T.weighted_softmax_ce(net(T.constant(x[idx])), y[idx], w[y[idx]])
            loss.backward()
            opt.step()
    return MlpModel(net.eval(), spec)
