"""Classic baselines behind one fit/predict pipeline.

Kinds: ``knn``, ``svm``, ``mlp`` on raw pixels; the same with a ``-mp``
suffix on 5x5 mean-pooled pixels; ``mica`` (ICA filter bank + MLP) and
``scae`` (stacked CAE features + WPCA + MLP).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..engine.checkpoint import load_arrays, save_arrays
from ..errors import ArgumentError, FormatError
from ..models import CaeSpec, build_cae
from ..raster_io import BACKGROUND, ChannelStats, LabelMap
from .features import (FilterBank, MicaSpec, ScaeExtractor, ScaeSpec, Whitener, box_mean, fastica, fit_whitener,
                       meanpool_preprocess, mica_features, mica_fit, scae_fit, wpca_fit)
from .knn import KnnModel, KnnSpec, knn_fit, knn_predict, select_k
from .mlp import MlpModel, MlpSpec, mlp_fit
from .svm import C_GRID, LinearSvm, SvmSpec, svm_fit, svm_select_c

KINDS = ("knn", "svm", "mlp", "knn-mp", "svm-mp", "mlp-mp", "mica", "scae")


@dataclass
class BaselineSpec:
    max_per_class: int = 2000        # training pixels sampled per class
    val_fraction: float = 0.2        # held out for choosing k / C
    knn_ks: tuple = tuple(range(1, 16))
    svm_grid: tuple = C_GRID[::5]
    svm_epochs: int = 10
    pool: int = 5
    mlp: MlpSpec = field(default_factory=MlpSpec)
    mica: MicaSpec = field(default_factory=MicaSpec)
    scae: ScaeSpec = field(default_factory=ScaeSpec)
    feature_hidden: int = 256        # MLP width on MICA / SCAE features


def _check_kind(kind):
    if kind not in KINDS:
        raise ArgumentError(f"unknown baseline kind {kind!r}; expected one of {KINDS}")


def pixel_stats(rasters) -> ChannelStats:
    px = np.concatenate([r.values[r.valid_mask].astype(np.float64) for r in rasters])
    if len(px) < 2:
        raise ArgumentError("need >= 2 valid training pixels")
    std = px.std(0)
    return ChannelStats(px.mean(0), np.where(std > 0, std, 1.0))


def sample_pixels(labels_list, masks, max_per_class, seed=0):
    """(raster index, row, col) per sampled labeled pixel, capped per class."""
    rng = np.random.default_rng([seed, 17])
    picks = {}
    for i, (lab, m) in enumerate(zip(labels_list, masks)):
        rr, cc = np.nonzero((lab != BACKGROUND) & m)
        for c in np.unique(lab[rr, cc]):
            sel = lab[rr, cc] == c
            picks.setdefault(int(c), []).append(np.stack([np.full(sel.sum(), i), rr[sel], cc[sel]], 1))
    out = []
    for c in sorted(picks):
        a = np.concatenate(picks[c])
        if len(a) > max_per_class:
            a = a[np.sort(rng.choice(len(a), max_per_class, replace=False))]
        out.append(a)
    if not out:
        raise ArgumentError("training rasters contain no labeled pixels")
    return np.concatenate(out)


@dataclass
class BaselinePipeline:
    kind: str
    stats: ChannelStats
    classes: int
    classifier: object
    bank: FilterBank | None = None
    scae: ScaeExtractor | None = None
    wpca: Whitener | None = None
    pool: int = 5
    bank_pool: int = 13

    def features(self, raster) -> np.ndarray:
        """(H, W, D) feature image for a raster."""
        v = self.stats.apply(raster.values, np.float64)
        base = self.kind.split("-")[0]
        if self.kind.endswith("-mp"):
            return box_mean(v, self.pool, raster.valid_mask)
        if base == "mica":
            return mica_features(v, self.bank, self.bank_pool)
        if base == "scae":
            f = self.scae.features(v)
            return self.wpca.transform(f.reshape(-1, f.shape[-1])).reshape(f.shape[:2] + (-1,))
        return v

    def predict(self, raster) -> LabelMap:
        f = self.features(raster)
        pred = self.classifier.predict(f.reshape(-1, f.shape[-1])).reshape(raster.height, raster.width)
        return LabelMap(pred.astype(np.uint8), self.classes)

    # -- persistence -------------------------------------------------------

    def to_arrays(self) -> dict:
        a = {"stats.mean": self.stats.mean, "stats.std": self.stats.std,
             "meta": np.array([self.classes, self.pool, self.bank_pool])}
        a.update({f"clf.{k}": v for k, v in self.classifier.to_arrays().items()})
        if self.bank is not None:
            a["bank.filters"] = self.bank.filters
        if self.scae is not None:
            for i, cae in enumerate(self.scae.caes):
                spec = cae.spec
                a[f"cae{i}.shape"] = np.array([spec.in_bands, spec.bottleneck, *spec.conv_widths])
                a.update({f"cae{i}.{k}": v for k, v in cae.state_dict().items()})
            a["wpca.mean"], a["wpca.matrix"], a["wpca.eig"] = self.wpca.mean, self.wpca.matrix, self.wpca.eigenvalues
        return a

    def save(self, path) -> None:
        save_arrays(path, self.to_arrays(), kind=f"baseline/{self.kind}")


_CLASSIFIERS = {"knn": KnnModel, "svm": LinearSvm, "mlp": MlpModel}


def _classifier_name(kind):
    return {"mica": "mlp", "scae": "mlp"}.get(kind, kind.split("-")[0])


def load_pipeline(path) -> BaselinePipeline:
    tag, a = load_arrays(path)
    if not tag.startswith("baseline/"):
        raise FormatError(f"{path}: model kind {tag!r} is not a baseline")
    kind = tag.split("/", 1)[1]
    _check_kind(kind)
    classes, pool, bank_pool = (int(v) for v in a["meta"])
    clf = _CLASSIFIERS[_classifier_name(kind)].from_arrays(
        {k[4:]: v for k, v in a.items() if k.startswith("clf.")})
    pipe = BaselinePipeline(kind, ChannelStats(a["stats.mean"], a["stats.std"]), classes, clf, pool=pool,
                            bank_pool=bank_pool)
    if "bank.filters" in a:
        pipe.bank = FilterBank(a["bank.filters"].astype(np.float64))
    i = 0
    caes = []
    while f"cae{i}.shape" in a:
        in_b, bott, *widths = (int(v) for v in a[f"cae{i}.shape"])
        cae = build_cae(CaeSpec(in_b, tuple(widths), bott, widths[0]))
        cae.load_state_dict({k[len(f"cae{i}."):]: v for k, v in a.items()
                             if k.startswith(f"cae{i}.") and not k.endswith(".shape")})
        caes.append(cae.eval())
        i += 1
    if caes:
        pipe.scae = ScaeExtractor(caes, pool)
        pipe.wpca = Whitener(a["wpca.mean"].astype(np.float64), a["wpca.matrix"].astype(np.float64),
                             a["wpca.eig"].astype(np.float64))
    return pipe


def fit_baseline(kind: str, train, spec: BaselineSpec | None = None, seed: int = 0,
                 classes: int | None = None) -> BaselinePipeline:
    """Fit a baseline on ``[(MultibandRaster, LabelMap), ...]``."""
    _check_kind(kind)
    spec = spec or BaselineSpec()
    rasters = [r for r, _ in train]
    classes = classes or max(l.classes for _, l in train)
    stats = pixel_stats(rasters)
    pipe = BaselinePipeline(kind, stats, classes, None, pool=spec.pool, bank_pool=spec.mica.pool)
    if kind == "mica":
        bank_spec = MicaSpec(**{**spec.mica.__dict__, "seed": seed})
        pipe.bank = mica_fit([_StdView(r, stats) for r in rasters], bank_spec)
    elif kind == "scae":
        scae_spec = ScaeSpec(**{**spec.scae.__dict__, "seed": seed})
        pipe.scae = scae_fit([stats.apply(r.values) for r in rasters], scae_spec)
    feats = [pipe.features(r) if kind != "scae" else pipe.scae.features(stats.apply(r.values, np.float64))
             for r in rasters]
    picks = sample_pixels([l.labels for _, l in train], [r.valid_mask for r in rasters], spec.max_per_class, seed)
    x = np.empty((len(picks), feats[0].shape[-1]))
    y = np.empty(len(picks), np.int64)
    for i in range(len(train)):
        sel = picks[:, 0] == i
        x[sel] = feats[i][picks[sel, 1], picks[sel, 2]]
        y[sel] = train[i][1].labels[picks[sel, 1], picks[sel, 2]]
    if kind == "scae":
        pipe.wpca = wpca_fit(x, scae_spec.variance)
        x = pipe.wpca.transform(x)
    if len(np.unique(y)) < 2:
        raise ArgumentError("training pixels must cover >= 2 classes")
    clf = _classifier_name(kind)
    if clf == "mlp":
        hidden = spec.feature_hidden if kind in ("mica", "scae") else spec.mlp.hidden
        pipe.classifier = mlp_fit(x, y, MlpSpec(**{**spec.mlp.__dict__, "hidden": hidden, "seed": seed}), classes)
        return pipe
    rng = np.random.default_rng([seed, 23])
    val = rng.random(len(y)) < spec.val_fraction
    if clf == "knn":
        k, _ = select_k(x[~val], y[~val], x[val], y[val], [k for k in spec.knn_ks if k <= (~val).sum()])
        pipe.classifier = knn_fit(x, y, KnnSpec(k))
    else:
        svm_spec = SvmSpec(epochs=spec.svm_epochs, seed=seed)
        pipe.classifier, _, _ = svm_select_c(x[~val], y[~val], x[val], y[val], spec.svm_grid, svm_spec, classes)
    return pipe


class _StdView:
    """Raster-like view with standardized values (for patch sampling)."""

    def __init__(self, raster, stats):
        self.values = stats.apply(raster.values, np.float64)
        self.valid_mask = raster.valid_mask
        self.height, self.width, self.bands = self.values.shape


def evaluate_pipeline(pipe: BaselinePipeline, test):
    from ..trainer import confusion_matrix, metrics_from_confusion

    cm = sum(confusion_matrix(pipe.predict(r), l, pipe.classes, r.valid_mask) for r, l in test)
    return metrics_from_confusion(cm)


def run_baseline(kind, train, test, spec=None, seed=0):
    """Fit on ``train`` and score on ``test``; returns (pipeline, Evaluation)."""
    classes = max(l.classes for _, l in list(train) + list(test))
    pipe = fit_baseline(kind, train, spec, seed, classes)
    return pipe, evaluate_pipeline(pipe, test)


__all__ = [
    "BaselinePipeline", "BaselineSpec", "C_GRID", "FilterBank", "KINDS", "KnnModel", "KnnSpec", "LinearSvm",
    "MicaSpec", "MlpModel", "MlpSpec", "ScaeExtractor", "ScaeSpec", "SvmSpec", "Whitener", "box_mean",
    "evaluate_pipeline", "fastica", "fit_baseline", "fit_whitener", "knn_fit", "knn_predict", "load_pipeline",
    "meanpool_preprocess", "mica_features", "mica_fit", "mlp_fit", "run_baseline", "sample_pixels", "scae_fit",
    "select_k", "svm_fit", "svm_select_c", "wpca_fit",
]
