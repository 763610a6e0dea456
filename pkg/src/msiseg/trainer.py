"""Training protocols, class weighting, metrics and tiled prediction.

Accuracies are fractions in [0, 1] throughout; reports render them as
percentages.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import tensor as T
from .engine.optim import NAdam
from .errors import ArgumentError, DivergenceError, EmptyBatchError, NumericError, ShapeError
from .raster_io import BACKGROUND, ChannelStats, LabelMap, MultibandRaster
from .synth import tile_positions, tile_stride

STAGES = ("pretrain", "finetune-frozen", "finetune-joint")
SELECT = ("val_aa", "val_loss", "last")


# -- class weights -----------------------------------------------------------

@dataclass
class ClassWeights:
    weights: np.ndarray      # w_i for classes 1..N
    mu: float
    counts: np.ndarray       # h_i

    @property
    def classes(self) -> int:
        return len(self.weights)

    @property
    def per_label(self) -> np.ndarray:
        """Lookup table indexed by label value; background (0) weighs nothing."""
        return np.concatenate([[0.0], self.weights])


def class_weights(counts, mu: float) -> ClassWeights:
    """w_i = mu * log10(sum(h) / h_i); empty classes get 0 and a warning."""
    h = np.asarray(counts, dtype=np.float64)
    if h.ndim != 1 or h.size == 0 or np.any(h < 0):
        raise ArgumentError("counts must be a non-empty 1-D array of non-negative values")
    total = h.sum()
    if total <= 0:
        raise ArgumentError("all class counts are zero")
    w = np.zeros_like(h)
    present = h > 0
    w[present] = mu * np.log10(total / h[present])
    if not present.all():
        warnings.warn(f"classes with zero pixels get weight 0: {list(np.flatnonzero(~present) + 1)}", stacklevel=2)
    return ClassWeights(w, mu, h)


# -- learning-rate schedule --------------------------------------------------

@dataclass
class PlateauSchedule:
    """Divide the LR by ``factor`` when validation loss stops improving.

    An epoch counts as an improvement when its loss beats the best seen so
    far by at least ``min_delta``.  After ``patience`` epochs without one the
    LR drops; once ``max_drops`` drops are spent the next plateau stops
    training.
    """

    lr: float
    patience: int = 3
    min_delta: float = 1e-4
    factor: float = 10.0
    max_drops: int = 4
    best: float = math.inf
    wait: int = 0
    drops: int = 0
    stopped: bool = False

    def step(self, val_loss: float) -> bool:
        """Record one epoch; True if the LR was dropped."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
            return False
        self.best = min(self.best, val_loss)
        self.wait += 1
        if self.wait < self.patience:
            return False
        self.wait = 0
        if self.drops >= self.max_drops:
            self.stopped = True
            return False
        self.drops += 1
        self.lr /= self.factor
        return True


# -- configuration -----------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-4
    mu: float = 0.25
    patience: int = 3
    min_delta: float = 1e-4
    max_drops: int = 4
    max_epochs: int = 100
    stage: str = "finetune-joint"
    seed: int = 0
    hflip: bool = True
    vflip: bool = True
    joint_lr: float = 2e-5           # stage-2 LR after a frozen-encoder stage
    steps_per_epoch: int | None = None   # fixed updates per epoch instead of one pass (desk-scale runs)
    select: str = "val_aa"           # weights kept at the end: best val_aa, best val_loss, or last
    frozen_bn: bool = False          # pretrained joint stage: encoder BN keeps its pretrained statistics

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or self.joint_lr < 0:
            raise ArgumentError("learning rates must be >= 0")
        if not 0 <= self.max_drops <= 4:
            raise ArgumentError("max_drops must be in [0, 4]")
        if self.batch_size < 2:
            raise ArgumentError("batch_size must be >= 2 (batch normalization)")
        if self.stage not in STAGES:
            raise ArgumentError(f"stage must be one of {STAGES}")
        if self.patience < 1 or self.max_epochs < 1 or self.mu < 0 or self.weight_decay < 0:
            raise ArgumentError("patience and max_epochs must be >= 1; mu and weight_decay >= 0")
        if self.select not in SELECT:
            raise ArgumentError(f"select must be one of {SELECT}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ArgumentError("steps_per_epoch must be >= 1")
        return self

    @classmethod
    def pretraining(cls, **kw) -> "TrainConfig":
        return cls(**{"batch_size": 128, "mu": 0.15, "stage": "pretrain", **kw}).validate()


# -- normalization and batching ---------------------------------------------

def array_stats(x: np.ndarray) -> ChannelStats:
    """Per-channel population mean/std of an (N, C, ...) array."""
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axis=axes, dtype=np.float64)
    std = x.std(axis=axes, dtype=np.float64)
    return ChannelStats(mean, np.where(std > 0, std, 1.0))


def standardize(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return ((x - stats.mean.reshape(shape)) / stats.std.reshape(shape)).astype(np.float32)


def _flip(xb, yb, rng, hflip, vflip):
    """Random per-sample flips; label maps follow their images."""
    xb, yb = xb.copy(), yb.copy()
    n = len(xb)
    for axis, on in ((-1, hflip), (-2, vflip)):
        if not on:
            continue
        sel = rng.random(n) < 0.5
        xb[sel] = np.flip(xb[sel], axis=axis)
        if yb.ndim > 1:
            yb[sel] = np.flip(yb[sel], axis=axis)
    return xb, yb


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    oa: float
    lr: float
    aa: float = math.nan


@dataclass
class TrainResult:
    stage: str
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = math.inf      # validation loss at best_epoch
    best_score: float = -math.inf    # the selection criterion at best_epoch (higher is better)
    epochs: int = 0
    drops: int = 0

    def curve_rows(self):
        return [(r.epoch, r.split, r.loss, r.oa) for r in self.history]


def _predict_logits(model, x, batch=64):
    with T.no_grad():
        outs = [model(T.constant(x[i:i + batch])).values for i in range(0, len(x), batch)]
    return np.concatenate(outs) if outs else np.empty((0,))


def _val_scores(model, x, y, label_w, batch=64):
    """Weighted CE, overall accuracy and average accuracy over a dataset, evaluation mode."""
    model.eval()
    num = den = 0.0
    correct = total = 0
    k = len(label_w) - 1
    hit, seen = np.zeros(k + 1, np.int64), np.zeros(k + 1, np.int64)
    for i in range(0, len(x), batch):
        logits = _predict_logits(model, x[i:i + batch], batch)
        yb = y[i:i + batch]
        w = label_w[yb]
        try:
            loss = T.weighted_softmax_ce(T.constant(logits), yb, w).item()
        except EmptyBatchError:
            continue
        wsum = float(np.where(yb > 0, w, 0).sum())
        num += loss * wsum
        den += wsum
        pred = logits.argmax(1) + 1
        lab = yb > 0
        correct += int((pred[lab] == yb[lab]).sum())
        total += int(lab.sum())
        seen += np.bincount(yb[lab], minlength=k + 1)[:k + 1]
        hit += np.bincount(yb[lab][pred[lab] == yb[lab]], minlength=k + 1)[:k + 1]
    present = seen > 0
    aa = float((hit[present] / seen[present]).mean()) if present.any() else math.nan
    return (num / den if den else math.nan), (correct / total if total else math.nan), aa


def _batches(n, batch_size, steps, rng):
    """Index batches for one epoch.

    Without ``steps``: one shuffled pass, dropping a trailing batch of one.
    With ``steps``: exactly that many full batches, reshuffling whenever a
    pass runs out (so tiny datasets still get a fixed number of updates).
    """
    if steps is None:
        order = rng.permutation(n)
        return [order[s:s + batch_size] for s in range(0, n, batch_size) if len(order[s:s + batch_size]) >= 2]
    size = min(batch_size, n)
    out, order, pos = [], rng.permutation(n), 0
    for _ in range(steps):
        if pos + size > n:
            order, pos = rng.permutation(n), 0
        out.append(order[pos:pos + size])
        pos += size
    return out


def _fit(model, params, train, val, label_w, cfg: TrainConfig, lr, stage, freeze=None):
    """Shared epoch loop; restores the state of the best epoch under ``cfg.select`` at the end."""
    x, y = train
    xv, yv = val
    rng = np.random.default_rng([cfg.seed, STAGES.index(stage)])
    opt = NAdam(params, lr=lr, weight_decay=cfg.weight_decay)
    sched = PlateauSchedule(lr, cfg.patience, cfg.min_delta, 10.0, cfg.max_drops)
    result = TrainResult(stage)
    best_state = model.state_dict()
    n = len(x)
    if n < 2:
        raise ArgumentError("need >= 2 training samples")
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        if freeze is not None:
            freeze.eval()
        run_loss = run_w = 0.0
        correct = total = 0
        for idx in _batches(n, cfg.batch_size, cfg.steps_per_epoch, rng):
            xb, yb = _flip(x[idx], y[idx], rng, cfg.hflip, cfg.vflip)
            w = label_w[yb]
            if not np.any(np.where(yb > 0, w, 0) > 0):
                continue
            try:
                model.zero_grad()
                logits = model(T.constant(xb))
                loss = T.weighted_softmax_ce(logits, yb, w)
                loss.backward()
                opt.step()
            except NumericError as exc:
                raise DivergenceError(f"{stage}: non-finite values at epoch {epoch}, lr {opt.lr:g}, "
                                      f"last epoch losses {[r.loss for r in result.history[-2:]]}: {exc}") from exc
            wsum = float(np.where(yb > 0, w, 0).sum())
            run_loss += loss.item() * wsum
            run_w += wsum
            lab = yb > 0
            pred = logits.values.argmax(1) + 1
            correct += int((pred[lab] == yb[lab]).sum())
            total += int(lab.sum())
        train_loss = run_loss / run_w if run_w else math.nan
        if not math.isfinite(train_loss):
            raise DivergenceError(f"{stage}: training loss {train_loss} at epoch {epoch}, lr {opt.lr:g}")
        val_loss, val_oa, val_aa = _val_scores(model, xv, yv, label_w)
        result.history.append(EpochRecord(epoch, "train", train_loss, correct / total if total else math.nan,
                                          opt.lr))
        result.history.append(EpochRecord(epoch, "val", val_loss, val_oa, opt.lr, val_aa))
        result.epochs = epoch
        score = {"val_aa": val_aa, "val_loss": -val_loss, "last": epoch}[cfg.select]
        if result.best_epoch < 0 or score > result.best_score:
            result.best_score, result.best_loss, result.best_epoch = score, val_loss, epoch
            best_state = model.state_dict()
        if sched.step(val_loss):
            opt.lr = sched.lr
        if sched.stopped:
            break
    result.drops = sched.drops
    model.load_state_dict(best_state)
    model.eval()
    return result


# -- pretraining -------------------------------------------------------------

@dataclass
class PretrainResult:
    train: TrainResult
    stats: ChannelStats
    weights: ClassWeights


def pretrain(model, train, val, cfg: TrainConfig | None = None, classes: int | None = None) -> PretrainResult:
    """Patch classification on synthetic data.

    ``train`` and ``val`` are ``(x, labels)`` pairs with x of shape (N, C, S, S)
    and labels in 1..classes.  ``model`` is a :class:`~msiseg.models.PatchClassifier`.
    """
    cfg = (cfg or TrainConfig.pretraining()).validate()
    classes = classes or model.classes
    if classes < 2:
        raise ArgumentError("pretraining needs >= 2 classes")
    x, y = np.asarray(train[0]), np.asarray(train[1], np.int64)
    xv, yv = np.asarray(val[0]), np.asarray(val[1], np.int64)
    if len(np.unique(y[y > 0])) < 2:
        raise ArgumentError("pretraining set must contain >= 2 classes")
    stats = array_stats(x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cw = class_weights(np.bincount(y, minlength=classes + 1)[1:], cfg.mu)
    result = _fit(model, model.named_parameters(), (standardize(x, stats), y), (standardize(xv, stats), yv),
                  cw.per_label, cfg, cfg.lr, "pretrain")
    return PretrainResult(result, stats, cw)


# -- fine-tuning -------------------------------------------------------------

@dataclass
class FinetuneResult:
    stages: list
    stats: ChannelStats
    weights: ClassWeights
    init: str


def finetune(model, train, val, cfg: TrainConfig | None = None, init: str = "random",
             encoder_state: dict | None = None, stats: ChannelStats | None = None) -> FinetuneResult:
    """Train a segmentation head on labeled patches.

    ``train``/``val`` are ``(x, label_maps)`` with x (N, C, S, S) and label
    maps (N, S, S), 0 = unlabeled.  Random init runs a single joint stage.
    Pretrained init loads ``encoder_state``, trains the head with the encoder
    frozen, then everything at ``cfg.joint_lr``.  ``stats`` overrides the
    input normalization (a pretrained encoder should see inputs scaled the
    way it was trained); by default it is computed from ``train``.
    """
    cfg = (cfg or TrainConfig()).validate()
    if init not in ("random", "pretrained"):
        raise ArgumentError("init must be 'random' or 'pretrained'")
    if init == "pretrained" and encoder_state is None:
        raise ArgumentError("pretrained init requires encoder weights")
    if cfg.stage == "finetune-frozen" and init != "pretrained":
        raise ArgumentError("a frozen-encoder stage needs pretrained encoder weights")
    x, y = np.asarray(train[0]), np.asarray(train[1], np.int64)
    xv, yv = np.asarray(val[0]), np.asarray(val[1], np.int64)
    if y.shape != (x.shape[0],) + x.shape[2:] or yv.shape != (xv.shape[0],) + xv.shape[2:]:
        raise ShapeError("label maps must be (N, S, S) matching the patches")
    model.encoder.check_input(T.constant(x[:1]))
    classes = model.classes
    stats = stats or array_stats(x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cw = class_weights(np.bincount(y.ravel(), minlength=classes + 1)[1:classes + 1], cfg.mu)
    tr, va = (standardize(x, stats), y), (standardize(xv, stats), yv)
    stages = []
    if init == "random":
        stages.append(_fit(model, model.named_parameters(), tr, va, cw.per_label, cfg, cfg.lr, "finetune-joint"))
    else:
        model.encoder.load_state_dict(encoder_state, strict=True)
        enc_ids = {id(p) for p in model.encoder.named_parameters().values()}
        head = {k: p for k, p in model.named_parameters().items() if id(p) not in enc_ids}
        stages.append(_fit(model, head, tr, va, cw.per_label, cfg, cfg.lr, "finetune-frozen",
                           freeze=model.encoder))
        if cfg.stage != "finetune-frozen":
            stages.append(_fit(model, model.named_parameters(), tr, va, cw.per_label, cfg, cfg.joint_lr,
                               "finetune-joint", freeze=model.encoder if cfg.frozen_bn else None))
    return FinetuneResult(stages, stats, cw, init)


# -- metrics -----------------------------------------------------------------

@dataclass
class Evaluation:
    confusion: np.ndarray        # N x N, rows = truth class 1..N, cols = prediction
    per_class: np.ndarray        # nan where the class is absent from the truth
    aa: float
    oa: float

    @property
    def classes(self) -> int:
        return self.confusion.shape[0]

    def normalized(self) -> np.ndarray:
        rows = self.confusion.sum(1, keepdims=True)
        return np.divide(self.confusion, rows, out=np.zeros(self.confusion.shape), where=rows > 0)


def _as_labels(a):
    return a.labels if isinstance(a, LabelMap) else np.asarray(a)


def confusion_matrix(pred, truth, classes: int, valid=None) -> np.ndarray:
    p, t = _as_labels(pred), _as_labels(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    keep = t != BACKGROUND
    if valid is not None:
        if np.shape(valid) != t.shape:
            raise ShapeError("valid mask does not match the label maps")
        keep &= np.asarray(valid, bool)
    pk, tk = p[keep].astype(np.int64), t[keep].astype(np.int64)
    if tk.size and (tk.max() > classes or pk.min() < 1 or pk.max() > classes):
        raise ArgumentError(f"labels must lie in 1..{classes} on evaluated pixels")
    return np.bincount((tk - 1) * classes + (pk - 1), minlength=classes * classes).reshape(classes, classes)


def metrics_from_confusion(cm: np.ndarray) -> Evaluation:
    rows = cm.sum(1)
    total = int(rows.sum())
    if total == 0:
        raise ArgumentError("no labeled pixels to evaluate")
    diag = np.diag(cm)
    per_class = np.full(len(cm), np.nan)
    present = rows > 0
    per_class[present] = diag[present] / rows[present]
    return Evaluation(cm, per_class, float(per_class[present].mean()), float(diag.sum() / total))


def evaluate(pred, truth, classes: int | None = None, valid=None) -> Evaluation:
    """Confusion matrix, per-class accuracy, AA (present classes) and OA.

    Background and invalid pixels are excluded.
    """
    if classes is None:
        classes = truth.classes if isinstance(truth, LabelMap) else int(_as_labels(truth).max())
    return metrics_from_confusion(confusion_matrix(pred, truth, classes, valid))


# -- tiled prediction --------------------------------------------------------

def _center_weight(size: int) -> np.ndarray:
    """Tent weight, highest at the tile center, so central predictions win votes."""
    d = np.minimum(np.arange(size), np.arange(size)[::-1]) + 1.0
    return np.minimum.outer(d, d)


def predict_raster(model, raster: MultibandRaster, stats: ChannelStats, patch_size: int,
                   overlap: float = 0.5, batch: int = 32) -> LabelMap:
    """Segment a whole raster by overlapping tiles and center-weighted voting."""
    h, w = raster.height, raster.width
    s = patch_size
    if s > min(h, w):
        raise ArgumentError(f"patch size {s} exceeds raster {h}x{w}")
    stride = tile_stride(s, overlap)
    cells = [(r, c) for r in tile_positions(h, s, stride) for c in tile_positions(w, s, stride)]
    img = standardize(raster.values.transpose(2, 0, 1)[None], stats)[0]
    weight = _center_weight(s)
    votes = np.zeros((model.classes, h, w))
    model.eval()
    for i in range(0, len(cells), batch):
        chunk = cells[i:i + batch]
        xb = np.stack([img[:, r:r + s, c:c + s] for r, c in chunk])
        logits = _predict_logits(model, xb, batch)
        z = logits - logits.max(1, keepdims=True)
        prob = np.exp(z)
        prob /= prob.sum(1, keepdims=True)
        for (r, c), pr in zip(chunk, prob):
            votes[:, r:r + s, c:c + s] += pr * weight
    return LabelMap((votes.argmax(0) + 1).astype(np.uint8), model.classes)


# -- band subsets ------------------------------------------------------------

# band indices into the 490/550/680/720/800/900 nm sensor; CIR and VNIR-4 use 720 nm as NIR
BAND_PRESETS = {
    "rgb": (0, 1, 2),
    "nir": (3, 4, 5),
    "cir": (1, 2, 3),
    "vnir4": (0, 1, 2, 3),
    "all6": (0, 1, 2, 3, 4, 5),
}


def check_subset(subset, bands: int) -> tuple:
    idx = tuple(int(b) for b in subset)
    if not idx:
        raise ArgumentError("band subset is empty")
    if len(set(idx)) != len(idx):
        raise ArgumentError(f"duplicate band in subset {idx}")
    if min(idx) < 0 or max(idx) >= bands:
        raise ArgumentError(f"band subset {idx} outside 0..{bands - 1}")
    return tuple(sorted(idx))


@dataclass
class AblationRow:
    name: str
    bands: tuple
    evaluation: Evaluation


def band_ablation(train, test, subsets: dict | None = None, kind: str = "svm", spec=None, seed=0):
    """Train and score one baseline per band subset.

    ``train`` and ``test`` are lists of ``(MultibandRaster, LabelMap)``.
    Returns one :class:`AblationRow` per subset in the given order.
    """
    from .baselines import run_baseline

    subsets = subsets or BAND_PRESETS
    bands = train[0][0].bands
    rows = []
    for name, subset in subsets.items():
        idx = check_subset(subset, bands)
        tr = [(r.select_bands(idx), l) for r, l in train]
        te = [(r.select_bands(idx), l) for r, l in test]
        _, ev = run_baseline(kind, tr, te, spec, seed=seed)
        rows.append(AblationRow(name, idx, ev))
    return rows


def ablation_table(rows) -> str:
    lines = [f"{'subset':<8} {'bands':<14} {'AA%':>6} {'OA%':>6}"]
    for r in rows:
        lines.append(f"{r.name:<8} {','.join(map(str, r.bands)):<14} {100 * r.evaluation.aa:6.2f} "
                     f"{100 * r.evaluation.oa:6.2f}")
    return "\n".join(lines) + "\n"


# -- reports -----------------------------------------------------------------

def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.6f}"


def write_curves(path, results) -> None:
    """CSV ``stage,epoch,split,loss,oa`` over one or more TrainResults."""
    lines = ["stage,epoch,split,loss,oa"]
    for res in results:
        lines += [f"{res.stage},{e},{s},{_fmt(l)},{_fmt(o)}" for e, s, l, o in res.curve_rows()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_confusion(directory, ev: Evaluation, names=None) -> None:
    d = Path(directory)
    names = names or [str(i + 1) for i in range(ev.classes)]
    head = "truth\\pred," + ",".join(names)
    raw = [head] + [f"{names[i]}," + ",".join(str(int(v)) for v in row) for i, row in enumerate(ev.confusion)]
    norm = [head] + [f"{names[i]}," + ",".join(f"{v:.6f}" for v in row) for i, row in enumerate(ev.normalized())]
    (d / "confusion.csv").write_text("\n".join(raw) + "\n", encoding="utf-8")
    (d / "confusion_normalized.csv").write_text("\n".join(norm) + "\n", encoding="utf-8")


def metrics_text(ev: Evaluation, names=None) -> str:
    names = names or [str(i + 1) for i in range(ev.classes)]
    rows = ev.confusion.sum(1)
    lines = [f"{'class':<18} {'pixels':>9} {'acc%':>7}"]
    for i, name in enumerate(names):
        acc = "-" if rows[i] == 0 else f"{100 * ev.per_class[i]:.2f}"
        lines.append(f"{name:<18} {int(rows[i]):>9} {acc:>7}")
    lines.append(f"{'AA':<18} {'':>9} {100 * ev.aa:7.2f}")
    lines.append(f"{'OA':<18} {int(rows.sum()):>9} {100 * ev.oa:7.2f}")
    return "\n".join(lines) + "\n"


def metrics_kv(ev: Evaluation, extra: dict | None = None) -> str:
    out = {"aa": _fmt(ev.aa), "oa": _fmt(ev.oa), "classes": ev.classes,
           "present_classes": int((ev.confusion.sum(1) > 0).sum()),
           "pixels": int(ev.confusion.sum())}
    for i, acc in enumerate(ev.per_class):
        out[f"acc_{i + 1}"] = _fmt(float(acc))
    out.update(extra or {})
    return "".join(f"{k}: {v}\n" for k, v in out.items())


def write_metrics(directory, ev: Evaluation, names=None, extra=None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.txt").write_text(metrics_text(ev, names), encoding="utf-8")
    (d / "metrics.kv").write_text(metrics_kv(ev, extra), encoding="utf-8")
    write_confusion(d, ev, names)
