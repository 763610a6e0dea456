"""Bundled fixed-seed toy benchmarks.

``transfer``: patch-classification pretraining on procedural scenes, then
segmentation fine-tuning on a few labeled "real-like" scenes whose materials
are perturbed copies of the synthetic ones, scored on held-out real-like
scenes.

``vegetation``: vegetation-dominated scenes under one illumination (a single
flight) for per-pixel baselines and band ablation.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .models import (EncoderSpec, PatchClassifier, RefineNetHeadSpec, SharpMaskHeadSpec, build_encoder,
                     build_refinenet, build_sharpmask)
from .raster_io import BACKGROUND, majority_label
from .synth import (Region, RenderConfig, SceneSpec, build_pretrain_dataset, default_palette,
                    random_scene, render, tile_flight)
from .trainer import TrainConfig, confusion_matrix, finetune, metrics_from_confusion, predict_raster, pretrain

TRANSFER_CLASSES = ("tree", "building", "vehicle", "rocks", "low-vegetation", "grass", "sand", "water-lake",
                    "asphalt", "orange-pad")
VEGETATION_CLASSES = ("tree", "low-vegetation", "grass", "sand", "water-lake", "asphalt", "rocks", "building")


def subset_palette(names) -> dict:
    """Materials for ``names`` renumbered 1..len(names) in the given order."""
    full = {m.name: m for m in default_palette().values()}
    return {i + 1: replace(full[n], class_id=i + 1) for i, n in enumerate(names)}


def perturbed_palette(palette: dict, seed: int, spread: float = 0.15) -> dict:
    """Per-band multiplicative reflectance jitter: same classes, shifted spectra."""
    rng = np.random.default_rng([seed, 29])
    out = {}
    for k in sorted(palette):
        m = palette[k]
        f = rng.uniform(1 - spread, 1 + spread, len(m.reflectance))
        refl = tuple(float(v) for v in np.clip(np.asarray(m.reflectance) * f, 0.0, 1.0))
        out[k] = replace(m, reflectance=refl, texture_scale=min(1.0, m.texture_scale * 1.3))
    return out


def fixed_light(scene: SceneSpec, elevation=55.0) -> SceneSpec:
    """One flight: every scene shares the sun angle and a flat irradiance."""
    return replace(scene, solar_elevation_deg=elevation, irradiance=(1.0,) * len(scene.irradiance),
                   season="summer")


def segmentation_patches(pairs, size: int, overlap: float = 0.5):
    """(N, C, S, S) patches and (N, S, S) label maps tiled from raster/label pairs."""
    xs, ys = [], []
    for raster, labels in pairs:
        for p in tile_flight(raster, labels, size, overlap):
            if majority_label(p.labels) == BACKGROUND:
                continue
            xs.append(p.values.transpose(2, 0, 1))
            ys.append(p.labels.astype(np.int64))
    return np.asarray(xs, np.float32), np.asarray(ys, np.int64)


# -- transfer benchmark ------------------------------------------------------

@dataclass
class TransferConfig:
    classes: tuple = TRANSFER_CLASSES
    encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec(5, (8, 16, 16, 32, 32), (1,) * 5, 6, 8))
    sharpmask: SharpMaskHeadSpec = field(default_factory=lambda: SharpMaskHeadSpec(16, 16))
    refinenet: RefineNetHeadSpec = field(default_factory=lambda: RefineNetHeadSpec(8, 1))
    sharpmask_levels: int = 4        # macro-layers each head reads from the pretrained encoder
    refinenet_levels: int = 4        # the fifth level is 1x1 at this patch size
    patch: int = 32
    pretrain_scenes: int = 24
    pretrain_extent: float = 64.0
    pretrain_gsds: tuple = (0.5, 1.0)
    pretrain_max: int = 2000
    real_extent: float = 64.0
    real_gsd: float = 1.0
    real_train_scenes: int = 1
    real_val_scenes: int = 1
    real_test_scenes: int = 2
    pretrain_cfg: TrainConfig = field(default_factory=lambda: TrainConfig.pretraining(
        batch_size=32, max_epochs=30, patience=2, steps_per_epoch=40))
    finetune_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=8, max_epochs=40, patience=3, steps_per_epoch=20, joint_lr=1e-3))


@dataclass
class TransferData:
    pretrain_train: tuple
    pretrain_val: tuple
    train: tuple
    val: tuple
    test: list                # [(MultibandRaster, LabelMap)]
    classes: int


def make_transfer_data(seed: int, cfg: TransferConfig | None = None) -> TransferData:
    cfg = cfg or TransferConfig()
    pal = subset_palette(cfg.classes)
    ext = (cfg.pretrain_extent,) * 2
    scenes = [random_scene(1000 * seed + s, ext, pal, n_medium=4, n_objects=10) for s in range(cfg.pretrain_scenes)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = build_pretrain_dataset(scenes, [RenderConfig(g) for g in cfg.pretrain_gsds], cfg.patch,
                                    val_fraction=0.25, max_train=cfg.pretrain_max,
                                    max_val=cfg.pretrain_max // 4, seed=seed)
    real_pal = perturbed_palette(pal, seed)
    n_real = cfg.real_train_scenes + cfg.real_val_scenes + cfg.real_test_scenes
    rext = (cfg.real_extent,) * 2
    real = [render(fixed_light(random_scene(1000 * seed + 500 + s, rext, real_pal, n_medium=6, n_objects=16)),
                   RenderConfig(cfg.real_gsd)) for s in range(n_real)]
    a, b = cfg.real_train_scenes, cfg.real_train_scenes + cfg.real_val_scenes
    return TransferData(ds.arrays("train"), ds.arrays("val"), segmentation_patches(real[:a], cfg.patch),
                        segmentation_patches(real[a:b], cfg.patch), real[b:], len(pal))


def _score(model, stats, test, patch):
    cm = sum(confusion_matrix(predict_raster(model, r, stats, patch), l, model.classes, r.valid_mask)
             for r, l in test)
    return metrics_from_confusion(cm)


def run_transfer(seed: int, cfg: TransferConfig | None = None, data: TransferData | None = None,
                 log=None) -> dict:
    """AA per (head, init) on one seed; keys like ``('refinenet', 'pretrained')``."""
    cfg = cfg or TransferConfig()
    data = data or make_transfer_data(seed, cfg)
    log = log or (lambda msg: None)
    t0 = time.time()
    clf = PatchClassifier(cfg.encoder, data.classes, np.random.default_rng([seed, 1]))
    pre = pretrain(clf, data.pretrain_train, data.pretrain_val, replace(cfg.pretrain_cfg, seed=seed))
    state = clf.encoder.state_dict()
    log(f"seed {seed}: pretrain {pre.train.epochs} epochs, val loss {pre.train.best_loss:.4f} "
        f"({time.time() - t0:.0f}s)")
    out = {"pretrain_val_oa": max(r.oa for r in pre.train.history if r.split == "val")}
    heads = {
        "sharpmask": lambda s: build_sharpmask(build_encoder(cfg.encoder.truncated(cfg.sharpmask_levels), seed=s),
                                               cfg.sharpmask, data.classes, seed=s + 1),
        "refinenet": lambda s: build_refinenet(build_encoder(cfg.encoder.truncated(cfg.refinenet_levels), seed=s),
                                               cfg.refinenet, data.classes, seed=s + 1),
    }
    for head, build in heads.items():
        for init in ("random", "pretrained"):
            model = build(seed)
            res = finetune(model, data.train, data.val, replace(cfg.finetune_cfg, seed=seed), init,
                           state if init == "pretrained" else None)
            ev = _score(model, res.stats, data.test, cfg.patch)
            out[(head, init)] = ev.aa
            log(f"seed {seed}: {head:<9} {init:<10} AA {100 * ev.aa:5.1f}  OA {100 * ev.oa:5.1f} "
                f"({time.time() - t0:.0f}s)")
    return out


def transfer_verdict(results: list) -> dict:
    """Majority vote over seeds of the two directional claims."""
    gain = lambda r, h: r[(h, "pretrained")] - r[(h, "random")]
    both = [gain(r, "sharpmask") >= 0 and gain(r, "refinenet") >= 0 for r in results]
    wider = [gain(r, "refinenet") >= gain(r, "sharpmask") for r in results]
    need = len(results) // 2 + 1
    return {"pretrained_helps": sum(both) >= need, "refinenet_gap_larger": sum(wider) >= need,
            "votes_helps": sum(both), "votes_gap": sum(wider)}


# -- vegetation benchmark ----------------------------------------------------

def vegetation_scene(seed: int, extent=48.0, palette=None) -> SceneSpec:
    """Grass field with tree stands, low vegetation, sand, water, a road, rocks and a building."""
    pal = palette or subset_palette(VEGETATION_CLASSES)
    ids = {m.name: k for k, m in pal.items()}
    rng = np.random.default_rng([seed, 41])
    E = float(extent)
    regions = [Region("rect", ids["grass"], (0.0, 0.0, E, E))]
    for name, count, lo, hi in (("low-vegetation", 3, 0.12, 0.25), ("tree", 4, 0.08, 0.18),
                                ("sand", 1, 0.10, 0.2), ("water-lake", 1, 0.10, 0.2)):
        for _ in range(count):
            regions.append(Region("blob", ids[name], (float(rng.uniform(0, E)), float(rng.uniform(0, E)),
                                                      float(rng.uniform(lo, hi) * E), 0.5,
                                                      int(rng.integers(1 << 30)))))
    y = float(rng.uniform(0.2, 0.8) * E)
    regions.append(Region("rect", ids["asphalt"], (0.0, y, E, y + 0.06 * E)))
    for _ in range(3):
        cx, cy = float(rng.uniform(0, E)), float(rng.uniform(0, E))
        regions.append(Region("ellipse", ids["rocks"], (cx, cy, 0.03 * E, 0.02 * E)))
    bx, by = float(rng.uniform(0, 0.8 * E)), float(rng.uniform(0, 0.8 * E))
    regions.append(Region("rect", ids["building"], (bx, by, bx + 0.1 * E, by + 0.08 * E)))
    return SceneSpec((E, E), regions, 55.0, (1.0,) * 6, "summer", seed, pal)


def vegetation_data(seed: int = 0, train_scenes=2, test_scenes=1, extent=48.0, gsd=0.5):
    """(train, test) lists of rendered (raster, labels) pairs from disjoint scene seeds."""
    pairs = [render(vegetation_scene(100 * seed + s, extent), RenderConfig(gsd))
             for s in range(train_scenes + test_scenes)]
    return pairs[:train_scenes], pairs[train_scenes:]


__all__ = [
    "TRANSFER_CLASSES", "TransferConfig", "TransferData", "VEGETATION_CLASSES", "fixed_light",
    "make_transfer_data", "perturbed_palette", "run_transfer", "segmentation_patches", "subset_palette",
    "transfer_verdict", "vegetation_data", "vegetation_scene",
]
