import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msiseg.errors import ArgumentError, FormatError
from msiseg.raster_io import MultibandRaster
from msiseg.synth import (
    MaterialSpec, Region, RenderConfig, SceneSpec, build_pretrain_dataset, default_palette, dump_scene,
    load_dataset, parse_scene, random_scene, render, save_dataset, tile_flight, tile_stride,
)

FLAT = MaterialSpec(1, "flat", (0.4, 0.2, 0.1, 0.3, 0.5, 0.6), texture_scale=0.0)


def flat_scene(material=FLAT, extent=(16.0, 16.0), seed=0, elevation=30.0, irradiance=(2.0, 1.0, 1.0, 1.0, 1.0, 4.0)):
    return SceneSpec(extent, [Region("rect", material.class_id, (0, 0) + extent)], elevation, irradiance,
                     "summer", seed, {material.class_id: material})


# -- render ------------------------------------------------------------------

def test_closed_form_radiance():
    raster, labels = render(flat_scene(), RenderConfig(gsd=1.0, noise_sigma=0.0))
    # cos(zenith) at 30 deg elevation is 0.5
    expected = np.array([2.0 * 0.5 * 0.4, 0.5 * 0.2, 0.5 * 0.1, 0.5 * 0.3, 0.5 * 0.5, 4.0 * 0.5 * 0.6], np.float32)
    assert raster.values.shape == (16, 16, 6)
    assert np.all(raster.values == expected)
    assert np.all(labels.labels == 1)


def test_render_deterministic():
    scene = random_scene(7)
    a, la = render(scene, RenderConfig(gsd=0.5))
    b, lb = render(scene, RenderConfig(gsd=0.5))
    assert a.values.tobytes() == b.values.tobytes()
    assert np.array_equal(la.labels, lb.labels)


def test_render_different_seed_changes_noise():
    a, _ = render(flat_scene(seed=1), RenderConfig(gsd=1.0))
    b, _ = render(flat_scene(seed=2), RenderConfig(gsd=1.0))
    assert not np.array_equal(a.values, b.values)


def test_zero_reflectance_scene():
    black = MaterialSpec(3, "black", (0.0,) * 6, texture_scale=0.5)
    scene = SceneSpec((20.0, 20.0), [Region("rect", 3, (0, 0, 20, 10))], 45, (1.0,) * 6, "summer", 0,
                      {3: black})
    raster, labels = render(scene, RenderConfig(gsd=1.0, noise_sigma=0.0))
    assert np.all(raster.values[:10] == 0)
    assert np.all(labels.labels[:10] == 3) and np.all(labels.labels[10:] == 0)


def test_render_errors():
    with pytest.raises(ArgumentError):
        render(SceneSpec((16.0, 16.0), [], materials={1: FLAT}), RenderConfig(gsd=1.0))
    with pytest.raises(ArgumentError):
        render(flat_scene(extent=(10.0, 10.0)), RenderConfig(gsd=1.0))
    with pytest.raises(ArgumentError):
        MaterialSpec(1, "bad", (1.2,))
    with pytest.raises(ArgumentError):
        RenderConfig(overlap=1.0)


def test_topmost_region_wins():
    mats = default_palette()
    scene = SceneSpec((16.0, 16.0), [Region("rect", 14, (0, 0, 16, 16)), Region("rect", 2, (4, 4, 8, 8))],
                      materials=mats)
    _, labels = render(scene, RenderConfig(gsd=1.0))
    assert np.all(labels.labels[4:8, 4:8] == 2)
    assert (labels.labels == 14).sum() == 256 - 16


def test_class_means_match_closed_form():
    mats = {k: replace(m, texture_scale=0.0) for k, m in default_palette().items()}
    scene = SceneSpec((32.0, 32.0), [Region("rect", 14, (0, 0, 32, 32)), Region("ellipse", 16, (16, 16, 8, 6))],
                      50.0, (1.0, 1.1, 1.2, 1.3, 1.4, 1.5), "summer", 4, mats)
    cfg = RenderConfig(gsd=0.5, noise_sigma=0.01)
    raster, labels = render(scene, cfg)
    scale = np.array(scene.irradiance) * math.sin(math.radians(50.0))
    for cid in (14, 16):
        sel = labels.labels == cid
        mean = raster.values[sel].astype(np.float64).mean(0)
        expected = scale * np.array(mats[cid].reflectance)
        sigma = cfg.noise_sigma * scale
        # 5 standard errors; clipping at zero only matters when radiance ~ sigma (not the case here)
        assert np.all(np.abs(mean - expected) < 5 * sigma / math.sqrt(sel.sum()) + 1e-6)


def test_multi_gsd_consistency():
    scene = random_scene(11)
    fine_r, fine_l = render(scene, RenderConfig(gsd=0.5))
    coarse_r, coarse_l = render(scene, RenderConfig(gsd=1.0))
    assert abs(coarse_r.height - fine_r.height / 2) <= 1 and abs(coarse_r.width - fine_r.width / 2) <= 1
    f = np.bincount(fine_l.labels.ravel(), minlength=19) / fine_l.labels.size
    c = np.bincount(coarse_l.labels.ravel(), minlength=19) / coarse_l.labels.size
    assert np.all(np.abs(f - c) < 0.02)


# -- tiling ------------------------------------------------------------------

def _raster(h, w):
    return MultibandRaster(np.zeros((h, w, 1), np.float32), np.ones((h, w), bool), 1.0, (500.0,))


def test_tile_zero_overlap_disjoint_grid():
    ps = tile_flight(_raster(12, 12), None, 4, 0.0)
    assert ps.stride == 4 and len(ps) == 9
    count = np.zeros((12, 12), int)
    for p in ps:
        count[p.row:p.row + 4, p.col:p.col + 4] += 1
    assert np.all(count == 1)


def test_tile_stride_arithmetic():
    assert tile_stride(80, 0.5) == 40
    assert tile_stride(3, 0.9) == 1
    assert tile_flight(_raster(160, 160), None, 80, 0.5).stride == 40


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 40), w=st.integers(1, 40), size=st.integers(1, 20), overlap=st.floats(0, 0.95))
def test_tile_coverage(h, w, size, overlap):
    if size > min(h, w):
        with pytest.raises(ArgumentError):
            tile_flight(_raster(h, w), None, size, overlap)
        return
    ps = tile_flight(_raster(h, w), None, size, overlap)
    covered = np.zeros((h, w), bool)
    for p in ps:
        assert 0 <= p.row <= h - size and 0 <= p.col <= w - size
        covered[p.row:p.row + size, p.col:p.col + size] = True
    # every pixel belongs to at least one patch
    assert all(covered[i, j] for i in range(h) for j in range(w))


# -- pretraining dataset -----------------------------------------------------

def _one_class_scenes():
    mats = default_palette()
    return [SceneSpec((16.0, 16.0), [Region("rect", c, (0, 0, 16, 16))], seed=c, materials=mats)
            for c in (2, 5, 9)]


def test_single_class_scenes_label_every_patch():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = build_pretrain_dataset(_one_class_scenes(), [RenderConfig(gsd=1.0, overlap=0.0)], 8,
                                    val_fraction=0.34)
    assert ds.train_seeds == (2, 5) and ds.val_seeds == (9,)
    for e in ds.index:
        assert e.label == ds.sources[e.source][2].labels[0, 0]
    assert list(ds.histogram("train")[[2, 5]]) == [4, 4]


def test_absent_class_warns():
    with pytest.warns(UserWarning, match="absent"):
        build_pretrain_dataset(_one_class_scenes(), [RenderConfig(gsd=1.0)], 8)


def test_needs_two_scenes():
    with pytest.raises(ArgumentError):
        build_pretrain_dataset(_one_class_scenes()[:1], [RenderConfig(gsd=1.0)], 8)


def _small_dataset():
    scenes = [random_scene(s, extent=(24.0, 24.0), n_medium=3, n_objects=6) for s in range(4)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_pretrain_dataset(scenes, [RenderConfig(0.5), RenderConfig(1.0)], 16, val_fraction=0.25)


def test_dataset_rebuild_identical():
    a, b = _small_dataset(), _small_dataset()
    assert np.array_equal(a.histogram(), b.histogram())
    assert np.array_equal(a.arrays("train")[0], b.arrays("train")[0])


def test_histogram_recount_and_disjoint_seeds():
    ds = _small_dataset()
    counts = {}
    for e in ds.entries("train"):
        window = ds.sources[e.source][2].labels[e.row:e.row + 16, e.col:e.col + 16]
        tally = {}
        for v in window.ravel().tolist():
            if v:
                tally[v] = tally.get(v, 0) + 1
        top = max(tally.values())
        lab = min(k for k, v in tally.items() if v == top)
        assert lab == e.label
        counts[lab] = counts.get(lab, 0) + 1
    hist = ds.histogram("train")
    assert {k: int(hist[k]) for k in counts} == counts and hist.sum() == sum(counts.values())
    assert not set(ds.train_seeds) & set(ds.val_seeds)


def test_dataset_save_load_roundtrip(tmp_path):
    ds = _small_dataset()
    save_dataset(tmp_path / "ds", ds)
    back = load_dataset(tmp_path / "ds")
    for split in ("train", "val"):
        xa, ya = ds.arrays(split)
        xb, yb = back.arrays(split)
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    assert back.train_seeds == ds.train_seeds and back.val_seeds == ds.val_seeds


# -- scene files -------------------------------------------------------------

def test_scene_text_roundtrip():
    scene = random_scene(3)
    back = parse_scene(dump_scene(scene))
    assert back.regions == scene.regions
    assert back.extent == scene.extent and back.irradiance == scene.irradiance
    assert back.solar_elevation_deg == scene.solar_elevation_deg and back.seed == scene.seed
    a, _ = render(scene, RenderConfig(gsd=1.0))
    b, _ = render(back, RenderConfig(gsd=1.0))
    assert a.values.tobytes() == b.values.tobytes()


def test_scene_text_errors():
    with pytest.raises(FormatError):
        parse_scene("extent: 16,16\nbogus: 1\n[region]\nshape: rect\nclass_id: 1\nparams: 0,0,1,1\n")
    with pytest.raises(FormatError):
        parse_scene("extent: 16,16\n[region]\nshape: rect\nclass_id: 1\n")
    with pytest.raises(ArgumentError):
        parse_scene("extent: 16,16\n")
