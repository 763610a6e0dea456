import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msiseg.errors import ArgumentError, ShapeError
from msiseg.models import EncoderSpec, PatchClassifier, SharpMaskHeadSpec, build_encoder, build_sharpmask
from msiseg.raster_io import LabelMap, MultibandRaster
from msiseg.trainer import (
    BAND_PRESETS, PlateauSchedule, TrainConfig, check_subset, class_weights, evaluate, finetune,
    metrics_from_confusion, predict_raster, pretrain, write_curves, write_metrics,
)

# -- class weights -----------------------------------------------------------

def test_equal_classes_weight_mu():
    cw = class_weights([7] * 10, 0.15)
    assert np.all(cw.weights == 0.15)


def test_single_class_weight_zero():
    assert class_weights([123], 0.25).weights.tolist() == [0.0]


def test_hand_weights():
    # calculator values: 0.25 * log10(1000 / h)
    cw = class_weights([10, 90, 900], 0.25)
    np.testing.assert_allclose(cw.weights, [0.5, 0.26143937264016875, 0.01143937264016875], rtol=0, atol=1e-12)


def test_zero_count_class_warns():
    with pytest.warns(UserWarning):
        cw = class_weights([5, 0, 5], 0.2)
    assert cw.weights[1] == 0 and cw.per_label[0] == 0 and len(cw.per_label) == 4


def test_all_zero_counts_rejected():
    with pytest.raises(ArgumentError):
        class_weights([0, 0], 0.1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 10 ** 7), min_size=1, max_size=20), st.floats(0.01, 2.0))
def test_weights_closed_form(counts, mu):
    cw = class_weights(counts, mu)
    total = sum(counts)
    for w, h in zip(cw.weights, counts):
        assert abs(w - mu * math.log10(total / h)) <= 1e-12
    assert np.all(cw.weights >= 0)


# -- schedule ----------------------------------------------------------------

def test_constant_loss_triggers_one_drop():
    s = PlateauSchedule(1e-2, patience=3)
    drops = [s.step(1.0) for _ in range(4)]
    assert drops == [False, False, False, True]
    assert s.lr == pytest.approx(1e-3) and s.drops == 1


def test_schedule_stops_after_max_drops():
    s = PlateauSchedule(1.0, patience=1, max_drops=4)
    for _ in range(20):
        s.step(5.0)
        if s.stopped:
            break
    assert s.stopped and s.drops == 4


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=80), st.integers(1, 5))
def test_schedule_monotone(losses, patience):
    s = PlateauSchedule(2e-3, patience=patience)
    lrs = []
    for v in losses:
        s.step(v)
        lrs.append(s.lr)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert len(set(lrs)) <= 5


def test_config_validation():
    with pytest.raises(ArgumentError):
        TrainConfig(max_drops=5).validate()
    with pytest.raises(ArgumentError):
        TrainConfig(lr=-1).validate()
    with pytest.raises(ArgumentError):
        TrainConfig(stage="other").validate()
    with pytest.raises(ArgumentError):
        TrainConfig(select="val_oa").validate()


# -- metrics -----------------------------------------------------------------

def test_perfect_prediction():
    t = np.array([[1, 2], [3, 3]])
    ev = evaluate(t, t, 3)
    assert ev.aa == 1.0 and ev.oa == 1.0
    assert np.array_equal(ev.confusion, np.diag([1, 1, 2]))


def test_hand_counted_two_class():
    ev = evaluate(np.array([1, 2, 2, 2])[None], np.array([1, 1, 2, 2])[None], 2)
    assert ev.per_class.tolist() == [0.5, 1.0]
    assert ev.aa == 0.75 and ev.oa == 0.75


def _oracle(pred, truth, n):
    cm = [[0] * n for _ in range(n)]
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if t:
            cm[t - 1][p - 1] += 1
    return np.array(cm)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_confusion_matches_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 6, (7, 9))
    pred = rng.integers(1, 6, (7, 9))
    ev = evaluate(pred, truth, 5) if (truth > 0).any() else None
    if ev is None:
        return
    assert np.array_equal(ev.confusion, _oracle(pred, truth, 5))
    assert np.array_equal(ev.confusion.sum(1), np.bincount(truth.ravel(), minlength=6)[1:])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_aa_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(1, 5, 50)
    pred = rng.integers(1, 5, 50)
    perm = np.concatenate([[0], rng.permutation(4) + 1])
    assert evaluate(pred, truth, 4).aa == pytest.approx(evaluate(perm[pred], perm[truth], 4).aa, abs=1e-12)


def test_background_and_invalid_excluded():
    truth = np.array([[0, 1, 2, 2]])
    pred = np.array([[2, 1, 1, 2]])
    valid = np.array([[True, True, False, True]])
    ev = evaluate(pred, truth, 2, valid)
    assert ev.confusion.sum() == 2 and ev.aa == 1.0


def test_absent_classes_skip_aa():
    ev = evaluate(np.array([1, 3, 3]), np.array([1, 1, 1]), 3)
    assert ev.aa == pytest.approx(1 / 3) and np.isnan(ev.per_class[1])


def test_metric_errors():
    with pytest.raises(ArgumentError):
        evaluate(np.ones((2, 2), int), np.zeros((2, 2), int), 2)
    with pytest.raises(ShapeError):
        evaluate(np.ones((2, 2), int), np.ones((2, 3), int), 2)
    with pytest.raises(ArgumentError):
        metrics_from_confusion(np.zeros((3, 3), int))


def test_label_map_inputs():
    truth = LabelMap(np.array([[1, 2]]), 2)
    ev = evaluate(LabelMap(np.array([[1, 1]]), 2), truth)
    assert ev.classes == 2 and ev.aa == 0.5


# -- pretraining -------------------------------------------------------------

TINY = EncoderSpec(2, (4, 8), (1, 1), 2, 4)


def _two_class(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(1, 3, n)
    x = rng.normal(size=(n, 2, 8, 8)).astype(np.float32) * 0.5
    x[:, 0] += np.where(y == 1, 2.0, -2.0)[:, None, None]
    return x, y


def test_pretrain_separable():
    clf = PatchClassifier(TINY, 2, np.random.default_rng(0))
    cfg = TrainConfig.pretraining(batch_size=16, max_epochs=20, seed=0)
    res = pretrain(clf, _two_class(96, 0), _two_class(48, 1), cfg)
    val_oa = [r.oa for r in res.train.history if r.split == "val"]
    assert max(val_oa) > 0.95 and res.train.epochs <= 20


def test_pretrain_zero_lr_keeps_parameters():
    clf = PatchClassifier(TINY, 2, np.random.default_rng(0))
    before = {k: v.values.copy() for k, v in clf.named_parameters().items()}
    pretrain(clf, _two_class(32, 0), _two_class(16, 1), TrainConfig.pretraining(batch_size=8, lr=0.0, max_epochs=1))
    for k, p in clf.named_parameters().items():
        assert np.array_equal(p.values, before[k]), k


def test_pretrain_deterministic():
    losses = []
    for _ in range(2):
        clf = PatchClassifier(TINY, 2, np.random.default_rng(3))
        res = pretrain(clf, _two_class(32, 0), _two_class(16, 1), TrainConfig.pretraining(batch_size=8, max_epochs=3))
        losses.append([r.loss for r in res.train.history])
    assert losses[0] == losses[1]


def test_pretrain_needs_two_classes():
    x, _ = _two_class(16, 0)
    clf = PatchClassifier(TINY, 2, np.random.default_rng(0))
    with pytest.raises(ArgumentError):
        pretrain(clf, (x, np.ones(16, int)), (x, np.ones(16, int)), TrainConfig.pretraining(batch_size=8))


# -- fine-tuning -------------------------------------------------------------

SEG_ENC = EncoderSpec(2, (4, 8), (1, 1), 2, 4)


def _seg_data(n, seed):
    rng = np.random.default_rng(seed)
    y = np.ones((n, 8, 8), np.int64)
    y[:, :, 4:] = 2
    x = rng.normal(size=(n, 2, 8, 8)).astype(np.float32) * 0.3
    x[:, 0] += np.where(y == 1, 1.0, -1.0)
    return x, y


def _seg_model(seed=0):
    return build_sharpmask(build_encoder(SEG_ENC, seed=seed), SharpMaskHeadSpec(4, 4), 2, seed=seed + 1)


def test_frozen_stage_keeps_encoder():
    clf = PatchClassifier(SEG_ENC, 2, np.random.default_rng(7))
    state = clf.encoder.state_dict()
    model = _seg_model()
    cfg = TrainConfig(batch_size=4, max_epochs=3, stage="finetune-frozen")
    finetune(model, _seg_data(8, 0), _seg_data(4, 1), cfg, "pretrained", state)
    for k, v in model.encoder.state_dict().items():
        assert np.array_equal(v, state[k]), k


def test_frozen_bn_keeps_encoder_statistics():
    clf = PatchClassifier(SEG_ENC, 2, np.random.default_rng(7))
    state = clf.encoder.state_dict()
    model = _seg_model()
    cfg = TrainConfig(batch_size=4, max_epochs=2, joint_lr=1e-2, frozen_bn=True)
    finetune(model, _seg_data(8, 0), _seg_data(4, 1), cfg, "pretrained", state)
    after = model.encoder.state_dict()
    running = [k for k in state if "running" in k]
    weights = [k for k in state if k.endswith("weight")]
    assert running and weights
    for k in running:
        assert np.array_equal(after[k], state[k]), k
    assert any(not np.array_equal(after[k], state[k]) for k in weights)


def test_frozen_needs_pretrained():
    cfg = TrainConfig(batch_size=4, max_epochs=1, stage="finetune-frozen")
    with pytest.raises(ArgumentError):
        finetune(_seg_model(), _seg_data(8, 0), _seg_data(4, 1), cfg, "random")
    with pytest.raises(ArgumentError):
        finetune(_seg_model(), _seg_data(8, 0), _seg_data(4, 1), TrainConfig(batch_size=4), "pretrained")


def test_two_stage_schedule():
    clf = PatchClassifier(SEG_ENC, 2, np.random.default_rng(7))
    cfg = TrainConfig(batch_size=4, max_epochs=2)
    res = finetune(_seg_model(), _seg_data(8, 0), _seg_data(4, 1), cfg, "pretrained", clf.encoder.state_dict())
    assert [s.stage for s in res.stages] == ["finetune-frozen", "finetune-joint"]
    assert res.stages[0].history[0].lr == 2e-3 and res.stages[1].history[0].lr == 2e-5


@pytest.mark.parametrize("select", ["val_aa", "val_loss", "last"])
def test_selection_restores_the_chosen_epoch(select):
    model = _seg_model()
    cfg = TrainConfig(batch_size=4, max_epochs=5, steps_per_epoch=2, select=select, patience=10)
    xv, yv = _seg_data(4, 1)
    res = finetune(model, _seg_data(8, 0), (xv, yv), cfg)
    st = res.stages[0]
    val = [r for r in st.history if r.split == "val"]
    if select == "last":
        want = len(val)
    else:
        key = (lambda r: r.aa) if select == "val_aa" else (lambda r: -r.loss)
        want = max(val, key=lambda r: (key(r), -r.epoch)).epoch
    assert st.best_epoch == want
    # the restored weights reproduce the recorded validation loss of that epoch
    from msiseg.trainer import _val_scores, standardize
    loss, oa, aa = _val_scores(model, standardize(xv, res.stats), yv, res.weights.per_label)
    assert math.isclose(loss, val[want - 1].loss, rel_tol=1e-5)
    assert aa == val[want - 1].aa


def test_finetune_learns_split_field():
    model = _seg_model()
    res = finetune(model, _seg_data(16, 0), _seg_data(8, 1), TrainConfig(batch_size=8, max_epochs=15,
                                                                         steps_per_epoch=4))
    assert max(r.oa for r in res.stages[0].history if r.split == "val") > 0.9


def test_finetune_shape_errors():
    x, y = _seg_data(4, 0)
    with pytest.raises(ShapeError):
        finetune(_seg_model(), (x, y[:, :4]), (x, y), TrainConfig(batch_size=4))
    with pytest.raises(ShapeError):
        finetune(_seg_model(), (x[:, :, :6, :6], y[:, :6, :6]), (x, y), TrainConfig(batch_size=4))


# -- tiled prediction --------------------------------------------------------

def test_predict_raster_covers_everything():
    model = _seg_model().eval()
    rng = np.random.default_rng(0)
    raster = MultibandRaster(rng.random((13, 21, 2)).astype(np.float32), np.ones((13, 21), bool), 50.0,
                             (500.0, 600.0))
    from msiseg.trainer import array_stats
    stats = array_stats(raster.values.transpose(2, 0, 1)[None])
    lab = predict_raster(model, raster, stats, 8)
    assert lab.shape == (13, 21) and lab.labels.min() >= 1 and lab.labels.max() <= 2
    with pytest.raises(ArgumentError):
        predict_raster(model, raster, stats, 16)


# -- band subsets ------------------------------------------------------------

def test_band_presets():
    assert BAND_PRESETS["rgb"] == (0, 1, 2) and BAND_PRESETS["all6"] == tuple(range(6))
    assert len(BAND_PRESETS["vnir4"]) == 4 and 3 in BAND_PRESETS["cir"]


def test_subset_validation():
    with pytest.raises(ArgumentError):
        check_subset((), 6)
    with pytest.raises(ArgumentError):
        check_subset((1, 1, 2), 6)
    with pytest.raises(ArgumentError):
        check_subset((0, 6), 6)
    assert check_subset((3, 0), 6) == (0, 3)


# -- reports -----------------------------------------------------------------

def test_reports_written(tmp_path):
    ev = evaluate(np.array([1, 2, 2, 2]), np.array([1, 1, 2, 2]), 2)
    write_metrics(tmp_path, ev, ["a", "b"])
    kv = dict(line.split(": ") for line in (tmp_path / "metrics.kv").read_text().splitlines())
    assert float(kv["aa"]) == 0.75
    rows = (tmp_path / "confusion.csv").read_text().splitlines()
    assert rows[1] == "a,1,1" and rows[2] == "b,0,2"
    assert (tmp_path / "confusion_normalized.csv").read_text().splitlines()[1] == "a,0.500000,0.500000"
    clf = PatchClassifier(TINY, 2, np.random.default_rng(0))
    res = pretrain(clf, _two_class(16, 0), _two_class(8, 1), TrainConfig.pretraining(batch_size=8, max_epochs=2))
    write_curves(tmp_path / "curves.csv", [res.train])
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "stage,epoch,split,loss,oa" and len(lines) == 5
