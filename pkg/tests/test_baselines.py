import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msiseg.baselines import (BaselineSpec, FilterBank, KnnSpec, MicaSpec, MlpSpec, ScaeSpec, SvmSpec, box_mean,
                              fastica, fit_baseline, fit_whitener, knn_fit, knn_predict, load_pipeline,
                              meanpool_preprocess, mica_features, mica_fit, mlp_fit, run_baseline, sample_pixels,
                              svm_fit, wpca_fit)
from msiseg.errors import ArgumentError, ConvergenceError
from msiseg.raster_io import LabelMap, MultibandRaster

BANDS = (490.0, 550.0, 680.0, 720.0, 800.0, 900.0)


def toy_pair(seed=0, size=24, noise=0.05):
    """Three spectrally distinct classes in vertical stripes."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(size) * 3 // size + 1, size).reshape(size, size).T
    spectra = np.array([[0.1, 0.2, 0.1, 0.3, 0.5, 0.5],
                        [0.3, 0.3, 0.3, 0.3, 0.3, 0.3],
                        [0.05, 0.05, 0.04, 0.03, 0.02, 0.02]])
    v = np.clip(spectra[labels - 1] + rng.normal(0, noise, (size, size, 6)), 0, None)
    return MultibandRaster(v.astype(np.float32), np.ones((size, size), bool), 10.0, BANDS), LabelMap(labels, 3)


# -- kNN ---------------------------------------------------------------------

def test_knn_exact_point():
    x = np.array([[0.0, 0], [1, 1], [5, 5]])
    y = np.array([1, 2, 3])
    assert knn_predict(x, y, x[[2, 0]], 1).tolist() == [3, 1]


def test_knn_k_equals_n_majority():
    x = np.arange(7.0)[:, None]
    y = np.array([1, 2, 2, 3, 2, 1, 3])
    assert (knn_predict(x, y, np.array([[-10.0], [3.0], [99.0]]), 7) == 2).all()


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3))
    y = rng.integers(1, 4, 50)
    q = rng.normal(size=(30, 3))
    got = knn_predict(x, y, q, 3)
    for qi, g in zip(q, got):
        d = [float(np.sum((qi - xi) ** 2)) for xi in x]
        nn = sorted(range(50), key=lambda i: (d[i], i))[:3]
        votes = [int(y[i]) for i in nn]
        best = max(range(1, 4), key=lambda c: (votes.count(c), -c))
        assert g == best


def test_knn_tie_goes_to_smallest_class():
    x = np.array([[-1.0], [1.0]])
    assert knn_predict(x, np.array([2, 1]), np.array([[0.0]]), 2).tolist() == [1]


def test_knn_errors():
    with pytest.raises(ArgumentError):
        knn_predict(np.zeros((3, 2)), np.ones(3, int), np.zeros((1, 2)), 4)
    with pytest.raises(ArgumentError):
        KnnSpec(16).validate()
    with pytest.raises(ArgumentError):
        knn_fit(np.zeros((0, 2)), np.zeros(0, int))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(0, 1000))
def test_knn_k1_zero_training_error(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = rng.integers(1, 5, n)
    assert np.array_equal(knn_predict(x, y, x, 1), y)


# -- SVM ---------------------------------------------------------------------

def separable(seed=0, n=100):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    x[:, 0] += np.where(np.arange(n) < n // 2, -3, 3)
    y = np.where(np.arange(n) < n // 2, 1, 2)
    return x, y


def test_svm_separable():
    x, y = separable()
    m = svm_fit(x, y, SvmSpec(C=10, epochs=30))
    assert (m.predict(x) == y).all()


def test_svm_zero_feature_weight():
    x, y = separable(1)
    x = np.hstack([x, np.zeros((len(x), 1))])
    m = svm_fit(x, y)
    assert np.all(m.weights[:, 2] == 0)


def test_svm_zero_channel_invariance():
    x, y = separable(2)
    q = np.random.default_rng(3).normal(size=(40, 2)) * 3
    a = svm_fit(x, y, SvmSpec(seed=4)).predict(q)
    b = svm_fit(np.hstack([x, np.zeros((len(x), 1))]), y, SvmSpec(seed=4)).predict(
        np.hstack([q, np.zeros((40, 1))]))
    assert np.array_equal(a, b)


def test_svm_scaled_weights_same_argmax():
    x, y = separable(5)
    m = svm_fit(x, y, SvmSpec(class_weights=np.array([1.0, 1.0])))
    scaled = m.decision_function(x) * 2.0
    assert np.array_equal(scaled.argmax(1) + 1, m.predict(x))


def test_svm_single_class_rejected():
    with pytest.raises(ArgumentError):
        svm_fit(np.zeros((5, 2)), np.ones(5, int))
    with pytest.raises(ArgumentError):
        SvmSpec(C=0).validate()


def test_svm_one_machine_per_class():
    x = np.random.default_rng(6).normal(size=(60, 3))
    y = np.tile([1, 2, 4], 20)
    assert svm_fit(x, y).weights.shape == (4, 4)


# -- MLP ---------------------------------------------------------------------

def xor_data(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, 2))
    x = x[np.abs(x).min(1) > 0.1]
    return x, np.where(x[:, 0] * x[:, 1] > 0, 1, 2)


def test_mlp_xor():
    x, y = xor_data()
    m = mlp_fit(x, y, MlpSpec(hidden=32, epochs=300, batch_size=64, lr=1e-2))
    assert np.mean(m.predict(x) == y) > 0.95


def test_mlp_rejects_zero_hidden():
    with pytest.raises(ArgumentError):
        MlpSpec(hidden=0).validate()
    with pytest.raises(ArgumentError):
        mlp_fit(np.zeros((4, 2)), np.ones(4, int))


def test_mlp_deterministic():
    x, y = xor_data(100)
    a = mlp_fit(x, y, MlpSpec(epochs=3, batch_size=16)).to_arrays()
    b = mlp_fit(x, y, MlpSpec(epochs=3, batch_size=16)).to_arrays()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


# -- mean pooling ------------------------------------------------------------

def test_meanpool_constant_unchanged():
    r = MultibandRaster(np.full((9, 11, 2), 3.5, np.float32), np.ones((9, 11), bool), 5.0, (550.0, 680.0))
    assert np.allclose(meanpool_preprocess(r).values, 3.5)


def test_meanpool_bright_pixel():
    v = np.zeros((15, 15, 1))
    v[7, 7] = 25.0
    out = box_mean(v, 5)[..., 0]
    assert np.allclose(out[5:10, 5:10], 1.0)
    assert np.count_nonzero(out) == 25


def loop_pool(v, window, valid=None):
    h, w, c = v.shape
    r = window // 2
    valid = np.ones((h, w), bool) if valid is None else valid
    out = np.zeros_like(v, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc, n = np.zeros(c), 0
            for a in range(max(0, i - r), min(h, i + r + 1)):
                for b in range(max(0, j - r), min(w, j + r + 1)):
                    if valid[a, b]:
                        acc += v[a, b]
                        n += 1
            out[i, j] = acc / n if n else 0.0
    return out


def test_meanpool_loop_oracle():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(10, 13, 3))
    valid = rng.random((10, 13)) > 0.2
    assert np.allclose(box_mean(v, 5), loop_pool(v, 5), atol=1e-12)
    assert np.allclose(box_mean(v, 5, valid), loop_pool(v, 5, valid), atol=1e-12)


def test_meanpool_even_window_rejected():
    with pytest.raises(ArgumentError):
        box_mean(np.zeros((4, 4, 1)), 4)


# -- whitening / ICA ---------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_whitened_covariance_identity(seed, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(400, d)) @ rng.normal(size=(d, d)) + rng.normal(size=d)
    z = fit_whitener(x).transform(x)
    assert np.abs(np.cov(z, rowvar=False, bias=True) - np.eye(d)).max() < 1e-4


def test_whitener_of_white_data_is_orthogonal():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5000, 3))
    # exact whitening of the sample first, then the fitted transform is a rotation
    x = fit_whitener(x).transform(x)
    w = fit_whitener(x).matrix
    assert np.abs(w @ w.T - np.eye(3)).max() < 1e-4


def test_fastica_recovers_sources():
    rng = np.random.default_rng(2)
    s = rng.uniform(-1, 1, (4000, 2))
    a = np.array([[1.0, 0.6], [0.4, 1.0]])
    x = s @ a.T
    wh = fit_whitener(x)
    rec = wh.transform(x) @ fastica(wh.transform(x)).T
    corr = np.abs(np.corrcoef(rec.T, s.T)[:2, 2:])
    assert (corr.max(1) > 0.99).all()
    assert sorted(corr.argmax(1)) == [0, 1]


def test_fastica_convergence_error():
    z = np.random.default_rng(3).normal(size=(200, 3))
    with pytest.raises(ConvergenceError) as info:
        fastica(z, max_iter=1, tol=1e-15)
    assert info.value.iterations == 1 and len(info.value.history) == 1


def test_mica_filters_unit_norm():
    r, _ = toy_pair(4)
    bank = mica_fit([r], MicaSpec(filters=6, filter_size=3, samples=300))
    assert bank.filters.shape == (6, 6, 3, 3)
    assert np.allclose(np.linalg.norm(bank.filters.reshape(6, -1), axis=1), 1.0)


def test_mica_spec_validation():
    with pytest.raises(ArgumentError):
        MicaSpec(filter_size=4).validate()
    with pytest.raises(ArgumentError):
        MicaSpec(filters=64, samples=100).validate()


def test_mica_features_zero_raster():
    bank = FilterBank(np.random.default_rng(5).normal(size=(3, 2, 3, 3)))
    assert np.all(mica_features(np.zeros((8, 8, 2)), bank, 3) == 0)


def test_mica_features_delta_filter():
    v = np.random.default_rng(6).normal(size=(9, 9, 1))
    f = np.zeros((1, 1, 3, 3))
    f[0, 0, 1, 1] = 1.0
    assert np.allclose(mica_features(v, FilterBank(f), 5), box_mean(np.abs(v), 5))


def test_mica_features_loop_oracle():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(7, 8, 2))
    f = rng.normal(size=(2, 2, 3, 3))
    resp = np.zeros((7, 8, 2))
    pad = np.pad(v, ((1, 1), (1, 1), (0, 0)))
    for o in range(2):
        for i in range(7):
            for j in range(8):
                resp[i, j, o] = sum(f[o, c, a, b] * pad[i + a, j + b, c]
                                    for c in range(2) for a in range(3) for b in range(3))
    assert np.allclose(mica_features(v, FilterBank(f), 3), loop_pool(np.abs(resp), 3), atol=1e-10)


# -- WPCA --------------------------------------------------------------------

def test_wpca_single_axis():
    x = np.zeros((100, 4))
    x[:, 0] = np.random.default_rng(8).normal(size=100)
    assert wpca_fit(x, 0.99).components == 1


def test_wpca_identity_covariance_and_retained_oracle():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(500, 6)) * np.array([5, 3, 2, 1, 0.1, 0.01])
    w = wpca_fit(x, 0.99)
    z = w.transform(x)
    assert np.abs(np.cov(z, rowvar=False, bias=True) - np.eye(w.components)).max() < 1e-3
    ev = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False, bias=True)))[::-1]
    frac = np.cumsum(ev) / ev.sum()
    assert w.components == int(np.argmax(frac >= 0.99)) + 1
    assert abs(w.retained() - frac[w.components - 1]) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.floats(0.05, 0.9), st.floats(0.05, 0.1))
def test_wpca_monotone(seed, lo, step):
    x = np.random.default_rng(seed).normal(size=(60, 5)) * np.array([4, 2, 1, 0.5, 0.2])
    assert wpca_fit(x, lo).components <= wpca_fit(x, min(lo + step, 1.0)).components


def test_wpca_rank_deficient_warns():
    x = np.random.default_rng(10).normal(size=(50, 2)) @ np.array([[1.0, 2, 3], [0, 1, 1]])
    with pytest.warns(UserWarning):
        w = fit_whitener(x, components=3)
    assert w.components == 2


def test_wpca_rejects_bad_variance():
    with pytest.raises(ArgumentError):
        wpca_fit(np.random.default_rng(0).normal(size=(10, 2)), 1.5)
    with pytest.raises(ArgumentError):
        ScaeSpec(variance=0).validate()


# -- pipelines ---------------------------------------------------------------

def test_sample_pixels_caps_per_class():
    labels = np.array([[1, 1, 1, 2], [0, 1, 2, 2]])
    picks = sample_pixels([labels], [np.ones_like(labels, bool)], 2, seed=0)
    got = labels[picks[:, 1], picks[:, 2]]
    assert sorted(got.tolist()) == [1, 1, 2, 2]


SMALL = BaselineSpec(max_per_class=150, knn_ks=(1, 3, 5), svm_grid=(0.1, 10.0), svm_epochs=5,
                     mlp=MlpSpec(epochs=10, batch_size=64),
                     mica=MicaSpec(filters=4, filter_size=3, pool=3, samples=200),
                     scae=ScaeSpec(caes=2, patch=8, patches=32, epochs=1, batch_size=8, conv_widths=(8, 16),
                                   bottleneck=16),
                     feature_hidden=16)


@pytest.mark.parametrize("kind", ["knn", "svm", "mlp", "knn-mp", "svm-mp", "mlp-mp", "mica", "scae"])
def test_baselines_beat_chance_and_round_trip(kind, tmp_path):
    train, test = [toy_pair(0)], [toy_pair(1)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pipe, ev = run_baseline(kind, train, test, SMALL, seed=0)
    assert ev.aa > 1 / 3
    pipe.save(tmp_path / "m.mpk")
    back = load_pipeline(tmp_path / "m.mpk")
    assert np.array_equal(back.predict(test[0][0]).labels, pipe.predict(test[0][0]).labels)


def test_unknown_kind():
    with pytest.raises(ArgumentError):
        fit_baseline("rbf-svm", [toy_pair()])
