"""Spatial-spectral feature extractors: mean pooling, ICA filter banks, stacked CAEs, WPCA."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..engine import kernels as K
from ..engine import tensor as T
from ..engine.optim import NAdam
from ..errors import ArgumentError, ConvergenceError
from ..models import CaeSpec, build_cae


# -- mean pooling ------------------------------------------------------------

def box_mean(values: np.ndarray, window: int, valid: np.ndarray | None = None) -> np.ndarray:
    """Mean over the in-bounds (and valid) pixels of a centered window.

    ``values`` is (H, W, C).  Windows are clipped at the image border, so a
    constant image is unchanged everywhere.
    """
    if window < 1 or window % 2 == 0:
        raise ArgumentError("pool window must be odd and >= 1")
    v = np.asarray(values, np.float64)
    h, w = v.shape[:2]
    m = np.ones((h, w)) if valid is None else np.asarray(valid, np.float64)
    r = window // 2

    def integral(a):
        return np.pad(a.cumsum(0).cumsum(1), ((1, 0), (1, 0)) + ((0, 0),) * (a.ndim - 2))

    iv, im = integral(v * m[..., None]), integral(m)
    r0 = np.clip(np.arange(h) - r, 0, h)
    r1 = np.clip(np.arange(h) + r + 1, 0, h)
    c0 = np.clip(np.arange(w) - r, 0, w)
    c1 = np.clip(np.arange(w) + r + 1, 0, w)

    def window_sum(ii):
        return ii[r1][:, c1] - ii[r0][:, c1] - ii[r1][:, c0] + ii[r0][:, c0]

    count = window_sum(im)
    total = window_sum(iv)
    return np.divide(total, count[..., None], out=np.zeros_like(total), where=count[..., None] > 0)


def meanpool_preprocess(raster, window: int = 5):
    """Same raster with every band replaced by its local mean."""
    from ..raster_io import MultibandRaster

    pooled = box_mean(raster.values, window, raster.valid_mask).astype(np.float32)
    return MultibandRaster(pooled, raster.valid_mask.copy(), raster.gsd_cm, raster.band_centers, raster.dtype)


# -- whitening and FastICA ---------------------------------------------------

@dataclass
class Whitener:
    mean: np.ndarray
    matrix: np.ndarray          # (k, d): z = matrix @ (x - mean)
    eigenvalues: np.ndarray     # all eigenvalues, descending

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, np.float64) - self.mean) @ self.matrix.T

    @property
    def components(self) -> int:
        return self.matrix.shape[0]

    def retained(self) -> float:
        ev = np.clip(self.eigenvalues, 0, None)
        return float(ev[:self.components].sum() / ev.sum())


def fit_whitener(x, components: int | None = None, variance: float | None = None, rank_tol=1e-10) -> Whitener:
    """PCA whitening from the population covariance.

    Keep ``components`` directions, or the fewest reaching ``variance``
    retained.  Directions with (numerically) zero variance are never kept;
    if the request needs them, the full numerical rank is kept with a warning.
    """
    x = np.asarray(x, np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ArgumentError("need a 2-D sample matrix with >= 2 rows")
    mean = x.mean(0)
    cov = np.cov(x - mean, rowvar=False, bias=True).reshape(x.shape[1], x.shape[1])
    ev, vec = np.linalg.eigh(cov)
    ev, vec = ev[::-1], vec[:, ::-1]
    pos = np.clip(ev, 0, None)
    rank = int((ev > rank_tol * max(ev[0], 1e-300)).sum())
    if rank == 0:
        raise ArgumentError("data has zero variance")
    if variance is not None:
        if not 0 < variance <= 1:
            raise ArgumentError("variance retained must lie in (0, 1]")
        frac = np.cumsum(pos) / pos.sum()
        k = int(np.searchsorted(frac, variance - 1e-12) + 1)
    else:
        k = components or rank
    if k > rank:
        warnings.warn(f"requested {k} components but the data has rank {rank}; keeping {rank}", stacklevel=2)
        k = rank
    matrix = vec[:, :k].T / np.sqrt(ev[:k])[:, None]
    return Whitener(mean, matrix, ev)


def _sym_decorrelate(w):
    """(W W^T)^(-1/2) W."""
    s, u = np.linalg.eigh(w @ w.T)
    return (u / np.sqrt(np.clip(s, 1e-300, None))) @ u.T @ w


def fastica(z, max_iter=500, tol=1e-5, seed=0, w_init=None) -> np.ndarray:
    """Symmetric FastICA with the tanh contrast on whitened rows ``z`` (n, k).

    Returns the orthogonal unmixing matrix W (k, k); sources are ``z @ W.T``.
    """
    z = np.asarray(z, np.float64)
    n, k = z.shape
    rng = np.random.default_rng(seed)
    w = _sym_decorrelate(rng.normal(size=(k, k)) if w_init is None else np.asarray(w_init, np.float64))
    history = []
    for it in range(1, max_iter + 1):
        y = z @ w.T
        g = np.tanh(y)
        gp = 1.0 - g * g
        w_new = _sym_decorrelate(g.T @ z / n - gp.mean(0)[:, None] * w)
        change = float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0)))
        history.append(change)
        w = w_new
        if change < tol:
            return w
    raise ConvergenceError(f"FastICA did not converge in {max_iter} iterations (last change {history[-1]:.3g})",
                           iterations=max_iter, history=history)


# -- MICA --------------------------------------------------------------------

@dataclass
class MicaSpec:
    filters: int = 64
    filter_size: int = 9
    pool: int = 13
    hidden: int = 256
    samples: int = 3000
    seed: int = 0
    max_iter: int = 500
    tol: float = 1e-5

    def validate(self) -> "MicaSpec":
        if self.filters < 1:
            raise ArgumentError("filter count must be >= 1")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ArgumentError("filter size must be odd")
        if self.samples < 10 * self.filters:
            raise ArgumentError(f"need >= {10 * self.filters} sample patches for {self.filters} filters")
        return self


def sample_patches(rasters, size, count, seed=0) -> np.ndarray:
    """``count`` random fully-valid (size x size x C) patches, vectorized band-major."""
    rng = np.random.default_rng(seed)
    out = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > 50 * count:
            raise ArgumentError("could not find enough fully valid patches")
        r = rasters[int(rng.integers(len(rasters)))]
        if r.height < size or r.width < size:
            raise ArgumentError(f"raster smaller than the {size}px filter")
        i, j = int(rng.integers(r.height - size + 1)), int(rng.integers(r.width - size + 1))
        if not r.valid_mask[i:i + size, j:j + size].all():
            continue
        out.append(r.values[i:i + size, j:j + size].transpose(2, 0, 1).ravel())
    return np.asarray(out, np.float64)


@dataclass
class FilterBank:
    filters: np.ndarray         # (F, C, k, k), unit Frobenius norm each

    def to_arrays(self) -> dict:
        return {"filters": self.filters}


def mica_fit(rasters, spec: MicaSpec | None = None) -> FilterBank:
    """ICA filters from whitened random patches of (standardized) rasters."""
    spec = (spec or MicaSpec()).validate()
    c = rasters[0].bands
    x = sample_patches(rasters, spec.filter_size, spec.samples, spec.seed)
    wh = fit_whitener(x, components=spec.filters)
    z = wh.transform(x)
    w = fastica(z, spec.max_iter, spec.tol, spec.seed)
    filt = w @ wh.matrix                      # rows act on raw (centered) patch vectors
    filt /= np.linalg.norm(filt, axis=1, keepdims=True)
    return FilterBank(filt.reshape(len(filt), c, spec.filter_size, spec.filter_size))


def mica_features(values: np.ndarray, bank: FilterBank, pool: int = 13, activation=np.abs) -> np.ndarray:
    """Convolve an (H, W, C) array with the bank, apply the activation, mean-pool; returns (H, W, F)."""
    f = bank.filters
    k = f.shape[-1]
    x = np.asarray(values, np.float64).transpose(2, 0, 1)[None]
    resp, _ = K.conv2d_forward(x, f.astype(np.float64), None, 1, ((k - 1) // 2, k // 2))
    return box_mean(activation(resp[0]).transpose(1, 2, 0), pool)


# -- WPCA --------------------------------------------------------------------

def wpca_fit(x, variance: float = 0.99) -> Whitener:
    return fit_whitener(x, variance=variance)


# -- stacked convolutional autoencoders --------------------------------------

@dataclass
class ScaeSpec:
    caes: int = 3
    pool: int = 5
    variance: float = 0.99
    hidden: int = 256
    patch: int = 16
    patches: int = 256
    epochs: int = 5
    batch_size: int = 16
    lr: float = 2e-3
    conv_widths: tuple = (32, 64, 128)
    bottleneck: int = 256
    seed: int = 0

    def validate(self) -> "ScaeSpec":
        if not 0 < self.variance <= 1:
            raise ArgumentError("variance retained must lie in (0, 1]")
        if self.caes < 1 or self.patch % 2 ** len(self.conv_widths):
            raise ArgumentError("need >= 1 CAE and a patch size divisible by the CAE depth")
        return self


def _pad_to(x, mult):
    """Reflect-pad the last two axes up to a multiple of ``mult``."""
    h, w = x.shape[-2:]
    ph, pw = -h % mult, -w % mult
    if ph or pw:
        x = np.pad(x, ((0, 0),) * (x.ndim - 2) + ((0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return x


def cae_hidden(cae, values_chw: np.ndarray) -> np.ndarray:
    """Hidden map (32, H, W) of a whole image, padded to the CAE's stride and cropped back."""
    h, w = values_chw.shape[-2:]
    x = _pad_to(values_chw[None].astype(np.float32), 2 ** cae.depth)
    cae.eval()
    with T.no_grad():
        return cae.hidden(T.constant(x)).values[0, :, :h, :w]


def train_cae(images, spec: ScaeSpec, in_bands: int, seed: int):
    """Fit one CAE by MSE reconstruction on random patches of (C, H, W) images."""
    rng = np.random.default_rng(seed)
    s = spec.patch
    xs = []
    for _ in range(spec.patches):
        img = images[int(rng.integers(len(images)))]
        i, j = int(rng.integers(img.shape[1] - s + 1)), int(rng.integers(img.shape[2] - s + 1))
        xs.append(img[:, i:i + s, j:j + s])
    x = np.asarray(xs, np.float32)
    cae = build_cae(CaeSpec(in_bands, spec.conv_widths, spec.bottleneck, spec.conv_widths[0]), seed=seed)
    opt = NAdam(cae.named_parameters(), lr=spec.lr)
    cae.train()
    for _ in range(spec.epochs):
        order = rng.permutation(len(x))
        for b in range(0, len(x) - 1, spec.batch_size):
            idx = order[b:b + spec.batch_size]
            if len(idx) < 2:
                continue
            cae.zero_grad()
            T.mse(cae(T.constant(x[idx])), x[idx]).backward()
            opt.step()
    return cae.eval()


@dataclass
class ScaeExtractor:
    caes: list
    pool: int

    def features(self, values_hwc: np.ndarray) -> np.ndarray:
        """(H, W, 32 * caes) pooled concatenation of every CAE's hidden map."""
        cur = np.asarray(values_hwc, np.float32).transpose(2, 0, 1)
        maps = []
        for cae in self.caes:
            cur = cae_hidden(cae, cur)
            maps.append(cur)
        return box_mean(np.concatenate(maps).transpose(1, 2, 0), self.pool)


def scae_fit(images_hwc, spec: ScaeSpec | None = None) -> ScaeExtractor:
    """Train ``spec.caes`` CAEs in sequence, each on its predecessor's hidden maps."""
    spec = (spec or ScaeSpec()).validate()
    cur = [np.asarray(v, np.float32).transpose(2, 0, 1) for v in images_hwc]
    if min(min(c.shape[1:]) for c in cur) < spec.patch:
        raise ArgumentError(f"images must be at least {spec.patch}px")
    caes = []
    for t in range(spec.caes):
        cae = train_cae(cur, spec, cur[0].shape[0], spec.seed + t)
        caes.append(cae)
        cur = [cae_hidden(cae, c) for c in cur]
    return ScaeExtractor(caes, spec.pool)
