"""Band co-registration: exposure normalization, corner matching, RANSAC homographies, warping.

Points are (x, y) = (column, row) with pixel centers on integer coordinates.
A homography ``H`` maps band coordinates to reference coordinates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, FormatError, NoModelFound, RankError

U16_MAX = 65535


# -- exposure ----------------------------------------------------------------

def normalize_exposure(image, integration_time: float, global_min: float, global_max: float) -> np.ndarray:
    """Divide by integration time, then stretch [global_min, global_max] onto 0..65535 (uint16)."""
    if not integration_time > 0:
        raise ArgumentError("integration time must be > 0")
    if not global_max > global_min:
        raise ArgumentError("global_max must exceed global_min")
    v = np.asarray(image, np.float64) / integration_time
    scaled = (v - global_min) / (global_max - global_min) * U16_MAX
    return np.rint(np.clip(scaled, 0, U16_MAX)).astype(np.uint16)


# -- homographies ------------------------------------------------------------

@dataclass
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, np.float64).reshape(3, 3)
        if abs(m[2, 2]) < 1e-12 or not np.all(np.isfinite(m)):
            raise RankError("homography has a zero (or non-finite) bottom-right element")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise RankError("homography is singular")
        self.matrix = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, pts) -> np.ndarray:
        return project(self.matrix, pts)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def project(h: np.ndarray, pts) -> np.ndarray:
    p = np.asarray(pts, np.float64).reshape(-1, 2)
    q = p @ h[:, :2].T + h[:, 2]
    return q[:, :2] / q[:, 2:3]


def read_homography(path) -> Homography:
    vals = Path(path).read_text(encoding="utf-8").split()
    try:
        nums = [float(v) for v in vals]
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric homography entry") from exc
    if len(nums) != 9:
        raise FormatError(f"{path}: expected 9 numbers, found {len(nums)}")
    return Homography(np.array(nums).reshape(3, 3))


def write_homography(path, h: Homography) -> None:
    Path(path).write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in h.matrix) + "\n",
                          encoding="utf-8")


def _hartley(pts):
    """Similarity moving the centroid to 0 and the RMS distance to sqrt(2)."""
    c = pts.mean(0)
    rms = np.sqrt(((pts - c) ** 2).sum(1).mean())
    s = np.sqrt(2) / rms if rms > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _dlt_rows(a, b):
    """Two DLT equations per correspondence; shapes (..., n, 2) -> (..., 2n, 9)."""
    x, y = a[..., 0], a[..., 1]
    u, v = b[..., 0], b[..., 1]
    o, z = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], -1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], -1)
    return np.stack([r1, r2], -2).reshape(a.shape[:-2] + (2 * a.shape[-2], 9))


def _collinear(pts, tol=1e-9) -> bool:
    scale = max(np.ptp(pts, 0).max(), 1e-300) ** 2
    for i, j, k in itertools.combinations(range(len(pts)), 3):
        d1, d2 = pts[j] - pts[i], pts[k] - pts[i]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= tol * scale:
            return True
    return False


def estimate_homography_dlt(src, dst) -> Homography:
    """Normalized DLT least-squares homography mapping ``src`` onto ``dst``."""
    a = np.asarray(src, np.float64).reshape(-1, 2)
    b = np.asarray(dst, np.float64).reshape(-1, 2)
    if len(a) != len(b):
        raise ArgumentError("source and destination point counts differ")
    if len(a) < 4:
        raise ArgumentError("need >= 4 correspondences")
    if len(a) == 4 and (_collinear(a) or _collinear(b)):
        raise RankError("three of the four points are collinear")
    ta, tb = _hartley(a), _hartley(b)
    an = project(ta, a)
    bn = project(tb, b)
    _, s, vt = np.linalg.svd(_dlt_rows(an, bn))
    if s[-2] <= 1e-10 * s[0]:
        raise RankError("degenerate point configuration")
    hn = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(tb) @ hn @ ta)


# -- RANSAC ------------------------------------------------------------------

@dataclass
class RansacConfig:
    threshold: float = 2.0
    iterations: int = 2000
    min_inliers: int = 12
    seed: int = 0

    def validate(self) -> "RansacConfig":
        if not self.threshold > 0 or self.iterations < 1 or self.min_inliers < 4:
            raise ArgumentError("threshold > 0, iterations >= 1 and min_inliers >= 4 required")
        return self


def _batched_sample_models(an, bn, samples):
    """Homographies (normalized frames) for many 4-point samples at once."""
    a4, b4 = an[samples], bn[samples]
    _, s, vt = np.linalg.svd(_dlt_rows(a4, b4))
    ok = s[:, -2] > 1e-8 * s[:, 0]
    h = vt[:, -1].reshape(-1, 3, 3)
    return h, ok


def _errors(h, a, b):
    """Forward reprojection error of every match under every model; h is (M, 3, 3)."""
    ah = np.concatenate([a, np.ones((len(a), 1))], 1)
    q = np.einsum("mij,nj->mni", h, ah)
    w = q[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = q[..., :2] / w[..., None]
        err = np.sqrt(((proj - b) ** 2).sum(-1))
    return np.where(np.isfinite(err) & (np.abs(w) > 1e-12), err, np.inf)


def ransac_homography(src, dst, cfg: RansacConfig | None = None) -> tuple[Homography, np.ndarray]:
    """Best 4-point model by inlier count, refit by DLT on its inliers; returns (H, inlier mask)."""
    cfg = (cfg or RansacConfig()).validate()
    a = np.asarray(src, np.float64).reshape(-1, 2)
    b = np.asarray(dst, np.float64).reshape(-1, 2)
    n = len(a)
    if n != len(b):
        raise ArgumentError("source and destination point counts differ")
    if n < 4:
        raise ArgumentError("need >= 4 matches")
    rng = np.random.default_rng(cfg.seed)
    ta, tb = _hartley(a), _hartley(b)
    an, bn = project(ta, a), project(tb, b)
    tb_inv = np.linalg.inv(tb)
    best = None
    best_count = -1
    chunk = 500
    for start in range(0, cfg.iterations, chunk):
        m = min(chunk, cfg.iterations - start)
        samples = np.array([rng.choice(n, 4, replace=False) for _ in range(m)])
        hn, ok = _batched_sample_models(an, bn, samples)
        if not ok.any():
            continue
        h = tb_inv @ hn[ok] @ ta
        counts = (_errors(h, a, b) < cfg.threshold).sum(1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best = int(counts[k]), h[k]
    if best is None or best_count < cfg.min_inliers:
        raise NoModelFound(f"best model has {max(best_count, 0)} inliers (< {cfg.min_inliers})")
    inliers = _errors(best[None], a, b)[0] < cfg.threshold
    for _ in range(3):
        try:
            model = estimate_homography_dlt(a[inliers], b[inliers])
        except RankError as exc:
            raise NoModelFound(f"inlier set is degenerate: {exc}") from exc
        refreshed = _errors(model.matrix[None], a, b)[0] < cfg.threshold
        if refreshed.sum() < cfg.min_inliers or np.array_equal(refreshed, inliers):
            break
        inliers = refreshed
    return model, inliers


# -- features ----------------------------------------------------------------

@dataclass
class MatchSet:
    src: np.ndarray          # (n, 2) points in the first image
    dst: np.ndarray          # (n, 2) points in the second image
    score: np.ndarray        # (n,) descriptor distance (lower is better)

    def __len__(self):
        return len(self.src)


def harris_corners(img, max_corners=400, k=0.04, sigma=1.5, border=6, rel_threshold=1e-3) -> np.ndarray:
    """(x, y) integer corner locations, strongest first, after 5x5 non-maximum suppression."""
    f = np.asarray(img, np.float64)
    gy, gx = np.gradient(f)
    sxx = ndimage.gaussian_filter(gx * gx, sigma)
    syy = ndimage.gaussian_filter(gy * gy, sigma)
    sxy = ndimage.gaussian_filter(gx * gy, sigma)
    r = sxx * syy - sxy * sxy - k * (sxx + syy) ** 2
    peak = r.max(initial=0.0)
    if peak <= 0:
        return np.empty((0, 2), int)
    local = (r == ndimage.maximum_filter(r, size=5)) & (r > rel_threshold * peak)
    local[:border] = local[-border:] = False
    local[:, :border] = local[:, -border:] = False
    rows, cols = np.nonzero(local)
    order = np.argsort(-r[rows, cols], kind="stable")[:max_corners]
    return np.stack([cols[order], rows[order]], 1)


def describe(img, pts, size=11) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean unit-norm patch vectors; drops flat patches. Returns (descriptors, kept points)."""
    f = np.asarray(img, np.float64)
    r = size // 2
    h, w = f.shape
    keep, desc = [], []
    for x, y in pts:
        if r <= y < h - r and r <= x < w - r:
            p = f[y - r:y + r + 1, x - r:x + r + 1].ravel()
            p = p - p.mean()
            nrm = np.linalg.norm(p)
            if nrm > 1e-9:
                desc.append(p / nrm)
                keep.append((x, y))
    return np.asarray(desc).reshape(-1, size * size), np.asarray(keep, int).reshape(-1, 2)


def detect_and_match(img_a, img_b, ratio=0.8, max_corners=400, size=11) -> MatchSet:
    """Harris corners + normalized patch descriptors, nearest neighbour with a ratio test."""
    a = np.asarray(img_a)
    b = np.asarray(img_b)
    if a.dtype != b.dtype:
        raise ArgumentError("images must share a dtype")
    da, pa = describe(a, harris_corners(a, max_corners), size)
    db, pb = describe(b, harris_corners(b, max_corners), size)
    if len(da) == 0 or len(db) < 2:
        return MatchSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0))
    # unit vectors: squared distance = 2 - 2 * |correlation|; the absolute value lets
    # bands with inverted contrast (red vs near-infrared over vegetation) match
    d = np.sqrt(np.maximum(2.0 - 2.0 * np.abs(da @ db.T), 0.0))
    nn = np.argsort(d, axis=1, kind="stable")[:, :2]
    best = d[np.arange(len(da)), nn[:, 0]]
    second = d[np.arange(len(da)), nn[:, 1]]
    ok = best < ratio * second
    return MatchSet(pa[ok].astype(float), pb[nn[ok, 0]].astype(float), best[ok])


# -- warping -----------------------------------------------------------------

def warp(img, h: Homography, out_shape=None) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour inverse mapping of ``img`` through ``h``; returns (warped, valid mask)."""
    src = np.asarray(img)
    out_shape = out_shape or src.shape[:2]
    rows, cols = np.mgrid[0:out_shape[0], 0:out_shape[1]]
    pts = np.stack([cols.ravel(), rows.ravel()], 1)
    back = project(h.inverse().matrix, pts)
    with np.errstate(invalid="ignore"):
        x = np.rint(back[:, 0])
        y = np.rint(back[:, 1])
    valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x < src.shape[1]) & (y >= 0) & (y < src.shape[0])
    out = np.zeros(out_shape + src.shape[2:], src.dtype)
    flat = out.reshape((-1,) + src.shape[2:])
    flat[valid] = src[y[valid].astype(int), x[valid].astype(int)]
    return out, valid.reshape(out_shape)


@dataclass
class Registration:
    image: np.ndarray
    valid: np.ndarray
    homography: Homography
    fallback: bool
    inliers: int


def register_band(band_img, ref_img, global_h: Homography, cfg: RansacConfig | None = None) -> Registration:
    """Warp a band onto the reference; fall back to ``global_h`` when no model is found."""
    if not isinstance(global_h, Homography):
        global_h = Homography(global_h)
    matches = detect_and_match(band_img, ref_img)
    try:
        if len(matches) < 4:
            raise NoModelFound(f"only {len(matches)} matches")
        h, inl = ransac_homography(matches.src, matches.dst, cfg)
        fallback, count = False, int(inl.sum())
    except NoModelFound:
        h, fallback, count = global_h, True, 0
    out, valid = warp(band_img, h, np.shape(ref_img)[:2])
    return Registration(out, valid, h, fallback, count)


def register_raster(raster, reference_band: int, global_h: Homography, cfg: RansacConfig | None = None):
    """Register every band of a raster to one of its bands; the mask keeps pixels valid in all bands."""
    from .raster_io import MultibandRaster

    if not 0 <= reference_band < raster.bands:
        raise ArgumentError(f"reference band {reference_band} outside 0..{raster.bands - 1}")
    ref = raster.values[:, :, reference_band]
    bands, mask, regs = [], raster.valid_mask.copy(), []
    for b in range(raster.bands):
        if b == reference_band:
            bands.append(ref)
            regs.append(Registration(ref, np.ones(ref.shape, bool), Homography.identity(), False, -1))
            continue
        reg = register_band(raster.values[:, :, b], ref, global_h, cfg)
        bands.append(reg.image)
        mask &= reg.valid
        regs.append(reg)
    out = MultibandRaster(np.stack(bands, -1), mask, raster.gsd_cm, raster.band_centers, raster.dtype)
    return out, regs
