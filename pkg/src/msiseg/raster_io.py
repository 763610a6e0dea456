"""Multiband rasters, label maps, patch extraction and channel statistics.

On-disk formats (little-endian throughout):

``MBR1`` raster::

    magic: MBR1
    width: <int>
    height: <int>
    bands: <int>
    dtype: f32|u16
    gsd_cm: <real>
    band_centers_nm: <comma list>
    <blank line>
    band-sequential, row-major payload
    width*height mask bytes (0/1)

``LBL1`` label map: same header style with ``classes: <int>`` and one byte
per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DegenerateStatisticsError, FormatError, ShapeError, TruncatedFileError

BACKGROUND = 0

_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


@dataclass
class MultibandRaster:
    """H x W x C radiance image with validity mask.

    ``values`` is stored pixel-interleaved (H, W, C) in memory; the file
    format is band-sequential.
    """

    values: np.ndarray
    valid_mask: np.ndarray
    gsd_cm: float
    band_centers: tuple[float, ...]
    dtype: str = "f32"

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise FormatError(f"unsupported dtype {self.dtype!r}")
        self.values = np.asarray(self.values)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3:
            raise ShapeError(f"raster values must be HxWxC, got shape {self.values.shape}")
        self.values = self.values.astype(_DTYPES[self.dtype].newbyteorder("="), copy=False)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        self.band_centers = tuple(float(b) for b in self.band_centers)
        h, w, c = self.values.shape
        if self.valid_mask.shape != (h, w):
            raise ShapeError(f"mask shape {self.valid_mask.shape} != raster {(h, w)}")
        if c < 1 or len(self.band_centers) != c:
            raise FormatError(f"{c} bands but {len(self.band_centers)} band centers")
        if any(b >= a for a, b in zip(self.band_centers[1:], self.band_centers)):
            raise FormatError("band centers must be strictly increasing")
        if not self.gsd_cm > 0:
            raise FormatError(f"gsd must be positive, got {self.gsd_cm}")
        if self.dtype == "f32" and (np.any(self.values < 0) or not np.all(np.isfinite(self.values))):
            raise FormatError("radiance values must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    def select_bands(self, indices: Sequence[int]) -> "MultibandRaster":
        idx = list(indices)
        return MultibandRaster(self.values[:, :, idx], self.valid_mask.copy(), self.gsd_cm,
                               tuple(self.band_centers[i] for i in idx), self.dtype)


@dataclass
class LabelMap:
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got shape {self.labels.shape}")
        if not 1 <= self.classes <= 255:
            raise FormatError(f"class count {self.classes} outside [1, 255]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.classes):
            raise FormatError(f"labels outside [0, {self.classes}]")
        self.labels = self.labels.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def _header_bytes(fields: dict) -> bytes:
    lines = [f"{k}: {v}" for k, v in fields.items()]
    return ("\n".join(lines) + "\n\n").encode("utf-8")


def _split_header(data: bytes, magic: str) -> tuple[dict[str, str], bytes]:
    end = data.find(b"\n\n")
    if end < 0:
        raise FormatError("missing blank line after header")
    try:
        text = data[:end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("header is not UTF-8") from exc
    fields: dict[str, str] = {}
    for line in text.split("\n"):
        if ":" not in line:
            raise FormatError(f"malformed header line {line!r}")
        k, v = line.split(":", 1)
        fields[k.strip()] = v.strip()
    if fields.get("magic") != magic:
        raise FormatError(f"bad magic {fields.get('magic')!r}, expected {magic}")
    return fields, data[end + 2:]


def _int_field(fields, key) -> int:
    try:
        value = int(fields[key])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"missing or invalid header field {key!r}") from exc
    if value < 1:
        raise FormatError(f"header field {key!r} must be >= 1")
    return value


def write_raster(path, raster: MultibandRaster) -> None:
    fields = {
        "magic": "MBR1",
        "width": raster.width,
        "height": raster.height,
        "bands": raster.bands,
        "dtype": raster.dtype,
        "gsd_cm": repr(float(raster.gsd_cm)),
        "band_centers_nm": ",".join(repr(float(b)) for b in raster.band_centers),
    }
    payload = np.ascontiguousarray(raster.values.transpose(2, 0, 1)).astype(_DTYPES[raster.dtype])
    mask = raster.valid_mask.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_header_bytes(fields))
        fh.write(payload.tobytes())
        fh.write(mask.tobytes())


def read_raster(path) -> MultibandRaster:
    data = Path(path).read_bytes()
    fields, body = _split_header(data, "MBR1")
    w, h, c = (_int_field(fields, k) for k in ("width", "height", "bands"))
    dtype = fields.get("dtype")
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    try:
        gsd = float(fields["gsd_cm"])
        centers = tuple(float(x) for x in fields["band_centers_nm"].split(","))
    except (KeyError, ValueError) as exc:
        raise FormatError("missing or invalid gsd_cm / band_centers_nm") from exc
    if len(centers) != c:
        raise FormatError(f"header declares {c} bands but {len(centers)} band centers")
    nbytes = w * h * c * _DTYPES[dtype].itemsize
    if len(body) < nbytes + w * h:
        raise TruncatedFileError(f"{path}: payload truncated ({len(body)} of {nbytes + w * h} bytes)")
    if len(body) > nbytes + w * h:
        raise FormatError(f"{path}: trailing bytes after mask")
    values = np.frombuffer(body[:nbytes], dtype=_DTYPES[dtype]).reshape(c, h, w).transpose(1, 2, 0)
    mask = np.frombuffer(body[nbytes:], dtype=np.uint8).reshape(h, w)
    if mask.max(initial=0) > 1:
        raise FormatError("mask bytes must be 0 or 1")
    return MultibandRaster(values.copy(), mask.astype(bool), gsd, centers, dtype)


def write_labels(path, labels: LabelMap) -> None:
    fields = {"magic": "LBL1", "width": labels.width, "height": labels.height, "classes": labels.classes}
    with open(path, "wb") as fh:
        fh.write(_header_bytes(fields))
        fh.write(np.ascontiguousarray(labels.labels, dtype=np.uint8).tobytes())


def read_labels(path) -> LabelMap:
    data = Path(path).read_bytes()
    fields, body = _split_header(data, "LBL1")
    w, h, n = (_int_field(fields, k) for k in ("width", "height", "classes"))
    if len(body) < w * h:
        raise TruncatedFileError(f"{path}: payload truncated ({len(body)} of {w * h} bytes)")
    if len(body) > w * h:
        raise FormatError(f"{path}: trailing bytes after payload")
    return LabelMap(np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy(), n)


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise DegenerateStatisticsError("channel std must be positive")

    def apply(self, values: np.ndarray, dtype=np.float32) -> np.ndarray:
        """Standardize an (..., C) array."""
        return ((values - self.mean) / self.std).astype(dtype)


@dataclass
class Patch:
    row: int
    col: int
    values: np.ndarray
    mask: np.ndarray
    labels: np.ndarray | None = None

    @property
    def label(self) -> int:
        if self.labels is None:
            raise ArgumentError("patch has no label window")
        return majority_label(np.where(self.mask, self.labels, BACKGROUND))


@dataclass
class PatchSet:
    patches: list[Patch]
    patch_size: int
    stride: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)


def grid_positions(extent: int, size: int, stride: int) -> range:
    return range(0, extent - size + 1, stride)


def extract_patches(raster: MultibandRaster, labels: LabelMap | None, size: int, stride: int,
                    min_valid_fraction: float = 0.5) -> PatchSet:
    """Enumerate size x size windows row-major, dropping mostly-invalid ones."""
    if size < 1 or stride < 1:
        raise ArgumentError("patch size and stride must be >= 1")
    if size > min(raster.height, raster.width):
        raise ArgumentError(f"patch size {size} exceeds raster {raster.height}x{raster.width}")
    if labels is not None and labels.shape != (raster.height, raster.width):
        raise ShapeError(f"label map {labels.shape} does not match raster {(raster.height, raster.width)}")
    need = min_valid_fraction * size * size
    # integral image gives the valid count of each window in O(1)
    integral = np.pad(raster.valid_mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    patches = []
    for r in grid_positions(raster.height, size, stride):
        for c in grid_positions(raster.width, size, stride):
            count = integral[r + size, c + size] - integral[r, c + size] - integral[r + size, c] + integral[r, c]
            if count < need:
                continue
            win = (slice(r, r + size), slice(c, c + size))
            patches.append(Patch(r, c, raster.values[win], raster.valid_mask[win],
                                 None if labels is None else labels.labels[win]))
    return PatchSet(patches, size, stride)


def majority_label(window) -> int:
    """Most frequent non-background class; ties go to the lowest index."""
    flat = np.asarray(window).ravel()
    if flat.size == 0:
        raise ArgumentError("empty label window")
    counts = np.bincount(flat.astype(np.int64))
    counts[BACKGROUND] = 0
    if counts.max() == 0:
        return BACKGROUND
    return int(np.argmax(counts))


def compute_channel_stats(patches: PatchSet | Iterable) -> ChannelStats:
    """Per-band population mean/std over the valid pixels of every patch.

    Accepts a PatchSet, or an iterable of objects/tuples exposing
    ``(values, mask)``.  Per-patch moments are merged with Chan's parallel
    update so huge sets never need to be concatenated.
    """
    n = 0
    mean = None
    m2 = None
    for item in patches:
        values, mask = (item.values, item.mask) if isinstance(item, Patch) else item
        px = np.asarray(values, dtype=np.float64)[np.asarray(mask, dtype=bool)]
        k = px.shape[0]
        if k == 0:
            continue
        pm = px.mean(axis=0)
        pm2 = ((px - pm) ** 2).sum(axis=0)
        if mean is None:
            n, mean, m2 = k, pm, pm2
            continue
        delta = pm - mean
        total = n + k
        mean = mean + delta * (k / total)
        m2 = m2 + pm2 + delta ** 2 * (n * k / total)
        n = total
    if mean is None or n < 2:
        raise DegenerateStatisticsError("need at least 2 valid pixels per band")
    std = np.sqrt(m2 / n)
    scale = np.maximum(np.abs(mean), 1.0)
    if np.any(std <= 1e-12 * scale):
        bad = np.flatnonzero(std <= 1e-12 * scale).tolist()
        raise DegenerateStatisticsError(f"constant band(s) {bad}")
    return ChannelStats(mean, std)
