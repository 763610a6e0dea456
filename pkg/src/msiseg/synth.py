"""Procedural labeled multispectral scenes for patch-classification pretraining.

Scenes are flat layouts of material regions under Lambertian illumination:
radiance_b = irradiance_b * cos(zenith) * reflectance_b * texture + noise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError
from .raster_io import (
    BACKGROUND, LabelMap, MultibandRaster, Patch, PatchSet, majority_label, read_labels, read_raster,
    write_labels, write_raster,
)
from .textfmt import dump_text, parse_text

BAND_CENTERS = (490.0, 550.0, 680.0, 720.0, 800.0, 900.0)
BACKGROUND_REFLECTANCE = 0.15


@dataclass(frozen=True)
class MaterialSpec:
    class_id: int
    name: str
    reflectance: tuple          # one value per sensor band
    texture_scale: float = 0.1  # texture multiplier spans [1-a, 1+a]
    rarity: float = 1.0         # relative placement frequency

    def __post_init__(self):
        if self.class_id < 1:
            raise ArgumentError(f"class_id must be >= 1, got {self.class_id}")
        r = np.asarray(self.reflectance, float)
        if r.ndim != 1 or np.any(r < 0) or np.any(r > 1):
            raise ArgumentError(f"{self.name}: reflectance must lie in [0, 1]")
        if not 0 <= self.texture_scale < 1:
            raise ArgumentError(f"{self.name}: texture_scale must be in [0, 1)")
        if self.rarity < 0:
            raise ArgumentError(f"{self.name}: rarity must be >= 0")


def material_from_curve(class_id, name, wavelengths, values, band_centers=BAND_CENTERS, texture_scale=0.1,
                        rarity=1.0) -> MaterialSpec:
    """Evaluate a piecewise-linear reflectance curve at the sensor band centers."""
    refl = np.interp(band_centers, wavelengths, values)
    return MaterialSpec(class_id, name, tuple(float(v) for v in refl), texture_scale, rarity)


# reflectance anchors at (490, 550, 680, 720, 800, 900) nm; vegetation shows the red edge
_PALETTE = [
    ("road-markings", (.60, .65, .65, .64, .60, .55), .05, 2.0),
    ("tree", (.04, .09, .04, .22, .42, .44), .25, 30.0),
    ("building", (.20, .22, .25, .27, .30, .32), .10, 4.0),
    ("vehicle", (.10, .10, .35, .36, .36, .35), .10, 1.5),
    ("person", (.15, .20, .30, .34, .40, .40), .15, 0.3),
    ("lifeguard-chair", (.45, .50, .55, .55, .50, .48), .05, 0.4),
    ("picnic-table", (.12, .15, .22, .25, .30, .32), .15, 0.6),
    ("black-panel", (.03, .03, .03, .03, .04, .05), .02, 0.2),
    ("white-panel", (.85, .85, .85, .85, .85, .85), .02, 0.2),
    ("orange-pad", (.08, .20, .60, .64, .65, .65), .05, 0.2),
    ("buoy", (.55, .30, .12, .12, .15, .15), .05, 0.3),
    ("rocks", (.18, .20, .22, .23, .25, .26), .30, 5.0),
    ("low-vegetation", (.05, .10, .06, .18, .33, .35), .25, 8.0),
    ("grass", (.05, .12, .05, .30, .50, .50), .15, 40.0),
    ("sand", (.25, .30, .35, .37, .40, .42), .10, 15.0),
    ("water-lake", (.06, .05, .03, .02, .01, .01), .05, 25.0),
    ("water-pond", (.04, .07, .04, .04, .03, .03), .05, 2.0),
    ("asphalt", (.07, .08, .09, .09, .10, .10), .08, 10.0),
]
CLASS_NAMES = tuple(p[0] for p in _PALETTE)


def default_palette(band_centers=BAND_CENTERS) -> dict[int, MaterialSpec]:
    """18 materials with a deliberately unbalanced rarity profile."""
    return {i + 1: material_from_curve(i + 1, name, BAND_CENTERS, refl, band_centers, tex, rarity)
            for i, (name, refl, tex, rarity) in enumerate(_PALETTE)}


# -- scene description -------------------------------------------------------

REGION_SHAPES = ("rect", "ellipse", "blob")


@dataclass(frozen=True)
class Region:
    shape: str
    class_id: int
    params: tuple   # rect: x0,y0,x1,y1; ellipse: cx,cy,rx,ry; blob: cx,cy,r,roughness,seed  (meters)

    def __post_init__(self):
        n = {"rect": 4, "ellipse": 4, "blob": 5}.get(self.shape)
        if n is None:
            raise ArgumentError(f"unknown region shape {self.shape!r}")
        if len(self.params) != n:
            raise ArgumentError(f"{self.shape} region takes {n} params, got {len(self.params)}")

    def contains(self, x, y):
        p = self.params
        if self.shape == "rect":
            return (x >= p[0]) & (x < p[2]) & (y >= p[1]) & (y < p[3])
        if self.shape == "ellipse":
            return ((x - p[0]) / p[2]) ** 2 + ((y - p[1]) / p[3]) ** 2 <= 1
        cx, cy, r, rough, seed = p
        rng = np.random.default_rng(int(seed))
        amps = rng.uniform(0, rough, 3) / 3
        phases = rng.uniform(0, 2 * np.pi, 3)
        theta = np.arctan2(y - cy, x - cx)
        radius = r * (1 + sum(a * np.cos(k * theta + ph) for k, a, ph in zip((2, 3, 5), amps, phases)))
        return np.hypot(x - cx, y - cy) <= radius


@dataclass
class SceneSpec:
    extent: tuple                      # (width, height) in meters
    regions: list
    solar_elevation_deg: float = 45.0
    irradiance: tuple = (1.0,) * 6     # per band, arbitrary radiometric units
    season: str = "summer"
    seed: int = 0
    materials: dict = field(default_factory=default_palette)

    def validate(self) -> "SceneSpec":
        if not self.regions:
            raise ArgumentError("scene has no regions")
        if min(self.extent) <= 0:
            raise ArgumentError("scene extent must be positive")
        if any(v <= 0 for v in self.irradiance):
            raise ArgumentError("irradiance must be > 0 in every band")
        if not 0 < self.solar_elevation_deg <= 90:
            raise ArgumentError("solar elevation must be in (0, 90] degrees")
        for reg in self.regions:
            if reg.class_id not in self.materials:
                raise ArgumentError(f"region uses unknown class {reg.class_id}")
        return self

    @property
    def cos_zenith(self) -> float:
        return math.sin(math.radians(self.solar_elevation_deg))


@dataclass(frozen=True)
class RenderConfig:
    gsd: float = 0.5                   # meters per pixel
    band_centers: tuple = BAND_CENTERS
    noise_sigma: float = 0.01          # fraction of each band's dynamic range (irradiance * cos zenith)
    overlap: float = 0.5
    texture_cell: float = 2.0          # value-noise lattice spacing, meters

    def __post_init__(self):
        if self.gsd <= 0:
            raise ArgumentError("gsd must be > 0")
        if not 0 <= self.overlap < 1:
            raise ArgumentError("overlap must be in [0, 1)")
        if self.noise_sigma < 0 or self.texture_cell <= 0:
            raise ArgumentError("noise_sigma must be >= 0 and texture_cell > 0")


# -- rendering ---------------------------------------------------------------

def _value_noise(rng, x, y, cell, extent):
    """Smooth value noise in [0, 1] sampled at world coordinates.

    The lattice is sized from the scene extent, so every GSD samples the same field.
    """
    gx, gy = x / cell, y / cell
    nx, ny = int(math.ceil(extent[0] / cell)) + 1, int(math.ceil(extent[1] / cell)) + 1
    lattice = rng.random((ny + 1, nx + 1))
    ix, iy = np.floor(gx).astype(int), np.floor(gy).astype(int)
    fx, fy = gx - ix, gy - iy
    sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    top = lattice[iy, ix] * (1 - sx) + lattice[iy, ix + 1] * sx
    bot = lattice[iy + 1, ix] * (1 - sx) + lattice[iy + 1, ix + 1] * sx
    return top * (1 - sy) + bot * sy


def label_scene(scene: SceneSpec, gsd: float) -> np.ndarray:
    """Class of the topmost region at every pixel center (later regions on top); 0 where uncovered."""
    w = int(round(scene.extent[0] / gsd))
    h = int(round(scene.extent[1] / gsd))
    y, x = np.mgrid[0:h, 0:w]
    x = (x + 0.5) * gsd
    y = (y + 0.5) * gsd
    labels = np.full((h, w), BACKGROUND, np.uint8)
    for reg in scene.regions:
        labels[reg.contains(x, y)] = reg.class_id
    return labels


def render(scene: SceneSpec, cfg: RenderConfig) -> tuple[MultibandRaster, LabelMap]:
    scene.validate()
    bands = len(cfg.band_centers)
    if len(scene.irradiance) != bands:
        raise ArgumentError(f"irradiance has {len(scene.irradiance)} bands, sensor has {bands}")
    labels = label_scene(scene, cfg.gsd)
    h, w = labels.shape
    if h < 16 or w < 16:
        raise ArgumentError(f"extent/gsd gives {h}x{w} pixels; need >= 16x16")
    y, x = np.mgrid[0:h, 0:w]
    x = (x + 0.5) * cfg.gsd
    y = (y + 0.5) * cfg.gsd
    scale = np.asarray(scene.irradiance, np.float64) * scene.cos_zenith
    refl = np.full((h, w, bands), BACKGROUND_REFLECTANCE)
    texture = np.ones((h, w))
    for cid in np.unique(labels):
        if cid == BACKGROUND:
            continue
        mat = scene.materials[int(cid)]
        if len(mat.reflectance) != bands:
            raise ArgumentError(f"material {mat.name} has {len(mat.reflectance)} bands, sensor has {bands}")
        sel = labels == cid
        refl[sel] = mat.reflectance
        if mat.texture_scale > 0:
            rng = np.random.default_rng([scene.seed, int(cid), 7])
            v = _value_noise(rng, x, y, cfg.texture_cell, scene.extent)
            texture[sel] = (1 + mat.texture_scale * (2 * v - 1))[sel]
    radiance = scale * refl * texture[..., None]
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, int(round(cfg.gsd * 1e6)), 11])
        radiance = radiance + rng.normal(size=radiance.shape) * (cfg.noise_sigma * scale)
        radiance = np.maximum(radiance, 0.0)
    raster = MultibandRaster(radiance.astype(np.float32), np.ones((h, w), bool), cfg.gsd * 100.0,
                             tuple(cfg.band_centers))
    return raster, LabelMap(labels, max(scene.materials))


def tile_stride(patch_size: int, overlap: float) -> int:
    return max(1, int(math.floor(patch_size * (1 - overlap))))


def tile_positions(extent: int, size: int, stride: int) -> list[int]:
    pos = list(range(0, extent - size + 1, stride))
    if pos[-1] != extent - size:
        pos.append(extent - size)     # last tile flush with the edge so every pixel is covered
    return pos


def tile_flight(raster: MultibandRaster, labels: LabelMap | None, patch_size: int, overlap: float) -> PatchSet:
    if patch_size < 1 or patch_size > min(raster.height, raster.width):
        raise ArgumentError(f"patch size {patch_size} does not fit {raster.height}x{raster.width}")
    if not 0 <= overlap < 1:
        raise ArgumentError("overlap must be in [0, 1)")
    stride = tile_stride(patch_size, overlap)
    s = patch_size
    patches = []
    for r in tile_positions(raster.height, s, stride):
        for c in tile_positions(raster.width, s, stride):
            patches.append(Patch(r, c, raster.values[r:r + s, c:c + s], raster.valid_mask[r:r + s, c:c + s],
                                 None if labels is None else labels.labels[r:r + s, c:c + s]))
    return PatchSet(patches, s, stride)


# -- random scenes -----------------------------------------------------------

def random_scene(seed: int, extent=(64.0, 64.0), palette=None, n_medium=8, n_objects=24,
                 season=None) -> SceneSpec:
    """Large cover regions drawn by rarity, then medium regions and small objects."""
    palette = palette or default_palette()
    rng = np.random.default_rng([seed, 3])
    ids = np.array(sorted(palette))
    weights = np.array([palette[i].rarity for i in ids], float)
    p = weights / weights.sum()
    W, H = extent
    regions = [Region("rect", int(rng.choice(ids, p=p)), (0.0, 0.0, float(W), float(H)))]
    for _ in range(int(rng.integers(2, 5))):
        regions.append(Region("blob", int(rng.choice(ids, p=p)),
                              (float(rng.uniform(0, W)), float(rng.uniform(0, H)),
                               float(rng.uniform(0.15, 0.4) * min(W, H)), 0.6, int(rng.integers(1 << 30)))))
    # medium and small regions favour rare classes so every class shows up somewhere
    p_small = np.sqrt(weights) / np.sqrt(weights).sum()
    for k in range(n_medium + n_objects):
        cid = int(rng.choice(ids, p=p_small))
        cx, cy = float(rng.uniform(0, W)), float(rng.uniform(0, H))
        size = float(rng.uniform(6.0, 16.0) if k < n_medium else rng.uniform(1.0, 4.0))
        if rng.random() < 0.5:
            regions.append(Region("rect", cid, (cx, cy, cx + size, cy + size * float(rng.uniform(0.5, 2)))))
        else:
            regions.append(Region("ellipse", cid, (cx, cy, size / 2, size / 2 * float(rng.uniform(0.5, 2)))))
    season = season or ("summer" if rng.random() < 0.5 else "winter")
    morning = rng.random() < 0.5
    elev = float(rng.uniform(40, 70) if season == "summer" else rng.uniform(15, 35))
    if not morning:
        elev *= 0.9
    # winter light is weaker and bluer; summer shifts toward NIR
    tilt = np.linspace(-1, 1, 6) * (0.1 if season == "summer" else -0.1)
    irr = tuple(float(v) for v in (1.0 if season == "summer" else 0.8) * (1 + tilt))
    return SceneSpec((float(W), float(H)), regions, elev, irr, season, seed, palette)


# -- scene text files --------------------------------------------------------

def _floats(s: str) -> tuple:
    try:
        return tuple(float(v) for v in s.split(","))
    except ValueError as exc:
        raise FormatError(f"bad number list {s!r}") from exc


def parse_scene(text: str, palette=None) -> SceneSpec:
    top, blocks = parse_text(text)
    known = {"extent", "solar_elevation_deg", "irradiance", "season", "seed"}
    extra = set(top) - known
    if extra:
        raise FormatError(f"unknown scene keys {sorted(extra)}")
    if "extent" not in top:
        raise FormatError("scene file needs an extent")
    regions = []
    for name, fields in blocks:
        if name != "region":
            raise FormatError(f"unknown block [{name}]")
        if set(fields) != {"shape", "class_id", "params"}:
            raise FormatError(f"region needs exactly shape, class_id, params; got {sorted(fields)}")
        params = _floats(fields["params"])
        if fields["shape"] == "blob" and len(params) == 5:
            params = params[:4] + (int(params[4]),)
        regions.append(Region(fields["shape"], int(fields["class_id"]), params))
    scene = SceneSpec(_floats(top["extent"]), regions,
                      float(top.get("solar_elevation_deg", 45.0)),
                      _floats(top["irradiance"]) if "irradiance" in top else (1.0,) * 6,
                      top.get("season", "summer"), int(top.get("seed", 0)), palette or default_palette())
    return scene.validate()


def dump_scene(scene: SceneSpec) -> str:
    top = {"extent": ",".join(repr(v) for v in scene.extent),
           "solar_elevation_deg": repr(scene.solar_elevation_deg),
           "irradiance": ",".join(repr(v) for v in scene.irradiance),
           "season": scene.season, "seed": str(scene.seed)}
    blocks = [("region", {"shape": r.shape, "class_id": str(r.class_id),
                          "params": ",".join(repr(v) for v in r.params)}) for r in scene.regions]
    return dump_text(top, blocks)


# -- pretraining dataset -----------------------------------------------------

@dataclass(frozen=True)
class IndexEntry:
    split: str
    source: int      # index into PretrainDataset.sources
    row: int
    col: int
    label: int


@dataclass
class PretrainDataset:
    sources: list            # (name, MultibandRaster, LabelMap) per rendered scene/GSD
    index: list              # IndexEntry per patch
    patch_size: int
    classes: int
    train_seeds: tuple
    val_seeds: tuple

    def entries(self, split):
        return [e for e in self.index if e.split == split]

    def histogram(self, split="train") -> np.ndarray:
        """Patch counts per class, index 0..classes (0 unused)."""
        return np.bincount([e.label for e in self.entries(split)], minlength=self.classes + 1)

    def arrays(self, split) -> tuple[np.ndarray, np.ndarray]:
        """(N, C, S, S) float32 patches and (N,) labels."""
        s = self.patch_size
        ents = self.entries(split)
        bands = self.sources[0][1].bands if self.sources else 0
        x = np.empty((len(ents), bands, s, s), np.float32)
        for k, e in enumerate(ents):
            x[k] = self.sources[e.source][1].values[e.row:e.row + s, e.col:e.col + s].transpose(2, 0, 1)
        return x, np.array([e.label for e in ents], np.int64)


def split_scenes(scenes, val_fraction=0.1):
    """Partition by seed into disjoint train/val scene lists (val gets the highest seeds)."""
    seeds = [s.seed for s in scenes]
    if len(set(seeds)) != len(seeds):
        raise ArgumentError("scene seeds must be distinct")
    if len(scenes) < 2:
        raise ArgumentError("need >= 2 distinct scenes for disjoint train/val splits")
    ordered = sorted(scenes, key=lambda s: s.seed)
    n_val = min(len(scenes) - 1, max(1, int(round(val_fraction * len(scenes)))))
    return ordered[:-n_val], ordered[-n_val:]


def build_pretrain_dataset(scenes, cfgs, patch_size=32, val_fraction=0.1, max_train=None, max_val=None,
                           seed=0) -> PretrainDataset:
    """Render every scene at every config, tile, and label each patch by majority.

    Patches whose majority is background are dropped; ``max_train``/``max_val``
    subsample (seeded) after tiling.
    """
    train_scenes, val_scenes = split_scenes(scenes, val_fraction)
    classes = max(max(s.materials) for s in scenes)
    sources, index = [], []
    rng = np.random.default_rng([seed, 5])
    for split, group, cap in (("train", train_scenes, max_train), ("val", val_scenes, max_val)):
        entries = []
        for scene in group:
            for cfg in cfgs:
                raster, labels = render(scene, cfg)
                src = len(sources)
                sources.append((f"scene{scene.seed}_gsd{cfg.gsd:g}", raster, labels))
                for p in tile_flight(raster, labels, patch_size, cfg.overlap):
                    lab = majority_label(p.labels)
                    if lab != BACKGROUND:
                        entries.append(IndexEntry(split, src, p.row, p.col, lab))
        if cap is not None and len(entries) > cap:
            keep = np.sort(rng.choice(len(entries), cap, replace=False))
            entries = [entries[i] for i in keep]
        index.extend(entries)
    ds = PretrainDataset(sources, index, patch_size, classes,
                         tuple(s.seed for s in train_scenes), tuple(s.seed for s in val_scenes))
    missing = [c for c in range(1, classes + 1) if ds.histogram("train")[c] == 0]
    if missing:
        warnings.warn(f"classes absent from the training split: {missing}", stacklevel=2)
    return ds


def save_dataset(directory, ds: PretrainDataset) -> None:
    """Rendered scenes as MBR1/LBL1 pairs plus ``index.txt`` (one patch per line)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, raster, labels in ds.sources:
        write_raster(d / f"{name}.mbr", raster)
        write_labels(d / f"{name}.lbl", labels)
    lines = [f"# patch_size {ds.patch_size} classes {ds.classes}",
             f"# train_seeds {','.join(map(str, ds.train_seeds))}",
             f"# val_seeds {','.join(map(str, ds.val_seeds))}",
             "# split source row col label"]
    lines += [f"{e.split} {ds.sources[e.source][0]} {e.row} {e.col} {e.label}" for e in ds.index]
    (d / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(directory) -> PretrainDataset:
    d = Path(directory)
    meta, rows = {}, []
    for line in (d / "index.txt").read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] in ("patch_size", "train_seeds", "val_seeds"):
                meta[parts[0]] = parts[1:]
                if parts[0] == "patch_size":
                    meta["classes"] = parts[3]
            continue
        if line.strip():
            rows.append(line.split())
    names, sources, index = {}, [], []
    for split, name, r, c, lab in rows:
        if name not in names:
            names[name] = len(sources)
            sources.append((name, read_raster(d / f"{name}.mbr"), read_labels(d / f"{name}.lbl")))
        index.append(IndexEntry(split, names[name], int(r), int(c), int(lab)))
    seeds = lambda k: tuple(int(v) for v in "".join(meta.get(k, [])).split(",") if v)
    return PretrainDataset(sources, index, int(meta["patch_size"][0]), int(meta["classes"]),
                           seeds("train_seeds"), seeds("val_seeds"))


def with_bands(scene: SceneSpec, band_idx) -> SceneSpec:
    """Restrict irradiance and materials to a band subset (for reduced-band pretraining)."""
    idx = list(band_idx)
    mats = {k: replace(m, reflectance=tuple(m.reflectance[i] for i in idx)) for k, m in scene.materials.items()}
    return replace(scene, irradiance=tuple(scene.irradiance[i] for i in idx), materials=mats)
