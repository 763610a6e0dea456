"""``msiseg`` command line: one verb per pipeline stage.

Every verb takes ``--config FILE`` (key-value text with optional
``[section]`` blocks) and repeated ``--set [section.]key=value`` overrides;
later settings win (defaults < file < ``--set`` in order given < ``--seed``).
Unknown keys are rejected.  Each run writes ``config.txt`` (the fully
resolved config, loadable with ``--config``) and ``manifest.txt`` into its
output directory.

Exit status: 0 success, 1 domain error, 2 usage error.  Failures print one
line ``error: <kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import platform
import sys
import time
import typing
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArgumentError, FormatError, MsiSegError
from .textfmt import coerce, dump_text, read_text

log = logging.getLogger("msiseg")


class GradientCheckFailed(MsiSegError):
    kind = "gradcheck"


class UsageError(Exception):
    pass


# -- run configs -------------------------------------------------------------

@dataclass
class SynthRun:
    seed: int = 0
    kind: str = "pretrain"           # pretrain | flight | vegetation
    scenes: int = 8
    extent: float = 64.0
    gsds: tuple[float, ...] = (0.5, 1.0)
    patch: int = 32
    overlap: float = 0.5
    val_fraction: float = 0.25
    max_train: int | None = None
    max_val: int | None = None
    n_medium: int = 4
    n_objects: int = 10
    palette: str = "all"             # all | transfer | vegetation
    perturb: float = 0.0             # per-band reflectance jitter (flight scenes)
    fixed_light: bool = False
    log_level: str = "warning"


@dataclass
class PretrainRun:
    seed: int = 0
    log_level: str = "warning"


@dataclass
class FinetuneRun:
    seed: int = 0
    head: str = "refinenet"          # sharpmask | refinenet
    init: str = "random"             # random | pretrained
    patch: int = 32
    overlap: float = 0.5
    log_level: str = "warning"


@dataclass
class BaselineRun:
    seed: int = 0
    log_level: str = "warning"


@dataclass
class EvaluateRun:
    seed: int = 0
    overlap: float = 0.5
    log_level: str = "warning"


@dataclass
class AblateRun:
    seed: int = 0
    kind: str = "svm"
    subsets: tuple[str, ...] = ("rgb", "vnir4", "all6")
    train_scenes: int = 2            # bundled vegetation benchmark only
    test_scenes: int = 1
    log_level: str = "warning"


@dataclass
class RegisterRun:
    seed: int = 0
    reference_band: int = 0
    log_level: str = "warning"


@dataclass
class GradcheckRun:
    seed: int = 0
    tolerance: float = 1e-3
    graphs: bool = True
    max_per_tensor: int = 2
    log_level: str = "warning"


@dataclass
class ReportRun:
    seed: int = 0
    log_level: str = "warning"


def _sections(verb):
    """Section name -> default config object for a verb ("" = top level)."""
    from .baselines import BaselineSpec
    from .baselines.features import MicaSpec, ScaeSpec
    from .baselines.mlp import MlpSpec
    from .models import EncoderSpec, RefineNetHeadSpec, SharpMaskHeadSpec
    from .register import RansacConfig
    from .trainer import TrainConfig

    base = lambda: {"baseline": BaselineSpec(), "mlp": MlpSpec(), "mica": MicaSpec(), "scae": ScaeSpec()}
    return {
        "synth-gen": lambda: {"": SynthRun()},
        "pretrain": lambda: {"": PretrainRun(), "train": TrainConfig.pretraining(), "encoder": EncoderSpec()},
        "finetune": lambda: {"": FinetuneRun(), "train": TrainConfig(), "encoder": EncoderSpec(),
                             "sharpmask": SharpMaskHeadSpec(), "refinenet": RefineNetHeadSpec()},
        "baseline": lambda: {"": BaselineRun(), **base()},
        "evaluate": lambda: {"": EvaluateRun()},
        "ablate-bands": lambda: {"": AblateRun(), **base()},
        "register": lambda: {"": RegisterRun(), "ransac": RansacConfig()},
        "gradcheck": lambda: {"": GradcheckRun()},
        "report": lambda: {"": ReportRun()},
    }[verb]()


# the run seed feeds every seeded component; nested specs are set via their own sections
_HIDDEN = {"seed", "mlp", "mica", "scae"}


def _keys(section, obj):
    return [f.name for f in dataclasses.fields(obj) if section == "" or f.name not in _HIDDEN]


def _apply(section, obj, mapping):
    known = set(_keys(section, obj))
    unknown = sorted(set(mapping) - known)
    if unknown:
        where = f"[{section}]" if section else "top level"
        raise FormatError(f"unknown keys in {where}: {', '.join(unknown)}")
    hints = typing.get_type_hints(type(obj))
    return dataclasses.replace(obj, **{k: coerce(v, hints[k]) for k, v in mapping.items()})


def resolve_config(verb, config_path=None, overrides=(), seed=None) -> dict:
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``."""
    secs = _sections(verb)
    layers: list[tuple[str, dict]] = []
    if config_path is not None:
        top, blocks = read_text(config_path)
        layers.append(("", top))
        layers.extend(blocks)
    for item in overrides:
        if "=" not in item:
            raise FormatError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        sec, _, name = key.strip().rpartition(".")
        layers.append((sec, {name: value.strip()}))
    if seed is not None:
        layers.append(("", {"seed": str(seed)}))
    for sec, mapping in layers:
        if sec not in secs:
            raise FormatError(f"unknown section [{sec}] for {verb}; expected one of "
                              f"{', '.join(s for s in secs if s) or 'none'}")
        secs[sec] = _apply(sec, secs[sec], mapping)
    s = secs[""].seed
    for name, obj in list(secs.items()):
        if name and "seed" in {f.name for f in dataclasses.fields(obj)}:
            secs[name] = dataclasses.replace(obj, seed=s)
    if "baseline" in secs:
        secs["baseline"] = dataclasses.replace(secs["baseline"], mlp=secs["mlp"], mica=secs["mica"],
                                               scae=secs["scae"])
    return secs


def config_text(secs) -> str:
    def flat(sec, obj):
        return {k: getattr(obj, k) for k in _keys(sec, obj)}
    return dump_text(flat("", secs[""]), [(k, flat(k, v)) for k, v in secs.items() if k])


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def write_manifest(out: Path, verb, argv, secs, inputs: dict, wall: float, outputs=()):
    import scipy

    text = config_text(secs)
    (out / "config.txt").write_text(text, encoding="utf-8")
    top = {"verb": verb, "command": " ".join(["msiseg", *argv]), "seed": secs[""].seed,
           "config_hash": config_hash(text), "config_file": "config.txt", "msiseg": __version__,
           "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version(),
           "wall_time_s": f"{wall:.3f}"}
    blocks = [("inputs", {k: str(v) for k, v in inputs.items() if v is not None})]
    if outputs:
        blocks.append(("outputs", {"files": ", ".join(sorted(outputs))}))
    (out / "manifest.txt").write_text(dump_text(top, blocks), encoding="utf-8")


# -- data helpers ------------------------------------------------------------

def read_pairs(directory) -> list:
    """Every ``<name>.mbr`` with a matching ``<name>.lbl`` in a directory, by name."""
    from .raster_io import read_labels, read_raster

    d = Path(directory)
    if not d.is_dir():
        raise ArgumentError(f"{d}: not a directory")
    pairs = []
    for p in sorted(d.glob("*.mbr")):
        lbl = p.with_suffix(".lbl")
        if lbl.exists():
            pairs.append((p.stem, read_raster(p), read_labels(lbl)))
    if not pairs:
        raise ArgumentError(f"{d}: no .mbr/.lbl pairs")
    return pairs


def _palette(name):
    from .benchmarks import TRANSFER_CLASSES, VEGETATION_CLASSES, subset_palette
    from .synth import default_palette

    if name == "all":
        return default_palette()
    if name == "transfer":
        return subset_palette(TRANSFER_CLASSES)
    if name == "vegetation":
        return subset_palette(VEGETATION_CLASSES)
    raise ArgumentError(f"unknown palette {name!r}; expected all, transfer or vegetation")


def _class_names(classes):
    # label files carry ids only; subset palettes renumber classes, so names would be ambiguous
    return [str(i) for i in range(1, classes + 1)]


# -- segmentation checkpoints ------------------------------------------------

def _encoder_meta(spec):
    L = spec.macro_layers
    return np.array([L, spec.in_bands, spec.stem_channels, *spec.channels[:L], *spec.blocks[:L]], np.float32)


def _encoder_from_meta(a):
    from .models import EncoderSpec

    v = [int(x) for x in a]
    L = v[0]
    return EncoderSpec(L, tuple(v[3:3 + L]), tuple(v[3 + L:3 + 2 * L]), v[1], v[2])


def save_encoder(path, encoder, stats, classes, patch):
    arrays = {f"param/{k}": v for k, v in encoder.state_dict().items()}
    arrays.update({"meta/encoder": _encoder_meta(encoder.spec), "meta/stats_mean": stats.mean,
                   "meta/stats_std": stats.std, "meta/classes": np.array([classes]), "meta/patch": np.array([patch])})
    from .engine.checkpoint import save_arrays

    save_arrays(path, arrays, kind="encoder")


def load_encoder(path):
    from .engine.checkpoint import load_arrays

    kind, a = load_arrays(path)
    if kind != "encoder":
        raise FormatError(f"{path}: expected an encoder checkpoint, found {kind!r}")
    state = {k[6:]: v for k, v in a.items() if k.startswith("param/")}
    return _encoder_from_meta(a["meta/encoder"]), state


def _head_meta(head, spec):
    if head == "sharpmask":
        return np.array([spec.bridge_width, spec.base], np.float32)
    return np.array([spec.width, spec.rcu_blocks, spec.mrf_scales, *spec.crp_windows, spec.output_rcu,
                     spec.branch_gain], np.float32)


def build_segmenter(head, enc_spec, head_spec, classes, seed):
    from .models import build_encoder, build_refinenet, build_sharpmask

    if head == "sharpmask":
        depth = min(4, enc_spec.macro_layers)
        return build_sharpmask(build_encoder(enc_spec.truncated(depth), seed=seed), head_spec, classes, seed=seed + 1)
    if head == "refinenet":
        return build_refinenet(build_encoder(enc_spec, seed=seed), head_spec.validate(), classes, seed=seed + 1)
    raise ArgumentError(f"unknown head {head!r}; expected sharpmask or refinenet")


def save_segmenter(path, head, model, enc_spec, head_spec, stats, patch):
    from .engine.checkpoint import save_arrays

    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays.update({"meta/encoder": _encoder_meta(enc_spec), "meta/head": _head_meta(head, head_spec),
                   "meta/stats_mean": stats.mean, "meta/stats_std": stats.std,
                   "meta/classes": np.array([model.classes]), "meta/patch": np.array([patch])})
    save_arrays(path, arrays, kind=head)


def load_segmenter(path):
    """(model, stats, patch) from a sharpmask/refinenet checkpoint."""
    from .engine.checkpoint import load_arrays
    from .models import RefineNetHeadSpec, SharpMaskHeadSpec
    from .raster_io import ChannelStats

    kind, a = load_arrays(path)
    if kind not in ("sharpmask", "refinenet"):
        raise FormatError(f"{path}: not a segmentation checkpoint ({kind!r})")
    h = a["meta/head"]
    if kind == "sharpmask":
        head_spec = SharpMaskHeadSpec(int(h[0]), int(h[1]))
    else:
        head_spec = RefineNetHeadSpec(int(h[0]), int(h[1]), int(h[2]), tuple(int(v) for v in h[3:7]), int(h[7]),
                                      float(h[8]))
    model = build_segmenter(kind, _encoder_from_meta(a["meta/encoder"]), head_spec, int(a["meta/classes"][0]), 0)
    model.load_state_dict({k[6:]: v for k, v in a.items() if k.startswith("param/")}, strict=True)
    stats = ChannelStats(a["meta/stats_mean"].astype(np.float64), a["meta/stats_std"].astype(np.float64))
    return model.eval(), stats, int(a["meta/patch"][0])


# -- verbs -------------------------------------------------------------------

def _out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth_gen(args, secs):
    from .benchmarks import fixed_light, perturbed_palette, vegetation_scene
    from .raster_io import write_labels, write_raster
    from .synth import RenderConfig, build_pretrain_dataset, random_scene, render, save_dataset

    c = secs[""]
    out = _out(args)
    if c.scenes < 1 or not c.gsds:
        raise ArgumentError("need >= 1 scene and >= 1 gsd")
    pal = _palette(c.palette)
    seeds = [1000 * c.seed + i for i in range(c.scenes)]
    if c.kind == "pretrain":
        scenes = [random_scene(s, (c.extent, c.extent), pal, n_medium=c.n_medium, n_objects=c.n_objects)
                  for s in seeds]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            ds = build_pretrain_dataset(scenes, [RenderConfig(g, overlap=c.overlap) for g in c.gsds], c.patch,
                                        c.val_fraction, c.max_train, c.max_val, seed=c.seed)
        for w in caught:
            log.warning("%s", w.message)
        save_dataset(out, ds)
        log.info("%d train / %d val patches", len(ds.entries("train")), len(ds.entries("val")))
        return {"files": [p.name for p in out.iterdir() if p.suffix in (".mbr", ".lbl", ".txt")]}
    if c.kind not in ("flight", "vegetation"):
        raise ArgumentError(f"unknown synth kind {c.kind!r}; expected pretrain, flight or vegetation")
    files = []
    for s in seeds:
        if c.kind == "vegetation":
            scene = vegetation_scene(s, c.extent)
        else:
            p = perturbed_palette(pal, c.seed, c.perturb) if c.perturb > 0 else pal
            scene = random_scene(s, (c.extent, c.extent), p, n_medium=c.n_medium, n_objects=c.n_objects)
            scene = fixed_light(scene) if c.fixed_light else scene
        for g in c.gsds:
            raster, labels = render(scene, RenderConfig(g))
            name = f"scene{s}_gsd{g:g}"
            write_raster(out / f"{name}.mbr", raster)
            write_labels(out / f"{name}.lbl", labels)
            files += [f"{name}.mbr", f"{name}.lbl"]
    return {"files": files}


def cmd_pretrain(args, secs):
    from .engine.checkpoint import save_arrays
    from .models import PatchClassifier
    from .synth import load_dataset
    from .trainer import evaluate, pretrain, standardize, write_curves, write_metrics
    from .trainer import _predict_logits

    if args.data is None:
        raise UsageError("--data is required")
    out = _out(args)
    ds = load_dataset(args.data)
    x, y = ds.arrays("train")
    xv, yv = ds.arrays("val")
    if len(x) == 0 or len(xv) == 0:
        raise ArgumentError("dataset needs non-empty train and val splits")
    enc = dataclasses.replace(secs["encoder"], in_bands=x.shape[1]).validate()
    model = PatchClassifier(enc, ds.classes, np.random.default_rng([secs[""].seed, 1]))
    res = pretrain(model, (x, y), (xv, yv), secs["train"], ds.classes)
    write_curves(out / "curves.csv", [res.train])
    pred = _predict_logits(model, standardize(xv, res.stats)).argmax(1) + 1
    ev = evaluate(pred[None], yv[None], ds.classes)
    write_metrics(out, ev, extra={"best_epoch": res.train.best_epoch, "epochs": res.train.epochs})
    save_encoder(out / "encoder.mpk", model.encoder, res.stats, ds.classes, ds.patch_size)
    save_arrays(out / "classifier.mpk", model.state_dict(), kind="patch-classifier")
    print(f"pretrain: {res.train.epochs} epochs, val OA {100 * ev.oa:.2f}%, AA {100 * ev.aa:.2f}%")
    return {"files": ["encoder.mpk", "classifier.mpk", "curves.csv", "metrics.txt", "metrics.kv"]}


def _patches(pairs, size, overlap):
    from .benchmarks import segmentation_patches

    x, y = segmentation_patches([(r, l) for _, r, l in pairs], size, overlap)
    if len(x) == 0:
        raise ArgumentError(f"no labeled {size}px patches found")
    return x, y


def _score_segmenter(model, stats, patch, pairs, overlap, out, classes):
    from .raster_io import write_labels
    from .trainer import confusion_matrix, metrics_from_confusion, predict_raster, write_metrics

    cm = 0
    for name, r, l in pairs:
        pred = predict_raster(model, r, stats, patch, overlap)
        write_labels(out / f"pred_{name}.lbl", pred)
        cm = cm + confusion_matrix(pred, l, classes, r.valid_mask)
    ev = metrics_from_confusion(cm)
    write_metrics(out, ev, _class_names(classes))
    return ev


def cmd_finetune(args, secs):
    from .trainer import finetune, write_curves

    c = secs[""]
    if args.train is None or args.val is None:
        raise UsageError("--train and --val are required")
    out = _out(args)
    train, val = read_pairs(args.train), read_pairs(args.val)
    classes = max(l.classes for _, _, l in train + val)
    state = None
    enc = dataclasses.replace(secs["encoder"], in_bands=train[0][1].bands)
    if c.init == "pretrained":
        if args.encoder is None:
            raise ArgumentError("pretrained init requires --encoder")
        enc, state = load_encoder(args.encoder)
    elif c.init != "random":
        raise ArgumentError("init must be random or pretrained")
    head_spec = secs[c.head] if c.head in ("sharpmask", "refinenet") else None
    model = build_segmenter(c.head, enc.validate(), head_spec, classes, c.seed)
    res = finetune(model, _patches(train, c.patch, c.overlap), _patches(val, c.patch, c.overlap), secs["train"],
                   c.init, state)
    write_curves(out / "curves.csv", res.stages)
    save_segmenter(out / "model.mpk", c.head, model, enc, head_spec, res.stats, c.patch)
    files = ["model.mpk", "curves.csv"]
    if args.test is not None:
        ev = _score_segmenter(model, res.stats, c.patch, read_pairs(args.test), c.overlap, out, classes)
        print(f"finetune {c.head}/{c.init}: test AA {100 * ev.aa:.2f}%  OA {100 * ev.oa:.2f}%")
        files += ["metrics.txt", "metrics.kv", "confusion.csv", "confusion_normalized.csv"]
    return {"files": files}


def cmd_baseline(args, secs):
    from .baselines import evaluate_pipeline, fit_baseline
    from .raster_io import write_labels
    from .trainer import write_metrics

    if args.train is None:
        raise UsageError("--train is required")
    out = _out(args)
    train = read_pairs(args.train)
    test = read_pairs(args.test) if args.test is not None else []
    classes = max(l.classes for _, _, l in train + test)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pipe = fit_baseline(args.kind, [(r, l) for _, r, l in train], secs["baseline"], secs[""].seed, classes)
    pipe.save(out / "model.mpk")
    files = ["model.mpk"]
    if test:
        for name, r, _ in test:
            write_labels(out / f"pred_{name}.lbl", pipe.predict(r))
        ev = evaluate_pipeline(pipe, [(r, l) for _, r, l in test])
        write_metrics(out, ev, _class_names(classes))
        print(f"baseline {args.kind}: test AA {100 * ev.aa:.2f}%  OA {100 * ev.oa:.2f}%")
        files += ["metrics.txt", "metrics.kv", "confusion.csv", "confusion_normalized.csv"]
    return {"files": files}


def cmd_evaluate(args, secs):
    from .baselines import evaluate_pipeline, load_pipeline
    from .engine.checkpoint import load_arrays
    from .raster_io import read_labels, read_raster
    from .trainer import evaluate, write_metrics

    out = _out(args)
    if args.pred is not None and args.truth is not None:
        pred, truth = read_labels(args.pred), read_labels(args.truth)
        valid = read_raster(args.mask).valid_mask if args.mask else None
        ev = evaluate(pred, truth, truth.classes, valid)
        write_metrics(out, ev, _class_names(truth.classes))
    elif args.model is not None and args.test is not None:
        kind, _ = load_arrays(args.model)
        pairs = read_pairs(args.test)
        if kind.startswith("baseline/"):
            pipe = load_pipeline(args.model)
            ev = evaluate_pipeline(pipe, [(r, l) for _, r, l in pairs])
            write_metrics(out, ev, _class_names(pipe.classes))
        else:
            model, stats, patch = load_segmenter(args.model)
            ev = _score_segmenter(model, stats, patch, pairs, secs[""].overlap, out, model.classes)
    else:
        raise UsageError("give --pred and --truth, or --model and --test")
    print(f"evaluate: AA {100 * ev.aa:.2f}%  OA {100 * ev.oa:.2f}%")
    return {"files": ["metrics.txt", "metrics.kv", "confusion.csv", "confusion_normalized.csv"]}


def cmd_ablate_bands(args, secs):
    from .benchmarks import vegetation_data
    from .svg import bar_chart
    from .trainer import BAND_PRESETS, ablation_table, band_ablation

    c = secs[""]
    out = _out(args)
    unknown = [s for s in c.subsets if s not in BAND_PRESETS]
    if unknown:
        raise ArgumentError(f"unknown band subsets {unknown}; presets are {', '.join(BAND_PRESETS)}")
    if args.train is not None and args.test is not None:
        train = [(r, l) for _, r, l in read_pairs(args.train)]
        test = [(r, l) for _, r, l in read_pairs(args.test)]
    elif args.train is None and args.test is None:
        train, test = vegetation_data(c.seed, c.train_scenes, c.test_scenes)
    else:
        raise UsageError("give both --train and --test, or neither for the bundled vegetation benchmark")
    rows = band_ablation(train, test, {s: BAND_PRESETS[s] for s in c.subsets}, c.kind, secs["baseline"], c.seed)
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    csv = ["subset,bands,aa,oa"] + [f"{r.name},{' '.join(map(str, r.bands))},{r.evaluation.aa:.6f},"
                                    f"{r.evaluation.oa:.6f}" for r in rows]
    (out / "ablation.csv").write_text("\n".join(csv) + "\n", encoding="utf-8")
    (out / "ablation.svg").write_text(bar_chart({r.name: 100 * r.evaluation.aa for r in rows},
                                                f"{c.kind} AA by band subset", "AA %"), encoding="utf-8")
    print(table, end="")
    return {"files": ["ablation.txt", "ablation.csv", "ablation.svg"]}


def cmd_register(args, secs):
    from .raster_io import read_raster, write_raster
    from .register import read_homography, register_raster

    if args.raster is None or args.global_h is None:
        raise UsageError("--raster and --global are required")
    out = _out(args)
    raster = read_raster(args.raster)
    reg, regs = register_raster(raster, secs[""].reference_band, read_homography(args.global_h), secs["ransac"])
    write_raster(out / "registered.mbr", reg)
    lines = ["# band fallback inliers h11 h12 h13 h21 h22 h23 h31 h32 h33"]
    for b, r in enumerate(regs):
        lines.append(f"{b} {int(r.fallback)} {r.inliers} " + " ".join(repr(float(v)) for v in r.homography.matrix.ravel()))
    (out / "homographies.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    fb = sum(r.fallback for r in regs)
    print(f"register: {raster.bands} bands, {fb} used the global transform")
    return {"files": ["registered.mbr", "homographies.txt"]}


def cmd_gradcheck(args, secs):
    from .checks import gradient_suite, suite_lines

    c = secs[""]
    results = gradient_suite(c.seed, c.tolerance, c.graphs, c.max_per_tensor)
    lines = suite_lines(results)
    print("\n".join(lines))
    files = []
    if args.out is not None:
        out = _out(args)
        detail = []
        for name, rep in results:
            detail.append(f"[{name}]")
            detail.extend(rep.lines())
        (out / "gradcheck.txt").write_text("\n".join(lines + [""] + detail) + "\n", encoding="utf-8")
        files.append("gradcheck.txt")
    bad = [n for n, r in results if not r.passed]
    if bad:
        raise GradientCheckFailed(f"relative error >= {c.tolerance} in {', '.join(bad)}")
    return {"files": files}


def _read_csv(path):
    rows = [line.split(",") for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    return rows[0], rows[1:]


def cmd_report(args, secs):
    from .svg import bar_chart, heatmap, line_chart

    if args.run is None:
        raise UsageError("--run is required")
    run = Path(args.run)
    out = Path(args.out) if args.out is not None else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    summary, files = [f"run: {run.name}"], []
    if (run / "metrics.txt").exists():
        summary += ["", (run / "metrics.txt").read_text(encoding="utf-8").rstrip()]
    if (run / "curves.csv").exists():
        head, rows = _read_csv(run / "curves.csv")
        loss, acc = {}, {}
        stage_offset, last_stage, base = {}, None, 0
        for stage, epoch, split, l, o in rows:
            if stage != last_stage:
                base = max((p[0] for s in loss.values() for p in s), default=0)
                stage_offset[stage], last_stage = base, stage
            x = stage_offset[stage] + int(epoch)
            loss.setdefault(f"{stage} {split}", []).append((x, float(l)))
            acc.setdefault(f"{stage} {split}", []).append((x, float(o)))
        (out / "loss.svg").write_text(line_chart(loss, "loss", ylabel="weighted CE"), encoding="utf-8")
        (out / "accuracy.svg").write_text(line_chart(acc, "overall accuracy", ylabel="OA"), encoding="utf-8")
        files += ["loss.svg", "accuracy.svg"]
        for name, pts in sorted(loss.items()):
            best = min(pts, key=lambda p: p[1])
            summary.append(f"{name}: {len(pts)} epochs, min loss {best[1]:.4f} at epoch {best[0]}")
    if (run / "confusion_normalized.csv").exists():
        head, rows = _read_csv(run / "confusion_normalized.csv")
        names = head[1:]
        m = [[float(v) for v in r[1:]] for r in rows]
        (out / "confusion.svg").write_text(heatmap(m, names, "row-normalized confusion (%)"), encoding="utf-8")
        files.append("confusion.svg")
    if (run / "ablation.csv").exists():
        head, rows = _read_csv(run / "ablation.csv")
        (out / "ablation.svg").write_text(bar_chart({r[0]: 100 * float(r[2]) for r in rows}, "AA by band subset",
                                                    "AA %"), encoding="utf-8")
        summary += ["", (run / "ablation.txt").read_text(encoding="utf-8").rstrip()] \
            if (run / "ablation.txt").exists() else []
        files.append("ablation.svg")
    if not files and len(summary) == 1:
        raise ArgumentError(f"{run}: no metrics, curves, confusion or ablation files to report")
    (out / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print("\n".join(summary))
    return {"files": files + ["summary.txt"]}


VERBS = {
    "synth-gen": (cmd_synth_gen, "render procedural scenes into a pretraining dataset or labeled flights"),
    "pretrain": (cmd_pretrain, "train the patch classifier on a synthetic dataset; saves the encoder"),
    "finetune": (cmd_finetune, "train a SharpMask or RefineNet head on labeled rasters"),
    "baseline": (cmd_baseline, "fit a per-pixel or spatial-spectral baseline"),
    "evaluate": (cmd_evaluate, "score predictions or a saved model against ground truth"),
    "ablate-bands": (cmd_ablate_bands, "compare a baseline across band subsets"),
    "register": (cmd_register, "co-register the bands of a raster to a reference band"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every layer and both segmentation graphs"),
    "report": (cmd_report, "render a run directory into summary.txt and SVG charts"),
}


# -- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _keys_help(verb) -> str:
    lines = ["accepted config keys (top level, then [section] blocks; --set section.key=value):"]
    for sec, obj in _sections(verb).items():
        lines.append(f"  [{sec}]" if sec else "  top level")
        for k in _keys(sec, obj):
            lines.append(f"    {k} (default: {getattr(obj, k)!r})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    from .baselines import KINDS

    p = _Parser(prog="msiseg", description="Desk-scale multispectral segmentation lab.")
    p.add_argument("--version", action="version", version=f"msiseg {__version__}")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser, metavar="VERB")
    for verb, (_, help_text) in VERBS.items():
        sp = sub.add_parser(verb, help=help_text, description=help_text, epilog=_keys_help(verb),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        if verb == "baseline":
            sp.add_argument("kind", choices=KINDS)
        sp.add_argument("--config", help="key-value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one key (repeatable, applied in order)")
        sp.add_argument("--seed", type=int, help="run seed (overrides config)")
        sp.add_argument("--out", help="output directory")
        if verb == "pretrain":
            sp.add_argument("--data", help="dataset directory from synth-gen")
        if verb in ("finetune", "baseline", "ablate-bands"):
            sp.add_argument("--train", help="directory of .mbr/.lbl training pairs")
            sp.add_argument("--test", help="directory of .mbr/.lbl test pairs")
        if verb == "finetune":
            sp.add_argument("--val", help="directory of .mbr/.lbl validation pairs")
            sp.add_argument("--encoder", help="pretrained encoder checkpoint")
        if verb == "evaluate":
            sp.add_argument("--pred", help="predicted label map (.lbl)")
            sp.add_argument("--truth", help="ground-truth label map (.lbl)")
            sp.add_argument("--mask", help="raster whose valid mask restricts scoring")
            sp.add_argument("--model", help="saved model checkpoint")
            sp.add_argument("--test", help="directory of .mbr/.lbl test pairs")
        if verb == "register":
            sp.add_argument("--raster", help="multiband raster to register")
            sp.add_argument("--global", dest="global_h", help="global homography (9 numbers, row-major)")
        if verb == "report":
            sp.add_argument("--run", help="run directory to summarize")
    return p


def _inputs(args):
    names = ("data", "train", "val", "test", "encoder", "pred", "truth", "mask", "model", "raster", "global_h",
             "run", "config")
    return {n: getattr(args, n, None) for n in names}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.verb is None:
            raise UsageError("a verb is required: " + ", ".join(VERBS))
        secs = resolve_config(args.verb, args.config, args.set, args.seed)
        logging.basicConfig(level=secs[""].log_level.upper(), format="%(levelname)s %(name)s: %(message)s",
                            force=True)
        t0 = time.perf_counter()
        result = VERBS[args.verb][0](args, secs)
        out = getattr(args, "out", None)
        if args.verb == "report" and out is None:
            out = str(Path(args.run) / "report")
        if out is not None:
            write_manifest(Path(out), args.verb, argv, secs, _inputs(args), time.perf_counter() - t0,
                           result.get("files", ()))
        return 0
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except MsiSegError as exc:
        print(f"error: {exc.kind}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        kind = "io" if isinstance(exc, OSError) else "value"
        print(f"error: {kind}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
