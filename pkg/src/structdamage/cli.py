"""Command-line entry point: ``structdamage <command> [options]``.

Options come from built-in defaults, then the ``[command]`` section of an
INI file given by ``--config``, then flags.  Every command writes its
outputs plus ``manifest.json`` (seed, resolved config, config hash, version
and output digests) into ``--out``.

Exit codes: 0 ok, 1 bad input (missing or invalid files), 2 usage error,
3 internal error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import subprocess
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import __version__
from . import checkpoint
from .classifier import (ClassifierTrainConfig, ClassPrediction, build_classifier, history_csv,
                         load_classifier, save_classifier)
from .classifier import DataError as ClassifierDataError
from .classifier import train_classifier
from .dataset_io import (SCENE_LEVELS, AnnotationError, ImageRecord, LabeledDataset, SyntheticSpec,
                         generate_synthetic, read_dataset, read_image, resize_record, save_annotations,
                         split_dataset, write_dataset, write_image)
from .detector import (KINDS, DetectorTrainConfig, build_detector, load_detector, save_detector,
                       train_detector)
from .detector.training import DataError as DetectorDataError
from .evaluation import (DataError as EvalDataError, ReportRow, build_report, comparison_from_judgments,
                         comparison_report, dump_judgments, field_report, judge_cascade, judge_detection,
                         judgment_rows, load_judgments)
from .pipelines import (PALETTES, CascadeResult, DetectionResult, cascade_to_result, cascaded_infer,
                        dump_results, end_to_end_infer, load_results, render_overlay)
from .segmenter import DataError as SegDataError
from .segmenter import SegTrainConfig, build_unet, load_unet, save_unet, train_unet

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3
INPUT_ERRORS = (FileNotFoundError, IsADirectoryError, AnnotationError, checkpoint.CheckpointError,
                ClassifierDataError, SegDataError, DetectorDataError, EvalDataError)
# CLI names for the overlay palettes, after the figures that use each color scheme.
PALETTE_ALIASES = {"fig2": "labels", "fig11": "detections", "fig10": "cascade"}


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _depth(text: str):
    return text if text == "toy" else int(text)


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable | None  # None marks a flag (store_true)
    default: Any = None
    help: str = ""
    choices: tuple | None = None
    nargs: str | None = None


DATA = Opt("data", Path, None, "annotation JSON (images resolved next to it)")
IMAGE = Opt("image", Path, None, "single PNG/JPEG image instead of --data")

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "prepare": ("load, validate, split or synthesize a dataset", [
        Opt("annotations", Path, None, "existing annotation JSON to validate and copy"),
        Opt("synthetic", str, None, "synthesize instead: key=value items (count, image_size, "
            "crack_density, spall_density, seed)", nargs="+"),
        Opt("split", _floats, None, "train,val,test ratios, e.g. 0.64,0.16,0.20"),
        Opt("resize", _ints, None, "W,H to resize every record to"),
    ]),
    "train-classifier": ("train a residual-network classifier for one task", [
        DATA,
        Opt("task", int, 2, "classification task id", choices=tuple(range(1, 9))),
        Opt("depth", _depth, "toy", "toy, 18, 50 or 152"),
        Opt("lr", float, 0.001, "learning rate"),
        Opt("momentum", float, 0.9),
        Opt("batch_size", int, 40),
        Opt("epochs", int, 100),
        Opt("weight_decay", float, 0.0),
        Opt("pretrained", Path, None, "checkpoint whose backbone initializes the model"),
    ]),
    "train-unet": ("train a U-Net segmenter", [
        DATA,
        Opt("depth", int, 4),
        Opt("base_channels", int, 16),
        Opt("categories", _names, ("crack",), "comma-separated mask categories (1 or 2)"),
        Opt("lr", float, 1e-4),
        Opt("epochs", int, 50),
        Opt("batch_size", int, 0, "0 means full batch"),
        Opt("size", int, 256, "train at size x size; 0 keeps native size"),
    ]),
    "train-detector": ("train a Mask R-CNN variant", [
        DATA,
        Opt("variant", str, "apanet", choices=KINDS),
        Opt("lr", float, 0.002),
        Opt("momentum", float, 0.9),
        Opt("weight_decay", float, 0.0001),
        Opt("epochs", int, 100),
        Opt("warmup_steps", int, 0),
        Opt("augment", None, False, "flip / brightness / scale augmentation"),
    ]),
    "infer-cascade": ("classify, then segment images the gate passes", [
        DATA, IMAGE,
        Opt("classifier", Path, None, "classifier checkpoint; omit for an always-open gate"),
        Opt("unet", Path, None, "U-Net checkpoint"),
        Opt("damage_classes", _ints, (0,), "classifier class ids that open the gate"),
        Opt("categories", _names, ("crack",), "category of each U-Net output channel"),
        Opt("threshold", float, 0.5, "mask probability threshold"),
    ]),
    "infer-detect": ("run a detector end to end", [
        DATA, IMAGE,
        Opt("detector", Path, None, "detector checkpoint; omit for a freshly initialized model"),
        Opt("variant", str, "apanet", "variant used when no checkpoint is given", choices=KINDS),
        Opt("threshold", float, 0.5, "score threshold"),
    ]),
    "evaluate": ("judge predictions against annotations and tabulate", [
        DATA,
        Opt("detections", Path, None, "detection or cascade dump to judge"),
        Opt("judgments", Path, None, "existing judgment files to tabulate", nargs="+"),
        Opt("template", str, "simple", choices=("simple", "average", "table2")),
        Opt("iou_min", float, 0.1, "box IoU needed to count a detection as marking damage"),
        Opt("min_overlap", int, 1, "shared pixels needed to count a mask as marking damage"),
    ]),
    "report": ("render N / TP / accuracy tables from counts", [
        Opt("counts", Path, None, "CSV with name,n,tp[,printed] columns"),
        Opt("reference", str, None, "built-in reference counts", choices=("crack", "field")),
        Opt("template", str, "simple", choices=("simple", "average")),
    ]),
    "overlay": ("draw predictions over images", [
        DATA, IMAGE,
        Opt("detections", Path, None, "detection or cascade dump"),
        Opt("palette", str, "fig11", choices=tuple(PALETTE_ALIASES) + tuple(PALETTES)),
        Opt("alpha", float, 0.5),
        Opt("panels", None, False, "original | predicted | overlay side by side"),
    ]),
}


@dataclass
class RunConfig:
    command: str
    seed: int
    out: Path
    deterministic: bool
    options: dict[str, Any] = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["options"][name]
        except KeyError:
            raise AttributeError(name) from None

    def to_json(self) -> dict:
        def plain(v):
            if isinstance(v, Path):
                return str(v)
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            return v
        return {"command": self.command, "seed": self.seed,
                "options": {k: plain(v) for k, v in sorted(self.options.items())}}

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="structdamage", description="Structural damage detection toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, default=None, help="INI file; section [%s]" % name)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None, help="output directory (default: out)")
        p.add_argument("--deterministic", action="store_true", default=None,
                       help="single-threaded deterministic kernels")
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            if o.type is None:
                p.add_argument(flag, dest=o.name, action="store_true", default=None, help=o.help)
            else:
                kw = {"nargs": o.nargs} if o.nargs else {}
                p.add_argument(flag, dest=o.name, type=o.type, default=None, choices=o.choices,
                               help=o.help, **kw)
    return parser


def _from_file(path: Path, command: str) -> dict[str, str]:
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(path.read_text())
    return dict(cp[command]) if cp.has_section(command) else {}


def parse_config(argv: list[str] | None = None) -> RunConfig:
    """Merge defaults, the config file section and flags (flags win)."""
    ns = build_parser().parse_args(argv)
    command = ns.command
    opts = {o.name: o for o in COMMANDS[command][1]}
    general = {"seed": (int, 0), "out": (Path, Path("out")), "deterministic": (_bool, False)}
    values: dict[str, Any] = {k: o.default for k, o in opts.items()}
    values.update({k: d for k, (_, d) in general.items()})
    if ns.config is not None:
        for key, raw in _from_file(ns.config, command).items():
            key = key.replace("-", "_")
            if key in general:
                conv = general[key][0]
            elif key in opts:
                o = opts[key]
                conv = _bool if o.type is None else o.type
            else:
                raise UsageError(f"unknown key {key!r} in [{command}] of {ns.config}")
            try:
                if key in opts and opts[key].nargs:
                    values[key] = [conv(t) for t in raw.split()]
                else:
                    values[key] = conv(raw)
            except ValueError as e:
                raise UsageError(f"{ns.config} [{command}] {key}: {e}") from None
            if key in opts and opts[key].choices and values[key] not in opts[key].choices:
                raise UsageError(f"{key} must be one of {opts[key].choices}")
    for key in list(opts) + list(general):
        v = getattr(ns, key, None)
        if v is not None:
            values[key] = v
    options = {k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items() if k not in general}
    cfg = RunConfig(command, values["seed"], values["out"], bool(values["deterministic"]), options)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    o = cfg.options
    for key in ("epochs",):
        if key in o and o[key] < 1:
            raise UsageError(f"--epochs must be >= 1, got {o[key]}")
    for key in ("lr", "momentum", "weight_decay"):
        if key in o and o[key] < 0:
            raise UsageError(f"--{key.replace('_', '-')} must be >= 0, got {o[key]}")
    for key in ("batch_size", "warmup_steps", "min_overlap", "size"):
        if key in o and o[key] < 0:
            raise UsageError(f"--{key.replace('_', '-')} must be >= 0")
    if "alpha" in o and not 0 <= o["alpha"] <= 1:
        raise UsageError("--alpha must be in [0, 1]")
    if "iou_min" in o and not 0 <= o["iou_min"] <= 1:
        raise UsageError("--iou-min must be in [0, 1]")
    if "threshold" in o and not 0 < o["threshold"] < 1:
        raise UsageError("--threshold must be in (0, 1)")
    if cfg.seed < 0:
        raise UsageError("--seed must be >= 0")


# ---------------------------------------------------------------------------
# Helpers


def _version() -> str:
    """``git describe``-style version: the tag-less package version plus commit, if known."""
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"v{__version__}-g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(cfg: RunConfig, outputs: list[Path]):
    manifest = {
        **cfg.to_json(),
        "config_hash": cfg.hash(),
        "version": _version(),
        "outputs": {str(p.relative_to(cfg.out)): _sha256(p) for p in sorted(outputs)},
    }
    (cfg.out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def _require(cfg: RunConfig, *keys):
    for k in keys:
        if cfg.options.get(k) is None:
            raise UsageError(f"{cfg.command} needs --{k.replace('_', '-')}")


def _load_data(cfg: RunConfig, allow_image: bool = False) -> LabeledDataset:
    if allow_image and cfg.options.get("image") is not None:
        if cfg.options.get("data") is not None:
            raise UsageError("give either --data or --image, not both")
        path = cfg.image
        if not path.is_file():
            raise FileNotFoundError(f"image not found: {path}")
        px = read_image(path)
        rec = ImageRecord(1, px.shape[1], px.shape[0], px, file_name=path.name)
        return LabeledDataset([rec], provenance=str(path))
    _require(cfg, "data")
    if not cfg.data.is_file():
        raise FileNotFoundError(f"annotation file not found: {cfg.data}")
    return read_dataset(cfg.data)


def _settings(cls, **kw):
    try:
        return cls(**kw)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _write_history(path: Path, history: list[dict]):
    keys = list(history[0]) if history else ["epoch", "loss"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in history:
        w.writerow([row[k] if k == "epoch" else f"{row[k]:.8f}" for k in keys])
    path.write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# Commands


def cmd_prepare(cfg: RunConfig) -> list[Path]:
    if (cfg.annotations is None) == (cfg.synthetic is None):
        raise UsageError("prepare needs exactly one of --annotations or --synthetic")
    if cfg.synthetic is not None:
        kv, seed = {}, cfg.seed
        conv = {"count": int, "image_size": int, "crack_density": float, "spall_density": float}
        for item in cfg.synthetic:
            if "=" not in item:
                raise UsageError(f"--synthetic expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            try:
                if k == "seed":
                    seed = int(v)
                elif k in conv:
                    kv[k] = conv[k](v)
                else:
                    raise UsageError(f"unknown --synthetic key {k!r}; choose from {sorted(conv) + ['seed']}")
            except ValueError as e:
                raise UsageError(f"--synthetic {k}: {e}") from None
        ds = generate_synthetic(SyntheticSpec(**kv), seed)
    else:
        if not cfg.annotations.is_file():
            raise FileNotFoundError(f"annotation file not found: {cfg.annotations}")
        ds = read_dataset(cfg.annotations)
    if cfg.resize is not None:
        if len(cfg.resize) != 2 or min(cfg.resize) < 1:
            raise UsageError("--resize expects W,H")
        ds = LabeledDataset([resize_record(r, tuple(cfg.resize)) for r in ds.records],
                            dict(ds.categories), ds.provenance)
    out_dir = cfg.out / "dataset"
    outputs = [write_dataset(ds, out_dir)]
    outputs += [out_dir / r.file_name for r in ds.records if r.pixels is not None]
    if cfg.split is not None:
        try:
            parts = split_dataset(ds, cfg.split, cfg.seed)
        except ValueError as e:
            raise UsageError(str(e)) from None
        for name, part in zip(("train", "val", "test"), parts):
            p = out_dir / f"{name}.json"
            p.write_bytes(save_annotations(part))
            outputs.append(p)
    return outputs


def cmd_train_classifier(cfg: RunConfig) -> list[Path]:
    ds = _load_data(cfg)
    train_cfg = _settings(ClassifierTrainConfig, learning_rate=cfg.lr, momentum=cfg.momentum,
                          batch_size=cfg.batch_size, epochs=cfg.epochs, weight_decay=cfg.weight_decay)
    model = build_classifier(cfg.task, cfg.depth, cfg.pretrained, seed=cfg.seed)
    model, history = train_classifier(model, ds, cfg.task, train_cfg, seed=cfg.seed)
    ckpt = save_classifier(cfg.out / "classifier.ckpt", model)
    hist = cfg.out / "history.csv"
    hist.write_text(history_csv(history))
    return [ckpt, hist]


def cmd_train_unet(cfg: RunConfig) -> list[Path]:
    ds = _load_data(cfg)
    records = ds.records
    if cfg.size:
        records = [resize_record(r, (cfg.size, cfg.size)) for r in records]
    pairs = [(r.pixels, np.stack([r.category_mask(c) for c in cfg.categories])) for r in records]
    model = build_unet(cfg.depth, cfg.base_channels, len(cfg.categories), seed=cfg.seed)
    model, history = train_unet(model, pairs, _settings(SegTrainConfig, learning_rate=cfg.lr, epochs=cfg.epochs,
                                                       batch_size=cfg.batch_size or None),
                                seed=cfg.seed)
    ckpt = save_unet(cfg.out / "unet.ckpt", model)
    hist = cfg.out / "history.csv"
    _write_history(hist, history)
    return [ckpt, hist]


def cmd_train_detector(cfg: RunConfig) -> list[Path]:
    ds = _load_data(cfg)
    train_cfg = _settings(DetectorTrainConfig, learning_rate=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay, epochs=cfg.epochs, warmup_steps=cfg.warmup_steps)
    model = build_detector(cfg.variant, seed=cfg.seed)
    model, history = train_detector(model, ds, train_cfg, seed=cfg.seed, augment=bool(cfg.augment))
    ckpt = save_detector(cfg.out / "detector.ckpt", model)
    hist = cfg.out / "history.csv"
    _write_history(hist, history)
    return [ckpt, hist]


def cmd_infer_cascade(cfg: RunConfig) -> list[Path]:
    _require(cfg, "unet")
    ds = _load_data(cfg, allow_image=True)
    seg = load_unet(cfg.unet)
    if len(cfg.categories) != seg.num_categories:
        raise UsageError(f"--categories names {len(cfg.categories)} channels; the U-Net has {seg.num_categories}")
    if cfg.classifier is not None:
        clf, method = load_classifier(cfg.classifier), "cascade"
    else:
        clf, method = None, "segmenter"
    results = []
    for rec in ds.records:
        gate = clf if clf is not None else _open_gate(max(cfg.damage_classes) + 1, cfg.damage_classes[0])
        res = cascaded_infer(rec.pixels, gate, seg, cfg.damage_classes, cfg.categories, cfg.threshold)
        results.append(cascade_to_result(rec.id, res))
    out = cfg.out / "detections.json"
    out.write_bytes(dump_results(results, method))
    return [out]


def _open_gate(num_classes: int, cls: int) -> ClassPrediction:
    probs = np.zeros(num_classes)
    probs[cls] = 1.0
    return ClassPrediction(probs)


def cmd_infer_detect(cfg: RunConfig) -> list[Path]:
    ds = _load_data(cfg, allow_image=True)
    if cfg.detector is not None:
        model = load_detector(cfg.detector)
    else:
        model = build_detector(cfg.variant, seed=cfg.seed)
    results = end_to_end_infer([r.pixels for r in ds.records], model, cfg.threshold,
                               image_ids=[r.id for r in ds.records])
    out = cfg.out / "detections.json"
    out.write_bytes(dump_results(results, "detector"))
    return [out]


def _scene_order():
    return tuple(SCENE_LEVELS)


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    outputs = []
    if cfg.detections is not None:
        ds = _load_data(cfg)
        if not cfg.detections.is_file():
            raise FileNotFoundError(f"detections not found: {cfg.detections}")
        doc = json.loads(cfg.detections.read_bytes())
        method = doc.get("method")
        results = load_results(cfg.detections.read_bytes())
        by_id = {r.id: r for r in ds.records}
        judgments = []
        for res in results:
            if res.image_id not in by_id:
                raise EvalDataError(f"detections mention unknown image id {res.image_id}")
            rec = by_id[res.image_id]
            if res.gated is not None:
                masks: dict[str, np.ndarray] = {}
                for d in res.detections:
                    masks[d.category] = masks.get(d.category, np.zeros_like(d.mask)) | d.mask
                verdict = ClassPrediction([1.0])
                j = judge_cascade(CascadeResult(verdict, res.gated, masks if res.gated else None),
                                  rec, cfg.min_overlap)
            else:
                j = judge_detection(res.detections, rec, cfg.iou_min, rec.id)
            judgments.append(type(j)(rec.id, j.verdict, j.reason, rec.scene_level, j.gated))
        jpath = cfg.out / "judgments.json"
        jpath.write_bytes(dump_judgments(judgments, method))
        outputs.append(jpath)
        sets = {method or "predictions": judgments}
    elif cfg.judgments is not None:
        sets = {}
        for p in cfg.judgments:
            if not p.is_file():
                raise FileNotFoundError(f"judgments not found: {p}")
            method, js = load_judgments(p.read_bytes())
            key = method or p.stem
            if key in sets:
                raise UsageError(f"two judgment files for method {key!r}")
            sets[key] = js
    else:
        raise UsageError("evaluate needs --detections (with --data) or --judgments")
    if cfg.template == "table2":
        missing = {"segmenter", "cascade", "detector"} - set(sets)
        if missing:
            raise UsageError(f"the table2 template needs judgments for {sorted(missing)}")
        rows = comparison_from_judgments(sets["segmenter"], sets["cascade"], sets["detector"], _scene_order())
        report = comparison_report(rows)
    else:
        if len(sets) != 1:
            raise UsageError("the simple and average templates take one set of judgments")
        (name, js), = sets.items()
        report = build_report(judgment_rows(js, _scene_order()), cfg.template, f"Accuracy ({name})")
    return outputs + _write_report(cfg, report)


def _write_report(cfg: RunConfig, report) -> list[Path]:
    txt, csv_path = cfg.out / "report.txt", cfg.out / "report.csv"
    txt.write_text(report.render_text())
    csv_path.write_text(report.render_csv())
    return [txt, csv_path]


def cmd_report(cfg: RunConfig) -> list[Path]:
    if (cfg.counts is None) == (cfg.reference is None):
        raise UsageError("report needs exactly one of --counts or --reference")
    if cfg.reference == "crack":
        report = comparison_report()
    elif cfg.reference == "field":
        report = field_report()
    else:
        if not cfg.counts.is_file():
            raise FileNotFoundError(f"counts file not found: {cfg.counts}")
        rows = []
        for i, r in enumerate(csv.DictReader(io.StringIO(cfg.counts.read_text()))):
            try:
                rows.append(ReportRow(r["name"], int(r["n"]), int(r["tp"]), r.get("printed") or None))
            except (KeyError, ValueError) as e:
                raise EvalDataError(f"{cfg.counts} row {i + 1}: {e}") from None
        if not rows:
            raise EvalDataError(f"{cfg.counts} has no rows")
        report = build_report(rows, cfg.template, cfg.counts.stem)
    return _write_report(cfg, report)


def cmd_overlay(cfg: RunConfig) -> list[Path]:
    _require(cfg, "detections")
    ds = _load_data(cfg, allow_image=True)
    if not cfg.detections.is_file():
        raise FileNotFoundError(f"detections not found: {cfg.detections}")
    results = {r.image_id: r for r in load_results(cfg.detections.read_bytes())}
    palette = PALETTE_ALIASES.get(cfg.palette, cfg.palette)
    out_dir = cfg.out / "overlays"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for rec in ds.records:
        res = results.get(rec.id, DetectionResult(rec.id))
        img = render_overlay(rec.pixels, res, palette, cfg.alpha, panels=bool(cfg.panels))
        p = out_dir / (Path(rec.file_name).stem + ".png")
        write_image(p, img)
        outputs.append(p)
    return outputs


HANDLERS = {
    "prepare": cmd_prepare, "train-classifier": cmd_train_classifier, "train-unet": cmd_train_unet,
    "train-detector": cmd_train_detector, "infer-cascade": cmd_infer_cascade,
    "infer-detect": cmd_infer_detect, "evaluate": cmd_evaluate, "report": cmd_report,
    "overlay": cmd_overlay,
}


def dispatch(cfg: RunConfig) -> int:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    cfg.out.mkdir(parents=True, exist_ok=True)
    outputs = HANDLERS[cfg.command](cfg)
    _write_manifest(cfg, outputs)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = parse_config(argv)
        return dispatch(cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except INPUT_ERRORS as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
