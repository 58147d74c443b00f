"""Command-line entry points.

Every command that trains or scores writes a run directory holding exactly
one ``manifest.json``: the command line, a snapshot of the resolved
configuration, seeds, SHA-256 digests of every input file, the artifacts
written (with digests), wall-clock time and the engine version.

Exit codes: 0 success, 1 validation or configuration error, 2 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time

import jsonschema
import numpy as np

from . import __version__
from .dataset import Samples, images_from_molecules
from .descriptors import DescriptorTable, read_descriptor_table
from .errors import AlignmentError, ConfigError, FusionError, LoadError, NumericError, StateError, ValidationError
from .eval import Ensemble, evaluate, threshold_filter
from .models import DEPTH_GRID, FAMILIES, WIDTH_GRID, CnnSpec, FusionModel, MlpSpec, build_cnn
from .molio import ImageArchive, RasterSpec, parse_record, rasterize, read_archive, split_records, write_archive
from .synthetic import make_corpus, pretraining_targets, write_corpus
from .tensorcore import OptimizerConfig, load_graph, save_graph
from .training import (
    GridCell,
    TrainConfig,
    TrainingDiverged,
    fit_family,
    grid_search,
    kfold_split,
    pretrain_weak,
    remix_split,
)

log = logging.getLogger("fusionchem")

MANIFEST = "manifest.json"
MODEL_FILE = "model.bfus"
BACKBONE_FILE = "backbone.bfus"
ENSEMBLE_FILE = "ensemble.json"

_PATH = {"type": "string", "minLength": 1}
_DATA_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "minProperties": 1,
    "properties": {
        "structures": _PATH,
        "archive": _PATH,
        "descriptors": _PATH,
        "labels": _PATH,
        "id_field": {"type": "string"},
        "label_field": {"type": "string"},
        "source_field": {"type": "string"},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["family", "data"],
    "properties": {
        "family": {"enum": list(FAMILIES)},
        "seed": {"type": "integer", "minimum": 0},
        "data": _DATA_SCHEMA,
        "test_data": _DATA_SCHEMA,
        "features": {"type": ["array", "null"], "items": {"type": "string"}, "minItems": 1},
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["kfold", "remix"]},
                "k": {"type": "integer", "minimum": 2},
                "fold": {"type": "integer", "minimum": 0},
                "fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "mlp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "depth": {"enum": list(DEPTH_GRID)},
                "width": {"enum": list(WIDTH_GRID)},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "cnn": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "filters": {"type": "integer", "minimum": 1},
                "stem_kernel": {"type": "integer", "minimum": 1},
                "stem_stride": {"type": "integer", "minimum": 1},
                "n_blocks": {"type": "integer", "minimum": 0},
                "block_kernel": {"type": "integer", "minimum": 1},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "rho": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "patience": {"type": "integer", "minimum": 1},
                "augment": {"type": "boolean"},
                "finetune": {"enum": ["all", "head"]},
            },
        },
        "raster": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "width_px": {"type": "integer", "minimum": 1},
                "height_px": {"type": "integer", "minimum": 1},
                "resolution": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "cnn_checkpoint": _PATH,
        "backbone": _PATH,
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "depths": {"type": "array", "minItems": 1, "uniqueItems": True,
                           "items": {"enum": list(DEPTH_GRID)}},
                "widths": {"type": "array", "minItems": 1, "uniqueItems": True,
                           "items": {"enum": list(WIDTH_GRID)}},
                "folds": {"type": "array", "minItems": 1, "uniqueItems": True,
                          "items": {"type": "integer", "minimum": 0}},
            },
        },
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "required": ["seeds"],
            "properties": {
                "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
            },
        },
        "out": _PATH,
    },
}

_PATH_KEYS = ("structures", "archive", "descriptors", "labels")


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        fp.write(text)


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_manifest(run_dir, command, argv, config, seeds, inputs, artifacts, started, extra=None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": list(seeds),
        "inputs": {p: sha256_file(p) for p in sorted(set(inputs))},
        "artifacts": {a: sha256_file(os.path.join(run_dir, a)) for a in sorted(artifacts)},
        "wall_clock_seconds": round(time.time() - started, 3),
        "engine_version": __version__,
    }
    if extra:
        manifest.update(extra)
    _write_text(os.path.join(run_dir, MANIFEST), _dump_json(manifest))
    return manifest


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {key!r} is not a section")
    node[keys[-1]] = value


def _parse_override(text):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_config(path, overrides=(), seed=None, out=None):
    """Read a JSON config, apply flag overrides and resolve relative paths.

    Paths inside the file are relative to the file's directory; the
    returned dict holds absolute paths.
    """
    try:
        with open(path, encoding="utf-8") as fp:
            cfg = json.load(fp)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    base = os.path.dirname(os.path.abspath(path))
    _resolve_paths(cfg, base)
    for text in overrides:
        key, value = _parse_override(text)
        _set_path(cfg, key, value)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = os.path.abspath(out)
    _resolve_paths(cfg, os.getcwd())
    return cfg


def _resolve_paths(cfg, base):
    def absolute(p):
        return p if not isinstance(p, str) or os.path.isabs(p) else os.path.normpath(os.path.join(base, p))

    for section in ("data", "test_data"):
        if isinstance(cfg.get(section), dict):
            for key in _PATH_KEYS:
                if key in cfg[section]:
                    cfg[section][key] = absolute(cfg[section][key])
    for key in ("cnn_checkpoint", "backbone", "out"):
        if key in cfg:
            cfg[key] = absolute(cfg[key])


def validate_config(cfg, command="train"):
    """Collect every schema and semantic problem, then raise once."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    problems = []
    for err in sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path))):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{where}: {err.message}")
    try:
        problems += _semantic_problems(cfg, command)
    except (KeyError, TypeError, AttributeError):
        # structure already reported by the schema pass
        pass
    if problems:
        raise ConfigError(problems)
    return cfg


def _semantic_problems(cfg, command):
    problems = []
    family = cfg.get("family")
    data = cfg.get("data", {})
    if family == "sequential" and "cnn_checkpoint" not in cfg:
        problems.append("family 'sequential' requires cnn_checkpoint (a trained CNN model file)")
    if family != "sequential" and "cnn_checkpoint" in cfg:
        problems.append(f"cnn_checkpoint is only used by the sequential family, not {family!r}")
    if "backbone" in cfg and family not in ("cnn", "parallel"):
        problems.append("backbone is only used by the cnn and parallel families")
    for section in ("data", "test_data"):
        part = cfg.get(section)
        if part is None:
            continue
        if family in ("cnn", "parallel", "sequential") and not ({"archive", "structures"} & set(part)):
            problems.append(f"{section}: family {family!r} needs images (archive or structures)")
        if family != "cnn" and "descriptors" not in part:
            problems.append(f"{section}: family {family!r} needs descriptors")
        for key in _PATH_KEYS:
            if key in part and not os.path.isfile(part[key]):
                problems.append(f"{section}.{key}: no such file {part[key]}")
    for key in ("cnn_checkpoint", "backbone"):
        if key in cfg and not os.path.isfile(cfg[key]):
            problems.append(f"{key}: no such file {cfg[key]}")
    if cfg.get("train", {}).get("augment") and "structures" not in data:
        problems.append("train.augment needs data.structures (molecules are re-rasterised)")
    split = cfg.get("split", {})
    k = split.get("k", 5)
    if split.get("fold", 0) >= k:
        problems.append(f"split.fold {split.get('fold')} is out of range for k={k}")
    if split.get("mode", "kfold") == "remix" and "test_data" not in cfg:
        problems.append("split.mode 'remix' needs test_data to pool with data")
    if command == "gridsearch":
        if family == "cnn":
            problems.append("gridsearch tunes the MLP branch; family 'cnn' has none")
        for fold in cfg.get("grid", {}).get("folds", []):
            if fold >= k:
                problems.append(f"grid.folds entry {fold} is out of range for k={k}")
    if command == "ensemble":
        if "ensemble" not in cfg:
            problems.append("ensemble: section with a seeds list is required")
        else:
            seeds = cfg["ensemble"]["seeds"]
            repeated = sorted({s for s in seeds if seeds.count(s) > 1})
            if repeated:
                problems.append(f"ensemble.seeds must be distinct; repeated: {repeated}")
    if command == "pretrain":
        if family not in ("cnn", "parallel"):
            problems.append(f"pretrain builds a CNN backbone; family {family!r} has no image branch")
        if "structures" not in data:
            problems.append("pretrain needs data.structures (targets are computed from molecules)")
        if "backbone" in cfg:
            problems.append("backbone is an input of train, not of pretrain")
    if command in ("train", "gridsearch", "ensemble", "pretrain") and "out" not in cfg:
        problems.append("out: an output directory is required (config key or --out)")
    return problems


def _parse_label(value, where):
    text = str(value).strip().upper()
    if text in ("1", "1.0", "RB"):
        return 1
    if text in ("0", "0.0", "NRB"):
        return 0
    raise LoadError(f"{where}: unrecognised label {value!r} (use 1/0 or RB/NRB)")


def _read_labels(path):
    with open(path, newline="", encoding="utf-8") as fp:
        rows = list(csv.reader(fp))
    if not rows:
        raise LoadError(f"{path}: empty label file")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) < 2:
            raise LoadError(f"{path}, row {lineno}: expected id,label")
        sid = row[0].strip()
        if sid in out:
            raise LoadError(f"{path}, row {lineno}: duplicate id {sid!r}")
        out[sid] = _parse_label(row[1], f"{path}, row {lineno}")
    return out


def _read_molecules(path, id_field=None):
    with open(path, "rb") as fp:
        data = fp.read()
    mols = {}
    for index, lines, start in split_records(data):
        mol = parse_record(lines, start, index)
        sid = mol.properties.get(id_field, mol.name) if id_field else mol.name
        if sid in mols:
            raise LoadError(f"{path}: duplicate molecule id {sid!r}")
        mols[sid] = mol
    return mols


def load_samples(section, raster=None, need_images=False, need_descriptors=False,
                 need_molecules=False, labeled=True):
    """Assemble aligned :class:`Samples` from a data section of a config.

    Sample order follows the label CSV, else the archive, else the
    structure file, else the descriptor table.
    """
    mols = archive = table = label_map = None
    if "structures" in section:
        mols = _read_molecules(section["structures"], section.get("id_field"))
    if "archive" in section and need_images:
        archive = read_archive(section["archive"])
    if "descriptors" in section and need_descriptors:
        table = read_descriptor_table(section["descriptors"])
    if "labels" in section:
        label_map = _read_labels(section["labels"])

    if label_map is not None:
        ids = list(label_map)
    elif archive is not None:
        ids = list(archive.ids)
    elif mols is not None:
        ids = list(mols)
    elif table is not None:
        ids = list(table.sample_ids)
    else:
        raise ValidationError("data section provides no samples")

    labels = None
    if labeled:
        label_field = section.get("label_field", "label")
        if label_map is not None:
            labels = [label_map[i] for i in ids]
        elif archive is not None and all(lab is not None for lab in archive.labels):
            lab = dict(zip(archive.ids, archive.labels))
            labels = [_parse_label(lab[i], f"archive sample {i}") for i in ids]
        elif mols is not None:
            missing = [i for i in ids if i in mols and label_field not in mols[i].properties]
            if missing:
                raise LoadError(f"no label for {len(missing)} samples, e.g. {missing[0]!r}")
            labels = [_parse_label(mols[i].properties[label_field], f"molecule {i}") for i in ids]
        else:
            raise ValidationError("labelled data needed: give labels, a labelled archive or structures")

    molecules = None
    if mols is not None and (need_molecules or (need_images and archive is None)):
        absent = [i for i in ids if i not in mols]
        if absent:
            raise LoadError(f"{len(absent)} samples have no structure, e.g. {absent[0]!r}")
        molecules = [mols[i] for i in ids]

    images = image_ids = None
    spec = raster
    if need_images:
        if archive is not None:
            images, image_ids = archive.images, archive.ids
            spec = archive.spec
        else:
            spec = spec or RasterSpec()
            images, image_ids = images_from_molecules(molecules, spec), ids

    sources = None
    source_field = section.get("source_field")
    if archive is not None and all(s is not None for s in archive.sources):
        src = dict(zip(archive.ids, archive.sources))
        sources = [src.get(i) for i in ids]
    elif source_field and mols is not None:
        sources = [mols[i].properties.get(source_field) if i in mols else None for i in ids]
    return Samples.join(ids, labels, images, image_ids, table, molecules,
                        sources if sources and None not in sources else None, spec)


def _inputs_of(cfg):
    paths = []
    for section in ("data", "test_data"):
        for key in _PATH_KEYS:
            if key in cfg.get(section, {}):
                paths.append(cfg[section][key])
    paths += [cfg[k] for k in ("cnn_checkpoint", "backbone") if k in cfg]
    return paths


def _raster_from(cfg):
    r = cfg.get("raster")
    return None if r is None else RasterSpec(**r)


def _train_config(cfg, seed):
    return TrainConfig(
        OptimizerConfig(**cfg.get("optimizer", {})),
        patience=cfg.get("train", {}).get("patience", 50),
        augment=cfg.get("train", {}).get("augment", False),
        seed=seed,
    )


def _load_cnn(path):
    """A trained CNN graph from a model bundle or a bare graph checkpoint."""
    try:
        model = FusionModel.load(path)
    except LoadError:
        return load_graph(path)
    if model.family != "cnn":
        raise ValidationError(f"{path}: expected a cnn model, found {model.family!r}")
    return model.graph


def _needs(family):
    return dict(
        need_images=family in ("cnn", "parallel", "sequential"),
        need_descriptors=family != "cnn",
    )


class _Prepared:
    """Samples and split for one training configuration."""

    def __init__(self, cfg):
        family = cfg["family"]
        seed = cfg.get("seed", 0)
        split = cfg.get("split", {})
        raster = _raster_from(cfg)
        augment = cfg.get("train", {}).get("augment", False)
        kw = dict(_needs(family), need_molecules=augment)
        pool = load_samples(cfg["data"], raster, **kw)
        test = None
        self.remix = None
        if "test_data" in cfg:
            test = load_samples(cfg["test_data"], raster, **kw)
            if test.images is not None and pool.images is not None and test.images.shape[1:] != pool.images.shape[1:]:
                raise ValidationError("data and test_data images have different shapes")
        if split.get("mode", "kfold") == "remix":
            sources = None
            if pool.sources is not None and test.sources is not None:
                sources = dict(zip(pool.ids + test.ids, pool.sources + test.sources))
            self.remix = remix_split(pool.ids, test.ids, split.get("fraction", 0.4), seed, sources)
            both = _join_samples(pool, test)
            pool, test = both.subset(self.remix.train_ids()), both.subset(self.remix.test_ids())
        self.plan = kfold_split(pool.ids, split.get("k", 5), seed)
        fold = split.get("fold", 0)
        self.train = pool.subset(self.plan.train_ids(fold))
        self.val = pool.subset(self.plan.fold(fold))
        self.pool = pool
        self.test = test

    def split_json(self):
        return _dump_json({
            "validation": json.loads(self.plan.to_json()),
            "test": None if self.remix is None else json.loads(self.remix.to_json()),
        })


def _join_samples(a, b):
    ids = a.ids + b.ids
    table = None
    if a.descriptors is not None:
        if a.descriptors.feature_names != b.descriptors.feature_names:
            raise AlignmentError("data and test_data descriptor columns differ")
        table = DescriptorTable(ids, a.descriptors.feature_names,
                                np.vstack([a.descriptors.values, b.descriptors.values]),
                                np.vstack([a.descriptors.missing, b.descriptors.missing]))
    return Samples(
        ids,
        np.concatenate([a.labels, b.labels]),
        None if a.images is None else np.concatenate([a.images, b.images]),
        table,
        None if a.molecules is None else a.molecules + b.molecules,
        None if a.sources is None or b.sources is None else a.sources + b.sources,
        a.raster,
    )


# ---------------------------------------------------------------------------
# training runs


def _model_kwargs(cfg):
    mlp = cfg.get("mlp", {})
    return dict(
        mlp_spec=MlpSpec(mlp.get("depth", 2), mlp.get("width", 128), mlp.get("dropout", 0.5)),
        cnn_spec=CnnSpec(**cfg.get("cnn", {})),
        features=cfg.get("features"),
    )


def run_training(cfg, argv=(), command="train"):
    """Train one model as described by a validated config; returns the run dir."""
    started = time.time()
    run_dir = cfg["out"]
    os.makedirs(run_dir, exist_ok=True)
    family = cfg["family"]
    seed = cfg.get("seed", 0)
    prepared = _Prepared(cfg)
    kw = _model_kwargs(cfg)
    cnn = _load_cnn(cfg["cnn_checkpoint"]) if family == "sequential" else None
    backbone = load_graph(cfg["backbone"]) if "backbone" in cfg else None
    _write_text(os.path.join(run_dir, "config.json"), _dump_json(cfg))
    _write_text(os.path.join(run_dir, "split.json"), prepared.split_json())
    artifacts = ["config.json", "split.json", "history.csv"]
    try:
        model, history = fit_family(
            family, prepared.train, prepared.val, _train_config(cfg, seed), kw["mlp_spec"],
            kw["cnn_spec"], cnn, backbone, kw["features"], cfg.get("train", {}).get("finetune", "all"))
    except TrainingDiverged as exc:
        _write_text(os.path.join(run_dir, "history.csv"), exc.history.to_csv())
        write_manifest(run_dir, command, argv, cfg, [seed], _inputs_of(cfg), artifacts, started,
                       {"status": "diverged", "error": str(exc)})
        raise
    _write_text(os.path.join(run_dir, "history.csv"), history.to_csv())
    model.save(os.path.join(run_dir, MODEL_FILE))
    artifacts.append(MODEL_FILE)
    extra = {"status": "ok", "best_epoch": history.best_epoch, "stop_reason": history.stop_reason,
             "val_er": history.best.val_er}
    if prepared.test is not None:
        report = evaluate(model, prepared.test)
        _write_text(os.path.join(run_dir, "test_report.csv"), report.per_sample_csv())
        _write_text(os.path.join(run_dir, "test_summary.txt"), report.summary())
        artifacts += ["test_report.csv", "test_summary.txt"]
        extra["test_er"] = report.error_rate
    write_manifest(run_dir, command, argv, cfg, [seed], _inputs_of(cfg), artifacts, started, extra)
    return run_dir


def cmd_train(args):
    cfg = validate_config(load_config(args.config, args.set, args.seed, args.out), "train")
    run_dir = run_training(cfg, args.argv)
    print(f"trained {cfg['family']} model -> {run_dir}")
    return 0


def cmd_pretrain(args):
    """Fit a CNN backbone on structure-computed targets of unlabelled molecules."""
    started = time.time()
    cfg = validate_config(load_config(args.config, args.set, args.seed, args.out), "pretrain")
    run_dir = cfg["out"]
    seed = cfg.get("seed", 0)
    samples = load_samples(cfg["data"], _raster_from(cfg), need_images=True, need_molecules=True,
                           labeled=False)
    targets = pretraining_targets(samples.molecules)
    if targets.shape[1] == 0:
        raise ValidationError("every pretraining target is constant over these molecules")
    cnn = build_cnn(CnnSpec(**cfg.get("cnn", {})), samples.images.shape[1:], seed=seed)
    backbone, history = pretrain_weak(cnn, samples.images, targets, _train_config(cfg, seed),
                                      molecules=samples.molecules, raster=samples.raster)
    os.makedirs(run_dir, exist_ok=True)
    _write_text(os.path.join(run_dir, "config.json"), _dump_json(cfg))
    _write_text(os.path.join(run_dir, "history.csv"), history.to_csv())
    save_graph(os.path.join(run_dir, BACKBONE_FILE), backbone)
    write_manifest(run_dir, "pretrain", args.argv, cfg, [seed], _inputs_of(cfg),
                   ["config.json", "history.csv", BACKBONE_FILE], started,
                   {"status": "ok", "targets": int(targets.shape[1]), "best_epoch": history.best_epoch,
                    "stop_reason": history.stop_reason, "val_mse": history.best.val_loss})
    print(f"pretrained backbone on {len(samples)} molecules -> {os.path.join(run_dir, BACKBONE_FILE)}")
    return 0


def _cell_digest(cfg, depth, width, folds, inputs):
    base = {k: v for k, v in cfg.items() if k not in ("out", "grid", "ensemble")}
    payload = {"config": base, "inputs": inputs, "depth": depth, "width": width, "folds": folds,
               "engine_version": __version__}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def cmd_gridsearch(args):
    started = time.time()
    cfg = validate_config(load_config(args.config, args.set, args.seed, args.out), "gridsearch")
    out = cfg["out"]
    cell_dir = os.path.join(out, "cells")
    os.makedirs(cell_dir, exist_ok=True)
    grid = cfg.get("grid", {})
    depths = grid.get("depths", list(DEPTH_GRID))
    widths = grid.get("widths", list(WIDTH_GRID))
    k = cfg.get("split", {}).get("k", 5)
    folds = grid.get("folds", list(range(k)))
    inputs = {p: sha256_file(p) for p in _inputs_of(cfg)}
    digests = {(d, w): _cell_digest(cfg, d, w, folds, inputs) for d in depths for w in widths}

    done = {}
    for key, digest in digests.items():
        path = os.path.join(cell_dir, f"d{key[0]}_w{key[1]}_{digest}.json")
        if os.path.isfile(path):
            with open(path, encoding="utf-8") as fp:
                rec = json.load(fp)
            done[key] = GridCell(rec["depth"], rec["width"],
                                 [float("nan") if e is None else e for e in rec["val_er"]],
                                 rec["n_params"], rec["diverged"])

    def save_cell(cell):
        digest = digests[(cell.depth, cell.width)]
        rec = {"depth": cell.depth, "width": cell.width, "n_params": cell.n_params,
               "diverged": cell.diverged, "folds": folds, "digest": digest,
               "val_er": [None if e != e else e for e in cell.val_er]}
        _write_text(os.path.join(cell_dir, f"d{cell.depth}_w{cell.width}_{digest}.json"), _dump_json(rec))
        print(f"cell depth={cell.depth} width={cell.width} mean Er {cell.mean_er:.4f}", flush=True)

    prepared = _Prepared(cfg)
    kw = _model_kwargs(cfg)
    cnn = _load_cnn(cfg["cnn_checkpoint"]) if cfg["family"] == "sequential" else None
    best, cells = grid_search(cfg["family"], prepared.pool, prepared.plan, _train_config(cfg, cfg.get("seed", 0)),
                              depths, widths, folds, kw["cnn_spec"], cnn, kw["features"],
                              on_cell=save_cell, done=done)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["depth", "width", "n_params", "mean_val_er", *(f"val_er_fold{f}" for f in folds), "diverged"])
    for c in cells:
        writer.writerow([c.depth, c.width, c.n_params, repr(c.mean_er), *map(repr, c.val_er), c.diverged])
    _write_text(os.path.join(out, "grid_report.csv"), buf.getvalue())
    best_cfg = copy.deepcopy(cfg)
    best_cfg.pop("grid", None)
    best_cfg.pop("out", None)
    best_cfg.setdefault("mlp", {}).update(depth=best.depth, width=best.width)
    _write_text(os.path.join(out, "best_config.json"), _dump_json(best_cfg))
    artifacts = ["grid_report.csv", "best_config.json"]
    artifacts += [os.path.join("cells", f"d{d}_w{w}_{g}.json") for (d, w), g in digests.items()]
    write_manifest(out, "gridsearch", args.argv, cfg, [cfg.get("seed", 0)], _inputs_of(cfg), artifacts,
                   started, {"best": {"depth": best.depth, "width": best.width},
                             "resumed_cells": len(done), "computed_cells": len(cells) - len(done)})
    print(f"best depth={best.depth} width={best.width}; {len(done)} cells resumed -> {out}")
    return 0


def cmd_ensemble(args):
    started = time.time()
    cfg = validate_config(load_config(args.config, args.set, None, args.out), "ensemble")
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    seeds = cfg["ensemble"]["seeds"]
    members = []
    for seed in seeds:
        member = copy.deepcopy(cfg)
        member.pop("ensemble")
        member["seed"] = seed
        member["out"] = os.path.join(out, "members", f"seed_{seed}")
        run_training(member, args.argv, command="ensemble-member")
        members.append(os.path.join("members", f"seed_{seed}", MODEL_FILE))
        print(f"member seed={seed} done", flush=True)
    spec = {"family": cfg["family"], "members": members, "seeds": seeds}
    _write_text(os.path.join(out, ENSEMBLE_FILE), _dump_json(spec))
    write_manifest(out, "ensemble", args.argv, cfg, seeds, _inputs_of(cfg), [ENSEMBLE_FILE] + members, started)
    print(f"ensemble of {len(seeds)} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# scoring


def load_predictor(path):
    """A FusionModel or Ensemble from a model file, run dir or ensemble dir.

    Returns ``(predictor, files read)``.
    """
    if os.path.isdir(path):
        if os.path.isfile(os.path.join(path, ENSEMBLE_FILE)):
            path = os.path.join(path, ENSEMBLE_FILE)
        else:
            path = os.path.join(path, MODEL_FILE)
    if not os.path.isfile(path):
        raise LoadError(f"no model or ensemble at {path}")
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fp:
            spec = json.load(fp)
        base = os.path.dirname(path)
        files = [os.path.join(base, m) for m in spec["members"]]
        members = [FusionModel.load(f) for f in files]
        return Ensemble(members, list(spec.get("seeds", []))), [path] + files
    return FusionModel.load(path), [path]


def _score_samples(args, predictor, labeled):
    model = predictor.members[0] if isinstance(predictor, Ensemble) else predictor
    section = {k: os.path.abspath(getattr(args, k)) for k in _PATH_KEYS if getattr(args, k, None)}
    if args.id_field:
        section["id_field"] = args.id_field
    if labeled and args.label_field:
        section["label_field"] = args.label_field
    if not section:
        raise ValidationError("no input data given (--structures, --archive, --descriptors, --labels)")
    if model.needs_images and not ({"archive", "structures"} & set(section)):
        raise ValidationError(f"{model.family} model needs --archive or --structures")
    if model.needs_descriptors and "descriptors" not in section:
        raise ValidationError(f"{model.family} model needs --descriptors")
    samples = load_samples(section, model.raster, model.needs_images, model.needs_descriptors,
                           labeled=labeled)
    if model.raster is not None and samples.images is not None and samples.images.shape[1:] != model.raster.shape:
        raise ValidationError(f"images are {samples.images.shape[1:]}, model expects {model.raster.shape}")
    return samples, [section[k] for k in _PATH_KEYS if k in section]


def _tau(args):
    tau = args.abstain_threshold
    if tau is not None and not 0.5 <= tau <= 1.0:
        raise ValidationError(f"--abstain-threshold must be in [0.5, 1], got {tau}")
    return tau


def cmd_evaluate(args):
    started = time.time()
    tau = _tau(args)
    predictor, model_files = load_predictor(args.model)
    samples, inputs = _score_samples(args, predictor, labeled=True)
    report = evaluate(predictor, samples, tau)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "report.csv"), report.per_sample_csv())
    _write_text(os.path.join(args.out, "summary.txt"), report.summary())
    seeds = predictor.seeds if isinstance(predictor, Ensemble) else []
    write_manifest(args.out, "evaluate", args.argv, {"model": os.path.abspath(args.model), "abstain_threshold": tau},
                   seeds, inputs + model_files, ["report.csv", "summary.txt"], started,
                   {"abstain_threshold": tau, "coverage": report.coverage, "error_rate": report.error_rate})
    sys.stdout.write(report.summary())
    return 0


def cmd_predict(args):
    started = time.time()
    tau = _tau(args)
    predictor, model_files = load_predictor(args.model)
    samples, inputs = _score_samples(args, predictor, labeled=False)
    probs = predictor.predict_proba(samples)
    if tau is None:
        decisions = (probs >= 0.5).astype(int)
    else:
        decisions, _ = threshold_filter(probs, tau)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "probability", "prediction"])
    for sid, p, d in zip(samples.ids, probs, decisions):
        writer.writerow([sid, repr(float(p)), "abstain" if d < 0 else ("RB" if d == 1 else "NRB")])
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "predictions.csv"), buf.getvalue())
    seeds = predictor.seeds if isinstance(predictor, Ensemble) else []
    write_manifest(args.out, "predict", args.argv, {"model": os.path.abspath(args.model), "abstain_threshold": tau},
                   seeds, inputs + model_files, ["predictions.csv"], started, {"abstain_threshold": tau})
    print(f"{len(samples)} predictions -> {os.path.join(args.out, 'predictions.csv')}")
    return 0


# ---------------------------------------------------------------------------
# data preparation


def cmd_rasterize(args):
    """Rasterise every record; failures go to a rejects CSV, not an abort."""
    spec = RasterSpec(args.width, args.height, args.resolution)
    with open(args.structures, "rb") as fp:
        data = fp.read()
    ids, images, labels, sources, rejects = [], [], [], [], []
    seen = set()
    for index, lines, start in split_records(data):
        sid = f"record_{index}"
        try:
            mol = parse_record(lines, start, index)
            sid = mol.properties.get(args.id_field, mol.name) if args.id_field else mol.name
            sid = sid or f"record_{index}"
            if sid in seen:
                raise ValidationError(f"duplicate id {sid!r}")
            image = rasterize(mol, spec, sid)
            label = None
            if args.label_field in mol.properties:
                label = _parse_label(mol.properties[args.label_field], f"record {index}")
        except FusionError as exc:
            rejects.append((index, sid, type(exc).__name__, str(exc)))
            continue
        seen.add(sid)
        ids.append(sid)
        images.append(image.pixels)
        labels.append(label)
        sources.append(mol.properties.get(args.source_field) if args.source_field else None)
    stack = np.stack(images) if images else np.zeros((0,) + spec.shape, dtype=np.float32)
    with open(args.output, "wb") as fp:
        write_archive(fp, ImageArchive(spec, ids, stack, labels, sources))
    rejects_path = args.rejects or args.output + ".rejects.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["record", "id", "error", "reason"])
    writer.writerows(rejects)
    _write_text(rejects_path, buf.getvalue())
    print(f"{len(ids)} images -> {args.output}; {len(rejects)} rejected -> {rejects_path}")
    return 0


def cmd_synth(args):
    corpus = make_corpus(args.n, seed=args.seed, size_range=(6, 10), prefix=args.prefix,
                         max_radius=5.0, motif_bonds=2)
    paths = write_corpus(corpus, args.out)
    print(f"{args.n} molecules -> {', '.join(paths.values())}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="fusionchem", description="Multimodal biodegradability classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rasterize", help="rasterise a structure file into an image archive")
    p.add_argument("structures")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=80)
    p.add_argument("--resolution", type=float, default=0.5, help="angstrom per pixel")
    p.add_argument("--id-field", default=None, help="data item holding the sample id (default: title line)")
    p.add_argument("--label-field", default="label")
    p.add_argument("--source-field", default=None)
    p.add_argument("--rejects", default=None, help="rejects CSV (default: OUTPUT.rejects.csv)")
    p.set_defaults(func=cmd_rasterize)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("gridsearch", cmd_gridsearch, "tune MLP depth and width"),
                                 ("ensemble", cmd_ensemble, "train one model per seed"),
                                 ("pretrain", cmd_pretrain, "pretrain a CNN backbone on computed targets")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config")
        p.add_argument("--out", default=None, help="run directory (overrides config 'out')")
        if name in ("train", "gridsearch", "pretrain"):
            p.add_argument("--seed", type=int, default=None)
        else:
            p.set_defaults(seed=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. optimizer.max_epochs=50")
        p.set_defaults(func=func)

    for name, func in (("evaluate", cmd_evaluate), ("predict", cmd_predict)):
        p = sub.add_parser(name, help=f"{name} with a model file, run dir or ensemble dir")
        p.add_argument("model")
        p.add_argument("--structures")
        p.add_argument("--archive")
        p.add_argument("--descriptors")
        p.add_argument("--labels")
        p.add_argument("--id-field", default=None)
        if name == "evaluate":
            p.add_argument("--label-field", default=None)
        p.add_argument("--abstain-threshold", type=float, default=None)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("synth", help="write a synthetic labelled corpus")
    p.add_argument("n", type=int)
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="mol", help="sample id prefix")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 1
    except (NumericError, StateError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except (FusionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
