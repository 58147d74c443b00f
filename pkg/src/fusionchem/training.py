"""Splitting, the mini-batch training loop, grid search and weak pretraining."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Samples
from .descriptors import DescriptorPipeline, DescriptorTable
from .errors import NumericError, UndefinedMetricError, ValidationError
from .eval import confusion, metrics
from .models import (
    DEPTH_GRID,
    IMAGE_INPUT,
    WIDTH_GRID,
    CnnSpec,
    FusionModel,
    MlpSpec,
    build_cnn,
    build_mlp,
    cnn_backbone,
    copy_subgraph,
    fuse_parallel,
    fuse_sequential,
    load_backbone,
)
from .molio import rasterize, rotate_molecule
from .tensorcore import (
    Dense,
    ModelGraph,
    OptimizerConfig,
    RmspropState,
    backward,
    binary_cross_entropy,
    binary_cross_entropy_grad,
    forward,
    rmsprop_step,
)

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    """Fold assignment per sample id.

    ``kfold``: every id maps to a fold index in ``range(k)``.
    ``remix``: ids map to ``"train"`` or ``"test"``.
    """

    mode: str
    seed: int
    assignments: dict
    k: int | None = None
    fraction: float | None = None
    sources: dict | None = None

    def fold(self, index):
        return [i for i, f in self.assignments.items() if f == index]

    def folds(self):
        return [self.fold(f) for f in range(self.k)]

    def train_ids(self, val_fold=None):
        if self.mode == "remix":
            return [i for i, f in self.assignments.items() if f == "train"]
        return [i for i, f in self.assignments.items() if f != val_fold]

    def test_ids(self):
        return [i for i, f in self.assignments.items() if f == "test"]

    def to_json(self):
        return json.dumps({"mode": self.mode, "seed": self.seed, "k": self.k, "fraction": self.fraction,
                           "assignments": self.assignments, "sources": self.sources}, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["mode"], d["seed"], d["assignments"], d.get("k"), d.get("fraction"), d.get("sources"))


def kfold_split(ids, k=5, seed=0):
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate ids in split input")
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValidationError(f"k={k} exceeds the number of samples ({len(ids)})")
    perm = np.random.default_rng(seed).permutation(len(ids))
    fold_of = np.empty(len(ids), dtype=int)
    fold_of[perm] = np.arange(len(ids)) % k
    return SplitPlan("kfold", int(seed), {sid: int(f) for sid, f in zip(ids, fold_of)}, k=k)


def remix_split(train_ids, test_ids, fraction=0.4, seed=0, sources=None):
    """Pool both sets and re-partition ``round(fraction * n)`` ids as test.

    Sampling is stratified by source tag (default: the pool each id came
    from), so every source with at least two members lands in both splits.
    """
    train_ids, test_ids = list(train_ids), list(test_ids)
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise ValidationError(f"train and test ids overlap: {sorted(overlap)[:5]}")
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"remix fraction must be in (0, 1), got {fraction}")
    pooled = train_ids + test_ids
    if sources is None:
        sources = {i: "train" for i in train_ids} | {i: "test" for i in test_ids}
    n_test = int(math.floor(fraction * len(pooled) + 0.5))
    if n_test == 0:
        raise ValidationError("remix fraction leaves an empty test set")
    groups = {}
    for sid in pooled:
        groups.setdefault(sources[sid], []).append(sid)
    names = sorted(groups)
    quota = {g: fraction * len(groups[g]) for g in names}
    take = {g: int(math.floor(q)) for g, q in quota.items()}
    by_remainder = sorted(names, key=lambda g: (-(quota[g] - take[g]), g))
    for g in by_remainder[:n_test - sum(take.values())]:
        take[g] += 1
    for g in names:
        if len(groups[g]) >= 2:
            take[g] = min(max(take[g], 1), len(groups[g]) - 1)
    rng = np.random.default_rng(seed)
    assignments = {sid: "train" for sid in pooled}
    for g in names:
        members = groups[g]
        for idx in rng.permutation(len(members))[:take[g]]:
            assignments[members[idx]] = "test"
    return SplitPlan("remix", int(seed), assignments, fraction=fraction,
                     sources={sid: sources[sid] for sid in pooled})


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    patience: int = 50
    augment: bool = False
    seed: int = 0
    monitor: str = "val_loss"
    loss: str = "bce"

    def __post_init__(self):
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.monitor != "val_loss":
            raise ValidationError("only validation loss can be monitored")
        if self.loss not in ("bce", "mse"):
            raise ValidationError(f"unknown loss {self.loss!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_er: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best(self):
        return self.epochs[self.best_epoch - 1]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_er"])
        for r in self.epochs:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_er)])
        return buf.getvalue()


class TrainingDiverged(NumericError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class EarlyStopping:
    """Patience counter on a monitored loss.

    An epoch improves only if its loss is strictly lower than the best so
    far.  ``update`` returns True once ``patience`` consecutive epochs after
    the best one failed to improve.  Epochs are 1-based.
    """

    def __init__(self, patience):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, loss):
        self.epoch += 1
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience


@dataclass(eq=False)
class ArrayData:
    """Graph-ready inputs and targets; molecules enable rotation augmentation."""

    inputs: dict
    targets: np.ndarray
    molecules: list | None = None
    raster: object = None

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=float)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]

    def __len__(self):
        return len(self.targets)


def _loss_and_grad(kind, pred, target):
    n = len(target)
    if kind == "bce":
        loss = float(np.mean(binary_cross_entropy(pred, target)))
        return loss, binary_cross_entropy_grad(pred, target) / n
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def predict_graph(model, inputs, batch_size=256):
    n = len(next(iter(inputs.values())))
    out = []
    for start in range(0, n, batch_size):
        chunk = {k: v[start:start + batch_size] for k, v in inputs.items()}
        out.append(forward(model, chunk)[model.output])
    return np.concatenate(out, axis=0)


def _balanced_error(prob, labels):
    try:
        return metrics(confusion((prob >= 0.5).astype(int), labels.astype(int)))[2]
    except UndefinedMetricError:
        return math.nan


def validation_monitor(model, data, loss="bce"):
    """(validation loss, validation Er) with dropout off."""
    pred = predict_graph(model, data.inputs)
    value, _ = _loss_and_grad(loss, pred, data.targets)
    er = _balanced_error(pred[:, 0], data.targets[:, 0]) if loss == "bce" else math.nan
    return value, er


def augmented_images(molecules, raster, angles):
    out = np.zeros((len(molecules),) + raster.shape, dtype=np.float32)
    for i, (mol, angle) in enumerate(zip(molecules, angles)):
        out[i] = rasterize(rotate_molecule(mol, angle), raster).pixels
    return out


def train(model, train_data, val_data, config, monitor=None):
    """Mini-batch RMSprop with early stopping on validation loss.

    Shuffling, dropout masks and rotation angles are drawn from generators
    seeded by ``(seed, epoch)``, so a run is a pure function of its inputs.
    The returned model carries the parameters of the best epoch.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    if config.augment and (train_data.molecules is None or train_data.raster is None):
        raise ValidationError("rotation augmentation needs molecules and a raster spec")
    monitor = monitor or (lambda m, d: validation_monitor(m, d, config.loss))
    opt = config.optimizer
    state = RmspropState()
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best_params = {k: v.copy() for k, v in model.params.items()}
    n = len(train_data)
    for epoch in range(1, opt.max_epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        dropout_rng = np.random.default_rng([config.seed, epoch, 1])
        inputs = train_data.inputs
        if config.augment:
            angles = np.random.default_rng([config.seed, epoch, 2]).uniform(0.0, 180.0, n)
            inputs = dict(inputs)
            inputs[IMAGE_INPUT] = augmented_images(train_data.molecules, train_data.raster, angles)
        total = 0.0
        try:
            for start in range(0, n, opt.batch_size):
                idx = order[start:start + opt.batch_size]
                batch = {k: v[idx] for k, v in inputs.items()}
                acts = forward(model, batch, training_mode=True, rng=dropout_rng)
                loss, grad = _loss_and_grad(config.loss, acts[model.output], train_data.targets[idx])
                if not math.isfinite(loss):
                    raise NumericError("non-finite training loss")
                rmsprop_step(model.params, backward(model, grad), state, opt, model.trainable)
                total += loss * len(idx)
        except NumericError as exc:
            history.stop_reason = "diverged"
            model.params.update(best_params)
            raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
        val_loss, val_er = monitor(model, val_data)
        history.epochs.append(EpochRecord(epoch, total / n, float(val_loss), float(val_er)))
        if not math.isfinite(val_loss):
            history.stop_reason = "diverged"
            model.params.update(best_params)
            raise TrainingDiverged(f"epoch {epoch}: non-finite validation loss", history)
        stop = stopper.update(val_loss)
        if stopper.best_epoch == epoch:
            best_params = {k: v.copy() for k, v in model.params.items()}
        log.debug("epoch %d train %.4f val %.4f er %.4f", epoch, total / n, val_loss, val_er)
        if stop:
            history.stop_reason = "early"
            break
    else:
        history.stop_reason = "max_epochs"
    history.best_epoch = stopper.best_epoch
    model.params.update(best_params)
    model._tape = None
    return model, history


# ---------------------------------------------------------------------------
# family-level fitting


def _array_data(model, samples, augment=False):
    inputs = model.graph_inputs(samples)
    return ArrayData(inputs, samples.labels,
                     samples.molecules if augment else None,
                     samples.raster if augment else None)


def fit_family(family, train_samples, val_samples, config, mlp_spec=None, cnn_spec=None,
               cnn=None, backbone=None, features=None, finetune="all"):
    """Build, fit and return ``(FusionModel, TrainHistory)`` for one family.

    ``cnn`` is the trained CNN graph a sequential model freezes; ``backbone``
    optionally initialises the CNN branch of ``cnn`` and ``parallel`` models
    (weak pretraining), with ``finetune="head"`` freezing it.
    """
    seed = config.seed
    mlp_spec = mlp_spec or MlpSpec()
    cnn_spec = cnn_spec or CnnSpec()
    pipeline = None
    if family in ("mlp", "parallel"):
        pipeline = DescriptorPipeline.fit(train_samples.descriptors, features)
    raster = train_samples.raster
    if family in ("cnn", "parallel"):
        shape = train_samples.images.shape[1:]
        cnn_graph = build_cnn(cnn_spec, shape, seed=seed)
        if backbone is not None:
            load_backbone(cnn_graph, backbone)
            if finetune == "head":
                for name in backbone.params:
                    cnn_graph.trainable[name] = False
            elif finetune != "all":
                raise ValidationError(f"finetune must be 'all' or 'head', got {finetune!r}")
    if family == "cnn":
        model = FusionModel("cnn", cnn_graph, None, None, raster)
    elif family == "mlp":
        model = FusionModel("mlp", build_mlp(mlp_spec, len(pipeline.output_names), seed=seed),
                            pipeline, None, raster)
    elif family == "parallel":
        mlp = build_mlp(mlp_spec, len(pipeline.output_names), seed=seed + 1)
        graph = fuse_parallel(cnn_graph, mlp, seed=seed + 2)
        if backbone is not None and finetune == "head":
            for name in backbone.params:
                graph.trainable["cnn/" + name] = False
        model = FusionModel("parallel", graph, pipeline, None, raster)
    elif family == "sequential":
        if cnn is None:
            raise ValidationError("sequential fusion requires a trained CNN")
        if isinstance(cnn, FusionModel):
            cnn = cnn.graph
        both = _concat_samples(train_samples, val_samples)
        _, model = fuse_sequential(cnn, both, mlp_spec, train_ids=train_samples.ids,
                                   features=features, seed=seed)
    else:
        raise ValidationError(f"unknown family {family!r}")
    augment = config.augment and family in ("cnn", "parallel")
    tr = _array_data(model, train_samples, augment)
    va = _array_data(model, val_samples)
    _, history = train(model.graph, tr, va, replace(config, augment=augment))
    return model, history


def _concat_samples(a, b):
    ids = a.ids + b.ids
    table = DescriptorTable(ids, a.descriptors.feature_names,
                            np.vstack([a.descriptors.values, b.descriptors.rows(b.ids).values]),
                            np.vstack([a.descriptors.missing, b.descriptors.missing]))
    return Samples(ids, None, np.concatenate([a.images, b.images]), table, None, None, a.raster)


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridCell:
    depth: int
    width: int
    val_er: list
    n_params: int
    diverged: int = 0

    @property
    def mean_er(self):
        ok = [e for e in self.val_er if math.isfinite(e)]
        return float(np.mean(ok)) if ok else math.nan


def select_best(cells):
    """Lowest mean validation Er; ties go to fewer parameters, then lower depth."""
    valid = [c for c in cells if math.isfinite(c.mean_er)]
    if not valid:
        raise NumericError("every grid-search cell diverged")
    return min(valid, key=lambda c: (c.mean_er, c.n_params, c.depth))


def grid_search(family, samples, plan, config, depth_grid=DEPTH_GRID, width_grid=WIDTH_GRID,
                folds=None, cnn_spec=None, cnn=None, features=None, on_cell=None, done=None):
    """Train every (depth, width) cell on the same folds and pick the best.

    Returns ``(best MlpSpec, list of GridCell)``.  ``done`` maps
    ``(depth, width)`` to an already computed cell (resume); ``on_cell`` is
    called after each newly finished cell.
    """
    if not depth_grid or not width_grid:
        raise ValidationError("grid search needs non-empty depth and width grids")
    folds = list(range(plan.k)) if folds is None else list(folds)
    done = done or {}
    cells = []
    for depth in depth_grid:
        for width in width_grid:
            if (depth, width) in done:
                cells.append(done[(depth, width)])
                continue
            spec = MlpSpec(depth, width)
            ers, n_params, diverged = [], 0, 0
            for fold in folds:
                tr = samples.subset(plan.train_ids(fold))
                va = samples.subset(plan.fold(fold))
                try:
                    model, history = fit_family(family, tr, va, config, spec, cnn_spec, cnn,
                                                features=features)
                    ers.append(history.best.val_er)
                    n_params = model.graph.n_params()
                except NumericError as exc:
                    log.warning("cell depth=%d width=%d fold %d diverged: %s", depth, width, fold, exc)
                    ers.append(math.nan)
                    diverged += 1
            cell = GridCell(depth, width, ers, n_params, diverged)
            cells.append(cell)
            if on_cell is not None:
                on_cell(cell)
    best = select_best(cells)
    return MlpSpec(best.depth, best.width), cells


# ---------------------------------------------------------------------------
# weak-supervision pretraining


def check_standardized(targets, tol=1e-6):
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 2:
        raise ValidationError("targets must be a 2-D array (samples x descriptors)")
    mean, std = targets.mean(axis=0), targets.std(axis=0)
    bad = [j for j in range(targets.shape[1]) if abs(mean[j]) > tol or abs(std[j] - 1.0) > tol]
    if bad:
        raise ValidationError(f"pretraining target columns {bad} are not standardised")


def pretrain_weak(cnn, images, targets, config, validation_fraction=0.1, molecules=None, raster=None):
    """Regress standardised computed descriptors from images.

    The classifier head of ``cnn`` is swapped for a linear head with one
    output per target and fitted under mean-squared error.  Returns
    ``(backbone graph, TrainHistory)``; the backbone excludes any head and
    loads into :func:`build_cnn` graphs by parameter name.
    """
    check_standardized(targets)
    targets = np.asarray(targets, dtype=float)
    g = ModelGraph("pretrain")
    pen = copy_subgraph(g, cnn, cnn.tags["penultimate"])
    g.set_trainable(True)
    g.add("regression_head", Dense(targets.shape[1], init="glorot"), pen,
          rng=np.random.default_rng([config.seed, 3]))
    g.tags["penultimate"] = pen
    n = len(targets)
    n_val = max(1, int(round(validation_fraction * n)))
    perm = np.random.default_rng([config.seed, 4]).permutation(n)
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    augment = config.augment and molecules is not None
    tr = ArrayData({IMAGE_INPUT: images[tr_idx]}, targets[tr_idx],
                   [molecules[i] for i in tr_idx] if augment else None, raster if augment else None)
    va = ArrayData({IMAGE_INPUT: images[val_idx]}, targets[val_idx])
    _, history = train(g, tr, va, replace(config, loss="mse", augment=augment))
    return cnn_backbone(g), history

