"""The four model families and their on-disk bundle.

* ``cnn``: strided stem conv, residual blocks, global average pooling,
  sigmoid head.  The pooled vector is the tagged penultimate node.
* ``mlp``: ``depth`` hidden ReLU layers of equal ``width``, dropout after
  each, sigmoid head.
* ``parallel``: both backbones trained jointly; CNN penultimate and MLP
  penultimate are concatenated (CNN first) into one fresh sigmoid head.
* ``sequential``: a frozen, already trained CNN supplies ``cnn_000...``
  feature columns appended after the descriptor columns; a fresh MLP is
  trained on the augmented table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import __version__
from .descriptors import DescriptorPipeline, DescriptorTable, hstack
from .errors import LoadError, StructuralError, ValidationError
from .molio import N_CHANNELS, RasterSpec
from .tensorcore import (
    Add,
    Concat,
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    ModelGraph,
    ReLU,
    Sigmoid,
    forward,
    read_checkpoint,
    write_checkpoint,
)

FAMILIES = ("cnn", "mlp", "parallel", "sequential")
DEPTH_GRID = (2, 3, 4, 5)
WIDTH_GRID = (16, 32, 64, 128, 256)
IMAGE_INPUT = "image"
DESCRIPTOR_INPUT = "descriptors"
PENULTIMATE = "penultimate"
CLASSIFIER = "classifier"


@dataclass(frozen=True)
class CnnSpec:
    filters: int = 16
    stem_kernel: int = 4
    stem_stride: int = 2
    n_blocks: int = 3
    block_kernel: int = 3

    def __post_init__(self):
        for name in ("filters", "stem_kernel", "stem_stride", "block_kernel"):
            if getattr(self, name) < 1:
                raise ValidationError(f"CnnSpec.{name} must be >= 1")
        if self.n_blocks < 0:
            raise ValidationError("CnnSpec.n_blocks must be >= 0")
        if self.block_kernel % 2 == 0:
            raise ValidationError("block kernel must be odd to keep the residual shape")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class MlpSpec:
    depth: int = 2
    width: int = 128
    dropout: float = 0.5

    def __post_init__(self):
        if self.depth not in DEPTH_GRID:
            raise ValidationError(f"MLP depth {self.depth} outside grid {DEPTH_GRID}")
        if self.width not in WIDTH_GRID:
            raise ValidationError(f"MLP width {self.width} outside grid {WIDTH_GRID}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")

    def to_dict(self):
        return dict(self.__dict__)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _add_cnn_backbone(g, spec, rng, prefix="", image=IMAGE_INPUT):
    k, s = spec.stem_kernel, spec.stem_stride
    h = g.add(f"{prefix}stem", Conv2D(spec.filters, k, s, 0), image, rng=rng)
    h = g.add(f"{prefix}stem_relu", ReLU(), h)
    pad = spec.block_kernel // 2
    for b in range(1, spec.n_blocks + 1):
        a = g.add(f"{prefix}block{b}_conv1", Conv2D(spec.filters, spec.block_kernel, 1, pad), h, rng=rng)
        a = g.add(f"{prefix}block{b}_relu1", ReLU(), a)
        a = g.add(f"{prefix}block{b}_conv2", Conv2D(spec.filters, spec.block_kernel, 1, pad), a, rng=rng)
        a = g.add(f"{prefix}block{b}_add", Add(), a, h)
        h = g.add(f"{prefix}block{b}_relu2", ReLU(), a)
    return g.add(f"{prefix}pool", GlobalAvgPool(), h)


def _add_head(g, src, rng):
    head = g.add("head", Dense(1, init="glorot"), src, rng=rng)
    g.add("output", Sigmoid(), head)
    g.tags[PENULTIMATE] = src
    g.tags[CLASSIFIER] = head


def build_cnn(spec=CnnSpec(), input_shape=(80, 80, N_CHANNELS), seed=0):
    rng = _rng(seed)
    h, w, c = input_shape
    if (h - spec.stem_kernel) // spec.stem_stride + 1 < 1 or (w - spec.stem_kernel) // spec.stem_stride + 1 < 1:
        raise StructuralError(f"input {input_shape} too small for a {spec.stem_kernel}x{spec.stem_kernel} "
                              f"stem with stride {spec.stem_stride}")
    g = ModelGraph("cnn")
    g.add_input(IMAGE_INPUT, input_shape)
    pooled = _add_cnn_backbone(g, spec, rng)
    _add_head(g, pooled, rng)
    return g


def build_mlp(spec, n_features, seed=0):
    if not isinstance(spec, MlpSpec):
        spec = MlpSpec(**spec)
    if n_features < 1:
        raise ValidationError("an MLP needs at least one input feature")
    rng = _rng(seed)
    g = ModelGraph("mlp")
    h = g.add_input(DESCRIPTOR_INPUT, (n_features,))
    for i in range(1, spec.depth + 1):
        h = g.add(f"dense{i}", Dense(spec.width), h, rng=rng)
        h = g.add(f"relu{i}", ReLU(), h)
        h = g.add(f"dropout{i}", Dropout(spec.dropout), h)
    _add_head(g, h, rng)
    return g


def _ancestors(graph, name):
    keep, stack = set(), [name]
    while stack:
        n = stack.pop()
        if n not in keep:
            keep.add(n)
            stack.extend(graph.nodes[n].inputs)
    return keep


def copy_subgraph(dst, src, upto, prefix=""):
    """Copy ``upto`` and its ancestors from ``src`` into ``dst``.

    Input nodes keep their names; layer nodes get ``prefix``.  Parameters
    are copied along with their trainable flags.  Returns the new name of
    ``upto``.
    """
    keep = _ancestors(src, upto)
    rename = {}
    for nd in src.nodes.values():
        if nd.name not in keep:
            continue
        if nd.layer is None:
            if nd.name not in dst.nodes:
                dst.add_input(nd.name, nd.shape)
            rename[nd.name] = nd.name
            continue
        new = prefix + nd.name
        params = {key: src.params[f"{nd.name}.{key}"].copy()
                  for key in nd.layer.param_shapes([src.nodes[s].shape for s in nd.inputs])}
        dst.add(new, nd.layer, *(rename[s] for s in nd.inputs), params=params or None)
        for key in params:
            dst.trainable[f"{new}.{key}"] = src.trainable[f"{nd.name}.{key}"]
        rename[nd.name] = new
    return rename[upto]


def _penultimate(graph):
    try:
        return graph.tags[PENULTIMATE]
    except KeyError:
        raise StructuralError(f"graph {graph.name!r} has no tagged penultimate node") from None


def fuse_parallel(cnn, mlp, seed=0):
    """Join two backbones at their penultimate nodes under one fresh head."""
    cnn_pen, mlp_pen = _penultimate(cnn), _penultimate(mlp)
    g = ModelGraph("parallel")
    a = copy_subgraph(g, cnn, cnn_pen, "cnn/")
    b = copy_subgraph(g, mlp, mlp_pen, "mlp/")
    g.set_trainable(True)
    joined = g.add("concat", Concat(), a, b)
    _add_head(g, joined, _rng(seed))
    return g


def cnn_backbone(cnn):
    """The CNN up to its penultimate node, without the classifier head."""
    g = ModelGraph("cnn_backbone")
    copy_subgraph(g, cnn, _penultimate(cnn))
    g.tags[PENULTIMATE] = g.output
    return g


def load_backbone(cnn, backbone):
    """Copy backbone parameters into ``cnn`` by name; the head is left as is."""
    missing = [n for n in backbone.params if n not in cnn.params]
    if missing:
        raise StructuralError(f"backbone parameters absent from target graph: {missing}")
    for name, value in backbone.params.items():
        if cnn.params[name].shape != value.shape:
            raise StructuralError(f"parameter {name!r}: shape {value.shape} != {cnn.params[name].shape}")
        cnn.params[name] = value.copy()
    return cnn


def penultimate_features(model, images, batch_size=256):
    """Penultimate activations with dropout off; one row per image."""
    pen = _penultimate(model)
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = []
    for start in range(0, len(images), batch_size):
        acts = forward(model, {IMAGE_INPUT: images[start:start + batch_size]}, training_mode=False)
        out.append(acts[pen])
    feats = np.concatenate(out, axis=0) if out else np.zeros((0, model.nodes[pen].shape[0]))
    return feats[0] if single else feats


def cnn_feature_names(width):
    return tuple(f"cnn_{i:03d}" for i in range(width))


def cnn_feature_table(cnn, ids, images):
    feats = penultimate_features(cnn, images)
    return DescriptorTable(tuple(ids), cnn_feature_names(feats.shape[1]), feats)


def augment_descriptors(cnn, ids, images, descriptors):
    """``[descriptors | cnn_000 ...]`` rows for ``ids``."""
    return hstack(descriptors.rows(ids), cnn_feature_table(cnn, ids, images))


@dataclass(eq=False)
class FusionModel:
    """A trained (or trainable) model plus everything inference needs."""

    family: str
    graph: ModelGraph
    pipeline: DescriptorPipeline | None = None
    cnn: ModelGraph | None = None
    raster: RasterSpec | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown model family {self.family!r}")
        if self.family == "sequential" and self.cnn is None:
            raise ValidationError("a sequential model needs its frozen CNN")

    @property
    def needs_images(self):
        return self.family in ("cnn", "parallel", "sequential")

    @property
    def needs_descriptors(self):
        return self.family != "cnn"

    def graph_inputs(self, samples):
        inputs = {}
        if self.needs_images and samples.images is None:
            raise ValidationError(f"{self.family} model needs images")
        if self.needs_descriptors and samples.descriptors is None:
            raise ValidationError(f"{self.family} model needs descriptors")
        if self.family in ("cnn", "parallel"):
            inputs[IMAGE_INPUT] = samples.images
        if self.family in ("mlp", "parallel"):
            inputs[DESCRIPTOR_INPUT] = self.pipeline.transform(samples.descriptors).values
        if self.family == "sequential":
            table = augment_descriptors(self.cnn, samples.ids, samples.images, samples.descriptors)
            inputs[DESCRIPTOR_INPUT] = self.pipeline.transform(table).values
        return inputs

    def predict_proba(self, samples, batch_size=256):
        inputs = self.graph_inputs(samples)
        n = len(samples)
        out = np.empty(n)
        for start in range(0, n, batch_size):
            chunk = {k: v[start:start + batch_size] for k, v in inputs.items()}
            out[start:start + batch_size] = forward(self.graph, chunk)[self.graph.output][:, 0]
        return out

    # -- persistence ------------------------------------------------------

    def descriptor(self):
        graphs = {"main": self.graph.architecture()}
        if self.cnn is not None:
            graphs["cnn"] = self.cnn.architecture()
        return {
            "format": "fusionchem-model",
            "engine_version": __version__,
            "family": self.family,
            "graphs": graphs,
            "pipeline": None if self.pipeline is None else self.pipeline.to_dict(),
            "raster": None if self.raster is None else self.raster.to_dict(),
        }

    def flat_params(self):
        params = {f"main::{k}": v for k, v in self.graph.params.items()}
        if self.cnn is not None:
            params.update({f"cnn::{k}": v for k, v in self.cnn.params.items()})
        return params

    def save(self, path):
        with open(path, "wb") as fp:
            write_checkpoint(fp, self.descriptor(), self.flat_params())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fp:
            descriptor, params = read_checkpoint(fp)
        return cls.from_checkpoint(descriptor, params)

    @classmethod
    def from_checkpoint(cls, descriptor, params):
        if descriptor.get("format") != "fusionchem-model":
            raise LoadError("checkpoint does not hold a fusionchem model bundle")
        groups = {}
        for name, value in params.items():
            key, _, pname = name.partition("::")
            groups.setdefault(key, {})[pname] = value
        graphs = {key: ModelGraph.from_architecture(arch, groups.get(key, {}))
                  for key, arch in descriptor["graphs"].items()}
        pipeline = descriptor.get("pipeline")
        raster = descriptor.get("raster")
        return cls(
            descriptor["family"],
            graphs["main"],
            None if pipeline is None else DescriptorPipeline.from_dict(pipeline),
            graphs.get("cnn"),
            None if raster is None else RasterSpec(**raster),
        )


def fuse_sequential(cnn, samples, mlp_spec, train_ids=None, features=None, seed=0):
    """Freeze ``cnn`` and build a fresh MLP over ``[descriptors | cnn features]``.

    Returns ``(augmented table, model)``.  The descriptor pipeline (selection,
    imputation, standardisation) is fitted on ``train_ids`` rows only, so
    constant CNN columns are dropped exactly like constant descriptors.
    """
    if samples.images is None or samples.descriptors is None:
        raise ValidationError("sequential fusion needs both images and descriptors")
    frozen = cnn.copy()
    frozen.set_trainable(False)
    _penultimate(frozen)
    table = augment_descriptors(frozen, samples.ids, samples.images, samples.descriptors)
    base = list(table.feature_names[:len(samples.descriptors.feature_names)])
    if features is not None:
        base = list(features)
    columns = base + [n for n in table.feature_names if n.startswith("cnn_")]
    fit_rows = table if train_ids is None else table.rows(train_ids)
    pipeline = DescriptorPipeline.fit(fit_rows, columns)
    mlp = build_mlp(mlp_spec, len(pipeline.output_names), seed=seed)
    mlp.name = "sequential_mlp"
    return table, FusionModel("sequential", mlp, pipeline, frozen, samples.raster)
