"""Static-graph reverse-mode differentiation for the layer set the models need.

Tensors are plain :class:`numpy.ndarray` objects whose leading axis is the
batch.  A :class:`ModelGraph` is a DAG of named nodes added in topological
order; each node applies one :class:`Layer` to the outputs of earlier nodes.
Parameters live in a flat name -> array map on the graph (``"<node>.<key>"``),
together with a per-parameter trainable flag.

Convolutions use the cross-correlation convention (kernels are not flipped)
and NHWC layout, kernels shaped ``(kh, kw, in_channels, filters)``.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    LoadError,
    NumericError,
    ShapeError,
    StateError,
    StructuralError,
    ValidationError,
)

BCE_CLAMP = 1e-7

# ---------------------------------------------------------------------------
# functional ops


def conv2d_forward(x, kernels, stride=1, padding=0, bias=None):
    """Cross-correlate a batch of NHWC images with a kernel bank.

    A single ``(H, W, C)`` image is accepted and returns ``(Ho, Wo, F)``.
    Output spatial size is ``floor((in + 2*padding - k) / stride) + 1``.
    """
    y, _ = _conv2d(x, kernels, stride, padding, bias)
    return y


def conv_output_size(size, kernel, stride, padding):
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValidationError(f"padding must be >= 0, got {padding}")
    padded = size + 2 * padding
    if kernel > padded:
        raise ShapeError(f"kernel {kernel} larger than padded input {padded}")
    return (padded - kernel) // stride + 1


def _conv2d(x, kernels, stride, padding, bias):
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, c_in, n_filters = kernels.shape
    if x.shape[3] != c_in:
        raise ShapeError(f"input has {x.shape[3]} channels, kernels expect {c_in}")
    if not (isinstance(stride, (int, np.integer)) and isinstance(padding, (int, np.integer))):
        raise ValidationError("stride and padding must be integers")
    ho = conv_output_size(x.shape[1], kh, stride, padding)
    wo = conv_output_size(x.shape[2], kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo]
    n = x.shape[0]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c_in)
    y = cols @ kernels.reshape(kh * kw * c_in, n_filters)
    if bias is not None:
        y += bias
    y = y.reshape(n, ho, wo, n_filters)
    cache = (cols, x.shape, ho, wo)
    return (y[0] if single else y), cache


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def binary_cross_entropy(prediction, label):
    """Per-sample BCE with predictions clamped to ``[1e-7, 1 - 1e-7]``."""
    p = np.asarray(prediction, dtype=float)
    y = np.asarray(label, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    return float(loss) if loss.ndim == 0 else loss


def binary_cross_entropy_grad(prediction, label):
    """d BCE / d prediction, evaluated at the clamped prediction."""
    pc = np.clip(np.asarray(prediction, dtype=float), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(label, dtype=float)
    return (pc - y) / (pc * (1.0 - pc))


# ---------------------------------------------------------------------------
# layers


class Layer:
    """One differentiable operation.  Layers hold configuration only;
    parameters are owned by the graph and passed in on every call."""

    kind = ""
    arity = 1

    def param_shapes(self, in_shapes):
        return {}

    def init_params(self, in_shapes, rng):
        return {}

    def output_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, params, xs, training, rng):
        raise NotImplementedError

    def backward(self, params, cache, dy, need_dx, need_params):
        raise NotImplementedError

    def config(self):
        return {}


def _uniform(rng, limit, shape):
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, units, init="he"):
        if units < 1:
            raise ValidationError(f"units must be >= 1, got {units}")
        if init not in ("he", "glorot"):
            raise ValidationError(f"unknown init {init!r}")
        self.units = int(units)
        self.init = init

    def _fan_in(self, in_shapes):
        if len(in_shapes[0]) != 1:
            raise ShapeError(f"dense expects flat input, got per-sample shape {in_shapes[0]}")
        return in_shapes[0][0]

    def param_shapes(self, in_shapes):
        return {"W": (self._fan_in(in_shapes), self.units), "b": (self.units,)}

    def init_params(self, in_shapes, rng):
        fan_in = self._fan_in(in_shapes)
        if self.init == "he":
            limit = math.sqrt(6.0 / fan_in)
        else:
            limit = math.sqrt(6.0 / (fan_in + self.units))
        return {"W": _uniform(rng, limit, (fan_in, self.units)), "b": np.zeros(self.units)}

    def output_shape(self, in_shapes):
        self._fan_in(in_shapes)
        return (self.units,)

    def forward(self, params, xs, training, rng):
        x = xs[0]
        return x @ params["W"] + params["b"], x

    def backward(self, params, x, dy, need_dx, need_params):
        grads = {}
        if need_params:
            grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        dx = dy @ params["W"].T if need_dx[0] else None
        return [dx], grads

    def config(self):
        return {"units": self.units, "init": self.init}


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, filters, kernel, stride=1, padding=0, init="he"):
        if filters < 1 or kernel < 1:
            raise ValidationError("filters and kernel must be >= 1")
        if stride < 1:
            raise ValidationError(f"stride must be >= 1, got {stride}")
        if padding < 0:
            raise ValidationError(f"padding must be >= 0, got {padding}")
        self.filters = int(filters)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        self.init = init

    def param_shapes(self, in_shapes):
        c_in = in_shapes[0][2]
        return {"kernel": (self.kernel, self.kernel, c_in, self.filters), "bias": (self.filters,)}

    def init_params(self, in_shapes, rng):
        shapes = self.param_shapes(in_shapes)
        fan_in = self.kernel * self.kernel * in_shapes[0][2]
        if self.init == "he":
            limit = math.sqrt(6.0 / fan_in)
        else:
            limit = math.sqrt(6.0 / (fan_in + self.kernel * self.kernel * self.filters))
        return {"kernel": _uniform(rng, limit, shapes["kernel"]), "bias": np.zeros(self.filters)}

    def output_shape(self, in_shapes):
        shape = in_shapes[0]
        if len(shape) != 3:
            raise ShapeError(f"conv2d expects (H, W, C) per sample, got {shape}")
        h = conv_output_size(shape[0], self.kernel, self.stride, self.padding)
        w = conv_output_size(shape[1], self.kernel, self.stride, self.padding)
        if h < 1 or w < 1:
            raise ShapeError(f"input {shape} too small for kernel {self.kernel} stride {self.stride}")
        return (h, w, self.filters)

    def forward(self, params, xs, training, rng):
        return _conv2d(xs[0], params["kernel"], self.stride, self.padding, params["bias"])

    def backward(self, params, cache, dy, need_dx, need_params):
        cols, padded_shape, ho, wo = cache
        k, s, p = self.kernel, self.stride, self.padding
        kernel = params["kernel"]
        c_in = kernel.shape[2]
        dy2 = dy.reshape(-1, self.filters)
        grads = {}
        if need_params:
            grads = {
                "kernel": (cols.T @ dy2).reshape(kernel.shape),
                "bias": dy2.sum(axis=0),
            }
        dx = None
        if need_dx[0] and s == 1 and k - 1 - p >= 0:
            # stride 1: input gradient is a full correlation with the flipped kernel
            flipped = kernel[::-1, ::-1].transpose(0, 1, 3, 2)
            dx, _ = _conv2d(dy, flipped, 1, k - 1 - p, None)
        elif need_dx[0]:
            n = padded_shape[0]
            dcols = (dy2 @ kernel.reshape(-1, self.filters).T).reshape(n, ho, wo, k, k, c_in)
            dxp = np.zeros(padded_shape, dtype=dy.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, p:padded_shape[1] - p, p:padded_shape[2] - p, :] if p else dxp
        return [dx], grads

    def config(self):
        return {
            "filters": self.filters,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "init": self.init,
        }


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, xs, training, rng):
        mask = xs[0] > 0
        return xs[0] * mask, mask

    def backward(self, params, mask, dy, need_dx, need_params):
        return [dy * mask if need_dx[0] else None], {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, params, xs, training, rng):
        y = sigmoid(xs[0])
        return y, y

    def backward(self, params, y, dy, need_dx, need_params):
        return [dy * y * (1.0 - y) if need_dx[0] else None], {}


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` at train
    time so inference is the identity."""

    kind = "dropout"

    def __init__(self, rate=0.5):
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, params, xs, training, rng):
        x = xs[0]
        if not training or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValidationError("training-mode forward through dropout needs an rng")
        keep = 1.0 - self.rate
        scale = (rng.random(x.shape) >= self.rate) / keep
        return x * scale, scale

    def backward(self, params, scale, dy, need_dx, need_params):
        if not need_dx[0]:
            return [None], {}
        return [dy if scale is None else dy * scale], {}

    def config(self):
        return {"rate": self.rate}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def output_shape(self, in_shapes):
        if len(in_shapes[0]) != 3:
            raise ShapeError(f"global average pooling expects (H, W, C), got {in_shapes[0]}")
        return (in_shapes[0][2],)

    def forward(self, params, xs, training, rng):
        x = xs[0]
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, params, shape, dy, need_dx, need_params):
        if not need_dx[0]:
            return [None], {}
        n, h, w, c = shape
        dx = np.broadcast_to(dy[:, None, None, :] / (h * w), shape).copy()
        return [dx], {}


class Concat(Layer):
    """Joins flat per-sample vectors along the feature axis, in input order."""

    kind = "concat"
    arity = None

    def output_shape(self, in_shapes):
        for s in in_shapes:
            if len(s) != 1:
                raise ShapeError(f"concat expects flat inputs, got {s}")
        return (sum(s[0] for s in in_shapes),)

    def forward(self, params, xs, training, rng):
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    def backward(self, params, widths, dy, need_dx, need_params):
        out, start = [], 0
        for w, need in zip(widths, need_dx):
            out.append(dy[:, start:start + w] if need else None)
            start += w
        return out, {}


class Add(Layer):
    kind = "add"
    arity = None

    def output_shape(self, in_shapes):
        if any(s != in_shapes[0] for s in in_shapes):
            raise ShapeError(f"add needs equal shapes, got {in_shapes}")
        return in_shapes[0]

    def forward(self, params, xs, training, rng):
        y = xs[0].copy()
        for x in xs[1:]:
            y += x
        return y, None

    def backward(self, params, cache, dy, need_dx, need_params):
        return [dy if need else None for need in need_dx], {}


LAYERS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, Sigmoid, Dropout, GlobalAvgPool, Concat, Add)}


# ---------------------------------------------------------------------------
# graph


@dataclass
class Node:
    name: str
    layer: Layer | None
    inputs: tuple
    shape: tuple


class ModelGraph:
    """Directed acyclic graph of layers with named parameters.

    Nodes must be added after all of their inputs, so insertion order is a
    valid topological order.  ``tags`` marks special nodes such as
    ``"penultimate"`` and ``"classifier"``.
    """

    def __init__(self, name="model"):
        self.name = name
        self.nodes: dict[str, Node] = {}
        self.input_names: list[str] = []
        self.output: str | None = None
        self.tags: dict[str, str] = {}
        self.params: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}
        self._tape = None

    def add_input(self, name, shape):
        self._check_new(name)
        shape = tuple(int(d) for d in shape)
        if any(d < 1 for d in shape):
            raise ShapeError(f"input {name!r} has non-positive dimension {shape}")
        self.nodes[name] = Node(name, None, (), shape)
        self.input_names.append(name)
        return name

    def add(self, name, layer, *inputs, rng=None, params=None):
        """Append a node; parameters are drawn from ``rng`` unless given."""
        self._check_new(name)
        for src in inputs:
            if src not in self.nodes:
                raise StructuralError(f"node {name!r} references unknown input {src!r}")
        if layer.arity is not None and len(inputs) != layer.arity:
            raise StructuralError(f"node {name!r} ({layer.kind}) takes {layer.arity} input(s)")
        if not inputs:
            raise StructuralError(f"node {name!r} has no inputs")
        in_shapes = [self.nodes[s].shape for s in inputs]
        try:
            shape = layer.output_shape(in_shapes)
        except ShapeError as exc:
            raise ShapeError(f"node {name!r}: {exc}") from None
        expected = layer.param_shapes(in_shapes)
        if expected:
            if params is None:
                if rng is None:
                    raise ValidationError(f"node {name!r} needs an rng to initialise parameters")
                params = layer.init_params(in_shapes, rng)
            for key, pshape in expected.items():
                value = np.array(params[key], dtype=float)
                if value.shape != tuple(pshape):
                    raise ShapeError(f"parameter {name}.{key}: expected {pshape}, got {value.shape}")
                self.params[f"{name}.{key}"] = value
                self.trainable[f"{name}.{key}"] = True
        self.nodes[name] = Node(name, layer, tuple(inputs), tuple(shape))
        self.output = name
        return name

    def _check_new(self, name):
        if name in self.nodes:
            raise StructuralError(f"duplicate node name {name!r}")

    def node_params(self, name):
        return {key: self.params[f"{name}.{key}"] for key in self.nodes[name].layer.param_shapes(
            [self.nodes[s].shape for s in self.nodes[name].inputs])}

    def set_trainable(self, flag, prefix=""):
        for pname in self.params:
            if pname.startswith(prefix):
                self.trainable[pname] = bool(flag)

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def input_shape(self, name):
        return self.nodes[name].shape

    def architecture(self):
        """JSON-serialisable description; parameters are not included."""
        return {
            "name": self.name,
            "inputs": [{"name": n, "shape": list(self.nodes[n].shape)} for n in self.input_names],
            "nodes": [
                {"name": nd.name, "kind": nd.layer.kind, "config": nd.layer.config(), "inputs": list(nd.inputs)}
                for nd in self.nodes.values() if nd.layer is not None
            ],
            "output": self.output,
            "tags": dict(self.tags),
            "trainable": dict(self.trainable),
        }

    @classmethod
    def from_architecture(cls, arch, params):
        graph = cls(arch.get("name", "model"))
        for inp in arch["inputs"]:
            graph.add_input(inp["name"], inp["shape"])
        for nd in arch["nodes"]:
            try:
                layer_cls = LAYERS[nd["kind"]]
            except KeyError:
                raise StructuralError(f"unknown layer kind {nd['kind']!r}") from None
            layer = layer_cls(**nd["config"])
            in_shapes = [graph.nodes[s].shape for s in nd["inputs"]]
            keys = layer.param_shapes(in_shapes)
            node_params = None
            if keys:
                try:
                    node_params = {k: params[f"{nd['name']}.{k}"] for k in keys}
                except KeyError as exc:
                    raise StructuralError(f"missing parameter {exc.args[0]}") from None
            graph.add(nd["name"], layer, *nd["inputs"], params=node_params)
        graph.output = arch["output"]
        graph.tags = dict(arch.get("tags", {}))
        for pname, flag in arch.get("trainable", {}).items():
            if pname in graph.trainable:
                graph.trainable[pname] = bool(flag)
        return graph

    def copy(self):
        return ModelGraph.from_architecture(self.architecture(), {k: v.copy() for k, v in self.params.items()})

    def __repr__(self):
        return f"ModelGraph({self.name!r}, nodes={len(self.nodes)}, params={self.n_params()})"


def _upstream_trainable(model):
    flags = {}
    for nd in model.nodes.values():
        own = False
        if nd.layer is not None:
            own = any(model.trainable[p] for p in model.params if p.startswith(nd.name + "."))
        flags[nd.name] = own or any(flags[s] for s in nd.inputs)
    return flags


def forward(model, inputs, training_mode=False, rng=None):
    """Evaluate every node.  Returns ``{node name: activation}``.

    In training mode the per-node caches are kept on the graph for a
    following :func:`backward`; inference never mutates the graph.
    """
    acts = {}
    for name in model.input_names:
        if name not in inputs:
            raise StructuralError(f"missing input {name!r}")
        x = np.asarray(inputs[name], dtype=float)
        if x.shape[1:] != model.nodes[name].shape:
            raise ShapeError(f"input node {name!r}: expected per-sample shape "
                             f"{model.nodes[name].shape}, got {x.shape[1:]}")
        if not np.all(np.isfinite(x)):
            raise NumericError(f"input node {name!r} contains non-finite values")
        acts[name] = x
    caches = {} if training_mode else None
    for nd in model.nodes.values():
        if nd.layer is None:
            continue
        xs = [acts[s] for s in nd.inputs]
        params = {k: model.params[f"{nd.name}.{k}"] for k in nd.layer.param_shapes(
            [model.nodes[s].shape for s in nd.inputs])}
        y, cache = nd.layer.forward(params, xs, training_mode, rng)
        acts[nd.name] = y
        if caches is not None:
            caches[nd.name] = cache
    if training_mode:
        model._tape = (caches, acts[model.output].shape)
    return acts


def backward(model, loss_gradient):
    """Backpropagate ``d loss / d output`` through the last training forward.

    Returns one gradient per trainable parameter; frozen parameters get no
    entry.  Gradients from several consumers of a node are summed in node
    order.
    """
    if model._tape is None:
        raise StateError("backward called before a training-mode forward")
    caches, out_shape = model._tape
    dy = np.asarray(loss_gradient, dtype=float)
    if dy.shape != out_shape:
        raise ShapeError(f"loss gradient shape {dy.shape} does not match output {out_shape}")
    upstream = _upstream_trainable(model)
    pending = {model.output: dy}
    grads = {}
    for nd in reversed(list(model.nodes.values())):
        if nd.layer is None or nd.name not in pending:
            continue
        g = pending.pop(nd.name)
        keys = nd.layer.param_shapes([model.nodes[s].shape for s in nd.inputs])
        params = {k: model.params[f"{nd.name}.{k}"] for k in keys}
        want_params = any(model.trainable[f"{nd.name}.{k}"] for k in keys)
        need_dx = [upstream[s] for s in nd.inputs]
        dxs, dparams = nd.layer.backward(params, caches[nd.name], g, need_dx, want_params)
        for key, value in dparams.items():
            pname = f"{nd.name}.{key}"
            if model.trainable[pname]:
                grads[pname] = value
        for src, dx in zip(nd.inputs, dxs):
            if dx is None:
                continue
            if src in pending:
                pending[src] = pending[src] + dx
            else:
                pending[src] = dx
    return {name: grads[name] for name in model.params if name in grads}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 500

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.rho < 1:
            raise ValidationError(f"rho must be in (0, 1), got {self.rho}")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be positive")


@dataclass
class RmspropState:
    accumulators: dict = field(default_factory=dict)


def rmsprop_step(params, gradients, state, config, trainable=None):
    """One RMSprop update, in place.

    ``acc <- rho * acc + (1 - rho) * g**2`` then
    ``param <- param - lr * g / (sqrt(acc) + eps)``.  All gradients are
    checked before anything is touched, so a non-finite gradient leaves both
    parameters and state unchanged.
    """
    for name, g in gradients.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter {name!r}")
        if trainable is not None and not trainable.get(name, False):
            raise ValidationError(f"gradient supplied for frozen parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r} shape {g.shape} != parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step aborted")
    lr, rho, eps = config.learning_rate, config.rho, config.epsilon
    for name, g in gradients.items():
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(params[name])
        acc *= rho
        acc += (1.0 - rho) * g * g
        params[name] -= lr * g / (np.sqrt(acc) + eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   b"BFUS" | u32 version | u32 n | n bytes UTF-8 JSON descriptor
#   u32 parameter count, then per parameter:
#   u32 name length | name | u32 ndim | ndim * u32 dims | float64 data


MAGIC = b"BFUS"
FORMAT_VERSION = 1


def write_checkpoint(fp, descriptor, params):
    """Write a descriptor dict and ordered parameter map to a binary stream."""
    text = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    fp.write(MAGIC)
    fp.write(struct.pack("<II", FORMAT_VERSION, len(text)))
    fp.write(text)
    fp.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f8")
        fp.write(struct.pack("<I", len(raw)))
        fp.write(raw)
        fp.write(struct.pack("<I", arr.ndim))
        fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fp.write(arr.tobytes())


def read_checkpoint(fp):
    """Inverse of :func:`write_checkpoint`; returns ``(descriptor, params)``."""

    def take(n):
        data = fp.read(n)
        if len(data) != n:
            raise LoadError("truncated checkpoint")
        return data

    if take(4) != MAGIC:
        raise LoadError("not a checkpoint file (bad magic)")
    version, n = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    descriptor = json.loads(take(n).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(float)
    return descriptor, params


def checkpoint_bytes(descriptor, params):
    buf = io.BytesIO()
    write_checkpoint(buf, descriptor, params)
    return buf.getvalue()


def save_graph(path, model, extra=None):
    descriptor = {"graph": model.architecture()}
    if extra:
        descriptor.update(extra)
    with open(path, "wb") as fp:
        write_checkpoint(fp, descriptor, model.params)


def load_graph(path):
    with open(path, "rb") as fp:
        descriptor, params = read_checkpoint(fp)
    if "graph" not in descriptor:
        raise LoadError(f"{path}: checkpoint holds no single graph")
    return ModelGraph.from_architecture(descriptor["graph"], params)
