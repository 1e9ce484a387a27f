"""Minimal numpy network core with manual backprop and forward tracing.

A network is an ordered list of layers forming a small DAG: each layer names
the layers it reads from. ``forward`` records every layer's output together
with the topology needed to send relevance back (sample indices, group
membership, pooling argmax) in a :class:`ForwardTrace`.

Arrays always carry a leading batch axis.
"""

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    CorruptFileError,
    DimensionError,
    DivergenceError,
    NonFiniteError,
    VersionMismatchError,
)
from .pointops import conv_group, group_ball, group_knn, pool_max, sample_fps

logger = logging.getLogger(__name__)

LAYER_KINDS = ("Input", "SharedConv", "FullyConnected", "ReLU", "MaxPool",
               "Sample", "Group", "Softmax")


def _gather(values, index):
    b = np.arange(values.shape[0]).reshape((-1,) + (1,) * (index.ndim - 1))
    return values[b, index]


def _scatter_add(shape, index, values):
    out = np.zeros(shape)
    b = np.broadcast_to(
        np.arange(shape[0]).reshape((-1,) + (1,) * (index.ndim - 1)), index.shape)
    np.add.at(out, (b, index), values)
    return out


@dataclass
class TraceEntry:
    """Recorded state of one layer for one forward pass."""

    name: str
    kind: str
    inputs: tuple
    output: np.ndarray
    meta: dict = field(default_factory=dict)
    # receptive field of every output row as original point indices,
    # shape row_shape + (R,); None for global features
    sites: np.ndarray = None


class ForwardTrace:
    """Ordered record of every layer of a forward pass."""

    def __init__(self, n_points):
        self.n_points = n_points
        self.entries = {}

    def add(self, entry):
        self.entries[entry.name] = entry

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries.values())

    @property
    def names(self):
        return list(self.entries)

    @property
    def logits(self):
        return next(reversed(self.entries.values())).output

    def activation(self, name):
        return self.entries[name].output


class Layer:
    kind = None
    trainable = False

    def __init__(self, name, inputs):
        self.name = name
        self.inputs = tuple(inputs)

    def param_shapes(self):
        return {}

    def forward(self, params, xs, trace):
        raise NotImplementedError

    def backward(self, params, grad, entry, trace):
        """Return (grads wrt inputs, grads wrt params)."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Input(Layer):
    kind = "Input"

    def __init__(self, name="input", dim=3):
        super().__init__(name, ())
        self.out_dim = dim


class Dense(Layer):
    """Shared linear map over the last axis, optionally followed by ReLU.

    Acts as a shared point/group convolution on ``(B, ..., d)`` inputs and
    as a fully connected layer on ``(B, d)`` inputs.
    """

    trainable = True

    def __init__(self, name, inputs, in_dim, out_dim, relu=True, kind="SharedConv"):
        super().__init__(name, inputs)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.relu = relu
        self.kind = kind

    def param_shapes(self):
        return {f"{self.name}.weight": (self.in_dim, self.out_dim),
                f"{self.name}.bias": (self.out_dim,)}

    def forward(self, params, xs, trace):
        (x,) = xs
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"{self.name}: expected input dim {self.in_dim}, got {x.shape[-1]}")
        w = params[f"{self.name}.weight"]
        b = params[f"{self.name}.bias"]
        src = trace[self.inputs[0]]
        return conv_group(x, w, b, relu=self.relu), {"weight": w, "bias": b}, src.sites

    def backward(self, params, grad, entry, trace):
        x = trace.activation(self.inputs[0])
        w = params[f"{self.name}.weight"]
        if self.relu:
            grad = grad * (entry.output > 0)
        g2 = grad.reshape(-1, self.out_dim)
        x2 = x.reshape(-1, self.in_dim)
        pgrads = {f"{self.name}.weight": x2.T @ g2,
                  f"{self.name}.bias": g2.sum(axis=0)}
        return [grad @ w.T], pgrads


class MaxPool(Layer):
    """Channel-wise max over axis ``-2``.

    A pooled row's receptive field is the union of the pooled rows' fields;
    pooling a whole cloud ``(B, N, d)`` yields a global feature.
    """

    kind = "MaxPool"

    def forward(self, params, xs, trace):
        pooled, idx = pool_max(xs[0])
        src = trace[self.inputs[0]].sites
        sites = None
        if src is not None and xs[0].ndim > 3:
            sites = src.reshape(src.shape[:-3] + (src.shape[-3], -1))
        return pooled, {"argmax": idx}, sites

    def backward(self, params, grad, entry, trace):
        x = trace.activation(self.inputs[0])
        out = np.zeros_like(x)
        np.put_along_axis(out, entry.meta["argmax"][..., None, :], grad[..., None, :], axis=-2)
        return [out], {}


class Sample(Layer):
    """Farthest point sampling of ``count`` rows of an xyz layer."""

    kind = "Sample"

    def __init__(self, name, inputs, count):
        super().__init__(name, inputs)
        self.count = count

    def forward(self, params, xs, trace):
        xyz = xs[0]
        if xyz.shape[1] < self.count:
            raise DimensionError(
                f"{self.name}: need at least {self.count} points, got {xyz.shape[1]}")
        idx = sample_fps(xyz, self.count)
        src = trace[self.inputs[0]]
        return _gather(xyz, idx), {"indices": idx}, _gather(src.sites, idx)

    def backward(self, params, grad, entry, trace):
        return [None], {}


class Group(Layer):
    """Group neighbors around sampled centers.

    Inputs are ``(xyz, centers)`` or ``(xyz, centers, features)`` where
    ``centers`` is a :class:`Sample` layer over ``xyz``. The output rows are
    ``[x_k - x_center, features_k]``. With ``k=None`` every point forms a single
    group with absolute coordinates (group-all). Rows inherit the receptive
    field of the features when present, else of the grouped points.
    """

    kind = "Group"

    def __init__(self, name, inputs, k=None, radius=None):
        super().__init__(name, inputs)
        self.k = k
        self.radius = radius

    def forward(self, params, xs, trace):
        xyz = xs[0]
        has_feat = len(self.inputs) > (1 if self.k is None else 2)
        src = trace[self.inputs[-1] if has_feat else self.inputs[0]]
        if self.k is None:
            feats = [xyz] + list(xs[1:])
            return np.concatenate(feats, axis=-1), {"group_all": True}, src.sites
        centers = trace[self.inputs[1]].meta["indices"]
        if self.radius is None:
            grouped = group_knn(xyz, centers, self.k)
        else:
            grouped = group_ball(xyz, centers, self.radius, self.k)
        parts = [grouped.offsets]
        if len(xs) > 2:
            parts.append(_gather(xs[2], grouped.neighbors))
        meta = {"group_all": False, "neighbors": grouped.neighbors, "centers": centers}
        return np.concatenate(parts, axis=-1), meta, _gather(src.sites, grouped.neighbors)

    def backward(self, params, grad, entry, trace):
        grads = [None] * len(self.inputs)
        if self.k is None:
            if len(self.inputs) > 1:
                grads[1] = grad[..., 3:]
            return grads, {}
        if len(self.inputs) > 2:
            feat = trace.activation(self.inputs[2])
            grads[2] = _scatter_add(feat.shape, entry.meta["neighbors"], grad[..., 3:])
        return grads, {}


class Network:
    """An ordered layer graph plus its parameters.

    Parameters are plain float64 arrays keyed ``"<layer>.weight"`` and
    ``"<layer>.bias"``.
    """

    def __init__(self, layers, n_classes, params=None, config=None):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        if not isinstance(layers[0], Input):
            raise ValueError("first layer must be Input")
        for i, layer in enumerate(layers):
            for src in layer.inputs:
                if src not in names[:i]:
                    raise ValueError(f"{layer.name} reads {src!r} before it is defined")
        self.layers = list(layers)
        self.n_classes = n_classes
        self.config = dict(config or {})
        self.params = params

    @property
    def layer_names(self):
        return [layer.name for layer in self.layers]

    def param_shapes(self):
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def init_params(self, seed):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for layer in self.layers:
            if layer.trainable:
                bound = 1.0 / np.sqrt(layer.in_dim)
                for key, shape in layer.param_shapes().items():
                    params[key] = rng.uniform(-bound, bound, size=shape)
        self.params = params
        return params

    def forward(self, points, params=None):
        """Run a batch ``(B, N, 3)`` (or one cloud ``(N, 3)``).

        Returns logits ``(B, n_classes)`` and the :class:`ForwardTrace`.
        """
        params = self.params if params is None else params
        if params is None:
            raise RuntimeError("network has no parameters; call init_params or load weights")
        x = np.asarray(points, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.layers[0].out_dim:
            raise DimensionError(f"expected (B, N, {self.layers[0].out_dim}) points, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("input contains non-finite coordinates")
        trace = ForwardTrace(x.shape[1])
        sites = np.broadcast_to(np.arange(x.shape[1])[:, None], x.shape[:2] + (1,))
        trace.add(TraceEntry("input", "Input", (), x, {}, sites))
        for layer in self.layers[1:]:
            xs = [trace.activation(src) for src in layer.inputs]
            out, meta, sites = layer.forward(params, xs, trace)
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(f"non-finite activation in layer {layer.name}")
            trace.add(TraceEntry(layer.name, layer.kind, layer.inputs, out, meta, sites))
        logits = trace.logits
        if logits.shape[-1] != self.n_classes:
            raise DimensionError(
                f"network produces {logits.shape[-1]} outputs for {self.n_classes} classes")
        return logits, trace

    def backward(self, trace, grad_logits, params=None):
        """Gradients of a scalar loss with respect to every parameter."""
        params = self.params if params is None else params
        grads = {self.layers[-1].name: grad_logits}
        pgrads = {}
        for layer in reversed(self.layers[1:]):
            g = grads.pop(layer.name, None)
            if g is None:
                continue
            in_grads, pg = layer.backward(params, g, trace[layer.name], trace)
            pgrads.update(pg)
            for src, gi in zip(layer.inputs, in_grads):
                if gi is None or src == "input":
                    continue
                grads[src] = grads[src] + gi if src in grads else gi
        for key, shape in self.param_shapes().items():
            pgrads.setdefault(key, np.zeros(shape))
        return pgrads


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, y):
    """Mean cross-entropy and its gradient with respect to the logits."""
    p = softmax(logits)
    n = len(y)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    grad = p.copy()
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for key in params:
            g = grads[key]
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            params[key] = params[key] - self.lr * (self.m[key] / c1) / (
                np.sqrt(self.v[key] / c2) + self.eps)


def train(network, X, y, epochs=20, lr=2e-3, batch_size=32, seed=0):
    """Fit ``network`` on clouds ``X (M, N, 3)`` with integer labels ``y``.

    Parameters are initialised from ``seed`` and the per-epoch mean loss is
    returned alongside the trained parameters.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("training needs at least two classes")
    if epochs < 0 or batch_size < 1 or lr <= 0:
        raise ValueError("invalid hyperparameters")
    params = network.init_params(seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(params, lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch_size):
            batch = order[start:start + batch_size]
            logits, trace = network.forward(X[batch], params)
            loss, grad = cross_entropy(logits, y[batch])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"loss became {loss} at epoch {epoch}, batch starting {start}; "
                    f"try a smaller learning rate")
            total += loss * len(batch)
            opt.step(params, network.backward(trace, grad, params))
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise DivergenceError(
                    f"parameters became non-finite at epoch {epoch}, batch starting {start}; "
                    f"try a smaller learning rate")
        history.append(total / len(X))
        logger.info("epoch %d loss %.5f", epoch + 1, history[-1])
    network.params = params
    return params, history


# weights file ---------------------------------------------------------------

MAGIC = b"RFW1"
_U64 = struct.Struct("<Q")


def save_weights(path, params, metadata=None):
    """Write named float64 tensors in the ``RFW1`` format.

    Layout (little-endian): magic, u64 tensor count, then per tensor u64 name
    length, UTF-8 name, u64 rank, u64 extents, f64 payload; a trailing u64
    length plus UTF-8 JSON carries the metadata.
    """
    chunks = [MAGIC, _U64.pack(len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks += [_U64.pack(len(raw)), raw, _U64.pack(arr.ndim)]
        chunks += [_U64.pack(n) for n in arr.shape]
        chunks.append(arr.tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks += [_U64.pack(len(meta)), meta]
    atomic_write_bytes(path, b"".join(chunks))


def load_weights(path):
    """Read a weights file; returns ``(params, metadata)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise CorruptFileError(f"{path}: file too short")
    if blob[:4] != MAGIC:
        if blob[:3] == MAGIC[:3]:
            raise VersionMismatchError(
                f"{path}: weights format {blob[:4]!r} is not supported (expected {MAGIC!r})")
        raise CorruptFileError(f"{path}: bad magic {blob[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CorruptFileError(f"{path}: truncated at byte {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    def u64():
        return _U64.unpack(take(8))[0]

    params = {}
    for _ in range(u64()):
        name = take(u64()).decode("utf-8")
        rank = u64()
        if rank > 8:
            raise CorruptFileError(f"{path}: implausible rank {rank} for {name}")
        shape = tuple(u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    try:
        metadata = json.loads(take(u64()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: bad metadata block ({exc})") from exc
    if pos != len(blob):
        raise CorruptFileError(f"{path}: {len(blob) - pos} trailing bytes")
    return params, metadata


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
