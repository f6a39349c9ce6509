"""Declarative model specs, parameter state and the forward pass.

A :class:`ModelSpec` is an immutable list of layer descriptors. The learned
values live separately in a :class:`ModelState` keyed by ``"<layer>.<param>"``
names, so one spec can be paired with many states (folds, checkpoints).

3D ResNet layout (trainable counts for the ``low`` grid)::

    stem.conv   1->16, k7 s2 p3, no bias            5,488
    relu, stem.bn (affine)                             32
    maxpool k3 s2 p1
    block1      conv1 16->32 k3 (+bias), relu, bn1,
                conv2 32->32 k3 (+bias), bn2        41,664
                + proj 16->32 k1, no bias              512
    relu
    block2      same as block1 with 32 inputs,
                identity shortcut                   55,488
    relu, flatten, head.bn (no affine)
    head.fc1    F->32, sigmoid                  F*32 + 32
    head.fc2    32->1                                  33

The trunk holds 103,184 parameters at every resolution; F is
32 * prod(pooled grid).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import ShapeError, SpecMismatchError
from .ops import ConvParams
from .preprocess import Resolution, get_resolution
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# layer descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    name: str
    params: ConvParams

    def param_shapes(self):
        out = {f"{self.name}.weight": self.params.weight_shape}
        if self.params.has_bias:
            out[f"{self.name}.bias"] = (self.params.out_channels,)
        return out

    def out_shape(self, shape):
        if len(shape) != 4 or shape[0] != self.params.in_channels:
            raise ShapeError(f"{self.name}: input {shape} does not match {self.params.in_channels} channels")
        return (self.params.out_channels,) + self.params.output_grid(shape[1:])


@dataclass(frozen=True)
class BatchNorm:
    name: str
    features: int
    affine: bool = True

    def param_shapes(self):
        if not self.affine:
            return {}
        return {f"{self.name}.weight": (self.features,), f"{self.name}.bias": (self.features,)}

    def buffer_shapes(self):
        return {f"{self.name}.running_mean": (self.features,), f"{self.name}.running_var": (self.features,)}

    def out_shape(self, shape):
        if shape[0] != self.features:
            raise ShapeError(f"{self.name}: {shape[0]} features, expected {self.features}")
        return shape


@dataclass(frozen=True)
class Dense:
    name: str
    in_features: int
    out_features: int
    bias: bool = True

    def param_shapes(self):
        out = {f"{self.name}.weight": (self.in_features, self.out_features)}
        if self.bias:
            out[f"{self.name}.bias"] = (self.out_features,)
        return out

    def out_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"{self.name}: input {shape}, expected ({self.in_features},)")
        return (self.out_features,)


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 3
    stride: int = 2
    padding: int = 1

    def out_shape(self, shape):
        return (shape[0],) + tuple(ops.output_extent(n, self.kernel, self.stride, self.padding) for n in shape[1:])


@dataclass(frozen=True)
class Activation:
    fn: str  # "relu" | "sigmoid"

    def out_shape(self, shape):
        return shape


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, shape):
        return (int(np.prod(shape)),)


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5

    def out_shape(self, shape):
        return shape


@dataclass(frozen=True)
class Residual:
    """``body(x) + shortcut(x)``; an empty shortcut is the identity."""

    name: str
    body: tuple
    shortcut: tuple = ()

    def sublayers(self):
        return self.body + self.shortcut

    def out_shape(self, shape):
        a = _infer(self.body, shape)
        b = _infer(self.shortcut, shape)
        if a != b:
            raise ShapeError(f"{self.name}: body gives {a}, shortcut gives {b}")
        return a


_KINDS = {c.__name__: c for c in (Conv, BatchNorm, Dense, MaxPool, Activation, Flatten, Dropout, Residual)}


def _walk(layers):
    for layer in layers:
        if isinstance(layer, Residual):
            yield from _walk(layer.sublayers())
        else:
            yield layer


def _infer(layers, shape, trace=None):
    for layer in layers:
        shape = layer.out_shape(shape)
        if trace is not None:
            trace.append((getattr(layer, "name", type(layer).__name__), shape))
    return shape


def _layer_to_dict(layer):
    d = {"kind": type(layer).__name__}
    for k, v in layer.__dict__.items():
        if isinstance(v, ConvParams):
            d[k] = {"in_channels": v.in_channels, "out_channels": v.out_channels, "kernel": list(v.kernel),
                    "stride": list(v.stride), "padding": list(v.padding), "has_bias": v.has_bias}
        elif isinstance(v, tuple) and v and not np.isscalar(v[0]):
            d[k] = [_layer_to_dict(x) for x in v]
        elif isinstance(v, tuple):
            d[k] = list(v)
        else:
            d[k] = v
    return d


def _layer_from_dict(d):
    d = dict(d)
    cls = _KINDS[d.pop("kind")]
    for k, v in d.items():
        if k == "params":
            d[k] = ConvParams(**v)
        elif isinstance(v, list):
            d[k] = tuple(_layer_from_dict(x) for x in v)
    return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layers plus the per-sample input shape (batch axis excluded)."""

    layers: tuple
    input_shape: tuple
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.layers:
            out = _infer(self.layers, self.input_shape)
            if out != (1,):
                raise ShapeError(f"{self.name}: network emits {out}, expected one scalar per sample")

    @property
    def grid(self):
        return self.input_shape[1:] if len(self.input_shape) == 4 else None

    def shape_ladder(self):
        trace = []
        _infer(self.layers, self.input_shape, trace)
        return trace

    def param_shapes(self):
        out = {}
        for layer in _walk(self.layers):
            if hasattr(layer, "param_shapes"):
                out.update(layer.param_shapes())
        return out

    def buffer_shapes(self):
        out = {}
        for layer in _walk(self.layers):
            if isinstance(layer, BatchNorm):
                out.update(layer.buffer_shapes())
        return out

    def to_dict(self):
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [_layer_to_dict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(_layer_from_dict(x) for x in d["layers"]), tuple(d["input_shape"]), d.get("name", "model"))


def count_parameters(spec: ModelSpec) -> int:
    """Number of trainable scalars; batch-norm running statistics are excluded."""
    return int(sum(int(np.prod(s)) for s in spec.param_shapes().values()))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _conv_block(name, cin, cout, bias=True):
    return (Conv(f"{name}.conv1", ConvParams(cin, cout, 3, 1, 1, bias)), Activation("relu"),
            BatchNorm(f"{name}.bn1", cout))


def _residual_block(name, cin, cout):
    body = _conv_block(name, cin, cout) + (
        Conv(f"{name}.conv2", ConvParams(cout, cout, 3, 1, 1, True)),
        BatchNorm(f"{name}.bn2", cout),
    )
    shortcut = () if cin == cout else (Conv(f"{name}.proj", ConvParams(cin, cout, 1, 1, 0, False)),)
    return Residual(name, body, shortcut)


def build_resnet3d(resolution) -> ModelSpec:
    """The 3D ResNet for a named resolution, a :class:`Resolution`, or a raw (D, H, W) grid."""
    if isinstance(resolution, (tuple, list)):
        res = Resolution("custom", tuple(resolution))
    else:
        res = get_resolution(resolution)
    grid = tuple(res.grid)
    trunk = (
        Conv("stem.conv", ConvParams(1, 16, 7, 2, 3, False)),
        Activation("relu"),
        BatchNorm("stem.bn", 16),
        MaxPool(3, 2, 1),
        _residual_block("block1", 16, 32),
        Activation("relu"),
        _residual_block("block2", 32, 32),
        Activation("relu"),
        Flatten(),
    )
    (features,) = _infer(trunk, (1,) + grid)
    head = (
        BatchNorm("head.bn", features, affine=False),
        Dense("head.fc1", features, 32),
        Activation("sigmoid"),
        Dense("head.fc2", 32, 1),
    )
    return ModelSpec(trunk + head, (1,) + grid, name=f"resnet3d-{res.name}")


def build_ann(input_dim, dropout=0.5) -> ModelSpec:
    """One hidden layer of 32 units: dense, relu, batch-norm, dropout, dense."""
    if input_dim < 1:
        raise ShapeError("input_dim must be >= 1")
    layers = (
        Dense("fc1", input_dim, 32),
        Activation("relu"),
        BatchNorm("bn", 32),
        Dropout(dropout),
        Dense("fc2", 32, 1),
    )
    return ModelSpec(layers, (input_dim,), name=f"ann-{input_dim}")


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    params: dict
    buffers: dict
    training: bool = True
    bn_ready: bool = False

    def copy(self):
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return ModelState(params, {k: v.copy() for k, v in self.buffers.items()}, self.training, self.bn_ready)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def arrays(self):
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def equals(self, other) -> bool:
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def init_state(spec: ModelSpec, seed=0, dtype=np.float32, output_bias: Optional[float] = None) -> ModelState:
    """Fresh parameters: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases,
    ones/zeros for batch-norm affine terms, zero mean / unit variance running stats.

    ``output_bias`` overrides the bias of the final dense layer, e.g. with the
    mean training age so optimization does not spend its first steps
    walking the output up from zero.
    """
    rng = np.random.default_rng(seed)
    fan_in = {}
    for layer in _walk(spec.layers):
        if isinstance(layer, Conv):
            p = layer.params
            fan_in[layer.name] = p.in_channels * int(np.prod(p.kernel))
        elif isinstance(layer, Dense):
            fan_in[layer.name] = layer.in_features
    params = {}
    for name, shape in spec.param_shapes().items():
        layer, kind = name.rsplit(".", 1)
        if layer in fan_in:
            bound = 1.0 / np.sqrt(fan_in[layer])
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.ones(shape) if kind == "weight" else np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    if output_bias is not None:
        last = [layer for layer in _walk(spec.layers) if isinstance(layer, Dense)][-1]
        params[f"{last.name}.bias"].data[...] = output_bias
    buffers = {}
    for name, shape in spec.buffer_shapes().items():
        buffers[name] = (np.zeros if name.endswith("mean") else np.ones)(shape, dtype=dtype)
    return ModelState(params, buffers)


def check_state(spec: ModelSpec, state: ModelState):
    want = spec.param_shapes()
    got = {k: v.shape for k, v in state.params.items()}
    if want != got:
        diff = sorted(set(want.items()) ^ set(got.items()))
        raise SpecMismatchError(f"state does not match spec {spec.name}: {diff[:4]}")
    bwant = spec.buffer_shapes()
    bgot = {k: v.shape for k, v in state.buffers.items()}
    if bwant != bgot:
        raise SpecMismatchError(f"running statistics do not match spec {spec.name}")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def run_layers(layers, state: ModelState, x: Tensor, training: bool, rng=None, trace=None) -> Tensor:
    P, B = state.params, state.buffers
    for layer in layers:
        if isinstance(layer, Conv):
            b = P.get(f"{layer.name}.bias")
            x = ops.conv3d(x, P[f"{layer.name}.weight"], b, params=layer.params)
        elif isinstance(layer, BatchNorm):
            g = P.get(f"{layer.name}.weight")
            be = P.get(f"{layer.name}.bias")
            x = ops.batchnorm(x, g, be, B[f"{layer.name}.running_mean"], B[f"{layer.name}.running_var"],
                              training=training, momentum=BN_MOMENTUM, eps=BN_EPS)
        elif isinstance(layer, Dense):
            x = ops.dense(x, P[f"{layer.name}.weight"], P.get(f"{layer.name}.bias"))
        elif isinstance(layer, Activation):
            x = ops.relu(x) if layer.fn == "relu" else ops.sigmoid(x)
        elif isinstance(layer, MaxPool):
            x = ops.maxpool3d(x, layer.kernel, layer.stride, layer.padding)
        elif isinstance(layer, Flatten):
            x = ops.flatten(x)
        elif isinstance(layer, Dropout):
            x = ops.dropout(x, layer.p, training, rng)
        elif isinstance(layer, Residual):
            y = run_layers(layer.body, state, x, training, rng)
            s = run_layers(layer.shortcut, state, x, training, rng) if layer.shortcut else x
            x = ops.add(y, s)
        else:
            raise TypeError(f"unknown layer {layer!r}")
        if trace is not None:
            trace.append((getattr(layer, "name", type(layer).__name__), x.shape))
    return x


def forward(spec: ModelSpec, state: ModelState, batch, training: Optional[bool] = None, rng=None,
            trace=None) -> Tensor:
    """Predicted ages, one per sample, as a rank-1 tensor.

    ``training`` defaults to ``state.training``. Train mode uses batch
    statistics (and updates the running ones) and applies dropout; eval
    mode is deterministic and needs running statistics from at least one
    training step.
    """
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    training = state.training if training is None else training
    if tuple(batch.shape[1:]) != spec.input_shape:
        raise SpecMismatchError(f"batch sample shape {tuple(batch.shape[1:])} != model input {spec.input_shape}")
    if not training and spec.buffer_shapes() and not state.bn_ready:
        raise SpecMismatchError("eval-mode forward before any batch-norm statistics were recorded")
    if training or len(batch) == 1:
        out = run_layers(spec.layers, state, batch, training, rng, trace)
    else:
        # eval samples are independent; one at a time keeps each result bit-identical
        # whatever batch it arrives in (BLAS blocking depends on the matrix width)
        outs = [run_layers(spec.layers, state, _row(batch, i), False, rng, trace if i == 0 else None)
                for i in range(len(batch))]
        out = ops.concat(outs) if any(o.requires_grad for o in outs) else Tensor(np.concatenate([o.data for o in outs]))
    if training:
        state.bn_ready = True
    return ops.reshape(out, (out.shape[0],))


def _row(batch: Tensor, i):
    return ops.slice_rows(batch, i, i + 1) if batch.requires_grad else Tensor(batch.data[i : i + 1])


def predict(spec: ModelSpec, state: ModelState, x: np.ndarray, batch_size=32) -> np.ndarray:
    """Eval-mode predictions for an (N, ...) array, processed in chunks."""
    x = np.asarray(x)
    dtype = next(iter(state.params.values())).dtype
    out = [forward(spec, state, Tensor(x[i : i + batch_size].astype(dtype, copy=False)), training=False).data
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)
