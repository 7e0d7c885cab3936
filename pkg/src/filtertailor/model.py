"""Sequential CNN model graphs with per-filter identity.

A ModelGraph is an ordered chain of conv / relu / maxpool /
global_avg_pool / linear layers with materialized weights. The module
provides the operations the pruning pipeline needs: factored forward,
head replacement, FLOPs accounting, importance folding into weights,
and a self-describing binary checkpoint format with a JSON manifest.

Models are treated as values: every mutating operation returns a new
graph and leaves its argument untouched.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, GraphError, ShapeError
from .tensor import (
    Tensor,
    channel_scale,
    conv2d,
    global_avg_pool,
    linear,
    maxpool2d,
    relu,
)

CONV, RELU, MAXPOOL, GAP, LINEAR = "conv", "relu", "maxpool", "global_avg_pool", "linear"
_KIND_CODES = {CONV: 1, RELU: 2, MAXPOOL: 3, GAP: 4, LINEAR: 5}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

_MAGIC = b"FTMODEL1"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """Shape-defining parameters of one layer.

    conv uses out_filters/kernel/stride/padding, maxpool uses
    kernel/stride, linear uses out_features; the rest carry no
    parameters.
    """

    kind: str
    out_filters: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV and (self.out_filters < 1 or self.kernel < 1):
            raise GraphError(f"conv layer needs out_filters >= 1 and kernel >= 1, got {self}")
        if self.kind == MAXPOOL and self.kernel < 1:
            raise GraphError(f"maxpool layer needs kernel >= 1, got {self}")
        if self.kind == LINEAR and self.out_features < 1:
            raise GraphError(f"linear layer needs out_features >= 1, got {self}")


@dataclass
class Layer:
    spec: LayerSpec
    weight: Tensor | None = None
    bias: Tensor | None = None


@dataclass(frozen=True, order=True)
class FilterId:
    """Identifies one filter: (conv layer index in the graph, filter index)."""

    layer_index: int
    filter_index: int


@dataclass
class ModelGraph:
    """Ordered layer chain plus the class count and reference input size."""

    layers: list[Layer]
    class_count: int
    input_shape: tuple[int, int, int]  # (C, H, W), the FLOPs reference input

    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.spec.kind == CONV]

    def conv_filter_counts(self) -> dict[int, int]:
        return {i: self.layers[i].weight.data.shape[0] for i in self.conv_indices()}

    def head_index(self) -> int:
        return len(self.layers) - 1

    def parameters(self) -> list[Tensor]:
        out = []
        for l in self.layers:
            if l.weight is not None:
                out.append(l.weight)
                out.append(l.bias)
        return out

    def conv_parameters(self) -> list[Tensor]:
        out = []
        for i in self.conv_indices():
            out.append(self.layers[i].weight)
            out.append(self.layers[i].bias)
        return out

    def head_parameters(self) -> list[Tensor]:
        head = self.layers[self.head_index()]
        return [head.weight, head.bias]

    def copy(self) -> "ModelGraph":
        layers = []
        for l in self.layers:
            w = None if l.weight is None else Tensor(l.weight.data.copy(), l.weight.requires_grad)
            b = None if l.bias is None else Tensor(l.bias.data.copy(), l.bias.requires_grad)
            layers.append(Layer(l.spec, w, b))
        return ModelGraph(layers, self.class_count, self.input_shape)


def set_trainable(model: ModelGraph, flag: bool) -> None:
    for p in model.parameters():
        p.requires_grad = flag


# ---------------------------------------------------------------------------
# factor containers


class ScalingFactors:
    """One trainable multiplier per conv filter, grouped by layer index."""

    def __init__(self, by_layer: dict[int, Tensor], trainable: bool = True):
        self.by_layer = dict(by_layer)
        self.trainable = trainable
        for t in self.by_layer.values():
            if t.data.ndim != 1:
                raise ShapeError(f"factor vectors must be 1-d, got shape {t.data.shape}")
            t.requires_grad = trainable

    @classmethod
    def from_values(cls, values: dict[int, np.ndarray], trainable: bool = True):
        return cls({i: Tensor(np.asarray(v, dtype=np.float32).copy()) for i, v in values.items()},
                   trainable=trainable)

    def params(self) -> list[Tensor]:
        return [self.by_layer[i] for i in sorted(self.by_layer)]

    def values(self) -> dict[int, np.ndarray]:
        return {i: t.data.copy() for i, t in self.by_layer.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.by_layer[i].data for i in sorted(self.by_layer)])


class ImportanceVector:
    """One non-negative score per surviving conv filter, grouped by layer."""

    def __init__(self, by_layer: dict[int, np.ndarray]):
        store: dict[int, np.ndarray] = {}
        for i, v in by_layer.items():
            arr = np.asarray(v, dtype=np.float32).copy()
            if arr.ndim != 1:
                raise ShapeError(f"importance vectors must be 1-d, got shape {arr.shape}")
            if np.any(arr < 0):
                raise GraphError(f"importance entries must be non-negative (layer {i})")
            store[i] = arr
        self.by_layer = store

    @classmethod
    def ones_like(cls, model: ModelGraph):
        return cls({i: np.ones(n, dtype=np.float32)
                    for i, n in model.conv_filter_counts().items()})

    def values(self) -> dict[int, np.ndarray]:
        return {i: v.copy() for i, v in self.by_layer.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.by_layer[i] for i in sorted(self.by_layer)])

    def checksum(self) -> float:
        return float(sum(float(np.abs(v).sum()) for v in self.by_layer.values()))


def _check_factor_match(model: ModelGraph, by_layer: dict) -> None:
    counts = model.conv_filter_counts()
    if set(by_layer) != set(counts):
        raise GraphError(
            f"factor layers {sorted(by_layer)} do not match conv layers {sorted(counts)}"
        )
    for i, n in counts.items():
        entry = by_layer[i]
        length = entry.data.shape[0] if isinstance(entry, Tensor) else entry.shape[0]
        if length != n:
            raise GraphError(f"layer {i} has {n} filters but factor vector has {length} entries")


# ---------------------------------------------------------------------------
# construction


# Architecture bodies; build_model appends the class-count linear head.
ARCHITECTURES: dict[str, tuple[LayerSpec, ...]] = {
    "vgg-mini": (
        LayerSpec(CONV, out_filters=32, kernel=3, stride=1, padding=1),
        LayerSpec(RELU),
        LayerSpec(MAXPOOL, kernel=2, stride=2),
        LayerSpec(CONV, out_filters=64, kernel=3, stride=1, padding=1),
        LayerSpec(RELU),
        LayerSpec(MAXPOOL, kernel=2, stride=2),
        LayerSpec(CONV, out_filters=128, kernel=3, stride=1, padding=1),
        LayerSpec(RELU),
        LayerSpec(CONV, out_filters=128, kernel=3, stride=1, padding=1),
        LayerSpec(RELU),
        LayerSpec(GAP),
    ),
    # two small conv blocks; used for oracle-scale experiments
    "toy-2conv": (
        LayerSpec(CONV, out_filters=4, kernel=3, stride=1, padding=1),
        LayerSpec(RELU),
        LayerSpec(MAXPOOL, kernel=2, stride=2),
        LayerSpec(CONV, out_filters=4, kernel=3, stride=1, padding=1),
        LayerSpec(RELU),
        LayerSpec(GAP),
    ),
}


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(np.float32)


def build_model(arch: str, class_count: int, input_shape, seed) -> ModelGraph:
    """Materialize a named architecture with seeded weight initialization."""
    if arch not in ARCHITECTURES:
        raise GraphError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
    if class_count < 2:
        raise GraphError(f"class_count must be >= 2, got {class_count}")
    c, h, w = (int(v) for v in input_shape)
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    channels = c
    for spec in ARCHITECTURES[arch]:
        if spec.kind == CONV:
            fan_in = channels * spec.kernel * spec.kernel
            weight = Tensor(_he_uniform(rng, (spec.out_filters, channels, spec.kernel, spec.kernel), fan_in))
            bias = Tensor(np.zeros(spec.out_filters, dtype=np.float32))
            layers.append(Layer(spec, weight, bias))
            channels = spec.out_filters
        else:
            layers.append(Layer(spec))
    layers.append(Layer(_materialize_linear_spec(class_count),
                        *_init_head(rng, class_count, channels)))
    model = ModelGraph(layers, class_count, (c, h, w))
    validate(model)
    return model


def _materialize_linear_spec(out_features: int) -> LayerSpec:
    return LayerSpec(LINEAR, out_features=out_features)


def _init_head(rng: np.random.Generator, out_features: int, fan_in: int):
    a = 1.0 / np.sqrt(fan_in)
    weight = Tensor(rng.uniform(-a, a, size=(out_features, fan_in)).astype(np.float32))
    bias = Tensor(np.zeros(out_features, dtype=np.float32))
    return weight, bias


def validate(model: ModelGraph) -> None:
    """Check the channel chain, layer ordering, and weight shapes."""
    if not model.layers:
        raise GraphError("model has no layers")
    if model.layers[-1].spec.kind != LINEAR:
        raise GraphError("model must end with a linear layer")
    collapsed = False
    channels = model.input_shape[0]
    for i, layer in enumerate(model.layers):
        spec = layer.spec
        if spec.kind == CONV:
            if collapsed:
                raise GraphError(f"conv layer {i} appears after the spatial collapse")
            w = layer.weight.data
            if w.ndim != 4 or w.shape[0] != spec.out_filters or w.shape[1] != channels:
                raise GraphError(
                    f"conv layer {i} weight shape {w.shape} does not match "
                    f"spec ({spec.out_filters} filters, {channels} input channels)"
                )
            if layer.bias.data.shape != (spec.out_filters,):
                raise GraphError(f"conv layer {i} bias shape {layer.bias.data.shape}")
            channels = spec.out_filters
        elif spec.kind == GAP:
            collapsed = True
        elif spec.kind == LINEAR:
            if i != len(model.layers) - 1:
                raise GraphError(f"linear layer {i} is not the final layer")
            if not collapsed:
                raise GraphError("linear layer must follow the spatial-collapse layer")
            w = layer.weight.data
            if w.shape != (model.class_count, channels):
                raise GraphError(
                    f"head weight shape {w.shape} does not match "
                    f"({model.class_count}, {channels})"
                )
            if layer.bias.data.shape != (model.class_count,):
                raise GraphError(f"head bias shape {layer.bias.data.shape}")


# ---------------------------------------------------------------------------
# forward / head replacement / FLOPs / folding


def forward(model: ModelGraph, batch: Tensor,
            factors: "ScalingFactors | ImportanceVector | None" = None) -> Tensor:
    """Run the model on [N,C,H,W] input, returning [N,class_count] logits.

    When factors are given, conv layer i's output channel j is multiplied
    by the j-th entry of the layer's factor vector, before the activation.
    """
    if batch.data.ndim != 4:
        raise ShapeError(f"batch must be [N,C,H,W], got {batch.data.shape}")
    if tuple(batch.data.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(
            f"batch dims {tuple(batch.data.shape[1:])} do not match "
            f"model input {tuple(model.input_shape)}"
        )
    if factors is not None:
        _check_factor_match(model, factors.by_layer)
    x = batch
    for i, layer in enumerate(model.layers):
        spec = layer.spec
        if spec.kind == CONV:
            x = conv2d(x, layer.weight, layer.bias, stride=spec.stride, padding=spec.padding)
            if factors is not None:
                vec = factors.by_layer[i]
                if not isinstance(vec, Tensor):
                    vec = Tensor(vec)
                x = channel_scale(x, vec)
        elif spec.kind == RELU:
            x = relu(x)
        elif spec.kind == MAXPOOL:
            x = maxpool2d(x, size=spec.kernel, stride=spec.stride)
        elif spec.kind == GAP:
            x = global_avg_pool(x)
        elif spec.kind == LINEAR:
            x = linear(x, layer.weight, layer.bias)
    return x


def replace_head(model: ModelGraph, target_classes: int, seed) -> ModelGraph:
    """Return a copy with a freshly initialized final linear layer."""
    if target_classes < 2:
        raise GraphError(f"target_classes must be >= 2, got {target_classes}")
    out = model.copy()
    head = out.layers[out.head_index()]
    fan_in = head.weight.data.shape[1]
    rng = np.random.default_rng(seed)
    weight, bias = _init_head(rng, target_classes, fan_in)
    out.layers[out.head_index()] = Layer(_materialize_linear_spec(target_classes), weight, bias)
    out.class_count = target_classes
    validate(out)
    return out


def _spatial_after(h: int, w: int, spec: LayerSpec) -> tuple[int, int]:
    if spec.kind == CONV:
        nh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        nw = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
    elif spec.kind == MAXPOOL:
        nh = (h - spec.kernel) // spec.stride + 1
        nw = (w - spec.kernel) // spec.stride + 1
    else:
        return h, w
    if nh < 1 or nw < 1:
        raise GraphError(f"layer {spec} collapses spatial extent below 1")
    return nh, nw


def flops(model: ModelGraph, conv_counts: dict[int, int] | None = None) -> int:
    """Multiply-add count at the reference input: conv 2*Cout*Cin*K*K*H'*W', linear 2*in*out.

    conv_counts optionally overrides per-layer filter counts, pricing a
    hypothetical pruned variant without materializing it.
    """
    c, h, w = model.input_shape
    total = 0
    channels = c
    for i, layer in enumerate(model.layers):
        spec = layer.spec
        if spec.kind == CONV:
            cout = spec.out_filters if conv_counts is None else conv_counts[i]
            h, w = _spatial_after(h, w, spec)
            total += 2 * cout * channels * spec.kernel * spec.kernel * h * w
            channels = cout
        elif spec.kind == MAXPOOL:
            h, w = _spatial_after(h, w, spec)
        elif spec.kind == LINEAR:
            total += 2 * channels * spec.out_features
    return total


def fold_importance(model: ModelGraph, beta: ImportanceVector) -> ModelGraph:
    """Bake per-filter importance into conv weights and biases.

    The returned model's plain forward matches the original model's
    beta-scaled forward (factors applied pre-activation make this exact
    up to float rounding).
    """
    _check_factor_match(model, beta.by_layer)
    out = model.copy()
    for i in out.conv_indices():
        scale = beta.by_layer[i]
        layer = out.layers[i]
        layer.weight.data *= scale[:, None, None, None]
        layer.bias.data *= scale
    return out


# ---------------------------------------------------------------------------
# serialization


def _layer_params(spec: LayerSpec) -> tuple[int, int, int, int]:
    if spec.kind == CONV:
        return spec.out_filters, spec.kernel, spec.stride, spec.padding
    if spec.kind == MAXPOOL:
        return spec.kernel, spec.stride, 0, 0
    if spec.kind == LINEAR:
        return spec.out_features, 0, 0, 0
    return 0, 0, 0, 0


def _spec_from_params(kind: str, p: tuple[int, int, int, int]) -> LayerSpec:
    if kind == CONV:
        return LayerSpec(CONV, out_filters=p[0], kernel=p[1], stride=p[2], padding=p[3])
    if kind == MAXPOOL:
        return LayerSpec(MAXPOOL, kernel=p[0], stride=p[1])
    if kind == LINEAR:
        return LayerSpec(LINEAR, out_features=p[0])
    return LayerSpec(kind)


def save_model(model: ModelGraph, path) -> None:
    """Write the binary checkpoint plus a JSON manifest at <path>.json."""
    validate(model)
    parts = [_MAGIC, struct.pack("<HH", _FORMAT_VERSION, 0)]
    parts.append(struct.pack("<I", model.class_count))
    parts.append(struct.pack("<III", *model.input_shape))
    parts.append(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        parts.append(struct.pack("<BIIII", _KIND_CODES[layer.spec.kind],
                                 *_layer_params(layer.spec)))
    for layer in model.layers:
        if layer.weight is None:
            continue
        for t in (layer.weight, layer.bias):
            payload = np.ascontiguousarray(t.data, dtype="<f4")
            parts.append(struct.pack("<Q", payload.size))
            parts.append(payload.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    write_manifest(model, str(path) + ".json")


def write_manifest(model: ModelGraph, path) -> None:
    counts = model.conv_filter_counts()
    manifest = {
        "format_version": _FORMAT_VERSION,
        "class_count": model.class_count,
        "input": list(model.input_shape),
        "layers": [
            {"kind": l.spec.kind, **_manifest_params(l.spec)}
            for l in model.layers
        ],
        "conv_layers": [{"layer_index": i, "filters": counts[i]} for i in sorted(counts)],
        "flops": flops(model),
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=False)
        f.write("\n")


def _manifest_params(spec: LayerSpec) -> dict:
    if spec.kind == CONV:
        return {"out_filters": spec.out_filters, "kernel": spec.kernel,
                "stride": spec.stride, "padding": spec.padding}
    if spec.kind == MAXPOOL:
        return {"kernel": spec.kernel, "stride": spec.stride}
    if spec.kind == LINEAR:
        return {"out_features": spec.out_features}
    return {}


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataFormatError(
                f"{self.path}: truncated checkpoint, needed {self.pos + n} bytes "
                f"but file has {len(self.buf)}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path) -> ModelGraph:
    """Read a checkpoint written by save_model."""
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf, str(path))
    magic = r.take(len(_MAGIC))
    if magic != _MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    version, _flags = r.unpack("<HH")
    if version != _FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    (class_count,) = r.unpack("<I")
    input_shape = r.unpack("<III")
    (n_layers,) = r.unpack("<I")
    specs: list[LayerSpec] = []
    for _ in range(n_layers):
        code, p0, p1, p2, p3 = r.unpack("<BIIII")
        if code not in _CODE_KINDS:
            raise DataFormatError(f"{path}: unknown layer kind code {code}")
        specs.append(_spec_from_params(_CODE_KINDS[code], (p0, p1, p2, p3)))

    layers: list[Layer] = []
    channels = input_shape[0]
    for spec in specs:
        if spec.kind == CONV:
            wshape = (spec.out_filters, channels, spec.kernel, spec.kernel)
            layers.append(Layer(spec, _read_tensor(r, wshape), _read_tensor(r, (spec.out_filters,))))
            channels = spec.out_filters
        elif spec.kind == LINEAR:
            wshape = (spec.out_features, channels)
            layers.append(Layer(spec, _read_tensor(r, wshape), _read_tensor(r, (spec.out_features,))))
        else:
            layers.append(Layer(spec))
    if r.pos != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - r.pos} trailing bytes after payload")
    model = ModelGraph(layers, class_count, tuple(int(v) for v in input_shape))
    validate(model)
    return model


def _read_tensor(r: _Reader, shape: tuple) -> Tensor:
    (count,) = r.unpack("<Q")
    expected = int(np.prod(shape))
    if count != expected:
        raise DataFormatError(
            f"{r.path}: payload declares {count} floats where shape {shape} needs {expected}"
        )
    data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
    return Tensor(data.astype(np.float32))
