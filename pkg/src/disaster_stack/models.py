"""The two base networks: a small baseline ConvNet and a residual network.

A model is a declarative :class:`ModelSpec` (an ordered list of layer
descriptors) plus a :class:`ModelWeights` map of named parameter tensors.
Layer descriptors are plain dicts with a ``kind`` and a ``name``; their
canonical JSON text is what gets hashed and written into checkpoints.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .labels import NUM_CLASSES
from .tensor import (
    BatchNormParams,
    ConvParams,
    Tensor,
    add,
    batch_norm,
    conv2d,
    dense,
    flatten,
    global_avg_pool,
    max_pool2d,
    no_grad,
    output_extent,
    relu,
    softmax,
)

LAYER_KINDS = (
    "conv",
    "batch_norm",
    "relu",
    "max_pool",
    "residual_block",
    "global_avg_pool",
    "flatten",
    "dense",
    "softmax",
)


@dataclass(frozen=True)
class ResidualBlockSpec:
    filters: int
    stride: int = 1
    projection_shortcut: bool = False

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"residual block stride must be 1 or 2, got {self.stride}")

    def validate(self, in_channels: int):
        if (self.stride != 1 or in_channels != self.filters) and not self.projection_shortcut:
            raise ShapeError(
                f"block with stride {self.stride} mapping {in_channels}->{self.filters} "
                "channels needs a projection shortcut"
            )


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_size: tuple
    num_classes: int
    layers: tuple

    def to_text(self) -> str:
        doc = {
            "name": self.name,
            "input_size": list(self.input_size),
            "num_classes": self.num_classes,
            "layers": list(self.layers),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        doc = json.loads(text)
        return cls(
            name=doc["name"],
            input_size=tuple(doc["input_size"]),
            num_classes=int(doc["num_classes"]),
            layers=tuple(doc["layers"]),
        )

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()


@dataclass
class ModelWeights:
    """Named parameter tensors plus save-time metadata.

    Trainable tensors have ``requires_grad`` set; batch-norm running
    statistics are stored alongside them but never receive gradients.
    """

    tensors: dict = field(default_factory=dict)
    spec_hash: bytes = b""
    epoch: int = 0
    val_accuracy: float = 0.0

    def trainable(self) -> dict:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def copy(self) -> "ModelWeights":
        tensors = {
            k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k, dtype=t.dtype)
            for k, t in self.tensors.items()
        }
        return ModelWeights(tensors, self.spec_hash, self.epoch, self.val_accuracy)

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}


# ------------------------------------------------------------ shape inference


def _param_shapes(layer, in_shape):
    """Parameter shapes introduced by ``layer`` given its input shape."""
    kind, name = layer["kind"], layer["name"]
    shapes = {}
    if kind == "conv":
        k, c, f = layer["kernel"], in_shape[-1], layer["filters"]
        shapes[f"{name}.kernel"] = (k, k, c, f)
        shapes[f"{name}.bias"] = (f,)
    elif kind == "batch_norm":
        c = in_shape[-1]
        for part in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"{name}.{part}"] = (c,)
    elif kind == "dense":
        shapes[f"{name}.weights"] = (in_shape[-1], layer["units"])
        shapes[f"{name}.bias"] = (layer["units"],)
    elif kind == "residual_block":
        c, f = in_shape[-1], layer["filters"]
        shapes[f"{name}.conv1.kernel"] = (3, 3, c, f)
        shapes[f"{name}.conv1.bias"] = (f,)
        for bn in ("bn1", "bn2"):
            for part in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{name}.{bn}.{part}"] = (f,)
        shapes[f"{name}.conv2.kernel"] = (3, 3, f, f)
        shapes[f"{name}.conv2.bias"] = (f,)
        if layer["projection_shortcut"]:
            shapes[f"{name}.proj.kernel"] = (1, 1, c, f)
            shapes[f"{name}.proj.bias"] = (f,)
    return shapes


def _layer_output(layer, shape):
    kind = layer["kind"]
    if kind in ("conv", "max_pool", "residual_block"):
        if len(shape) != 3:
            raise ShapeError(f"expects a spatial input, got {shape}")
        h, w, c = shape
        if kind == "conv":
            k, s, pad = layer["kernel"], layer["stride"], layer["padding"]
            return (output_extent(h, k, s, pad), output_extent(w, k, s, pad), layer["filters"])
        if kind == "max_pool":
            k, s, pad = layer["window"], layer["stride"], layer["padding"]
            return (output_extent(h, k, s, pad), output_extent(w, k, s, pad), c)
        block = ResidualBlockSpec(layer["filters"], layer["stride"], layer["projection_shortcut"])
        block.validate(c)
        s = block.stride
        return (output_extent(h, 3, s, "same"), output_extent(w, 3, s, "same"), block.filters)
    if kind == "global_avg_pool":
        if len(shape) != 3:
            raise ShapeError(f"expects a spatial input, got {shape}")
        return (shape[-1],)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"expects a flat input, got {shape}")
        return (layer["units"],)
    if kind in ("batch_norm", "relu", "softmax"):
        return shape
    raise ShapeError(f"unknown layer kind {kind!r}")


def infer_shapes(spec: ModelSpec):
    """Per-layer output shapes (without the batch axis).

    Raises ShapeError naming the first layer that cannot accept its input.
    """
    shape = tuple(spec.input_size)
    if len(shape) != 3 or shape[2] != 3 or min(shape) < 1:
        raise ShapeError(f"input_size must be (H, W, 3) with positive sides, got {shape}")
    out = []
    for layer in spec.layers:
        try:
            shape = _layer_output(layer, shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {layer['name']!r} ({layer['kind']}): {exc}") from None
        if min(shape) < 1:
            raise ShapeError(f"layer {layer['name']!r} ({layer['kind']}) produces empty shape {shape}")
        out.append((layer["name"], shape))
    if out[-1][1] != (spec.num_classes,):
        raise ShapeError(f"final layer outputs {out[-1][1]}, expected ({spec.num_classes},)")
    return out


def parameter_shapes(spec: ModelSpec) -> dict:
    shapes = {}
    in_shape = tuple(spec.input_size)
    for layer, (_, out_shape) in zip(spec.layers, infer_shapes(spec)):
        shapes.update(_param_shapes(layer, in_shape))
        in_shape = out_shape
    return shapes


def count_parameters(spec: ModelSpec, include_buffers=True) -> int:
    return sum(
        int(np.prod(s))
        for k, s in parameter_shapes(spec).items()
        if include_buffers or not k.endswith(("running_mean", "running_var"))
    )


def init_weights(spec: ModelSpec, seed: int) -> ModelWeights:
    """Fan-in scaled uniform kernels, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(spec).items():
        part = name.rsplit(".", 1)[1]
        if part in ("kernel", "weights"):
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            values, trainable = rng.uniform(-limit, limit, size=shape), True
        elif part in ("gamma", "running_var"):
            values, trainable = np.ones(shape), part == "gamma"
        else:
            values, trainable = np.zeros(shape), part in ("bias", "beta")
        tensors[name] = Tensor(values, requires_grad=trainable, name=name)
    return ModelWeights(tensors, spec_hash=spec.digest())


# ------------------------------------------------------------------ builders


def _conv(name, filters, kernel, stride=1, padding="same"):
    return {"kind": "conv", "name": name, "filters": filters, "kernel": kernel,
            "stride": stride, "padding": padding}


def _simple(kind, name):
    return {"kind": kind, "name": name}


def _dense(name, units):
    return {"kind": "dense", "name": name, "units": units}


def _pool(name, window, stride, padding="valid"):
    return {"kind": "max_pool", "name": name, "window": window, "stride": stride,
            "padding": padding}


def baseline_cnn_spec(input_size=(64, 64, 3), num_classes=NUM_CLASSES) -> ModelSpec:
    layers = []
    for i, filters in enumerate((32, 64, 128), start=1):
        layers += [
            _conv(f"conv{i}", filters, 3),
            _simple("batch_norm", f"bn{i}"),
            _simple("relu", f"relu{i}"),
            _pool(f"pool{i}", 2, 2),
        ]
    layers += [
        _simple("flatten", "flatten"),
        _dense("fc1", 128),
        _simple("relu", "fc1_relu"),
        _dense("logits", num_classes),
        _simple("softmax", "softmax"),
    ]
    spec = ModelSpec("baseline_cnn", tuple(input_size), num_classes, tuple(layers))
    _check_cnn_input(spec)
    return spec


def _check_cnn_input(spec):
    h, w, _ = spec.input_size
    for i in range(1, 4):
        if h % 2 or w % 2:
            raise ShapeError(
                f"layer 'pool{i}' (max_pool): input {spec.input_size} does not divide "
                "cleanly through three 2x2 pools"
            )
        h, w = h // 2, w // 2
    infer_shapes(spec)


def resnet_spec(input_size=(224, 224, 3), num_classes=NUM_CLASSES, blocks_per_stage=2) -> ModelSpec:
    layers = [
        _conv("stem_conv", 64, 7, stride=2),
        _simple("batch_norm", "stem_bn"),
        _simple("relu", "stem_relu"),
        _pool("stem_pool", 3, 2, padding="same"),
    ]
    in_filters = 64
    for stage, filters in enumerate((64, 128, 256), start=1):
        for b in range(1, blocks_per_stage + 1):
            stride = 2 if stage > 1 and b == 1 else 1
            layers.append({
                "kind": "residual_block",
                "name": f"stage{stage}_block{b}",
                "filters": filters,
                "stride": stride,
                "projection_shortcut": stride != 1 or in_filters != filters,
            })
            in_filters = filters
    layers += [
        _simple("global_avg_pool", "gap"),
        _dense("fc1", 512),
        _simple("relu", "fc1_relu"),
        _dense("fc2", 512),
        _simple("relu", "fc2_relu"),
        _dense("logits", num_classes),
        _simple("softmax", "softmax"),
    ]
    spec = ModelSpec("resnet", tuple(input_size), num_classes, tuple(layers))
    infer_shapes(spec)
    return spec


def build_baseline_cnn(input_size=(64, 64, 3), num_classes=NUM_CLASSES, seed=0):
    spec = baseline_cnn_spec(input_size, num_classes)
    return spec, init_weights(spec, seed)


def build_resnet(input_size=(224, 224, 3), num_classes=NUM_CLASSES, seed=0):
    spec = resnet_spec(input_size, num_classes)
    return spec, init_weights(spec, seed)


BUILDERS = {"cnn": build_baseline_cnn, "resnet": build_resnet}


# ------------------------------------------------------------------- forward


def _bn_params(tensors, prefix):
    return BatchNormParams(
        gamma=tensors[f"{prefix}.gamma"],
        beta=tensors[f"{prefix}.beta"],
        running_mean=tensors[f"{prefix}.running_mean"],
        running_var=tensors[f"{prefix}.running_var"],
    )


def _conv_params(tensors, prefix, stride=1, padding="same"):
    return ConvParams(tensors[f"{prefix}.kernel"], tensors[f"{prefix}.bias"], stride, padding)


def residual_block_forward(x: Tensor, block: ResidualBlockSpec, tensors, prefix, training=False):
    """relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))."""
    block.validate(x.shape[-1])
    h = conv2d(x, _conv_params(tensors, f"{prefix}.conv1", block.stride))
    h = relu(batch_norm(h, _bn_params(tensors, f"{prefix}.bn1"), training))
    h = conv2d(h, _conv_params(tensors, f"{prefix}.conv2"))
    h = batch_norm(h, _bn_params(tensors, f"{prefix}.bn2"), training)
    if block.projection_shortcut:
        shortcut = conv2d(x, _conv_params(tensors, f"{prefix}.proj", block.stride))
    else:
        shortcut = x
    if shortcut.shape != h.shape:
        raise ShapeError(f"block {prefix!r}: branch {h.shape} vs shortcut {shortcut.shape}")
    return relu(add(h, shortcut))


def forward(spec: ModelSpec, weights: ModelWeights, x: Tensor, training=False) -> Tensor:
    """Run every layer up to (not including) the final softmax; returns logits."""
    t = weights.tensors
    expected = tuple(spec.input_size)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"model {spec.name!r} expects input (N, {expected}), got {x.shape}")
    for layer in spec.layers:
        kind, name = layer["kind"], layer["name"]
        if kind == "conv":
            x = conv2d(x, _conv_params(t, name, layer["stride"], layer["padding"]))
        elif kind == "batch_norm":
            x = batch_norm(x, _bn_params(t, name), training)
        elif kind == "relu":
            x = relu(x)
        elif kind == "max_pool":
            x = max_pool2d(x, layer["window"], layer["stride"], layer["padding"])
        elif kind == "residual_block":
            block = ResidualBlockSpec(layer["filters"], layer["stride"], layer["projection_shortcut"])
            x = residual_block_forward(x, block, t, name, training)
        elif kind == "global_avg_pool":
            x = global_avg_pool(x)
        elif kind == "flatten":
            x = flatten(x)
        elif kind == "dense":
            x = dense(x, t[f"{name}.weights"], t[f"{name}.bias"])
        elif kind == "softmax":
            break
        else:
            raise ShapeError(f"unknown layer kind {kind!r}")
    return x


def predict_proba(spec: ModelSpec, weights: ModelWeights, batch, chunk_size=64) -> np.ndarray:
    """Inference-mode class probabilities, shape (N, num_classes).

    Rows are computed independently of each other: batch-norm uses running
    statistics, and the batch is processed in fixed-size zero-padded chunks so
    the matrix products see identical shapes wherever a row lands.
    """
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float32)
    n = data.shape[0]
    out = np.empty((n, spec.num_classes), dtype=np.float32)
    with no_grad():
        for start in range(0, n, chunk_size):
            part = data[start : start + chunk_size]
            m = part.shape[0]
            if m < chunk_size:
                pad = np.zeros((chunk_size - m,) + part.shape[1:], dtype=part.dtype)
                part = np.concatenate([part, pad])
            logits = forward(spec, weights, Tensor(part), training=False)
            out[start : start + m] = softmax(logits).data[:m]
    return out


@dataclass
class Model:
    """A spec bound to its weights."""

    spec: ModelSpec
    weights: ModelWeights

    def __call__(self, x: Tensor, training=False) -> Tensor:
        return forward(self.spec, self.weights, x, training)

    def predict_proba(self, batch, chunk_size=64) -> np.ndarray:
        return predict_proba(self.spec, self.weights, batch, chunk_size)

    @classmethod
    def build(cls, kind: str, input_size, seed=0) -> "Model":
        if kind not in BUILDERS:
            raise ValueError(f"unknown model {kind!r}; choose from {sorted(BUILDERS)}")
        spec, weights = BUILDERS[kind](tuple(input_size), NUM_CLASSES, seed)
        return cls(spec, weights)
