"""Builders for the three candidate classifiers (LeNet-5, VGG16, MobileNetV2).

All builders return a :class:`~mothtrap.graph.ModelGraph` for single-channel
square tiles, ending in a softmax over ``num_classes`` (class 0 is codling moth).
Weights are He-uniform for conv/dense kernels, zero biases, and identity
batchnorm (gamma=1, beta=0, mean=0, var=1), drawn from ``seed``.
"""
from __future__ import annotations

import numpy as np

from .graph import LayerSpec, ModelGraph
from .tensor import DTYPE, ConvSpec, ShapeError, he_uniform

# Classic LeNet-5 C3 connection table: which of the 6 S2 maps feed each C3 map.
LENET_C3_TABLE = (
    (0, 1, 2), (1, 2, 3), (2, 3, 4), (3, 4, 5), (0, 4, 5), (0, 1, 5),
    (0, 1, 2, 3), (1, 2, 3, 4), (2, 3, 4, 5), (0, 3, 4, 5), (0, 1, 4, 5), (0, 1, 2, 5),
    (0, 1, 3, 4), (1, 2, 4, 5), (0, 2, 3, 5),
    (0, 1, 2, 3, 4, 5),
)

# MobileNetV2 stages: expansion t, output channels c, repeats n, first stride s
MOBILENETV2_STAGES = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def _conv(name, out_channels, k, stride=1, padding="valid", groups=1, mask=None, inputs=()):
    params = {"spec": ConvSpec(k, k, stride, padding, groups), "out_channels": out_channels}
    if mask is not None:
        params["mask"] = mask
    kind = "depthwise_conv" if groups > 1 and groups == out_channels else "conv"
    return LayerSpec(name, kind, params, tuple(inputs))


def _act(name, fn):
    return LayerSpec(name, "activation", {"fn": fn})


def init_weights(layers, input_shape, seed: int = 0) -> dict[str, list[np.ndarray]]:
    """He-uniform kernels, zero biases, identity batchnorm."""
    from .graph import infer_shapes, resolve_inputs

    rng = np.random.default_rng(seed)
    layers = resolve_inputs(list(layers))
    _, wshapes = infer_shapes(layers, input_shape)
    weights = {}
    for layer in layers:
        if layer.name not in wshapes:
            continue
        shapes = wshapes[layer.name]
        if layer.kind == "batchnorm":
            c = shapes[0][0]
            weights[layer.name] = [np.ones(c, DTYPE), np.zeros(c, DTYPE), np.zeros(c, DTYPE), np.ones(c, DTYPE)]
            continue
        kshape, bshape = shapes
        fan_in = int(np.prod(kshape[1:]))
        if layer.params.get("mask") is not None:
            fan_in = int(np.max(np.sum(layer.params["mask"], axis=1))) * int(np.prod(kshape[2:]))
        w = he_uniform(rng, kshape, fan_in)
        if layer.params.get("mask") is not None:
            w *= np.asarray(layer.params["mask"], DTYPE)[:, :, None, None]
        weights[layer.name] = [w, np.zeros(bshape, DTYPE)]
    return weights


INPUT_CENTER = 0.5


def _finish(name, layers, input_size, num_classes, seed):
    shape = (1, input_size, input_size)
    return ModelGraph(layers, init_weights(layers, shape, seed), shape, num_classes, name, INPUT_CENTER)


def lenet_c3_mask() -> np.ndarray:
    mask = np.zeros((16, 6), dtype=bool)
    for out, ins in enumerate(LENET_C3_TABLE):
        mask[out, list(ins)] = True
    return mask


def build_lenet5(input_size: int = 52, num_classes: int = 2, seed: int = 0) -> ModelGraph:
    """Seven-layer LeNet-5 with ReLU activations and the sparse C3 table.

    For 52x52 tiles the feature maps run 48 -> 24 -> 20 -> 10 -> 6.
    """
    if input_size < 32:
        raise ShapeError(f"LeNet-5 needs tiles of at least 32x32, got {input_size}")
    layers = [
        _conv("c1", 6, 5),
        _act("c1_relu", "relu"),
        LayerSpec("s2", "pool", {"window": 2, "stride": 2, "mode": "avg"}),
        _conv("c3", 16, 5, mask=lenet_c3_mask()),
        _act("c3_relu", "relu"),
        LayerSpec("s4", "pool", {"window": 2, "stride": 2, "mode": "avg"}),
        _conv("c5", 120, 5),
        _act("c5_relu", "relu"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc", "dense", {"units": num_classes}),
        _act("softmax", "softmax"),
    ]
    return _finish("lenet5", layers, input_size, num_classes, seed)


def build_vgg16(input_size: int = 52, num_classes: int = 2, seed: int = 0, head_units: int = 256) -> ModelGraph:
    """13-conv VGG16 body with a small dense head (head_units -> num_classes)."""
    if input_size < 32:
        raise ShapeError(f"VGG16 needs tiles of at least 32x32, got {input_size}")
    layers = []
    blocks = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
    for b, (width, reps) in enumerate(blocks, start=1):
        for r in range(1, reps + 1):
            layers.append(_conv(f"block{b}_conv{r}", width, 3, padding="same"))
            layers.append(_act(f"block{b}_conv{r}_relu", "relu"))
        layers.append(LayerSpec(f"block{b}_pool", "pool", {"window": 2, "stride": 2, "mode": "max"}))
    layers += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("drop1", "dropout", {"rate": 0.5}),
        LayerSpec("fc1", "dense", {"units": head_units}),
        _act("fc1_relu", "relu"),
        LayerSpec("drop2", "dropout", {"rate": 0.5}),
        LayerSpec("fc2", "dense", {"units": num_classes}),
        _act("softmax", "softmax"),
    ]
    return _finish("vgg16", layers, input_size, num_classes, seed)


def make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


def _conv_bn(layers, name, out_channels, k, stride=1, groups=1, act="relu6", inputs=()):
    layers.append(_conv(name, out_channels, k, stride, "same", groups, inputs=inputs))
    layers.append(LayerSpec(f"{name}_bn", "batchnorm", {"eps": 1e-3}))
    if act:
        layers.append(_act(f"{name}_{act}", act))
    return layers[-1].name


def build_mobilenetv2(input_size: int = 52, num_classes: int = 2, width_mult: float = 0.35,
                      seed: int = 0, dropout: float = 0.2) -> ModelGraph:
    """MobileNetV2 with inverted residual blocks.

    Every block is expand (1x1 + ReLU6) -> depthwise 3x3 (+ ReLU6) -> linear
    1x1 projection, each followed by batchnorm; the shortcut add is present only
    for stride-1 blocks whose input and output widths match.  The first stage
    keeps its expansion conv (factor 1) so all blocks share the three-conv form.
    """
    if width_mult <= 0:
        raise ValueError("width_mult must be positive")
    if input_size < 32:
        raise ShapeError(f"MobileNetV2 needs tiles of at least 32x32, got {input_size}")
    layers: list[LayerSpec] = []
    c_in = make_divisible(32 * width_mult)
    prev = _conv_bn(layers, "stem", c_in, 3, stride=2)
    block = 0
    for t, c, n, s in MOBILENETV2_STAGES:
        c_out = make_divisible(c * width_mult)
        for i in range(n):
            stride = s if i == 0 else 1
            block += 1
            name = f"block{block}"
            hidden = c_in * t
            h = _conv_bn(layers, f"{name}_expand", hidden, 1, inputs=(prev,))
            h = _conv_bn(layers, f"{name}_dw", hidden, 3, stride=stride, groups=hidden)
            h = _conv_bn(layers, f"{name}_project", c_out, 1, act=None)
            if stride == 1 and c_in == c_out:
                layers.append(LayerSpec(f"{name}_add", "residual_add", inputs=(prev, h)))
                h = f"{name}_add"
            prev = h
            c_in = c_out
    last = make_divisible(1280 * width_mult) if width_mult > 1.0 else 1280
    _conv_bn(layers, "head_conv", last, 1, inputs=(prev,))
    layers += [
        LayerSpec("gap", "pool", {"global": True, "mode": "avg"}),
        LayerSpec("flatten", "flatten"),
        LayerSpec("drop", "dropout", {"rate": dropout}),
        LayerSpec("fc", "dense", {"units": num_classes}),
        _act("softmax", "softmax"),
    ]
    return _finish("mobilenetv2", layers, input_size, num_classes, seed)


BUILDERS = {
    "lenet5": build_lenet5,
    "vgg16": build_vgg16,
    "mobilenetv2": build_mobilenetv2,
}


def build(arch: str, **kwargs) -> ModelGraph:
    try:
        return BUILDERS[arch](**kwargs)
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(BUILDERS)}") from None
