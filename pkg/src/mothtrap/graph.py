"""Layer-graph representation and its forward/backward evaluation.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec` in topological
order plus a weight table.  The pseudo-layer ``"input"`` names the network
input; a layer with no explicit ``inputs`` reads the layer before it.

Weight tensors per kind, in storage order:

=================  ==========================================
conv/depthwise     kernel [C_out, C_in/groups, kh, kw], bias [C_out]
dense              kernel [M, N], bias [M]
batchnorm          gamma, beta, running mean, running variance
=================  ==========================================
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, ShapeError

KINDS = (
    "conv",
    "depthwise_conv",
    "pool",
    "dense",
    "batchnorm",
    "activation",
    "dropout",
    "flatten",
    "residual_add",
    "slice",
)
WEIGHTED = ("conv", "depthwise_conv", "dense", "batchnorm")
INPUT = "input"


class GraphError(ValueError):
    """The layer list does not describe a valid network."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    params: dict[str, Any] = field(default_factory=dict, hash=False)
    inputs: tuple[str, ...] = ()
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))

    def with_inputs(self, inputs: Iterable[str]) -> "LayerSpec":
        return replace(self, inputs=tuple(inputs))


def conv_weight_shape(layer: LayerSpec, in_channels: int) -> tuple[int, ...]:
    spec: ConvSpec = layer.params["spec"]
    return (layer.params["out_channels"], in_channels // spec.groups, spec.kernel_h, spec.kernel_w)


def resolve_inputs(layers: list[LayerSpec]) -> list[LayerSpec]:
    """Fill in implicit inputs (previous layer) and check the ordering is topological."""
    seen = {INPUT}
    out = []
    prev = INPUT
    for layer in layers:
        if layer.name in seen:
            raise GraphError(f"duplicate layer name {layer.name!r}")
        if not layer.inputs:
            layer = layer.with_inputs([prev])
        for src in layer.inputs:
            if src not in seen:
                raise GraphError(f"layer {layer.name!r} reads {src!r}, which is not an earlier layer")
        if layer.kind == "residual_add" and len(layer.inputs) != 2:
            raise GraphError(f"residual_add {layer.name!r} needs exactly two inputs")
        if layer.kind != "residual_add" and len(layer.inputs) != 1:
            raise GraphError(f"layer {layer.name!r} takes one input, got {len(layer.inputs)}")
        seen.add(layer.name)
        out.append(layer)
        prev = layer.name
    return out


def infer_shapes(layers: list[LayerSpec], input_shape) -> tuple[dict[str, tuple], dict[str, list[tuple]]]:
    """Per-sample output shape of every layer and the weight shapes each layer expects."""
    shapes: dict[str, tuple] = {INPUT: tuple(input_shape)}
    wshapes: dict[str, list[tuple]] = {}
    for layer in layers:
        src = shapes[layer.inputs[0]]
        p = layer.params
        k = layer.kind
        try:
            if k in ("conv", "depthwise_conv"):
                if len(src) != 3:
                    raise ShapeError(f"expects [C,H,W] input, got {src}")
                spec: ConvSpec = p["spec"]
                c, h, w = src
                if c % spec.groups:
                    raise ShapeError(f"{c} input channels not divisible by groups={spec.groups}")
                if k == "depthwise_conv" and spec.groups != c:
                    raise ShapeError(f"depthwise conv needs groups == {c}, got {spec.groups}")
                out = (p["out_channels"],
                       T.conv_output_size(h, spec.kernel_h, spec.stride, spec.padding),
                       T.conv_output_size(w, spec.kernel_w, spec.stride, spec.padding))
                wshapes[layer.name] = [conv_weight_shape(layer, c), (p["out_channels"],)]
            elif k == "pool":
                c, h, w = src
                if p.get("global"):
                    out = (c, 1, 1)
                else:
                    win, st = p["window"], p["stride"]
                    if win > h or win > w:
                        raise ShapeError(f"pool window {win} larger than input {h}x{w}")
                    out = (c, (h - win) // st + 1, (w - win) // st + 1)
            elif k == "dense":
                if len(src) != 1:
                    raise ShapeError(f"dense needs a flat input, got {src}")
                out = (p["units"],)
                wshapes[layer.name] = [(p["units"], src[0]), (p["units"],)]
            elif k == "batchnorm":
                out = src
                wshapes[layer.name] = [(src[0],)] * 4
            elif k == "flatten":
                out = (int(np.prod(src)),)
            elif k == "residual_add":
                other = shapes[layer.inputs[1]]
                if other != src:
                    raise ShapeError(f"residual inputs differ in shape: {src} vs {other}")
                out = src
            elif k == "slice":
                start, stop = p["start"], p["stop"]
                if not 0 <= start < stop <= src[0]:
                    raise ShapeError(f"channel slice [{start}:{stop}] outside {src[0]} channels")
                out = (stop - start,) + tuple(src[1:])
            else:  # activation, dropout
                out = src
        except ShapeError as exc:
            raise ShapeError(f"layer {layer.name!r}: {exc}") from None
        shapes[layer.name] = out
    return shapes, wshapes


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    weights: dict[str, list[np.ndarray]]
    input_shape: tuple[int, int, int]
    num_classes: int
    name: str = ""
    # subtracted from every input before the first layer; tiles arrive in [0, 1]
    input_center: float = 0.0

    def __post_init__(self):
        self.layers = resolve_inputs(list(self.layers))
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self):
        shapes, wshapes = infer_shapes(self.layers, self.input_shape)
        for layer in self.layers:
            expected = wshapes.get(layer.name)
            got = self.weights.get(layer.name)
            if expected is None:
                if got:
                    raise GraphError(f"layer {layer.name!r} ({layer.kind}) carries unexpected weights")
                continue
            if got is None or len(got) != len(expected):
                raise GraphError(f"layer {layer.name!r} needs {len(expected)} weight tensors")
            for i, (g, e) in enumerate(zip(got, expected)):
                if tuple(g.shape) != tuple(e):
                    raise ShapeError(f"layer {layer.name!r} tensor {i}: shape {tuple(g.shape)}, expected {tuple(e)}")
        if shapes[self.layers[-1].name] != (self.num_classes,):
            raise GraphError(f"network output {shapes[self.layers[-1].name]} is not [{self.num_classes}]")

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def consumers(self, name: str) -> list[LayerSpec]:
        return [l for l in self.layers if name in l.inputs]

    def shapes(self) -> dict[str, tuple]:
        return infer_shapes(self.layers, self.input_shape)[0]

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def param_count(self) -> int:
        return sum(int(w.size) for ws in self.weights.values() for w in ws)

    def summary(self) -> str:
        shapes = self.shapes()
        rows = [f"{self.name or 'model'}  input={list(self.input_shape)}  classes={self.num_classes}"]
        for layer in self.layers:
            n = sum(int(w.size) for w in self.weights.get(layer.name, []))
            rows.append(f"  {layer.name:<24}{layer.kind:<16}{str(list(shapes[layer.name])):<18}{n:>10}")
        rows.append(f"  total parameters: {self.param_count()}")
        return "\n".join(rows)


def effective_kernel(layer: LayerSpec, w: np.ndarray) -> np.ndarray:
    mask = layer.params.get("mask")
    if mask is None:
        return w
    return w * np.asarray(mask, dtype=w.dtype)[:, :, None, None]


# ---------------------------------------------------------------------------
# execution


@dataclass
class Trace:
    """Everything a forward pass kept for the matching backward pass."""

    contexts: dict[str, Any]
    shapes: dict[str, tuple]
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]]
    output: np.ndarray
    logits_name: str | None


def _batch_input(model: ModelGraph, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(T.DTYPE)
    shape = model.input_shape
    if x.shape == shape:
        return x[None], False
    if x.ndim == 4 and x.shape[1:] == shape:
        return x, True
    raise ShapeError(f"model expects input {list(shape)} (optionally batched), got {list(x.shape)}")


def run(model: ModelGraph, x, training: bool = False, rng: np.random.Generator | None = None,
        record: bool = False, dtype=None) -> Trace:
    """Evaluate ``model`` on a batch ``x`` [N,C,H,W].

    In training mode dropout is active (needs ``rng``) and batchnorm uses batch
    statistics, which are returned in ``Trace.bn_stats`` rather than applied.
    """
    xb, _ = _batch_input(model, x)
    if dtype is not None:
        xb = xb.astype(dtype)
    if model.input_center:
        xb = xb - xb.dtype.type(model.input_center)
    acts: dict[str, np.ndarray] = {INPUT: xb}
    ctxs: dict[str, Any] = {}
    bn_stats = {}
    last = model.layers[-1]
    consumers_left = {}
    for layer in model.layers:
        for src in layer.inputs:
            consumers_left[src] = consumers_left.get(src, 0) + 1

    for layer in model.layers:
        a = acts[layer.inputs[0]]
        k, p = layer.kind, layer.params
        ws = model.weights.get(layer.name)
        if ws is not None and dtype is not None:
            ws = [w.astype(dtype) for w in ws]
        ctx = None
        if k in ("conv", "depthwise_conv"):
            w = effective_kernel(layer, ws[0])
            if record:
                y, ctx = T.trace("conv2d", a, w, ws[1], p["spec"])
            else:
                y = T.conv2d(a, w, ws[1], p["spec"])
        elif k == "pool":
            win = a.shape[2] if p.get("global") else p["window"]
            st = win if p.get("global") else p["stride"]
            mode = p.get("mode", "max")
            if p.get("global") and win != a.shape[3]:
                raise ShapeError("global pooling needs square feature maps")
            y, ctx = T.trace("pool2d", a, win, st, mode) if record else (T.pool2d(a, win, st, mode), None)
        elif k == "dense":
            y, ctx = T.trace("dense", a, ws[0], ws[1]) if record else (T.dense(a, ws[0], ws[1]), None)
        elif k == "batchnorm":
            gamma, beta, mean, var = ws
            eps = p.get("eps", 1e-5)
            if training:
                y, ctx = T.trace("batchnorm_train", a, gamma, beta, eps)
                bn_stats[layer.name] = (ctx.extras["mean"], ctx.extras["var"])
            elif record:
                y, ctx = T.trace("batchnorm", a, mean, var, gamma, beta, eps)
            else:
                y = T.batchnorm(a, mean, var, gamma, beta, eps)
        elif k == "activation":
            fn = p["fn"]
            if layer is last and fn == "softmax":
                ctxs["__logits__"] = a
            y, ctx = T.trace("activation", a, fn) if record else (T.activation(a, fn), None)
        elif k == "dropout":
            rate = p.get("rate", 0.5)
            if training and rate > 0:
                if rng is None:
                    raise ValueError("dropout in training mode needs an rng")
                keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
                y = a * keep
                ctx = keep
            else:
                y = a
        elif k == "flatten":
            y = a.reshape(a.shape[0], -1)
            ctx = a.shape
        elif k == "residual_add":
            y = a + acts[layer.inputs[1]]
        elif k == "slice":
            y = a[:, p["start"]:p["stop"]]
        else:  # pragma: no cover - guarded by LayerSpec
            raise GraphError(k)
        acts[layer.name] = y
        if record:
            ctxs[layer.name] = ctx
        else:
            # free activations nobody will read again
            for src in layer.inputs:
                consumers_left[src] -= 1
                if consumers_left[src] == 0 and src != INPUT:
                    acts.pop(src, None)
    logits_name = last.inputs[0] if (last.kind == "activation" and last.params["fn"] == "softmax") else None
    shapes = {name: a.shape for name, a in acts.items()} if record else {}
    return Trace(ctxs, shapes, bn_stats, acts[last.name], logits_name)


def forward(model: ModelGraph, x, training: bool = False, rng=None) -> np.ndarray:
    """Class-probability vector for one input [C,H,W] (or a batch [N,C,H,W]).

    Inference mode by default: dropout is the identity and batchnorm uses the
    stored running statistics.
    """
    xb, batched = _batch_input(model, x)
    out = run(model, xb, training=training, rng=rng).output
    return out if batched else out[0]


def backward(model: ModelGraph, tr: Trace, grad_out: np.ndarray, from_logits: bool = False) -> dict[str, list]:
    """Back-propagate ``grad_out`` through a recorded :class:`Trace`.

    With ``from_logits`` the gradient is taken to be with respect to the input
    of the final softmax (the fused softmax + cross-entropy shortcut).  Returns
    layer name -> gradient list aligned with ``model.weights``; running
    statistics and frozen layers get exact zeros.
    """
    if not tr.contexts:
        raise T.ContextError("backward needs a trace recorded with record=True")
    grads_act: dict[str, np.ndarray] = {}
    layers = model.layers
    last = layers[-1]
    if from_logits:
        if tr.logits_name is None:
            raise GraphError("from_logits requires a final softmax layer")
        grads_act[tr.logits_name] = grad_out
        layers = layers[:-1]
    else:
        grads_act[last.name] = grad_out

    def push(src, g):
        if src in grads_act:
            grads_act[src] = grads_act[src] + g
        else:
            grads_act[src] = g

    wgrads: dict[str, list] = {}
    for layer in reversed(layers):
        g = grads_act.pop(layer.name, None)
        if g is None:
            continue
        k, ctx = layer.kind, tr.contexts.get(layer.name)
        if k in ("conv", "depthwise_conv"):
            r = T.backward(ctx, g)
            dw = r["weights"]
            mask = layer.params.get("mask")
            if mask is not None:
                dw = dw * np.asarray(mask, dtype=dw.dtype)[:, :, None, None]
            wgrads[layer.name] = [dw, r["bias"]]
            push(layer.inputs[0], r["input"])
        elif k == "dense":
            r = T.backward(ctx, g)
            wgrads[layer.name] = [r["weights"], r["bias"]]
            push(layer.inputs[0], r["input"])
        elif k == "batchnorm":
            r = T.backward(ctx, g)
            z = np.zeros_like(r["gamma"])
            wgrads[layer.name] = [r["gamma"], r["beta"], z, z.copy()]
            push(layer.inputs[0], r["input"])
        elif k in ("pool", "activation"):
            push(layer.inputs[0], T.backward(ctx, g)["input"])
        elif k == "dropout":
            push(layer.inputs[0], g if ctx is None else g * ctx)
        elif k == "flatten":
            push(layer.inputs[0], g.reshape(ctx))
        elif k == "residual_add":
            push(layer.inputs[0], g)
            push(layer.inputs[1], g)
        elif k == "slice":
            full = np.zeros(tr.shapes[layer.inputs[0]], dtype=g.dtype)
            full[:, layer.params["start"]:layer.params["stop"]] = g
            push(layer.inputs[0], full)
    for layer in model.layers:
        if layer.name in model.weights:
            if layer.name not in wgrads or not layer.trainable:
                wgrads[layer.name] = [np.zeros_like(w) for w in model.weights[layer.name]]
    return wgrads
