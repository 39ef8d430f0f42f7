"""Inference-time graph rewrites and magnitude pruning.

Every pass takes a graph and returns ``(new_graph, PassReport)``; the input
graph is never modified.  ``fold_batchnorm`` has to run before
``fuse_constants``: an unfolded batchnorm sits between two convolutions and
blocks their composition.

Fusion rules (interpretations of "node merging" and "constant / horizontal
fusion"):

* vertical: a conv (groups=1) or dense layer whose only consumer is a
  1x1/stride-1/groups-1 conv (resp. a dense layer) with nothing in between is
  composed into a single affine layer;
* horizontal: ungrouped convs that read the same tensor with identical
  ConvSpec become one conv with concatenated output channels, followed by
  channel slices that keep the original layer names.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import LayerSpec, ModelGraph, effective_kernel
from .tensor import DTYPE

KERNEL_KINDS = ("conv", "depthwise_conv", "dense")


@dataclass
class PassReport:
    name: str
    nodes_removed: int = 0
    nodes_merged: int = 0
    weights_zeroed: int = 0
    sparsity_after: float = 0.0
    notes: list[str] = field(default_factory=list)

    def line(self) -> str:
        s = (f"pass={self.name} nodes_removed={self.nodes_removed} nodes_merged={self.nodes_merged} "
             f"weights_zeroed={self.weights_zeroed} sparsity_after={self.sparsity_after:.4f}")
        if self.notes:
            s += " notes=" + "; ".join(self.notes)
        return s


def sparsity(model: ModelGraph) -> float:
    """Fraction of exactly-zero entries over all conv/dense kernels."""
    zero = total = 0
    for layer in model.layers:
        if layer.kind in KERNEL_KINDS:
            w = model.weights[layer.name][0]
            zero += int(np.count_nonzero(w == 0))
            total += w.size
    return zero / total if total else 0.0


def _rebuild(model: ModelGraph, layers, weights) -> ModelGraph:
    return ModelGraph(layers, weights, model.input_shape, model.num_classes, model.name, model.input_center)


def _rename_inputs(layers, old: str, new: str):
    return [l.with_inputs([new if s == old else s for s in l.inputs]) if old in l.inputs else l for l in layers]


def _consumers(layers, name):
    return [l for l in layers if name in l.inputs]


# ---------------------------------------------------------------------------


def fold_batchnorm(model: ModelGraph) -> tuple[ModelGraph, PassReport]:
    """Absorb each batchnorm into the conv/dense layer that feeds it."""
    report = PassReport("fold-bn")
    layers = list(model.layers)
    weights = {k: [w.copy() for w in v] for k, v in model.weights.items()}
    for bn_name in [l.name for l in model.layers if l.kind == "batchnorm"]:
        bn = next(l for l in layers if l.name == bn_name)
        pred_name = bn.inputs[0]
        pred = next((l for l in layers if l.name == pred_name), None)
        if pred is None or pred.kind not in KERNEL_KINDS:
            report.notes.append(f"{bn.name}: predecessor is not conv/dense, kept")
            continue
        if len(_consumers(layers, pred_name)) != 1:
            report.notes.append(f"{bn.name}: {pred_name} has other consumers, kept")
            continue
        gamma, beta, mean, var = (w.astype(np.float64) for w in weights[bn.name])
        scale = gamma / np.sqrt(var + bn.params.get("eps", 1e-5))
        w, b = (t.astype(np.float64) for t in weights[pred_name])
        w = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
        b = (b - mean) * scale + beta
        weights[pred_name] = [w.astype(DTYPE), b.astype(DTYPE)]
        del weights[bn.name]
        layers = [l for l in layers if l.name != bn.name]
        layers = _rename_inputs(layers, bn.name, pred_name)
        report.nodes_removed += 1
    out = _rebuild(model, layers, weights)
    report.sparsity_after = sparsity(out)
    return out, report


def strip_training_layers(model: ModelGraph) -> tuple[ModelGraph, PassReport]:
    """Drop dropout layers (identity at inference)."""
    report = PassReport("strip-train")
    layers = list(model.layers)
    for d in [l for l in model.layers if l.kind == "dropout"]:
        layers = [l for l in layers if l.name != d.name]
        layers = _rename_inputs(layers, d.name, d.inputs[0])
        report.nodes_removed += 1
    weights = {k: [w.copy() for w in v] for k, v in model.weights.items()}
    out = _rebuild(model, layers, weights)
    report.sparsity_after = sparsity(out)
    return out, report


def _is_pointwise(layer: LayerSpec) -> bool:
    if layer.kind != "conv" or layer.params.get("mask") is not None:
        return False
    s = layer.params["spec"]
    return s.kernel_h == s.kernel_w == 1 and s.stride == 1 and s.groups == 1


def _fuse_vertical_once(layers, weights):
    for b_layer in layers:
        if not (_is_pointwise(b_layer) or b_layer.kind == "dense"):
            continue
        a_name = b_layer.inputs[0]
        a_layer = next((l for l in layers if l.name == a_name), None)
        if a_layer is None or len(_consumers(layers, a_name)) != 1:
            continue
        if b_layer.kind == "dense":
            if a_layer.kind != "dense":
                continue
            wa, ba = (t.astype(np.float64) for t in weights[a_name])
            wb, bb = (t.astype(np.float64) for t in weights[b_layer.name])
            w, b = wb @ wa, wb @ ba + bb
            merged = replace(b_layer, inputs=a_layer.inputs,
                             trainable=a_layer.trainable and b_layer.trainable)
        else:
            if a_layer.kind != "conv" or a_layer.params["spec"].groups != 1:
                continue
            wa = effective_kernel(a_layer, weights[a_name][0]).astype(np.float64)
            ba = weights[a_name][1].astype(np.float64)
            wb = weights[b_layer.name][0][:, :, 0, 0].astype(np.float64)
            bb = weights[b_layer.name][1].astype(np.float64)
            w = np.einsum("oc,cikl->oikl", wb, wa)
            b = wb @ ba + bb
            params = {"spec": a_layer.params["spec"], "out_channels": b_layer.params["out_channels"]}
            merged = replace(b_layer, params=params, inputs=a_layer.inputs,
                             trainable=a_layer.trainable and b_layer.trainable)
        new_layers = []
        for l in layers:
            if l.name == a_name:
                continue
            new_layers.append(merged if l.name == b_layer.name else l)
        weights = dict(weights)
        del weights[a_name]
        weights[b_layer.name] = [w.astype(DTYPE), b.astype(DTYPE)]
        return new_layers, weights, f"{a_name}+{b_layer.name}"
    return None


def _fuse_horizontal_once(layers, weights):
    groups: dict[tuple, list[LayerSpec]] = {}
    for l in layers:
        if l.kind == "conv" and l.params.get("mask") is None and l.params["spec"].groups == 1:
            groups.setdefault((l.inputs[0], l.params["spec"]), []).append(l)
    for (src, spec), sibs in groups.items():
        if len(sibs) < 2:
            continue
        names = [s.name for s in sibs]
        merged_name = "+".join(names)
        w = np.concatenate([weights[n][0] for n in names], axis=0)
        b = np.concatenate([weights[n][1] for n in names], axis=0)
        merged = LayerSpec(merged_name, "conv", {"spec": spec, "out_channels": int(w.shape[0])}, (src,),
                           all(s.trainable for s in sibs))
        slices, start = [], 0
        for s in sibs:
            stop = start + s.params["out_channels"]
            slices.append(LayerSpec(s.name, "slice", {"start": start, "stop": stop}, (merged_name,)))
            start = stop
        new_layers = []
        for l in layers:
            if l.name == names[0]:
                new_layers.append(merged)
                new_layers.extend(slices)
            elif l.name not in names:
                new_layers.append(l)
        weights = {k: v for k, v in weights.items() if k not in names}
        weights[merged_name] = [w, b]
        return new_layers, weights, merged_name, len(sibs)
    return None


def fuse_constants(model: ModelGraph) -> tuple[ModelGraph, PassReport]:
    """Compose back-to-back linear layers and merge sibling convolutions."""
    report = PassReport("fuse-const")
    layers = list(model.layers)
    weights = {k: [w.copy() for w in v] for k, v in model.weights.items()}
    changed = True
    while changed:
        changed = False
        v = _fuse_vertical_once(layers, weights)
        if v is not None:
            layers, weights, _ = v
            report.nodes_merged += 1
            report.nodes_removed += 1
            changed = True
            continue
        h = _fuse_horizontal_once(layers, weights)
        if h is not None:
            layers, weights, _, n = h
            report.nodes_merged += n - 1
            changed = True
    out = _rebuild(model, layers, weights)
    report.sparsity_after = sparsity(out)
    return out, report


# ---------------------------------------------------------------------------


def _prune_order(w: np.ndarray) -> np.ndarray:
    # stable sort: equal magnitudes keep ascending flat-index order
    return np.argsort(np.abs(w).ravel(), kind="stable")


def prune_magnitude(model: ModelGraph, target_sparsity: float, scope: str = "layer") -> tuple[ModelGraph, PassReport]:
    """Zero the smallest-magnitude kernel weights; biases are left alone.

    ``scope="layer"`` brings each conv/dense kernel to ``target_sparsity`` on
    its own; ``scope="global"`` ranks all kernel weights together.
    """
    if not 0 <= target_sparsity < 1:
        raise ValueError(f"target sparsity must be in [0, 1), got {target_sparsity}")
    if scope not in ("layer", "global"):
        raise ValueError(f"scope must be 'layer' or 'global', got {scope!r}")
    report = PassReport(f"prune:{target_sparsity:g}")
    weights = {k: [w.copy() for w in v] for k, v in model.weights.items()}
    names = [l.name for l in model.layers if l.kind in KERNEL_KINDS]
    before = sum(int(np.count_nonzero(weights[n][0] == 0)) for n in names)
    if scope == "layer":
        for n in names:
            w = weights[n][0]
            k = math.ceil(target_sparsity * w.size)
            if k:
                flat = w.reshape(-1)
                flat[_prune_order(w)[:k]] = 0
    else:
        flat_all = np.concatenate([weights[n][0].ravel() for n in names])
        k = math.ceil(target_sparsity * flat_all.size)
        flat_all[_prune_order(flat_all)[:k]] = 0
        pos = 0
        for n in names:
            w = weights[n][0]
            w.reshape(-1)[:] = flat_all[pos:pos + w.size]
            pos += w.size
    after = sum(int(np.count_nonzero(weights[n][0] == 0)) for n in names)
    out = _rebuild(model, list(model.layers), weights)
    report.weights_zeroed = after - before
    report.sparsity_after = sparsity(out)
    return out, report


def prune_masks(model: ModelGraph) -> dict[str, np.ndarray]:
    """Boolean keep-masks (True = nonzero) for every kernel, for holding pruned weights at zero."""
    return {l.name: model.weights[l.name][0] != 0 for l in model.layers if l.kind in KERNEL_KINDS}


@dataclass
class PruneSchedule:
    """Ramp sparsity linearly to ``target`` in steps every ``every`` epochs."""

    target: float
    every: int = 10
    epochs: int = 100

    def sparsity_at(self, epoch: int) -> float | None:
        """Sparsity to prune to after ``epoch`` (1-based), or None if no step is due."""
        if epoch % self.every:
            return None
        steps = max(self.epochs // self.every, 1)
        return self.target * min(epoch // self.every, steps) / steps


# ---------------------------------------------------------------------------

PASSES = {
    "fold-bn": fold_batchnorm,
    "strip-train": strip_training_layers,
    "fuse-const": fuse_constants,
}


def parse_pipeline(text: str) -> list[tuple[str, float | None]]:
    """Parse ``"fold-bn,strip-train,fuse-const,prune:0.5"`` into ``[(name, arg)]``."""
    steps = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, _, arg = item.partition(":")
        if name == "prune":
            if not arg:
                raise ValueError("prune needs a target, e.g. prune:0.5")
            steps.append((name, float(arg)))
        elif name in PASSES:
            if arg:
                raise ValueError(f"pass {name} takes no argument")
            steps.append((name, None))
        else:
            raise ValueError(f"unknown pass {name!r}; known: {', '.join([*PASSES, 'prune:<s>'])}")
    names = [n for n, _ in steps]
    if "fuse-const" in names and "fold-bn" in names and names.index("fuse-const") < names.index("fold-bn"):
        raise ValueError("fold-bn must run before fuse-const")
    return steps


def run_pipeline(model: ModelGraph, pipeline: str) -> tuple[ModelGraph, list[PassReport]]:
    reports = []
    for name, arg in parse_pipeline(pipeline):
        if name == "prune":
            model, rep = prune_magnitude(model, arg)
        else:
            model, rep = PASSES[name](model)
        reports.append(rep)
    return model, reports


def optimize_for_inference(model: ModelGraph) -> tuple[ModelGraph, list[PassReport]]:
    return run_pipeline(model, "fold-bn,strip-train,fuse-const")
