"""Binary weight files (``.pdnw``) and an optional JSON topology sidecar.

Layout, little-endian, no padding::

    "PDNW"                      magic, 4 bytes
    u16 version (= 1)
    u32 layer count
    per layer:  u16 name length, UTF-8 name, u8 tensor count
    per tensor: u8 rank, u32 dim * rank, float32 * prod(dims)

Every layer of the graph is written in order, unweighted layers with a tensor
count of zero.  The weight file carries no topology; :func:`load_weights`
therefore needs a template graph.  :func:`save_model` / :func:`load_model`
add a ``<path>.json`` sidecar describing the layers so that graphs rewritten by
the optimization passes can be reloaded.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .graph import LayerSpec, ModelGraph
from .tensor import ConvSpec, ShapeError

MAGIC = b"PDNW"
VERSION = 1


class WeightFormatError(ValueError):
    """Malformed weight file."""


class BadMagicError(WeightFormatError):
    pass


class VersionError(WeightFormatError):
    pass


class TruncatedError(WeightFormatError):
    pass


class WeightShapeError(ShapeError):
    """Stored tensors do not fit the template graph."""


def encode_weights(model: ModelGraph) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(model.layers))
    for layer in model.layers:
        name = layer.name.encode("utf-8")
        tensors = model.weights.get(layer.name, [])
        out += struct.pack("<H", len(name)) + name + struct.pack("<B", len(tensors))
        for t in tensors:
            out += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
            out += np.ascontiguousarray(t, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"weight file truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_weights(data: bytes) -> list[tuple[str, list[np.ndarray]]]:
    """Parse a weight file into ``[(layer name, [tensors])]`` in file order."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a PDNW weight file (bad magic)")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise VersionError(f"unsupported weight file version {version} (expected {VERSION})")
    layers = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (nt,) = r.unpack("<B")
        tensors = []
        for _ in range(nt):
            (rank,) = r.unpack("<B")
            dims = r.unpack(f"<{rank}I")
            size = int(np.prod(dims)) if rank else 1
            buf = r.take(4 * size)
            tensors.append(np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(dims))
        layers.append((name, tensors))
    if r.pos != len(data):
        raise WeightFormatError(f"{len(data) - r.pos} trailing bytes after last layer")
    return layers


def save_weights(model: ModelGraph, path) -> None:
    Path(path).write_bytes(encode_weights(model))


def load_weights(path, template: ModelGraph) -> ModelGraph:
    """Return a copy of ``template`` carrying the weights stored at ``path``.

    Layers are matched by position.  The first layer whose name or tensor
    shapes disagree with the template raises :class:`WeightShapeError`.
    """
    stored = decode_weights(Path(path).read_bytes())
    weighted = [l for l in template.layers if l.name in template.weights]
    stored_weighted = [(n, ts) for n, ts in stored if ts]
    weights = {}
    for i, layer in enumerate(weighted):
        if i >= len(stored_weighted):
            raise WeightShapeError(f"layer {layer.name!r}: no weights in file")
        name, tensors = stored_weighted[i]
        expected = template.weights[layer.name]
        got_shapes = [t.shape for t in tensors]
        want_shapes = [w.shape for w in expected]
        if got_shapes != want_shapes:
            raise WeightShapeError(
                f"layer {layer.name!r}: file has {name!r} with shapes {got_shapes}, expected {want_shapes}")
        weights[layer.name] = tensors
    if len(stored_weighted) > len(weighted):
        extra = stored_weighted[len(weighted)][0]
        raise WeightShapeError(f"file has extra weighted layer {extra!r} beyond the template")
    model = template.copy()
    model.weights = weights
    return model


# ---------------------------------------------------------------------------
# topology sidecar


def _params_to_json(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, ConvSpec):
            out[k] = {"__conv__": [v.kernel_h, v.kernel_w, v.stride, v.padding, v.groups]}
        elif isinstance(v, np.ndarray):
            out[k] = {"__mask__": v.astype(int).tolist()}
        else:
            out[k] = v
    return out


def _params_from_json(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, dict) and "__conv__" in v:
            kh, kw, s, pad, g = v["__conv__"]
            out[k] = ConvSpec(kh, kw, s, pad, g)
        elif isinstance(v, dict) and "__mask__" in v:
            out[k] = np.asarray(v["__mask__"], dtype=bool)
        else:
            out[k] = v
    return out


def topology(model: ModelGraph) -> dict:
    return {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "input_center": model.input_center,
        "layers": [
            {"name": l.name, "kind": l.kind, "params": _params_to_json(l.params),
             "inputs": list(l.inputs), "trainable": l.trainable}
            for l in model.layers
        ],
    }


def graph_from_topology(topo: dict) -> ModelGraph:
    from .zoo import init_weights

    layers = [LayerSpec(d["name"], d["kind"], _params_from_json(d["params"]), tuple(d["inputs"]),
                        d.get("trainable", True)) for d in topo["layers"]]
    shape = tuple(topo["input_shape"])
    return ModelGraph(layers, init_weights(layers, shape), shape, topo["num_classes"], topo.get("name", ""),
                      topo.get("input_center", 0.0))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_model(model: ModelGraph, path) -> None:
    save_weights(model, path)
    sidecar_path(path).write_text(json.dumps(topology(model), indent=1))


def load_model(path, arch: str | None = None, **builder_kwargs) -> ModelGraph:
    """Load weights using the sidecar topology if present, else a named builder."""
    side = sidecar_path(path)
    if side.exists():
        template = graph_from_topology(json.loads(side.read_text()))
    else:
        from .zoo import build

        template = build(arch or "lenet5", **builder_kwargs)
    return load_weights(path, template)
