"""Dense tensor kernels: forward and backward passes for the layer set used by
LeNet-5, VGG16 and MobileNetV2.

Tensors are plain ``numpy.ndarray`` objects, float32 by default, laid out
row-major and channels-first.  Every kernel accepts a single sample
(``[C, H, W]`` for spatial ops, ``[N]`` for dense) or a batch with an extra
leading axis, and returns the same rank it was given.

Backward passes work from a :class:`Context` recorded by :func:`trace`::

    y, ctx = trace("conv2d", x, w, b, spec)
    grads = backward(ctx, dy)      # {"input": ..., "weights": ..., "bias": ...}

Same padding splits the zero border as floor(total/2) before, the rest after.
There is no implicit broadcasting: shape mismatches raise :class:`ShapeError`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

__all__ = [
    "DTYPE",
    "ShapeError",
    "NonFiniteError",
    "ContextError",
    "ConvSpec",
    "Context",
    "as_tensor",
    "conv_output_size",
    "conv2d",
    "pool2d",
    "activation",
    "dense",
    "batchnorm",
    "batchnorm_train",
    "trace",
    "backward",
]


class ShapeError(ValueError):
    """Tensor dimensions are inconsistent with the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ContextError(RuntimeError):
    """Backward was requested without a matching recorded forward pass."""


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Return ``data`` as a contiguous array of ``dtype`` (float32 by default).

    Raises :class:`NonFiniteError` if any value is NaN or infinite.
    """
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim and 0 in arr.shape:
        raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
    _check_finite(arr, "as_tensor")
    return arr


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: str = "valid"
    groups: int = 1

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride, self.groups) < 1:
            raise ValueError(f"conv parameters must be positive: {self}")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if size < kernel:
        raise ShapeError(f"spatial size {size} is smaller than kernel {kernel}")
    return (size - kernel) // stride + 1


def _same_pads(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _batched(x: np.ndarray, spatial_rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == spatial_rank:
        return x[None], False
    if x.ndim == spatial_rank + 1:
        return x, True
    raise ShapeError(f"expected rank {spatial_rank} or {spatial_rank + 1}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _conv_forward(x, w, b, spec: ConvSpec):
    xb, batched = _batched(x, 3)
    n, c_in, h, wd = xb.shape
    if w.ndim != 4:
        raise ShapeError(f"conv weights must be [C_out, C_in/groups, kh, kw], got {w.shape}")
    c_out, c_per_group, kh, kw = w.shape
    g = spec.groups
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"weights kernel {kh}x{kw} does not match spec {spec.kernel_h}x{spec.kernel_w}")
    if c_in % g or c_out % g:
        raise ShapeError(f"channels in={c_in} out={c_out} not divisible by groups={g}")
    if c_per_group != c_in // g:
        raise ShapeError(f"weights expect {c_per_group * g} input channels, input has {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"bias shape {b.shape} does not match {c_out} output channels")

    if spec.padding == "same":
        pt, pb = _same_pads(h, kh, spec.stride)
        pl, pr = _same_pads(wd, kw, spec.stride)
    else:
        if h < kh or wd < kw:
            raise ShapeError(f"input {h}x{wd} smaller than kernel {kh}x{kw} with valid padding")
        pt = pb = pl = pr = 0
    xp = np.pad(xb, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xb
    s = spec.stride
    ho = conv_output_size(h, kh, s, spec.padding)
    wo = conv_output_size(wd, kw, s, spec.padding)

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    # win: [n, c_in, ho, wo, kh, kw]
    og = c_out // g
    if g == 1:
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [n, ho, wo, c_out]
        y = y.transpose(0, 3, 1, 2)
    elif c_per_group == 1 and og == 1:
        y = np.einsum("nchwij,cij->nchw", win, w[:, 0])
    else:
        wing = win.reshape(n, g, c_per_group, ho, wo, kh, kw)
        wg = w.reshape(g, og, c_per_group, kh, kw)
        y = np.einsum("ngchwij,gocij->ngohw", wing, wg).reshape(n, c_out, ho, wo)
    y = np.ascontiguousarray(y + b[None, :, None, None], dtype=x.dtype)
    cache = dict(x_shape=xb.shape, padded_shape=xp.shape, pads=(pt, pl), win=win, w=w,
                 spec=spec, batched=batched, out_hw=(ho, wo))
    return (y if batched else y[0]), cache


def _conv_backward(cache, dy):
    dyb = dy if cache["batched"] else dy[None]
    win, w, spec = cache["win"], cache["w"], cache["spec"]
    n, c_in, h, wd = cache["x_shape"]
    c_out, cpg, kh, kw = w.shape
    g = spec.groups
    og = c_out // g
    ho, wo = cache["out_hw"]
    s = spec.stride

    db = dyb.sum(axis=(0, 2, 3))
    if g == 1:
        dw = np.tensordot(dyb, win, axes=([0, 2, 3], [0, 2, 3]))  # [c_out, c_in, kh, kw]
        dwin = np.tensordot(dyb, w, axes=([1], [0]))  # [n, ho, wo, c_in, kh, kw]
        dwin = dwin.transpose(0, 3, 1, 2, 4, 5)
    elif cpg == 1 and og == 1:
        dw = np.einsum("nchw,nchwij->cij", dyb, win)[:, None]
        dwin = dyb[..., None, None] * w[:, 0][None, :, None, None]
    else:
        wing = win.reshape(n, g, cpg, ho, wo, kh, kw)
        dyg = dyb.reshape(n, g, og, ho, wo)
        wg = w.reshape(g, og, cpg, kh, kw)
        dw = np.einsum("ngohw,ngchwij->gocij", dyg, wing).reshape(w.shape)
        dwin = np.einsum("ngohw,gocij->ngchwij", dyg, wg).reshape(n, c_in, ho, wo, kh, kw)

    dxp = np.zeros(cache["padded_shape"], dtype=dyb.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dwin[:, :, :, :, i, j]
    pt, pl = cache["pads"]
    dx = dxp[:, :, pt:pt + h, pl:pl + wd]
    dx = np.ascontiguousarray(dx)
    return {
        "input": dx if cache["batched"] else dx[0],
        "weights": dw.astype(w.dtype, copy=False),
        "bias": db.astype(w.dtype, copy=False),
    }


def conv2d(input, weights, bias, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate ``input`` [C_in,H,W] with ``weights`` [C_out,C_in/groups,kh,kw].

    >>> import numpy as np
    >>> x = np.array([[[1, 2], [3, 4]]], dtype=np.float32)
    >>> conv2d(x, np.full((1, 1, 1, 1), 2, np.float32), np.zeros(1, np.float32),
    ...        ConvSpec(1, 1)).tolist()
    [[[2.0, 4.0], [6.0, 8.0]]]
    """
    y, _ = _conv_forward(input, weights, bias, spec)
    return _check_finite(y, "conv2d")


# ---------------------------------------------------------------------------
# pooling


def _pool_forward(x, window, stride, mode):
    if mode not in ("avg", "max"):
        raise ValueError(f"pool mode must be 'avg' or 'max', got {mode!r}")
    if window < 1 or stride < 1:
        raise ValueError("pool window and stride must be positive")
    xb, batched = _batched(x, 3)
    n, c, h, wd = xb.shape
    if window > h or window > wd:
        raise ShapeError(f"pool window {window} larger than input {h}x{wd}")
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    if mode == "avg":
        y = win.mean(axis=(4, 5), dtype=x.dtype)
        arg = None
    else:
        flat = win.reshape(n, c, ho, wo, window * window)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    y = np.ascontiguousarray(y, dtype=x.dtype)
    cache = dict(x_shape=xb.shape, window=window, stride=stride, mode=mode, arg=arg,
                 batched=batched, out_hw=(ho, wo))
    return (y if batched else y[0]), cache


def _pool_backward(cache, dy):
    dyb = dy if cache["batched"] else dy[None]
    k, s = cache["window"], cache["stride"]
    ho, wo = cache["out_hw"]
    dx = np.zeros(cache["x_shape"], dtype=dyb.dtype)
    if cache["mode"] == "avg":
        share = dyb / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += share
    else:
        arg = cache["arg"]
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(arg == i * k + j, dyb, 0)
    return {"input": dx if cache["batched"] else dx[0]}


def pool2d(input, window: int, stride: int, mode: str = "max") -> np.ndarray:
    """Window reduction over the two trailing axes; output size uses floor division."""
    y, _ = _pool_forward(input, window, stride, mode)
    return _check_finite(y, "pool2d")


# ---------------------------------------------------------------------------
# activations


def _act_forward(x, kind):
    if kind == "relu":
        y = np.maximum(x, 0)
    elif kind == "relu6":
        y = np.clip(x, 0, 6)
    elif kind == "softmax":
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    y = y.astype(x.dtype, copy=False)
    return y, dict(kind=kind, x=x, y=y)


def _act_backward(cache, dy):
    kind, x, y = cache["kind"], cache["x"], cache["y"]
    if kind == "relu":
        dx = np.where(x > 0, dy, 0)
    elif kind == "relu6":
        dx = np.where((x > 0) & (x < 6), dy, 0)
    else:
        dx = y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    return {"input": dx.astype(dy.dtype, copy=False)}


def activation(input, kind: str) -> np.ndarray:
    """Elementwise ``relu``/``relu6``, or ``softmax`` over the last axis."""
    y, _ = _act_forward(np.asarray(input), kind)
    return _check_finite(y, kind)


# ---------------------------------------------------------------------------
# dense


def _dense_forward(x, w, b):
    xb, batched = _batched(x, 1)
    if w.ndim != 2 or w.shape[1] != xb.shape[1]:
        raise ShapeError(f"dense weights {w.shape} do not accept input of length {xb.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense bias {b.shape} does not match {w.shape[0]} outputs")
    y = (xb @ w.T + b).astype(x.dtype, copy=False)
    return (y if batched else y[0]), dict(x=xb, w=w, batched=batched)


def _dense_backward(cache, dy):
    dyb = dy if cache["batched"] else dy[None]
    x, w = cache["x"], cache["w"]
    dx = dyb @ w
    return {
        "input": dx if cache["batched"] else dx[0],
        "weights": (dyb.T @ x).astype(w.dtype, copy=False),
        "bias": dyb.sum(axis=0).astype(w.dtype, copy=False),
    }


def dense(input, weights, bias) -> np.ndarray:
    y, _ = _dense_forward(input, weights, bias)
    return _check_finite(y, "dense")


# ---------------------------------------------------------------------------
# batch normalization


def _channel_view(x, param):
    """Reshape a per-channel vector so it lines up with the channel axis of ``x``."""
    if x.ndim in (1, 3):
        c_axis = 0
    elif x.ndim in (2, 4):
        c_axis = 1
    else:
        raise ShapeError(f"batchnorm expects rank 1-4 input, got {x.shape}")
    if param.shape != (x.shape[c_axis],):
        raise ShapeError(f"per-channel parameter {param.shape} does not match {x.shape[c_axis]} channels")
    shape = [1] * x.ndim
    shape[c_axis] = -1
    return param.reshape(shape), c_axis


def _bn_forward(x, mean, var, gamma, beta, eps=1e-5):
    if np.any(var < 0):
        raise ValueError("batchnorm variance must be non-negative")
    if eps < 0:
        raise ValueError("batchnorm eps must be non-negative")
    m, _ = _channel_view(x, mean)
    inv_std = 1.0 / np.sqrt(var + eps)
    s, _ = _channel_view(x, inv_std)
    g, _ = _channel_view(x, gamma)
    bt, c_axis = _channel_view(x, beta)
    xhat = (x - m) * s
    y = (xhat * g + bt).astype(x.dtype, copy=False)
    return y, dict(mode="inference", xhat=xhat, s=s, g=g, c_axis=c_axis)


def _bn_train_forward(x, gamma, beta, eps=1e-5):
    if x.ndim not in (2, 4):
        raise ShapeError(f"training batchnorm expects a batch [N,C] or [N,C,H,W], got {x.shape}")
    axes = tuple(i for i in range(x.ndim) if i != 1)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    y, cache = _bn_forward(x, mean, var, gamma, beta, eps)
    cache.update(mode="train", axes=axes, count=x.size // x.shape[1])
    return y, mean, var, cache


def _bn_backward(cache, dy):
    xhat, s, g, c_axis = cache["xhat"], cache["s"], cache["g"], cache["c_axis"]
    axes = tuple(i for i in range(dy.ndim) if i != c_axis)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * g
    if cache["mode"] == "train":
        m = cache["count"]
        dx = s / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                      - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
    else:
        dx = dxhat * s
    return {
        "input": dx.astype(dy.dtype, copy=False),
        "gamma": dgamma.astype(dy.dtype, copy=False),
        "beta": dbeta.astype(dy.dtype, copy=False),
    }


def batchnorm(input, mean, var, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize with fixed statistics: ``(x - mean) / sqrt(var + eps) * gamma + beta``.

    >>> import numpy as np
    >>> one = lambda v: np.array([v], np.float32)
    >>> float(batchnorm(one(2.0), one(1.0), one(4.0), one(2.0), one(1.0), eps=0.0)[0])
    2.0
    """
    x = np.asarray(input)
    y, _ = _bn_forward(x, np.asarray(mean), np.asarray(var), np.asarray(gamma), np.asarray(beta), eps)
    return _check_finite(y, "batchnorm")


def batchnorm_train(input, gamma, beta, eps: float = 1e-5):
    """Normalize a batch with its own statistics.

    Returns ``(y, batch_mean, batch_var)``.
    """
    y, mean, var, _ = _bn_train_forward(np.asarray(input), np.asarray(gamma), np.asarray(beta), eps)
    return _check_finite(y, "batchnorm"), mean, var


# ---------------------------------------------------------------------------
# recorded forward / backward


@dataclass
class Context:
    """Intermediates saved by :func:`trace` for one forward call."""

    op: str
    cache: dict[str, Any] = field(repr=False)
    extras: dict[str, Any] = field(default_factory=dict, repr=False)


_FORWARD = {
    "conv2d": _conv_forward,
    "pool2d": _pool_forward,
    "activation": _act_forward,
    "dense": _dense_forward,
    "batchnorm": _bn_forward,
}
_BACKWARD = {
    "conv2d": _conv_backward,
    "pool2d": _pool_backward,
    "activation": _act_backward,
    "dense": _dense_backward,
    "batchnorm": _bn_backward,
    "batchnorm_train": _bn_backward,
}


def trace(op: str, *args, **kwargs):
    """Run forward op ``op`` and keep what :func:`backward` needs.

    Returns ``(output, Context)``.  ``batchnorm_train`` additionally stores the
    batch statistics in ``ctx.extras``.
    """
    if op == "batchnorm_train":
        y, mean, var, cache = _bn_train_forward(*args, **kwargs)
        ctx = Context(op, cache, {"mean": mean, "var": var})
    else:
        try:
            fwd = _FORWARD[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        y, cache = fwd(*args, **kwargs)
        ctx = Context(op, cache)
    _check_finite(y, op)
    return y, ctx


def backward(ctx: Context | None, grad) -> dict[str, np.ndarray]:
    """Gradients of a traced op with respect to its input and parameters."""
    if ctx is None or not isinstance(ctx, Context) or ctx.op not in _BACKWARD:
        raise ContextError("backward needs the Context returned by trace()")
    grads = _BACKWARD[ctx.op](ctx.cache, np.asarray(grad))
    for name, g in grads.items():
        _check_finite(g, f"{ctx.op} backward ({name})")
    return grads


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)
