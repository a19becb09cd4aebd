"""Minimal NCHW tensor engine with reverse-mode automatic differentiation.

Every forward op returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  Calling
:meth:`Tensor.backward` on a scalar walks that tape once in reverse
topological order, accumulates into ``.grad`` of leaves created with
``requires_grad=True`` and then frees the tape.

Storage is float32.  :func:`precision` switches the dtype used for newly
created tensors, which gradient checks use to run the whole graph in float64.
"""
from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import ConfigError, NumericError, ShapeError

__all__ = [
    "Tensor", "tensor", "as_tensor", "no_grad", "precision", "get_dtype",
    "conv2d", "depthwise_conv2d", "depthwise_separable_conv", "resize_bilinear",
    "activation", "axis_pool", "add", "sub", "mul", "scale", "concat", "concat_channels",
    "split", "swap_hw", "absolute", "square", "sum_all", "mean_all", "clamp",
    "backward", "AdamState", "adam_step", "trace", "trace_scope",
]

_dtype = np.float32
_grad_enabled = True
_tracers: list = []
_scopes: list[str] = []


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` inside the block (e.g. ``np.float64``)."""
    global _dtype
    prev, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable taping; ops inside return constants."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def trace():
    """Record every executed op as ``(scope, op, attrs, in_shape, out_shape)``."""
    events: list = []
    _tracers.append(events)
    try:
        yield events
    finally:
        _tracers.remove(events)


@contextlib.contextmanager
def trace_scope(name: str):
    _scopes.append(name)
    try:
        yield
    finally:
        _scopes.pop()


def _record(op, attrs, in_shape, out_shape):
    if _tracers:
        scope = _scopes[-1] if _scopes else ""
        for events in _tracers:
            events.append((scope, op, dict(attrs), tuple(in_shape), tuple(out_shape)))


class Tensor:
    """Dense array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def make_op(op: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    """Public hook for modules defining their own differentiable ops.

    ``grad_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    return _result(op, np.asarray(data), parents, grad_fn)


def _require_4d(x: Tensor, op: str):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an N x C x H x W tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolutions

def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.  ``w`` is Cout x Cin x Kh x Kw."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _require_4d(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {w.shape}")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cin}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1

    xd = x.data
    dt = np.result_type(xd, w.data)
    m = n * ho * wo
    # channel-major columns: (Cin, Kh, Kw, N, Ho, Wo) so GEMMs and scatters touch contiguous rows
    xt = xd.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xt[:, :, ::stride, ::stride] if stride > 1 else xt).reshape(cin, m)
    else:
        cols = np.empty((cin, kh, kw, n, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(cin * kh * kw, m)
    w2 = w.data.reshape(cout, -1)
    out = w2 @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3), dtype=dt)
    _record("conv2d", dict(cin=cin, cout=cout, kh=kh, kw=kw, stride=stride, pad=pad,
                           bias=b is not None), x.shape, out.shape)

    def grad_fn(g):
        gx = gw = gb = None
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, m)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            gxt = np.zeros((cin, n, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            if pad:
                gxt = gxt[:, :, pad:pad + h, pad:pad + wd]
            gx = gxt.transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result("conv2d", out, parents, grad_fn)


def depthwise_conv2d(x, dw, stride: int = 1, pad: int | None = None) -> Tensor:
    """Per-channel spatial correlation; ``dw`` is C x 1 x K x K."""
    x, dw = as_tensor(x), as_tensor(dw)
    _require_4d(x, "depthwise_conv2d")
    n, c, h, wd = x.shape
    if dw.ndim != 4 or dw.shape[0] != c or dw.shape[1] != 1:
        raise ShapeError(f"depthwise kernel must be {c} x 1 x K x K, got {dw.shape}")
    kh, kw = dw.shape[2:]
    if pad is None:
        pad = kh // 2
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError("depthwise_conv2d: kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    k = dw.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.data, k))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * k[None, :, i, j, None, None]
    _record("depthwise_conv2d", dict(c=c, kh=kh, kw=kw, stride=stride, pad=pad), x.shape, out.shape)

    def grad_fn(g):
        gx = gk = None
        if dw.requires_grad:
            gk = np.empty_like(dw.data)
            for i in range(kh):
                for j in range(kw):
                    sl = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                    gk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, sl)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * k[None, :, i, j, None, None]
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gk

    return _result("depthwise_conv2d", out, (x, dw), grad_fn)


def depthwise_separable_conv(x, dw, pw, b=None, stride: int = 1) -> Tensor:
    """Depthwise K x K correlation followed by a 1 x 1 pointwise conv."""
    x = as_tensor(x)
    _require_4d(x, "depthwise_separable_conv")
    if as_tensor(dw).shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise kernel has {as_tensor(dw).shape[0]} channels, input has {x.shape[1]}")
    return conv2d(depthwise_conv2d(x, dw, stride=stride), pw, b)


# --------------------------------------------------------------------------
# resampling and pooling

@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int):
    """Sparse n_out x n_in half-pixel-center linear interpolation matrix."""
    scale_ = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale_ - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.concatenate([np.arange(n_out), np.arange(n_out)])
    cols = np.concatenate([i0, i1])
    vals = np.concatenate([1.0 - frac, frac])
    m = sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))
    m.sum_duplicates()
    return m


def _apply_axis(m, a: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(a, axis, 0)
    shp = moved.shape
    res = m @ moved.reshape(shp[0], -1)
    return np.moveaxis(np.asarray(res, dtype=a.dtype).reshape((m.shape[0],) + shp[1:]), 0, axis)


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers (``align_corners=False``)."""
    x = as_tensor(x)
    _require_4d(x, "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    my, mx = _interp_matrix(h, out_h), _interp_matrix(w, out_w)
    out = x.data
    if out_h != h:
        out = _apply_axis(my, out, 2)
    if out_w != w:
        out = _apply_axis(mx, out, 3)
    out = np.ascontiguousarray(out)
    _record("resize_bilinear", {}, x.shape, out.shape)

    def grad_fn(g):
        if out_w != w:
            g = _apply_axis(mx.T.tocsr(), g, 3)
        if out_h != h:
            g = _apply_axis(my.T.tocsr(), g, 2)
        return (g,)

    return _result("resize_bilinear", out, (x,), grad_fn)


def axis_pool(x, axis: str) -> Tensor:
    """Average over one spatial axis: ``height`` -> N x C x 1 x W, ``width`` -> N x C x H x 1."""
    x = as_tensor(x)
    _require_4d(x, "axis_pool")
    if axis not in ("height", "width"):
        raise ConfigError(f"axis_pool axis must be 'height' or 'width', got {axis!r}")
    ax = 2 if axis == "height" else 3
    extent = x.shape[ax]
    out = x.data.mean(axis=ax, keepdims=True, dtype=np.float64).astype(x.data.dtype)
    _record("axis_pool", dict(axis=axis), x.shape, out.shape)

    def grad_fn(g):
        return (np.broadcast_to(g / extent, x.shape).copy(),)

    return _result("axis_pool", out, (x,), grad_fn)


# --------------------------------------------------------------------------
# elementwise

_ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "tanh")


def activation(x, kind: str, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if kind == "relu":
        out = np.maximum(d, 0)
        deriv = lambda: (d > 0).astype(d.dtype)
    elif kind == "leaky_relu":
        out = np.where(d > 0, d, d * d.dtype.type(slope))
        deriv = lambda: np.where(d > 0, 1, slope).astype(d.dtype)
    elif kind == "sigmoid":
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        out[~pos] = e / (1.0 + e)
        deriv = lambda: out * (1 - out)
    elif kind == "tanh":
        out = np.tanh(d)
        deriv = lambda: 1 - out * out
    else:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")
    _record("activation", dict(kind=kind), x.shape, out.shape)

    def grad_fn(g):
        return (g * deriv(),)

    return _result(kind, out, (x,), grad_fn)


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    shape = []
    for da, db in zip(a.shape, b.shape):
        if da != db and 1 not in (da, db):
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
        shape.append(max(da, db) if 1 in (da, db) else da)
    return tuple(shape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b, "add")
    out = a.data + b.data
    _record("add", {}, shape, out.shape)

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result("add", out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b, "sub")
    out = a.data - b.data
    _record("add", {}, shape, out.shape)

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                -_unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result("sub", out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    """Elementwise product; singleton dims broadcast (attention gates, masks)."""
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b, "mul")
    out = a.data * b.data
    _record("mul", {}, shape, out.shape)

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result("mul", out, (a, b), grad_fn)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    out = x.data * x.data.dtype.type(c)

    def grad_fn(g):
        return (g * c,)

    return _result("scale", out, (x,), grad_fn)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = np.abs(x.data)

    def grad_fn(g):
        return (g * np.sign(x.data),)

    return _result("abs", out, (x,), grad_fn)


def square(x) -> Tensor:
    x = as_tensor(x)
    out = x.data * x.data

    def grad_fn(g):
        return (2 * g * x.data,)

    return _result("square", out, (x,), grad_fn)


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)

    def grad_fn(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return _result("clamp", out, (x,), grad_fn)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)

    def grad_fn(g):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return _result("sum", out, (x,), grad_fn)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    count = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype)

    def grad_fn(g):
        return (np.full(x.shape, g / count, dtype=x.data.dtype),)

    return _result("mean", out, (x,), grad_fn)


# --------------------------------------------------------------------------
# structural

def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
                     for i, t in enumerate(ts))

    return _result("concat", out, ts, grad_fn)


def concat_channels(tensors: Sequence) -> Tensor:
    for t in tensors:
        _require_4d(as_tensor(t), "concat_channels")
    return concat(tensors, axis=1)


def split(x, sizes: Sequence[int], axis: int) -> list[Tensor]:
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    outs = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def grad_fn(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        outs.append(_result("split", np.ascontiguousarray(x.data[sl]), (x,), grad_fn))
        start += size
    return outs


def swap_hw(x) -> Tensor:
    """Transpose the two spatial axes."""
    x = as_tensor(x)
    _require_4d(x, "swap_hw")
    out = np.ascontiguousarray(x.data.transpose(0, 1, 3, 2))

    def grad_fn(g):
        return (g.transpose(0, 1, 3, 2),)

    return _result("swap_hw", out, (x,), grad_fn)


# --------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# --------------------------------------------------------------------------
# optimizer

class AdamState:
    """First/second moment buffers and step counter, keyed by parameter name."""

    def __init__(self, t: int = 0, m: dict | None = None, v: dict | None = None):
        self.t = t
        self.m = {} if m is None else m
        self.v = {} if v is None else v


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params[name].data``.

    Parameters absent from ``grads`` (or with a ``None`` gradient) are left
    untouched but the shared step counter still advances.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        dt = p.data.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (beta1 * m + (1.0 - beta1) * g).astype(dt)
        v = (beta2 * v + (1.0 - beta2) * g * g).astype(dt)
        state.m[name], state.v[name] = m, v
        if lr == 0.0:
            continue
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - step).astype(dt)
    return state
