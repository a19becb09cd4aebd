"""Burt-Adelson Laplacian pyramid on :class:`~docshadow.tensor.Tensor`.

All four operators are linear and differentiable, so the reconstruction step
can sit inside a training graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, add, as_tensor, make_op, sub, _record

KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_PAD = 2


def _pad_reflect(a, axis):
    n = a.shape[axis]
    if n < _PAD + 1:
        raise ShapeError(f"reflect padding needs extent >= {_PAD + 1}, got {n}")
    width = [(0, 0)] * a.ndim
    width[axis] = (_PAD, _PAD)
    return np.pad(a, width, mode="reflect")


def _pad_reflect_adjoint(g, axis, n):
    g = np.moveaxis(g, axis, 0)
    core = g[_PAD:_PAD + n].copy()
    for j in range(_PAD):
        core[_PAD - j] += g[j]
        core[n - 2 - j] += g[_PAD + n + j]
    return np.moveaxis(core, 0, axis)


def _correlate(a, axis, k):
    """Valid 1-D correlation along ``axis``."""
    a = np.moveaxis(a, axis, 0)
    m = a.shape[0] - len(k) + 1
    out = k[0] * a[0:m]
    for t in range(1, len(k)):
        out = out + k[t] * a[t:t + m]
    return np.moveaxis(out, 0, axis)


def _correlate_adjoint(g, axis, k):
    g = np.moveaxis(g, axis, 0)
    m = g.shape[0]
    out = np.zeros((m + len(k) - 1,) + g.shape[1:], dtype=g.dtype)
    for t in range(len(k)):
        out[t:t + m] += k[t] * g
    return np.moveaxis(out, 0, axis)


def _blur(a, axis, k):
    return _correlate(_pad_reflect(a, axis), axis, k)


def _blur_adjoint(g, axis, k, n):
    return _pad_reflect_adjoint(_correlate_adjoint(g, axis, k), axis, n)


def _check_even(x, op):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects N x C x H x W, got {x.shape}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"{op} needs even spatial dims, got {h}x{w}")


def gaussian_downsample(x) -> Tensor:
    """Blur with the 5-tap binomial kernel (reflect padded) and keep every second pixel."""
    x = as_tensor(x)
    _check_even(x, "gaussian_downsample")
    dt = x.data.dtype
    k = KERNEL.astype(dt)
    h, w = x.shape[2:]
    out = _blur(_blur(x.data, 2, k), 3, k)[:, :, ::2, ::2]
    out = np.ascontiguousarray(out)
    _record("gaussian_downsample", {}, x.shape, out.shape)

    def grad_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, ::2, ::2] = g
        return (_blur_adjoint(_blur_adjoint(full, 3, k, w), 2, k, h),)

    return make_op("gaussian_downsample", out, (x,), grad_fn)


def upsample2x(x) -> Tensor:
    """Zero-insertion upsample followed by the same kernel scaled by 2 per axis."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects N x C x H x W, got {x.shape}")
    dt = x.data.dtype
    k2 = (2.0 * KERNEL).astype(dt)
    n, c, h, w = x.shape
    z = np.zeros((n, c, 2 * h, 2 * w), dtype=dt)
    z[:, :, ::2, ::2] = x.data
    out = np.ascontiguousarray(_blur(_blur(z, 2, k2), 3, k2))
    _record("upsample2x", {}, x.shape, out.shape)

    def grad_fn(g):
        gz = _blur_adjoint(_blur_adjoint(g, 3, k2, 2 * w), 2, k2, 2 * h)
        return (np.ascontiguousarray(gz[:, :, ::2, ::2]),)

    return make_op("upsample2x", out, (x,), grad_fn)


@dataclass
class PyramidDecomposition:
    """``residuals[0]`` is full resolution; each later level halves H and W."""

    residuals: list
    base: Tensor

    @property
    def levels(self) -> int:
        return len(self.residuals)

    def __add__(self, other: "PyramidDecomposition") -> "PyramidDecomposition":
        return PyramidDecomposition([add(a, b) for a, b in zip(self.residuals, other.residuals)],
                                    add(self.base, other.base))


def decompose(x, levels: int) -> PyramidDecomposition:
    x = as_tensor(x)
    if levels < 1:
        raise ShapeError(f"levels must be >= 1, got {levels}")
    if x.ndim != 4:
        raise ShapeError(f"decompose expects N x C x H x W, got {x.shape}")
    h, w = x.shape[2:]
    f = 2 ** levels
    if h % f or w % f:
        raise ShapeError(f"{h}x{w} is not divisible by 2**levels = {f}")
    residuals = []
    g = x
    for _ in range(levels):
        nxt = gaussian_downsample(g)
        residuals.append(sub(g, upsample2x(nxt)))
        g = nxt
    return PyramidDecomposition(residuals, g)


def reconstruct(p: PyramidDecomposition) -> Tensor:
    g = as_tensor(p.base)
    for r in reversed(p.residuals):
        r = as_tensor(r)
        if r.ndim != 4 or g.ndim != 4 or r.shape[:2] != g.shape[:2] \
                or r.shape[2:] != (2 * g.shape[2], 2 * g.shape[3]):
            raise ShapeError(f"pyramid level {r.shape} inconsistent with coarser level {g.shape}")
        g = add(upsample2x(g), r)
    return g
