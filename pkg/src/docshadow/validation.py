"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError


def check_image_batch(X, name: str = "X", multiple_of: int = 1) -> np.ndarray:
    """Coerce ``X`` to an ``N x H x W x 3`` float32 array in [0, 1].

    A single ``H x W x 3`` image is promoted to a batch of one.  uint8 input is
    rescaled by 1/255; float input must already lie in [0, 1].
    """
    a = np.asarray(X)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != 3:
        raise ShapeError(f"{name} must be N x H x W x 3, got shape {np.shape(X)}")
    if a.shape[0] == 0:
        raise ShapeError(f"{name} is empty")
    if multiple_of > 1 and (a.shape[1] % multiple_of or a.shape[2] % multiple_of):
        raise ShapeError(f"{name} spatial dims {a.shape[1:3]} must be divisible by {multiple_of}")
    if a.dtype == np.uint8:
        return (a.astype(np.float32) / 255.0)
    if not np.issubdtype(a.dtype, np.number):
        raise DataError(f"{name} must be numeric, got dtype {a.dtype}")
    a = a.astype(np.float32)
    if not np.isfinite(a).all():
        raise DataError(f"{name} contains non-finite values")
    if a.min() < 0.0 or a.max() > 1.0:
        raise DataError(f"{name} values must lie in [0, 1]")
    return a


def check_mask_batch(mask, shape) -> np.ndarray:
    """Binary ``N x H x W`` uint8 mask matching the leading dims of ``shape``."""
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[None]
    if m.ndim == 4 and m.shape[-1] == 1:
        m = m[..., 0]
    if m.shape != tuple(shape[:3]):
        raise ShapeError(f"mask shape {np.shape(mask)} does not match images {tuple(shape[:3])}")
    return (m > 0.5).astype(np.uint8)


def check_pair(X, y, multiple_of: int = 1):
    X = check_image_batch(X, "X", multiple_of)
    y = check_image_batch(y, "y", multiple_of)
    if X.shape != y.shape:
        raise ShapeError(f"X {X.shape} and y {y.shape} differ in shape")
    return X, y
