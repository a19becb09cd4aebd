"""8-bit PNG I/O and conversions between HWC images and NCHW tensors."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, rounding half away from zero."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(a + 0.5).astype(np.uint8)


def save_png(path, img: np.ndarray):
    a = to_uint8(img)
    mode = "L" if a.ndim == 2 else "RGB"
    Image.fromarray(a, mode=mode).save(Path(path), format="PNG")


def load_png(path, gray: bool = False) -> np.ndarray:
    try:
        with Image.open(Path(path)) as im:
            im = im.convert("L" if gray else "RGB")
            a = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return a


def hwc_to_nchw(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim == 3:
        a = a[None]
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def nchw_to_hwc(t) -> np.ndarray:
    a = getattr(t, "data", t)
    a = np.asarray(a).transpose(0, 2, 3, 1)
    return a[0] if a.shape[0] == 1 else a
