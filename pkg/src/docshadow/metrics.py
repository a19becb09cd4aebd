"""Training objectives (differentiable) and region-split evaluation metrics.

Metrics take NCHW or HWC float arrays in [0, 1]; MAE and PSNR are reported on
the 0-255 scale.  A region with no pixels yields ``None`` for that field.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import tensor as T
from .errors import ShapeError

__all__ = [
    "l1_loss", "PerceptualLoss", "perceptual_loss", "total_loss", "LossWeights",
    "RegionMetrics", "mae_region", "psnr_region", "ssim", "to_gray", "PSNR_CAP",
    "MetricsReport", "format_table", "report_csv",
]

PSNR_CAP = 100.0


# --------------------------------------------------------------------------
# losses

def _check_pair(pred, gt):
    if tuple(pred.shape) != tuple(gt.shape):
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")


def l1_loss(pred, gt) -> T.Tensor:
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    _check_pair(pred, gt)
    return T.mean_all(T.absolute(T.sub(pred, gt)))


class PerceptualLoss:
    """Feature-space distance over a frozen three-stage conv stack.

    Stands in for LPIPS: stages have 16/32/64 channels with a stride-2 conv
    between stages.  The distance is the mean over stages of the per-stage
    mean squared feature difference.  ``weights`` may supply an external
    feature stack as ``[(w, b), ...]`` in place of the seeded random one.
    """

    channels = (16, 32, 64)

    def __init__(self, seed: int = 0, weights: Optional[Sequence] = None):
        self.seed = seed
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = []
            cin = 3
            for cout in self.channels:
                fan_in = cin * 9
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
                weights.append((w, np.zeros(cout)))
                cin = cout
        self.weights = [(np.asarray(w, np.float32), np.asarray(b, np.float32)) for w, b in weights]

    def features(self, x):
        feats = []
        h = T.as_tensor(x)
        for i, (w, b) in enumerate(self.weights):
            w_t, b_t = T.Tensor(w.astype(h.data.dtype)), T.Tensor(b.astype(h.data.dtype))
            h = T.activation(T.conv2d(h, w_t, b_t, stride=1 if i == 0 else 2, pad=1), "leaky_relu")
            feats.append(h)
        return feats

    def __call__(self, pred, gt) -> T.Tensor:
        pred, gt = T.as_tensor(pred), T.as_tensor(gt)
        _check_pair(pred, gt)
        with T.no_grad():
            gt_feats = self.features(gt) if not gt.requires_grad else None
        if gt_feats is None:
            gt_feats = self.features(gt)
        terms = [T.mean_all(T.square(T.sub(fp, fg))) for fp, fg in zip(self.features(pred), gt_feats)]
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
        return T.scale(total, 1.0 / len(terms))


_default_perceptual: dict = {}


def perceptual_loss(pred, gt, extractor_seed: int = 0) -> T.Tensor:
    if extractor_seed not in _default_perceptual:
        _default_perceptual[extractor_seed] = PerceptualLoss(extractor_seed)
    return _default_perceptual[extractor_seed](pred, gt)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 10.0
    perceptual: float = 5.0


def total_loss(pred, gt, weights: LossWeights = LossWeights(), extractor: PerceptualLoss | None = None,
               return_terms: bool = False):
    """``weights.l1 * L1 + weights.perceptual * perceptual``."""
    l1 = l1_loss(pred, gt)
    loss = T.scale(l1, weights.l1)
    perc = None
    if weights.perceptual != 0.0:
        perc = extractor(pred, gt) if extractor is not None else perceptual_loss(pred, gt)
        loss = T.add(loss, T.scale(perc, weights.perceptual))
    if return_terms:
        return loss, l1, perc
    return loss


# --------------------------------------------------------------------------
# metrics

@dataclass
class RegionMetrics:
    all: Optional[float]
    non_shadow: Optional[float]
    shadow: Optional[float]

    def as_tuple(self):
        return (self.all, self.non_shadow, self.shadow)


def _as_nchw(a) -> np.ndarray:
    a = a.data if isinstance(a, T.Tensor) else np.asarray(a)
    a = a.astype(np.float64)
    if a.ndim == 3:  # H x W x C
        a = a.transpose(2, 0, 1)[None]
    if a.ndim != 4:
        raise ShapeError(f"expected H x W x C or N x C x H x W image, got shape {a.shape}")
    return a


def _as_mask(mask, shape) -> np.ndarray:
    m = mask.data if isinstance(mask, T.Tensor) else np.asarray(mask)
    m = m.astype(bool)
    n, _, h, w = shape
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    if m.ndim != 4 or m.shape[-2:] != (h, w):
        raise ShapeError(f"mask spatial shape {m.shape[-2:]} does not match image {(h, w)}")
    return np.broadcast_to(m, (n, 1, h, w))


def _region_means(values: np.ndarray, mask: np.ndarray):
    """Mean of per-element ``values`` (N x C x H x W) over all / mask==0 / mask==1."""
    c = values.shape[1]
    per_pixel = values.sum(axis=1, keepdims=True, dtype=np.float64)
    out = []
    for sel in (np.ones_like(mask), ~mask, mask):
        count = int(sel.sum()) * c
        out.append(None if count == 0 else float(per_pixel[sel].sum(dtype=np.float64) / count))
    return out


def mae_region(pred, gt, mask) -> RegionMetrics:
    """Mean absolute error on the 0-255 scale per region."""
    p, g = _as_nchw(pred), _as_nchw(gt)
    _check_pair(p, g)
    m = _as_mask(mask, p.shape)
    return RegionMetrics(*[None if v is None else v * 255.0 for v in _region_means(np.abs(p - g), m)])


def _psnr(mse: Optional[float]) -> Optional[float]:
    if mse is None:
        return None
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def psnr_region(pred, gt, mask) -> RegionMetrics:
    """``10 log10(255^2 / MSE)`` with MSE restricted to the region, capped at 100 dB."""
    p, g = _as_nchw(pred), _as_nchw(gt)
    _check_pair(p, g)
    m = _as_mask(mask, p.shape)
    mses = _region_means(((p - g) * 255.0) ** 2, m)
    return RegionMetrics(*[_psnr(v) for v in mses])


LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(img) -> np.ndarray:
    """ITU-R 601 luma of an RGB image (returns N x H x W)."""
    a = _as_nchw(img)
    if a.shape[1] != 3:
        raise ShapeError(f"expected 3 channels, got {a.shape[1]}")
    return np.einsum("nchw,c->nhw", a, LUMA)


def _gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(a, g, axis=-2, mode="constant"), g, axis=-1, mode="constant")
    return out[..., r:a.shape[-2] - r, r:a.shape[-1] - r]


def ssim(pred, gt, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM of the luma channels over all valid 11x11 Gaussian windows."""
    x, y = to_gray(pred), to_gray(gt)
    _check_pair(x, y)
    if x.shape[-1] < win_size or x.shape[-2] < win_size:
        raise ShapeError(f"image {x.shape[-2:]} smaller than the {win_size}x{win_size} SSIM window")
    g = _gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


# --------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    mae: RegionMetrics
    psnr: RegionMetrics
    ssim: float
    count: int = 1
    gflops: Optional[float] = None
    params: Optional[int] = None
    runtime_ms: Optional[float] = None
    name: str = "model"

    def row(self) -> dict:
        d = {"name": self.name, "count": self.count}
        for key in ("mae", "psnr"):
            for region, v in asdict(getattr(self, key)).items():
                d[f"{key}_{region}"] = v
        d.update(ssim=self.ssim, runtime_ms=self.runtime_ms, gflops=self.gflops, params=self.params)
        return d


def _fmt(v, spec):
    return "n/a" if v is None else format(v, spec)


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table: MAE and PSNR as all / non-shadow / shadow triples."""
    rows = [("Method", "MAE (all / non-shadow / shadow)", "PSNR (all / non-shadow / shadow)", "SSIM",
             "Runtime ms", "GFLOPs")]
    for r in reports:
        rows.append((r.name,
                     " / ".join(_fmt(v, ".4f") for v in r.mae.as_tuple()),
                     " / ".join(_fmt(v, ".2f") for v in r.psnr.as_tuple()),
                     _fmt(r.ssim, ".4f"), _fmt(r.runtime_ms, ".1f"), _fmt(r.gflops, ".3f")))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def report_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    rows = [r.row() for r in reports]
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if v is None else v for k, v in row.items()})
    return buf.getvalue()
