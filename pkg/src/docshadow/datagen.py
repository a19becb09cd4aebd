"""Synthetic shadow triplets, shadow augmentation and paper-color transfer.

Images here are ``H x W x 3`` float arrays in [0, 1]; masks are ``H x W``
uint8 arrays with 1 marking shadow.
"""
from __future__ import annotations

import csv
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigError, DataError, ShapeError
from .images import load_png, save_png

__all__ = [
    "ORIGINS", "ImageTriplet", "ShadowParams", "ShadowJitter", "ShadowSampler",
    "composite_shadow", "augment_shadow", "random_mask", "rasterize_polygon",
    "dominant_background_color", "recolor_albedo", "synth_document", "generate_dataset",
    "load_dataset", "load_triplet", "import_triplet_dir", "MANIFEST_FIELDS", "triplet_seed",
]

ORIGINS = ("ABSDD", "DOC3DS", "AOSR", "SYNTH")
MANIFEST_FIELDS = ["index", "origin", "seed", "w_r", "w_g", "w_b", "b_r", "b_g", "b_b"]


@dataclass
class ImageTriplet:
    input: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    origin: str = "SYNTH"

    def validate(self, check_unshadowed: bool = False) -> "ImageTriplet":
        if self.input.shape != self.target.shape or self.input.ndim != 3 or self.input.shape[2] != 3:
            raise ShapeError(f"input {self.input.shape} and target {self.target.shape} must be equal H x W x 3")
        if self.mask.shape != self.input.shape[:2]:
            raise ShapeError(f"mask {self.mask.shape} does not match image {self.input.shape[:2]}")
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")
        if self.origin not in ORIGINS:
            raise DataError(f"unknown dataset origin {self.origin!r}")
        for arr in (self.input, self.target):
            if arr.min() < 0.0 or arr.max() > 1.0 or not np.isfinite(arr).all():
                raise DataError("image values must lie in [0, 1]")
        if check_unshadowed:
            outside = self.mask == 0
            if np.abs(self.input[outside] - self.target[outside]).max(initial=0.0) > 1.0 / 255 + 1e-9:
                raise DataError("input and target differ outside the shadow mask")
        return self


@dataclass
class ShadowParams:
    """Per-channel linear shadow ``clamp(w * clean + b)`` with an edge feather radius."""

    w: tuple = (0.6, 0.6, 0.6)
    b: tuple = (0.0, 0.0, 0.0)
    feather: int = 0

    def validate(self) -> "ShadowParams":
        w, b = np.asarray(self.w, float), np.asarray(self.b, float)
        if w.shape != (3,) or b.shape != (3,):
            raise ConfigError("shadow gain and offset need three channels")
        if np.any(w <= 0) or np.any(w > 1):
            raise ConfigError(f"shadow gain must lie in (0, 1], got {tuple(w)}")
        if np.any(np.abs(b) > 0.2):
            raise ConfigError(f"shadow offset must lie in [-0.2, 0.2], got {tuple(b)}")
        if self.feather < 0:
            raise ConfigError("feather radius must be >= 0")
        return self


def _feathered_alpha(mask: np.ndarray, radius: int) -> np.ndarray:
    m = mask.astype(np.float64)
    if radius <= 0:
        return m
    # feather inward only: pixels outside the stored mask stay untouched
    return m * uniform_filter(m, size=2 * radius + 1, mode="nearest")


def composite_shadow(clean: np.ndarray, mask: np.ndarray, sp: ShadowParams, seed: int = 0,
                     origin: str = "SYNTH") -> ImageTriplet:
    """Cast a linear per-channel shadow over ``mask``.

    ``seed`` is accepted for interface symmetry with the stochastic generators;
    compositing itself is deterministic.
    """
    sp.validate()
    clean = np.asarray(clean, dtype=np.float64)
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    if clean.shape[:2] != mask.shape or clean.ndim != 3:
        raise ShapeError(f"image {clean.shape} and mask {mask.shape} disagree")
    shadowed = np.clip(clean * np.asarray(sp.w) + np.asarray(sp.b), 0.0, 1.0)
    alpha = _feathered_alpha(mask, sp.feather)[..., None]
    out = np.where(alpha > 0, (1.0 - alpha) * clean + alpha * shadowed, clean)
    return ImageTriplet(out, clean.copy(), mask, origin)


@dataclass
class ShadowJitter:
    """Ranges (symmetric, +-) for re-rendering shadow color."""

    dw: float = 0.05
    db: float = 0.02
    hue_deg: float = 10.0


def _hue_rotation(theta: float) -> np.ndarray:
    """Rotation about the gray axis of RGB space."""
    c, s = math.cos(theta), math.sin(theta)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
    ])


def augment_shadow(t: ImageTriplet, jitter: ShadowJitter = ShadowJitter(), seed: int = 0) -> ImageTriplet:
    """Jitter the color of shadowed pixels; target, mask and unshadowed pixels are kept."""
    rng = np.random.default_rng(seed)
    dw = rng.uniform(-jitter.dw, jitter.dw, 3) if jitter.dw > 0 else np.zeros(3)
    db = rng.uniform(-jitter.db, jitter.db, 3) if jitter.db > 0 else np.zeros(3)
    theta = math.radians(rng.uniform(-jitter.hue_deg, jitter.hue_deg)) if jitter.hue_deg > 0 else 0.0
    inside = t.mask.astype(bool)
    out = t.input.copy()
    if not inside.any() or (not dw.any() and not db.any() and theta == 0.0):
        return ImageTriplet(out, t.target, t.mask, t.origin)
    px = t.input[inside] * (1.0 + dw) + db
    px = px @ _hue_rotation(theta).T
    out[inside] = np.clip(px, 0.0, 1.0)
    return ImageTriplet(out, t.target, t.mask, t.origin)


# --------------------------------------------------------------------------
# masks

def rasterize_polygon(vertices: Sequence, h: int, w: int) -> np.ndarray:
    """Even-odd fill sampled at pixel centers; vertices are ``(x, y)`` pixel coordinates."""
    v = np.asarray(vertices, dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    inside = np.zeros((h, w), dtype=bool)
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > ys) != (by > ys)
        xint = ax + (ys - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (xs < xint)
    return inside.astype(np.uint8)


def _star_polygon(rng, h, w, n_vertices, scale):
    cx, cy = rng.uniform(0.3, 0.7) * w, rng.uniform(0.3, 0.7) * h
    angles = np.sort(rng.uniform(0, 2 * math.pi, n_vertices))
    radii = scale * min(h, w) * rng.uniform(0.5, 1.0, n_vertices)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)


def _band(rng, h, w, scale):
    theta = rng.uniform(0, math.pi)
    nx, ny = math.cos(theta), math.sin(theta)
    cx, cy = rng.uniform(0.3, 0.7) * w, rng.uniform(0.3, 0.7) * h
    half = scale * min(h, w) * rng.uniform(0.25, 0.5)
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    return (np.abs((xs - cx) * nx + (ys - cy) * ny) <= half).astype(np.uint8)


def _blob(rng, h, w, scale):
    cx, cy = rng.uniform(0.3, 0.7) * w, rng.uniform(0.3, 0.7) * h
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    ang = np.arctan2(ys - cy, xs - cx)
    rad = np.hypot(xs - cx, ys - cy)
    boundary = np.ones_like(ang)
    for k in range(2, 5):
        boundary += rng.uniform(0.0, 0.25 / k * 2) * np.cos(k * ang + rng.uniform(0, 2 * math.pi))
    return (rad <= scale * min(h, w) * 0.8 * boundary).astype(np.uint8)


def random_mask(h: int, w: int, generator: str = "polygon", seed: int = 0,
                coverage=(0.05, 0.6), max_tries: int = 100) -> np.ndarray:
    """Connected shadow region covering ``coverage`` of the frame (star-shaped or band)."""
    if h < 16 or w < 16:
        raise ShapeError(f"masks need at least 16x16 pixels, got {h}x{w}")
    if generator not in ("polygon", "band", "blob"):
        raise ConfigError(f"unknown mask generator {generator!r}")
    rng = np.random.default_rng(seed)
    lo, hi = coverage
    scale = 0.45
    for _ in range(max_tries):
        if generator == "polygon":
            m = rasterize_polygon(_star_polygon(rng, h, w, int(rng.integers(3, 9)), scale), h, w)
        elif generator == "band":
            m = _band(rng, h, w, scale)
        else:
            m = _blob(rng, h, w, scale)
        frac = m.mean()
        if lo <= frac <= hi:
            return m
        scale *= 1.15 if frac < lo else 0.85
    raise DataError(f"could not draw a {generator} mask with coverage in {coverage}")


# --------------------------------------------------------------------------
# paper color

def _kmeans_pp(px, k, rng):
    centers = [px[rng.integers(len(px))]]
    for _ in range(1, k):
        d2 = np.min(((px[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(centers[-1])
            continue
        centers.append(px[rng.choice(len(px), p=d2 / total)])
    return np.asarray(centers)


def dominant_background_color(img: np.ndarray, k: int = 4, seed: int = 0, iterations: int = 20,
                              max_pixels: int = 20000) -> np.ndarray:
    """Centroid of the most populous k-means cluster of the pixel colors."""
    if k < 2:
        raise ConfigError("k must be >= 2")
    px = np.asarray(img, dtype=np.float64).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    if len(px) > max_pixels:
        px = px[rng.choice(len(px), max_pixels, replace=False)]
    centers = _kmeans_pp(px, k, rng)
    labels = np.zeros(len(px), dtype=np.int64)
    for _ in range(iterations):
        labels = np.argmin(((px[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        for j in range(k):
            members = px[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    counts = np.bincount(labels, minlength=k)
    return centers[int(np.argmax(counts))]


def recolor_albedo(albedo: np.ndarray, paper_color) -> np.ndarray:
    color = np.asarray(paper_color, dtype=np.float64)
    if color.shape != (3,) or color.min() < 0 or color.max() > 1:
        raise ConfigError(f"paper color must be an RGB triple in [0, 1], got {paper_color}")
    return np.clip(np.asarray(albedo, dtype=np.float64) * color, 0.0, 1.0)


def synth_document(h: int, w: int, seed: int = 0) -> np.ndarray:
    """A clean page: tinted paper, lines of dark glyph strokes, sometimes a colored figure."""
    rng = np.random.default_rng(seed)
    paper = rng.uniform(0.82, 1.0, 3)
    img = np.ones((h, w, 3)) * paper
    ink = rng.uniform(0.0, 0.25, 3)
    line_h = max(2, h // 16)
    margin = max(1, w // 12)
    y = margin
    while y + line_h < h - margin:
        x = margin
        while x < w - margin:
            word = int(rng.integers(2, max(3, w // 8)))
            x_end = min(x + word, w - margin)
            stroke = rng.random((line_h - 1, x_end - x)) < 0.55
            region = img[y:y + line_h - 1, x:x_end]
            region[stroke] = ink
            x = x_end + int(rng.integers(1, max(2, w // 24)))
        y += line_h + int(rng.integers(1, max(2, line_h)))
    if rng.random() < 0.5:
        fh, fw = int(h * rng.uniform(0.15, 0.3)), int(w * rng.uniform(0.2, 0.4))
        fy, fx = int(rng.integers(0, h - fh)), int(rng.integers(0, w - fw))
        img[fy:fy + fh, fx:fx + fw] = rng.uniform(0.2, 0.9, 3)
    return img


# --------------------------------------------------------------------------
# datasets on disk

@dataclass
class ShadowSampler:
    """Ranges for randomly drawn shadows (gain, offset, feather, mask shape).

    Gain and offset are drawn once per shadow and then perturbed per channel
    by at most ``w_tint`` (relative) and ``b_tint`` (absolute), giving the
    mildly tinted, mostly neutral shadows seen on paper.
    """

    w_range: tuple = (0.4, 0.85)
    w_tint: float = 0.06
    b_range: tuple = (-0.06, 0.02)
    b_tint: float = 0.01
    feather_range: tuple = (0, 3)
    generators: tuple = ("polygon", "band", "blob")
    augment: bool = True
    jitter: ShadowJitter = field(default_factory=ShadowJitter)

    def draw(self, rng) -> tuple:
        w = rng.uniform(*self.w_range) * (1.0 + rng.uniform(-self.w_tint, self.w_tint, 3))
        b = rng.uniform(*self.b_range) + rng.uniform(-self.b_tint, self.b_tint, 3)
        w = tuple(float(v) for v in np.clip(w, 1e-3, 1.0))
        b = tuple(float(v) for v in np.clip(b, -0.2, 0.2))
        feather = int(rng.integers(self.feather_range[0], self.feather_range[1] + 1))
        generator = self.generators[int(rng.integers(len(self.generators)))]
        return ShadowParams(w, b, feather), generator


def triplet_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_triplet(clean: np.ndarray, seed: int, sampler: ShadowSampler = ShadowSampler(),
                 origin: str = "SYNTH"):
    rng = np.random.default_rng(seed)
    sp, generator = sampler.draw(rng)
    h, w = clean.shape[:2]
    mask = random_mask(h, w, generator, seed=int(rng.integers(2 ** 31)))
    trip = composite_shadow(clean, mask, sp, seed, origin)
    if sampler.augment:
        trip = augment_shadow(trip, sampler.jitter, seed=int(rng.integers(2 ** 31)))
    return trip, sp


def _list_images(d: Path):
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")


def generate_dataset(clean_dir, n_triplets: int, out_dir, seed: int = 0,
                     sampler: ShadowSampler = ShadowSampler(), origin: str = "SYNTH") -> list:
    """Write ``n_triplets`` PNG triplets plus ``manifest.csv``; clean images reused round-robin.

    Returns the manifest rows.  On failure nothing is left behind in a freshly
    created ``out_dir``.
    """
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    if not clean_dir.is_dir():
        raise DataError(f"clean image directory not found: {clean_dir}")
    sources = _list_images(clean_dir)
    if not sources:
        raise DataError(f"no PNG images in {clean_dir}")
    cleans, bad = [], []
    for p in sources:
        try:
            cleans.append(load_png(p))
        except Exception:
            bad.append(p)
    if bad:
        raise DataError("unreadable clean images", bad)

    created = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    try:
        for i in range(n_triplets):
            s = triplet_seed(seed, i)
            trip, sp = make_triplet(cleans[i % len(cleans)], s, sampler, origin)
            save_png(out_dir / f"{i}_in.png", trip.input)
            save_png(out_dir / f"{i}_gt.png", trip.target)
            save_png(out_dir / f"{i}_mask.png", trip.mask.astype(np.float64))
            rows.append(dict(index=i, origin=origin, seed=s, w_r=sp.w[0], w_g=sp.w[1], w_b=sp.w[2],
                             b_r=sp.b[0], b_g=sp.b[1], b_b=sp.b[2]))
        write_manifest(out_dir, rows)
    except BaseException:
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise
    return rows


def write_manifest(out_dir, rows):
    with open(Path(out_dir) / "manifest.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_manifest(data_dir) -> list:
    path = Path(data_dir) / "manifest.csv"
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"manifest {path} lacks columns {sorted(missing)}")
        return list(reader)


def load_triplet(data_dir, index, origin: str = "SYNTH", require_mask: bool = True) -> ImageTriplet:
    d = Path(data_dir)
    inp, gt, mk = d / f"{index}_in.png", d / f"{index}_gt.png", d / f"{index}_mask.png"
    missing = [p for p in ((inp, gt, mk) if require_mask else (inp, gt)) if not p.is_file()]
    if missing:
        raise DataError("missing triplet files", missing)
    x, y = load_png(inp), load_png(gt)
    if mk.is_file():
        m = (load_png(mk, gray=True) * 255.0 >= 128).astype(np.uint8)
    else:
        m = np.zeros(x.shape[:2], dtype=np.uint8)
    return ImageTriplet(x, y, m, origin).validate()


def load_dataset(data_dir) -> list:
    """Load and re-validate every triplet listed in ``manifest.csv``."""
    rows = read_manifest(data_dir)
    return [load_triplet(data_dir, r["index"], r["origin"]) for r in rows]


def import_triplet_dir(src_dir, out_dir, origin: str, pattern=("{}_in.png", "{}_gt.png", "{}_mask.png")) -> list:
    """Copy a conforming ``<id>_in/_gt/_mask`` directory into the manifest layout.

    Linear shadow parameters are unknown for imported data and recorded as
    gain 1, offset 0.
    """
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    if origin not in ORIGINS:
        raise ConfigError(f"origin must be one of {ORIGINS}")
    suffix_in = pattern[0].format("")
    ids = sorted(p.name[:-len(suffix_in)] for p in src_dir.iterdir() if p.name.endswith(suffix_in))
    if not ids:
        raise DataError(f"no '*{suffix_in}' files in {src_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, ident in enumerate(ids):
        srcs = [src_dir / pat.format(ident) for pat in pattern]
        missing = [p for p in srcs if not p.is_file()]
        if missing:
            raise DataError("incomplete triplet", missing)
        for src, tag in zip(srcs, ("in", "gt", "mask")):
            shutil.copyfile(src, out_dir / f"{i}_{tag}.png")
        load_triplet(out_dir, i, origin)
        rows.append(dict(index=i, origin=origin, seed=0, w_r=1.0, w_g=1.0, w_b=1.0, b_r=0.0, b_g=0.0, b_b=0.0))
    write_manifest(out_dir, rows)
    return rows
