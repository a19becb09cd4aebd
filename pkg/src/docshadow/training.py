"""Two-stage training: IOANet at low resolution, then the pyramid upsampler with IOANet frozen."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import ImageTriplet
from .errors import ConfigError, NumericError
from .images import hwc_to_nchw
from .metrics import LossWeights, PerceptualLoss, l1_loss, total_loss
from .models import DEFAULT_CONFIG, ModelConfig, ModelParams, init_params, ioanet_forward, lp_ioanet_forward
from .pyramid import gaussian_downsample

log = logging.getLogger(__name__)

PAPER_COMPOSITION = {"ABSDD": 15, "DOC3DS": 15, "AOSR": 2}
LOG_FIELDS = ["step", "epoch", "loss_total", "loss_l1", "loss_perc"]


class TrainingDiverged(NumericError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: Optional[int] = None
    max_steps: Optional[int] = None
    lr: float = 2e-4
    lr_min: float = 2e-5
    composition: dict = field(default_factory=lambda: dict(PAPER_COMPOSITION))
    seed: int = 0
    checkpoint_every: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    perceptual_seed: int = 0
    model: ModelConfig = DEFAULT_CONFIG
    out_dir: Optional[str] = None
    init_from: Optional[str] = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs is None:
            self.epochs = 1000 if self.stage == 1 else 200
        if any(int(c) < 0 for c in self.composition.values()) or sum(self.composition.values()) < 1:
            raise ConfigError(f"batch composition needs non-negative counts summing to >= 1: {self.composition}")
        if self.stage == 2 and not self.init_from:
            raise ConfigError("stage 2 requires a stage-1 checkpoint (init_from)")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")

    @property
    def batch_size(self) -> int:
        return int(sum(self.composition.values()))

    @property
    def resolution(self):
        return self.model.low_res if self.stage == 1 else self.model.high_res


def desk_profile(stage: int = 1, **overrides) -> TrainConfig:
    """CPU-scale profile: 64x64 low-resolution tensors, 200 steps."""
    from .models import desk_config
    base = dict(stage=stage, max_steps=200, lr=2e-3, lr_min=2e-4, model=desk_config((64, 64)),
                composition={"SYNTH": 4})
    if stage == 2:
        base.update(lr=1e-3, lr_min=1e-4, composition={"SYNTH": 2}, loss_weights=LossWeights(1.0, 0.0))
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# data

def resize_image(img: np.ndarray, size) -> np.ndarray:
    """Resize an H x W x C image; exact power-of-two reductions use the pyramid blur."""
    h, w = img.shape[:2]
    th, tw = size
    if (h, w) == (th, tw):
        return img
    with T.no_grad(), T.precision(np.float64):
        x = T.Tensor(hwc_to_nchw(img))
        factor = h // th
        if h == factor * th and w == factor * tw and factor > 1 and factor & (factor - 1) == 0:
            for _ in range(factor.bit_length() - 1):
                x = gaussian_downsample(x)
        else:
            x = T.resize_bilinear(x, th, tw)
    return x.data[0].transpose(1, 2, 0)


def resize_triplet(t: ImageTriplet, size) -> ImageTriplet:
    if t.input.shape[:2] == tuple(size):
        return t
    m = resize_image(t.mask.astype(np.float64)[..., None], size)[..., 0]
    return ImageTriplet(np.clip(resize_image(t.input, size), 0, 1), np.clip(resize_image(t.target, size), 0, 1),
                        (m >= 0.5).astype(np.uint8), t.origin)


def mixed_batch(datasets: Mapping[str, Sequence[ImageTriplet]], composition: Mapping[str, int], seed: int,
                step: int, size=None):
    """Exactly ``composition[tag]`` triplets per tag, drawn with a per-(seed, step) generator.

    Within a tag, draws are without replacement when the dataset is large
    enough.  Returns ``(triplets, tags, indices)``.
    """
    rng = np.random.default_rng([seed, step])
    triplets, tags, indices = [], [], []
    for tag in sorted(composition):
        count = int(composition[tag])
        if count == 0:
            continue
        if tag not in datasets or len(datasets[tag]) == 0:
            raise ConfigError(f"batch composition asks for {tag!r} but no such dataset was given")
        data = datasets[tag]
        idx = rng.choice(len(data), size=count, replace=count > len(data))
        for i in idx:
            t = data[int(i)]
            triplets.append(resize_triplet(t, size) if size is not None else t)
            tags.append(tag)
            indices.append(int(i))
    return triplets, tags, indices


def stack_batch(triplets: Sequence[ImageTriplet]):
    x = np.stack([hwc_to_nchw(t.input)[0] for t in triplets]).astype(np.float32)
    y = np.stack([hwc_to_nchw(t.target)[0] for t in triplets]).astype(np.float32)
    return T.Tensor(x), T.Tensor(y)


def steps_per_epoch(datasets: Mapping[str, Sequence], composition: Mapping[str, int]) -> int:
    active = [tag for tag, c in composition.items() if c > 0]
    largest = max(active, key=lambda tag: len(datasets[tag]))
    return max(1, math.ceil(len(datasets[largest]) / composition[largest]))


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if total <= 1 or lr == 0.0:
        return lr
    frac = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * frac))


def params_digest(params: Mapping, prefix: str = "") -> str:
    h = hashlib.sha256()
    for name, t in params.items():
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# loops

@dataclass
class TrainResult:
    params: ModelParams
    adam: T.AdamState
    log: list
    checkpoint: Optional[Path] = None


def _write_log(path: Path, rows, append: bool):
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        if mode == "w":
            writer.writeheader()
        for r in rows:
            writer.writerow(r)


def _run(cfg: TrainConfig, datasets, params: ModelParams, adam: T.AdamState, trainable: str,
         loss_fn: Callable, total_steps: int, spe: int, on_step=None) -> list:
    names = params.names(trainable)
    for n in params:
        params[n].requires_grad = n in names
        params[n].grad = None
    subset = {n: params[n] for n in names}
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir and cfg.checkpoint_every:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for step in range(adam.t, total_steps):
        batch, _, _ = mixed_batch(datasets, cfg.composition, cfg.seed, step, cfg.resolution)
        x, y = stack_batch(batch)
        for t in subset.values():
            t.grad = None
        try:
            loss, l1, perc = loss_fn(x, y)
            loss.backward()
        except NumericError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(step, "loss is not finite")
        grads = {n: t.grad for n, t in subset.items()}
        T.adam_step(subset, grads, adam, cosine_lr(step, total_steps, cfg.lr, cfg.lr_min))
        row = dict(step=step, epoch=step // spe, loss_total=loss.item(), loss_l1=l1.item(),
                   loss_perc=0.0 if perc is None else perc.item())
        rows.append(row)
        if on_step is not None:
            on_step(row)
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"stage{cfg.stage}_step{step + 1}.ckpt", params, adam)
    for t in params.tensors.values():
        t.grad = None
    return rows


def _total_steps(cfg: TrainConfig, datasets) -> tuple:
    spe = steps_per_epoch(datasets, cfg.composition)
    total = cfg.max_steps if cfg.max_steps is not None else spe * cfg.epochs
    return total, spe


def _finish(cfg: TrainConfig, params, adam, rows, resumed: bool) -> TrainResult:
    ckpt = None
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / f"stage{cfg.stage}.ckpt"
        save_checkpoint(ckpt, params, adam)
        _write_log(out / f"stage{cfg.stage}_log.csv", rows, append=resumed)
    return TrainResult(params, adam, rows, ckpt)


def train_stage1(cfg: TrainConfig, datasets: Mapping[str, Sequence[ImageTriplet]],
                 params: Optional[ModelParams] = None, adam: Optional[T.AdamState] = None,
                 on_step=None) -> TrainResult:
    """Optimize every IOANet parameter with Adam on ``total_loss`` at low resolution."""
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 config")
    resumed = adam is not None and adam.t > 0
    params = params if params is not None else init_params(cfg.model, cfg.seed)
    adam = adam if adam is not None else T.AdamState()
    extractor = PerceptualLoss(cfg.perceptual_seed)
    model = cfg.model

    def loss_fn(x, y):
        pred = ioanet_forward(x, params, model, training=True)
        return total_loss(pred, y, cfg.loss_weights, extractor, return_terms=True)

    total, spe = _total_steps(cfg, datasets)
    rows = _run(cfg, datasets, params, adam, "ioanet.", loss_fn, total, spe, on_step)
    return _finish(cfg, params, adam, rows, resumed)


def train_stage2(cfg: TrainConfig, datasets: Mapping[str, Sequence[ImageTriplet]],
                 params: Optional[ModelParams] = None, adam: Optional[T.AdamState] = None,
                 on_step=None) -> TrainResult:
    """Freeze IOANet and fit the refiner and mask networks with L1 at high resolution.

    ``params`` defaults to the stage-1 checkpoint named by ``cfg.init_from``.
    """
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs a stage-2 config")
    resumed = adam is not None and adam.t > 0
    if params is None:
        params, _ = load_checkpoint(cfg.init_from, cfg.model)
    adam = adam if adam is not None else T.AdamState()
    frozen_before = params_digest(params, "ioanet.")
    model = cfg.model
    weights = cfg.loss_weights

    def loss_fn(x, y):
        pred = lp_ioanet_forward(x, params, model, training=True)
        l1 = l1_loss(pred, y)
        return T.scale(l1, weights.l1), l1, None

    total, spe = _total_steps(cfg, datasets)
    rows = _run(cfg, datasets, params, adam, ("refiner.", "masknet."), loss_fn, total, spe, on_step)
    if params_digest(params, "ioanet.") != frozen_before:
        raise AssertionError("IOANet parameters changed during stage-2 training")
    return _finish(cfg, params, adam, rows, resumed)
