"""scikit-learn style front end for the two-stage shadow remover."""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import ImageTriplet
from .errors import ConfigError
from .metrics import psnr_region
from .models import DEFAULT_CONFIG, desk_config, ioanet_forward, lp_ioanet_forward
from .training import desk_profile, train_stage1, train_stage2
from .validation import check_image_batch, check_mask_batch, check_pair


class LPShadowRemover(BaseEstimator):
    """Fit on (shadowed, shadow-free) image pairs; predict shadow-free images.

    Images are ``N x H x W x 3`` arrays (uint8 or floats in [0, 1]) with H and
    W divisible by 4; prediction accepts any such size.  IOANet is trained at a quarter of the input resolution,
    then frozen while the pyramid refiner learns at full resolution.

    Parameters
    ----------
    width : {"desk", "default"}
        Channel widths: the narrow CPU profile or the full-size network.
    stage1_steps, stage2_steps : int
        Adam steps per stage; ``stage2_steps=0`` skips the upsampler.
    batch_size : int
    lr1, lr2 : float
        Peak learning rates (cosine-decayed to a tenth).
    mode : {"lp", "lowres"}
        ``lp`` runs the full pyramid with IOANet at a quarter of the input
        size; ``lowres`` runs IOANet alone at the input size.
    seed : int
    """

    def __init__(self, width="desk", stage1_steps=200, stage2_steps=100, batch_size=4, lr1=2e-3, lr2=1e-3,
                 mode="lp", seed=0):
        self.width = width
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.batch_size = batch_size
        self.lr1 = lr1
        self.lr2 = lr2
        self.mode = mode
        self.seed = seed

    def _model_config(self, h, w):
        if self.width == "desk":
            return desk_config((h // 4, w // 4))
        if self.width == "default":
            return DEFAULT_CONFIG.with_low_res(h // 4, w // 4)
        raise ConfigError(f"width must be 'desk' or 'default', got {self.width!r}")

    def fit(self, X, y, mask=None):
        X, y = check_pair(X, y, multiple_of=4)
        if self.mode not in ("lp", "lowres"):
            raise ConfigError(f"mode must be 'lp' or 'lowres', got {self.mode!r}")
        masks = (check_mask_batch(mask, X.shape) if mask is not None
                 else (np.abs(X - y).max(axis=-1) > 0.5 / 255).astype(np.uint8))
        triplets = [ImageTriplet(a.astype(np.float64), b.astype(np.float64), m) for a, b, m in zip(X, y, masks)]
        config = self._model_config(*X.shape[1:3])
        data = {"SYNTH": triplets}
        comp = {"SYNTH": int(self.batch_size)}
        cfg1 = desk_profile(1, model=config, max_steps=int(self.stage1_steps), lr=self.lr1, lr_min=self.lr1 / 10,
                            composition=comp, seed=self.seed)
        res = train_stage1(cfg1, data)
        self.history_ = {"stage1": res.log, "stage2": []}
        if self.stage2_steps > 0:
            with tempfile.TemporaryDirectory() as tmp:
                ckpt = Path(tmp) / "stage1.ckpt"
                save_checkpoint(ckpt, res.params)
                cfg2 = desk_profile(2, model=config, max_steps=int(self.stage2_steps), lr=self.lr2,
                                    lr_min=self.lr2 / 10, composition=comp, seed=self.seed, init_from=str(ckpt))
                res = train_stage2(cfg2, data, params=res.params)
            self.history_["stage2"] = res.log
        self.config_ = config
        self.params_ = res.params
        self.n_features_in_ = 3
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before predict")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_batch(X, multiple_of=4)
        x = np.ascontiguousarray(X.transpose(0, 3, 1, 2))
        with T.no_grad():
            if self.mode == "lp":
                cfg = self.config_.with_low_res(x.shape[2] // 4, x.shape[3] // 4)
                out = lp_ioanet_forward(x, self.params_, cfg).data
            else:
                out = ioanet_forward(x, self.params_, self.config_, check_resolution=False).data
        return np.clip(out.transpose(0, 2, 3, 1), 0.0, 1.0).astype(np.float32)

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of the predictions over all pixels; higher is better."""
        X, y = check_pair(X, y, multiple_of=4)
        pred = self.predict(X)
        empty = np.zeros(X.shape[:3], dtype=np.uint8)
        return float(psnr_region(pred.transpose(0, 3, 1, 2), y.transpose(0, 3, 1, 2), empty).all)

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(path, self.params_)

    def load(self, path, image_size) -> "LPShadowRemover":
        """Restore parameters for images of ``image_size`` (H, W)."""
        self.config_ = self._model_config(*image_size)
        self.params_, _ = load_checkpoint(path, self.config_)
        self.n_features_in_ = 3
        return self
