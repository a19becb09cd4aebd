"""IOANet, the pyramid refinement/mask networks and the assembled LP-IOANet.

Networks are plain functions of ``(inputs, params, config)``; parameters live
in a :class:`ModelParams` name -> Tensor store produced by :func:`init_params`.
"""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .pyramid import PyramidDecomposition, decompose, reconstruct

__all__ = [
    "IOANetConfig", "RefinerConfig", "MaskNetConfig", "ModelConfig", "ModelParams",
    "DEFAULT_CONFIG", "desk_config", "init_params", "coordinate_attention", "ioanet_forward",
    "refine_and_mask_forward", "mask_finetune_forward", "lp_ioanet_forward",
    "config_fingerprint", "reduced_channels",
]

LEAK = 0.2


@dataclass(frozen=True)
class IOANetConfig:
    stem_channels: int = 16
    encoder_widths: tuple = (32, 64)
    num_residual_blocks: int = 3
    attention_reduction: int = 8
    use_attention: bool = True
    skip_connections: bool = True


@dataclass(frozen=True)
class RefinerConfig:
    widths: tuple = (128,)
    kernel: int = 3
    uses_depthwise: bool = True
    mask_channels: int = 1


@dataclass(frozen=True)
class MaskNetConfig:
    widths: tuple = (8,)
    kernel: int = 3


@dataclass(frozen=True)
class ModelConfig:
    ioanet: IOANetConfig = field(default_factory=IOANetConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    masknet: MaskNetConfig = field(default_factory=MaskNetConfig)
    low_res: tuple = (192, 256)
    mid_res: tuple = (384, 512)
    high_res: tuple = (768, 1024)

    def __post_init__(self):
        io = self.ioanet
        widths = [io.stem_channels, *io.encoder_widths, *self.refiner.widths, *self.masknet.widths]
        if any(int(w) < 1 for w in widths) or io.attention_reduction < 1:
            raise ConfigError("all channel widths and the attention reduction must be positive")
        if io.num_residual_blocks < 0:
            raise ConfigError("num_residual_blocks must be >= 0")
        if len(self.masknet.widths) > 1:
            raise ConfigError("mask finetuning uses at most two convolutions (one hidden width)")
        if self.refiner.kernel % 2 == 0 or self.masknet.kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        lh, lw = self.low_res
        if tuple(self.mid_res) != (2 * lh, 2 * lw) or tuple(self.high_res) != (4 * lh, 4 * lw):
            raise ConfigError(f"resolutions must form an exact x2 chain, got "
                              f"{self.low_res} -> {self.mid_res} -> {self.high_res}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        sub = {"ioanet": IOANetConfig, "refiner": RefinerConfig, "masknet": MaskNetConfig}
        kwargs = {}
        for key, klass in sub.items():
            if key in d:
                kwargs[key] = klass(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop(key).items()})
        for key in ("low_res", "mid_res", "high_res"):
            if key in d:
                kwargs[key] = tuple(d.pop(key))
        if d:
            raise ConfigError(f"unknown model config keys: {sorted(d)}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_low_res(self, h: int, w: int) -> "ModelConfig":
        return replace(self, low_res=(h, w), mid_res=(2 * h, 2 * w), high_res=(4 * h, 4 * w))


DEFAULT_CONFIG = ModelConfig()


def desk_config(low_res=(64, 64)) -> ModelConfig:
    """Narrow variant used for CPU-scale experiments and tests."""
    return ModelConfig(
        ioanet=IOANetConfig(stem_channels=16, encoder_widths=(16, 32), num_residual_blocks=1,
                            attention_reduction=4),
        refiner=RefinerConfig(widths=(16,)),
        masknet=MaskNetConfig(widths=(4,)),
    ).with_low_res(*low_res)


def config_fingerprint(config: ModelConfig) -> int:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def reduced_channels(c: int, r: int) -> int:
    return max(8, c // r)


class ModelParams:
    """Ordered ``name -> Tensor`` store tagged with the config fingerprint."""

    def __init__(self, tensors: "OrderedDict[str, T.Tensor]", fingerprint: int):
        self.tensors = OrderedDict(tensors)
        self.fingerprint = int(fingerprint)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, prefix: str = ""):
        return [n for n in self.tensors if n.startswith(prefix)]

    def subset(self, prefix: str) -> "OrderedDict[str, T.Tensor]":
        return OrderedDict((n, t) for n, t in self.tensors.items() if n.startswith(prefix))

    def num_elements(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def set_trainable(self, prefix: str, flag: bool):
        for n, t in self.tensors.items():
            if n.startswith(prefix):
                t.requires_grad = flag
                t.grad = None

    def copy(self, dtype=None) -> "ModelParams":
        out = OrderedDict()
        for n, t in self.tensors.items():
            data = t.data.copy() if dtype is None else t.data.astype(dtype)
            nt = T.Tensor.__new__(T.Tensor)
            nt.data, nt.requires_grad, nt.grad, nt._parents, nt._backward, nt.name = \
                data, t.requires_grad, None, (), None, n
            out[n] = nt
        return ModelParams(out, self.fingerprint)

    def check_finite(self):
        for n, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise T.NumericError(f"parameter {n} holds non-finite values")


# --------------------------------------------------------------------------
# parameter layout

def _conv_shapes(prefix, cin, cout, k, bias=True):
    yield f"{prefix}.w", (cout, cin, k, k)
    if bias:
        yield f"{prefix}.b", (cout,)


def _ds_shapes(prefix, cin, cout, k, depthwise=True):
    if depthwise:
        yield f"{prefix}.dw", (cin, 1, k, k)
        yield f"{prefix}.pw", (cout, cin, 1, 1)
        yield f"{prefix}.b", (cout,)
    else:
        yield from _conv_shapes(prefix, cin, cout, k)


def _ca_shapes(prefix, c, r):
    mid = reduced_channels(c, r)
    yield from _conv_shapes(f"{prefix}.reduce", c, mid, 1)
    yield from _conv_shapes(f"{prefix}.gate_h", mid, c, 1)
    yield from _conv_shapes(f"{prefix}.gate_w", mid, c, 1)


def _ioanet_layout(cfg: IOANetConfig):
    stem = cfg.stem_channels
    widths = [stem, *cfg.encoder_widths]
    yield from _conv_shapes("ioanet.stem", 3, stem, 3)
    for i in range(len(cfg.encoder_widths)):
        yield from _conv_shapes(f"ioanet.enc{i}", widths[i], widths[i + 1], 3)
    deep = widths[-1]
    for i in range(cfg.num_residual_blocks):
        yield from _conv_shapes(f"ioanet.res{i}.conv1", deep, deep, 3)
        yield from _conv_shapes(f"ioanet.res{i}.conv2", deep, deep, 3)
    for i in range(len(cfg.encoder_widths)):
        skip = widths[-2 - i] if cfg.skip_connections else 0
        yield from _conv_shapes(f"ioanet.dec{i}", widths[-1 - i] + skip, widths[-2 - i], 3)
    if cfg.use_attention:
        yield from _conv_shapes("ioanet.ia.proj", 3, stem, 3)
        yield from _ca_shapes("ioanet.ia.ca", stem, cfg.attention_reduction)
        yield from _ca_shapes("ioanet.oa.ca", stem, cfg.attention_reduction)
    yield from _conv_shapes("ioanet.out", stem, 3, 3)


def _refiner_layout(cfg: RefinerConfig):
    chans = [9, *cfg.widths, cfg.mask_channels]
    for i in range(len(chans) - 1):
        yield from _ds_shapes(f"refiner.l{i}", chans[i], chans[i + 1], cfg.kernel, cfg.uses_depthwise)


def _masknet_layout(cfg: MaskNetConfig, mask_channels: int):
    chans = [mask_channels, *cfg.widths, mask_channels]
    for i in range(len(chans) - 1):
        yield from _ds_shapes(f"masknet.l{i}", chans[i], chans[i + 1], cfg.kernel)


def param_layout(config: ModelConfig):
    """Ordered ``(name, shape)`` pairs for every parameter of the full pipeline."""
    yield from _ioanet_layout(config.ioanet)
    yield from _refiner_layout(config.refiner)
    yield from _masknet_layout(config.masknet, config.refiner.mask_channels)


def _zero_init_names(config: ModelConfig):
    last_ref = len(config.refiner.widths)
    last_mask = len(config.masknet.widths)
    names = {"ioanet.out.w", "ioanet.out.b"}
    if config.refiner.uses_depthwise:
        names |= {f"refiner.l{last_ref}.pw", f"refiner.l{last_ref}.b"}
    else:
        names |= {f"refiner.l{last_ref}.w", f"refiner.l{last_ref}.b"}
    names |= {f"masknet.l{last_mask}.pw", f"masknet.l{last_mask}.b"}
    return names


def init_params(config: ModelConfig = DEFAULT_CONFIG, seed: int = 0) -> ModelParams:
    """Fan-in scaled uniform init; output heads zeroed so the pipeline starts as identity."""
    rng = np.random.default_rng(seed)
    zeros = _zero_init_names(config)
    out = OrderedDict()
    for name, shape in param_layout(config):
        if name.endswith(".b"):
            fan_in = None
        elif name.endswith(".dw"):
            fan_in = shape[2] * shape[3]
        else:
            fan_in = int(np.prod(shape[1:]))
        if name in zeros:
            data = np.zeros(shape)
        elif fan_in is None:
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        out[name] = T.Tensor(data.astype(np.float32), requires_grad=True, name=name)
    return ModelParams(out, config_fingerprint(config))


# --------------------------------------------------------------------------
# building blocks

def _lrelu(x):
    return T.activation(x, "leaky_relu", LEAK)


def _conv(x, p, prefix, stride=1):
    w = p[f"{prefix}.w"]
    return T.conv2d(x, w, p[f"{prefix}.b"], stride=stride, pad=w.shape[2] // 2)


def _ds(x, p, prefix):
    if f"{prefix}.dw" in p:
        return T.depthwise_separable_conv(x, p[f"{prefix}.dw"], p[f"{prefix}.pw"], p[f"{prefix}.b"])
    return _conv(x, p, prefix)


def coordinate_attention(x, params, prefix: str = "ca", reduction: int = 8) -> T.Tensor:
    """Gate ``x`` by sigmoid(height profile) * sigmoid(width profile).

    Height- and width-pooled descriptors share one 1x1 reduction conv (applied
    to their concatenation along the pooled axis), then split into two 1x1
    gate convs.  Output is ``x * a_h * a_w`` with broadcasting.
    """
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"coordinate_attention expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    w_red = params[f"{prefix}.reduce.w"]
    if w_red.shape[1] != c:
        raise ShapeError(f"attention block {prefix} expects {w_red.shape[1]} channels, got {c}")
    pooled_h = T.axis_pool(x, "width")                # N x C x H x 1
    pooled_w = T.swap_hw(T.axis_pool(x, "height"))    # N x C x W x 1
    y = T.concat([pooled_h, pooled_w], axis=2)
    y = _lrelu(T.conv2d(y, w_red, params[f"{prefix}.reduce.b"]))
    y_h, y_w = T.split(y, [h, w], axis=2)
    a_h = T.activation(T.conv2d(y_h, params[f"{prefix}.gate_h.w"], params[f"{prefix}.gate_h.b"]), "sigmoid")
    a_w = T.activation(T.conv2d(y_w, params[f"{prefix}.gate_w.w"], params[f"{prefix}.gate_w.b"]), "sigmoid")
    return T.mul(T.mul(x, a_h), T.swap_hw(a_w))


def _backbone(x, p, cfg: IOANetConfig):
    feats = _lrelu(_conv(x, p, "ioanet.stem"))
    skips = [feats]
    for i in range(len(cfg.encoder_widths)):
        feats = _lrelu(_conv(feats, p, f"ioanet.enc{i}", stride=2))
        skips.append(feats)
    for i in range(cfg.num_residual_blocks):
        r = _lrelu(_conv(feats, p, f"ioanet.res{i}.conv1"))
        r = _conv(r, p, f"ioanet.res{i}.conv2")
        feats = _lrelu(T.add(feats, r))
    skips.pop()
    for i in range(len(cfg.encoder_widths)):
        target = skips.pop()
        feats = T.resize_bilinear(feats, target.shape[2], target.shape[3])
        if cfg.skip_connections:
            feats = T.concat_channels([feats, target])
        feats = _lrelu(_conv(feats, p, f"ioanet.dec{i}"))
    return feats


def ioanet_forward(x, params, config: ModelConfig = DEFAULT_CONFIG, *, training: bool = False,
                   check_resolution: bool = True) -> T.Tensor:
    """``y = x + head(OA(B(x) + IA(x)))``; clamped to [0, 1] unless ``training``."""
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"IOANet expects N x 3 x H x W input, got {x.shape}")
    if check_resolution and tuple(x.shape[2:]) != tuple(config.low_res):
        raise ShapeError(f"IOANet runs at {config.low_res}, got {tuple(x.shape[2:])}")
    cfg = config.ioanet
    with T.trace_scope("ioanet"):
        feats = _backbone(x, params, cfg)
        if cfg.use_attention:
            ia = _lrelu(_conv(x, params, "ioanet.ia.proj"))
            ia = coordinate_attention(ia, params, "ioanet.ia.ca", cfg.attention_reduction)
            feats = coordinate_attention(T.add(feats, ia), params, "ioanet.oa.ca", cfg.attention_reduction)
        y = T.add(x, _conv(feats, params, "ioanet.out"))
        if not training:
            y = T.clamp(y, 0.0, 1.0)
    return y


def _unit_mask(z):
    return T.add(T.activation(z, "tanh"), T.Tensor(np.ones((1, 1, 1, 1))))


def refine_and_mask_forward(base_out_lowres, base_in_lowres, residual_mid, params,
                            config: ModelConfig = DEFAULT_CONFIG):
    """Return ``(residual_mid * mask_mid, mask_mid)`` with ``mask_mid`` in (0, 2)."""
    base_out_lowres, base_in_lowres, residual_mid = map(T.as_tensor, (base_out_lowres, base_in_lowres, residual_mid))
    for t in (base_out_lowres, base_in_lowres, residual_mid):
        if t.ndim != 4 or t.shape[1] != 3:
            raise ShapeError(f"refiner inputs must be N x 3 x H x W, got {t.shape}")
    if base_out_lowres.shape != base_in_lowres.shape:
        raise ShapeError("low-resolution input and output must share a shape")
    lh, lw = base_in_lowres.shape[2:]
    mh, mw = residual_mid.shape[2:]
    if (mh, mw) != (2 * lh, 2 * lw):
        raise ShapeError(f"residual {mh}x{mw} must be twice the base {lh}x{lw}")
    with T.trace_scope("refiner"):
        feats = T.concat_channels([residual_mid,
                                   T.resize_bilinear(base_in_lowres, mh, mw),
                                   T.resize_bilinear(base_out_lowres, mh, mw)])
        n_layers = len(config.refiner.widths) + 1
        for i in range(n_layers):
            feats = _ds(feats, params, f"refiner.l{i}")
            if i < n_layers - 1:
                feats = _lrelu(feats)
        mask = _unit_mask(feats)
        refined = T.mul(residual_mid, mask)
    return refined, mask


def mask_finetune_forward(mask_mid, params, config: ModelConfig = DEFAULT_CONFIG, out_size=None):
    """Bilinear x2 upsample plus a residual depthwise-separable correction."""
    mask_mid = T.as_tensor(mask_mid)
    if mask_mid.ndim != 4 or mask_mid.shape[1] != config.refiner.mask_channels:
        raise ShapeError(f"mask must be N x {config.refiner.mask_channels} x H x W, got {mask_mid.shape}")
    h, w = out_size if out_size is not None else (2 * mask_mid.shape[2], 2 * mask_mid.shape[3])
    with T.trace_scope("mask_finetune"):
        up = T.resize_bilinear(mask_mid, h, w)
        feats = up
        n_layers = len(config.masknet.widths) + 1
        for i in range(n_layers):
            feats = _ds(feats, params, f"masknet.l{i}")
            if i < n_layers - 1:
                feats = _lrelu(feats)
        mask = T.add(up, feats)
    return mask


def lp_ioanet_forward(x_high, params, config: ModelConfig = DEFAULT_CONFIG, *, training: bool = False,
                      return_parts: bool = False):
    """Two-level pyramid: IOANet on the base, learned masks on both residuals."""
    x_high = T.as_tensor(x_high)
    if x_high.ndim != 4 or x_high.shape[1] != 3 or tuple(x_high.shape[2:]) != tuple(config.high_res):
        raise ShapeError(f"LP-IOANet expects N x 3 x {config.high_res[0]} x {config.high_res[1]}, got {x_high.shape}")
    with T.trace_scope("pyramid"):
        pyr = decompose(x_high, 2)
    residual_high, residual_mid = pyr.residuals
    base_out = ioanet_forward(pyr.base, params, config, training=True)
    refined_mid, mask_mid = refine_and_mask_forward(base_out, pyr.base, residual_mid, params, config)
    mask_high = mask_finetune_forward(mask_mid, params, config, out_size=config.high_res)
    with T.trace_scope("pyramid"):
        refined_high = T.mul(residual_high, mask_high)
        out = reconstruct(PyramidDecomposition([refined_high, refined_mid], base_out))
        if not training:
            out = T.clamp(out, 0.0, 1.0)
    if return_parts:
        return out, dict(base_in=pyr.base, base_out=base_out, mask_mid=mask_mid, mask_high=mask_high,
                         residual_mid=residual_mid, residual_high=residual_high)
    return out
