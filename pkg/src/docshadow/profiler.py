"""Analytic FLOP/parameter counting and wall-clock benchmarking.

Convention: one multiply-accumulate counts as 2 FLOPs.  Elementwise ops
(activations, additions, gating products, bilinear resizes) count one FLOP
per output element.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .models import DEFAULT_CONFIG, ModelConfig, init_params, lp_ioanet_forward

FLOP_CONVENTION = "1 MAC = 2 FLOPs"
STAGES = ("ioanet", "refiner", "mask_finetune", "pyramid")
REFINEMENT_STAGES = ("refiner", "mask_finetune")

_ELEMENTWISE = {"activation", "add", "mul", "resize_bilinear"}
_FREE = {"concat", "split", "swap_hw"}
_REQUIRED = {
    "conv2d": ("cin", "cout", "kh", "kw"),
    "depthwise_conv2d": ("c", "kh", "kw"),
    "dwsep": ("cin", "cout", "k"),
}


@dataclass(frozen=True)
class LayerDesc:
    kind: str
    attrs: dict = field(default_factory=dict)
    out_shape: Optional[tuple] = None
    scope: str = ""


def _conv_out(n, h, w, k_h, k_w, stride, pad):
    return (h + 2 * pad - k_h) // stride + 1, (w + 2 * pad - k_w) // stride + 1


def count_layer(desc: LayerDesc, input_shape) -> tuple:
    """Return ``(flops, params)`` for one layer applied to ``input_shape`` (N, C, H, W)."""
    kind, a = desc.kind, desc.attrs
    for key in _REQUIRED.get(kind, ()):
        if key not in a:
            raise ConfigError(f"{kind} descriptor lacks {key!r}")
    if input_shape is None or len(input_shape) != 4:
        raise ConfigError(f"{kind} descriptor needs a 4-D input shape, got {input_shape}")
    n, c, h, w = (int(v) for v in input_shape)
    if kind == "conv2d":
        stride, pad = a.get("stride", 1), a.get("pad", 0)
        ho, wo = _conv_out(n, h, w, a["kh"], a["kw"], stride, pad)
        out = n * a["cout"] * ho * wo
        flops = 2 * out * a["cin"] * a["kh"] * a["kw"]
        params = a["cout"] * a["cin"] * a["kh"] * a["kw"]
        if a.get("bias", False):
            flops += out
            params += a["cout"]
        return flops, params
    if kind == "depthwise_conv2d":
        stride = a.get("stride", 1)
        pad = a.get("pad", a["kh"] // 2)
        ho, wo = _conv_out(n, h, w, a["kh"], a["kw"], stride, pad)
        return 2 * n * a["c"] * ho * wo * a["kh"] * a["kw"], a["c"] * a["kh"] * a["kw"]
    if kind == "dwsep":
        k = a["k"]
        f1, p1 = count_layer(LayerDesc("depthwise_conv2d", dict(c=a["cin"], kh=k, kw=k)), input_shape)
        f2, p2 = count_layer(LayerDesc("conv2d", dict(cin=a["cin"], cout=a["cout"], kh=1, kw=1,
                                                      bias=a.get("bias", True))), input_shape)
        return f1 + f2, p1 + p2
    if kind in _ELEMENTWISE:
        shape = desc.out_shape if desc.out_shape is not None else input_shape
        if kind == "resize_bilinear" and desc.out_shape is None:
            if "out_h" not in a or "out_w" not in a:
                raise ConfigError("resize descriptor lacks out_h/out_w")
            shape = (n, c, a["out_h"], a["out_w"])
        return int(np.prod(shape)), 0
    if kind == "axis_pool":
        return n * c * h * w, 0
    if kind == "gaussian_downsample":
        return 2 * 2 * 5 * n * c * h * w, 0
    if kind == "upsample2x":
        return 2 * 2 * 5 * n * c * (2 * h) * (2 * w), 0
    if kind in _FREE:
        return 0, 0
    raise ConfigError(f"unknown layer kind {kind!r}")


def layers_from_trace(events) -> list:
    return [(LayerDesc(op, attrs, out_shape, scope), in_shape) for scope, op, attrs, in_shape, out_shape in events]


@dataclass
class CostReport:
    flops: int = 0
    params: int = 0
    peak_activation_bytes: int = 0
    wall_ms: Optional[float] = None
    wall_p90_ms: Optional[float] = None
    device: str = "cpu"
    stages: dict = field(default_factory=dict)
    resolutions: dict = field(default_factory=dict)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def stage_flops(self, *names) -> int:
        return int(sum(self.stages.get(n, (0, 0))[0] for n in names))


def count_layers(layers: Sequence, bytes_per_value: int = 4) -> CostReport:
    """Sum :func:`count_layer` over ``(LayerDesc, input_shape)`` pairs."""
    rep = CostReport()
    for desc, in_shape in layers:
        f, p = count_layer(desc, in_shape)
        rep.flops += f
        rep.params += p
        fs, ps = rep.stages.get(desc.scope, (0, 0))
        rep.stages[desc.scope] = (fs + f, ps + p)
        out_n = int(np.prod(desc.out_shape)) if desc.out_shape is not None else 0
        rep.peak_activation_bytes = max(rep.peak_activation_bytes,
                                        bytes_per_value * (int(np.prod(in_shape)) + out_n))
    return rep


def trace_model(config: ModelConfig = DEFAULT_CONFIG, batch: int = 1) -> list:
    """Run LP-IOANet once on zeros at the configured resolution and return its layer list."""
    params = init_params(config, seed=0)
    x = np.zeros((batch, 3, *config.high_res), dtype=np.float32)
    with T.no_grad(), T.trace() as events:
        lp_ioanet_forward(x, params, config, training=True)
    return layers_from_trace(events)


def count_model(config: Optional[ModelConfig] = DEFAULT_CONFIG, batch: int = 1) -> CostReport:
    """Whole-pipeline cost with a per-stage breakdown; ``None`` is the empty model."""
    if config is None:
        return CostReport()
    rep = count_layers(trace_model(config, batch))
    rep.resolutions = {"ioanet": tuple(config.low_res), "refiner": tuple(config.mid_res),
                       "mask_finetune": tuple(config.high_res), "pyramid": tuple(config.high_res)}
    return rep


def dense_twin(config: ModelConfig) -> ModelConfig:
    return replace(config, refiner=replace(config.refiner, uses_depthwise=False))


# --------------------------------------------------------------------------
# wall clock

@dataclass
class BenchResult:
    median_ms: float
    p90_ms: float
    samples: list


def benchmark(forward: Callable, input_shape, runs: int = 30, warmup: int = 5, seed: int = 0) -> BenchResult:
    """Median and 90th percentile of ``forward(x)`` wall time, pinned to one BLAS thread."""
    from threadpoolctl import threadpool_limits

    x = np.random.default_rng(seed).random(input_shape, dtype=np.float64).astype(np.float32)
    samples = []
    with threadpool_limits(limits=1), T.no_grad():
        for _ in range(warmup):
            forward(x)
        for _ in range(max(1, runs)):
            t0 = time.perf_counter()
            forward(x)
            samples.append((time.perf_counter() - t0) * 1e3)
    if len(samples) == 1:
        return BenchResult(samples[0], samples[0], samples)
    return BenchResult(statistics.median(samples), float(np.percentile(samples, 90)), samples)


# --------------------------------------------------------------------------
# reports

def _stage_rows(rep: CostReport):
    rows = []
    for stage in STAGES:
        if stage in rep.stages:
            f, p = rep.stages[stage]
            res = rep.resolutions.get(stage)
            rows.append(dict(stage=stage, resolution="" if res is None else f"{res[0]}x{res[1]}",
                             gflops=f / 1e9, params=p))
    rows.append(dict(stage="refinement_path", resolution="",
                     gflops=rep.stage_flops(*REFINEMENT_STAGES) / 1e9,
                     params=sum(rep.stages.get(s, (0, 0))[1] for s in REFINEMENT_STAGES)))
    rows.append(dict(stage="total", resolution="", gflops=rep.gflops, params=rep.params))
    return rows


def report_csv(rep: CostReport) -> str:
    buf = io.StringIO()
    buf.write(f"# flops convention: {FLOP_CONVENTION}; device: {rep.device}\n")
    writer = csv.DictWriter(buf, fieldnames=["stage", "resolution", "runtime_ms", "memory_gb", "gflops", "params"],
                            lineterminator="\n")
    writer.writeheader()
    for row in _stage_rows(rep):
        total = row["stage"] == "total"
        writer.writerow(dict(row, gflops=repr(row["gflops"]),
                             runtime_ms="" if not total or rep.wall_ms is None else repr(rep.wall_ms),
                             memory_gb=repr(rep.peak_activation_bytes / 1e9) if total else ""))
    return buf.getvalue()


def report_text(rep: CostReport) -> str:
    header = ("Stage", "Resolution", "Runtime ms", "Memory GB", "GFLOPs", "Params")
    lines = [header]
    for row in _stage_rows(rep):
        total = row["stage"] == "total"
        lines.append((row["stage"], row["resolution"],
                      f"{rep.wall_ms:.2f}" if total and rep.wall_ms is not None else "-",
                      f"{rep.peak_activation_bytes / 1e9:.4f}" if total else "-",
                      f"{row['gflops']:.4f}", str(row["params"])))
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    out = [f"FLOPs convention: {FLOP_CONVENTION}; device: {rep.device}"]
    out += ["  ".join(cell.rjust(wd) if i >= 2 else cell.ljust(wd) for i, (cell, wd) in enumerate(zip(r, widths)))
            for r in lines]
    return "\n".join(out)
