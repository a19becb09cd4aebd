"""Command-line entry point: gen-data, train, infer, eval, profile.

Exit codes: 0 success, 2 usage/config error, 3 data or checkpoint error,
4 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .datagen import ORIGINS, generate_dataset, load_triplet, read_manifest
from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError
from .images import hwc_to_nchw, load_png, nchw_to_hwc, save_png
from .metrics import LossWeights, MetricsReport, RegionMetrics, format_table, mae_region, psnr_region, ssim
from .metrics import report_csv as metrics_csv
from .models import DEFAULT_CONFIG, ModelConfig, init_params, ioanet_forward, lp_ioanet_forward
from .profiler import benchmark, count_model, report_csv, report_text
from .training import PAPER_COMPOSITION, TrainConfig, desk_profile, train_stage1, train_stage2

log = logging.getLogger("docshadow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUN_CONFIG = "run.cfg"


# --------------------------------------------------------------------------
# flat key=value configuration

def _ints(s):
    return tuple(int(v) for v in s.replace("x", ",").split(",") if v.strip())


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _composition(s):
    out = {}
    for part in s.split(","):
        tag, _, count = part.partition(":")
        out[tag.strip()] = int(count)
    return out


def _fmt_composition(d):
    return ",".join(f"{k}:{v}" for k, v in d.items())


# key -> (parser, default for the "default" profile, default for the "desk" profile)
def _key_table():
    d1, k1, k2 = TrainConfig(), desk_profile(1), desk_profile(2, init_from="-")
    dm, km = DEFAULT_CONFIG, k1.model
    return {
        "seed": (int, 0, 0),
        "epochs": (int, None, None),
        "max_steps": (int, None, k1.max_steps),
        "lr": (float, d1.lr, k1.lr),
        "lr_min": (float, d1.lr_min, k1.lr_min),
        "stage2_lr": (float, d1.lr, k2.lr),
        "stage2_lr_min": (float, d1.lr_min, k2.lr_min),
        "composition": (_composition, dict(PAPER_COMPOSITION), dict(k1.composition)),
        "stage2_composition": (_composition, dict(PAPER_COMPOSITION), dict(k2.composition)),
        "l1_weight": (float, 10.0, 10.0),
        "perceptual_weight": (float, 5.0, 5.0),
        "perceptual_seed": (int, 0, 0),
        "checkpoint_every": (int, 0, 0),
        "low_res": (_ints, dm.low_res, km.low_res),
        "stem_channels": (int, dm.ioanet.stem_channels, km.ioanet.stem_channels),
        "encoder_widths": (_ints, dm.ioanet.encoder_widths, km.ioanet.encoder_widths),
        "num_residual_blocks": (int, dm.ioanet.num_residual_blocks, km.ioanet.num_residual_blocks),
        "attention_reduction": (int, dm.ioanet.attention_reduction, km.ioanet.attention_reduction),
        "use_attention": (_bool, dm.ioanet.use_attention, km.ioanet.use_attention),
        "skip_connections": (_bool, dm.ioanet.skip_connections, km.ioanet.skip_connections),
        "refiner_widths": (_ints, dm.refiner.widths, km.refiner.widths),
        "refiner_depthwise": (_bool, dm.refiner.uses_depthwise, km.refiner.uses_depthwise),
        "masknet_widths": (_ints, dm.masknet.widths, km.masknet.widths),
    }


class RunConfig(dict):
    """Resolved flat configuration: a named profile plus key=value overrides."""

    PROFILES = ("default", "desk")

    @classmethod
    def resolve(cls, profile: str = "desk", config_file=None, overrides=()) -> "RunConfig":
        table = _key_table()
        pairs = []
        if config_file is not None:
            pairs += parse_config_file(config_file)
        pairs += [_split_pair(s) for s in overrides]
        for key, value in pairs:
            if key == "profile":
                profile = value
        if profile not in cls.PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {cls.PROFILES}")
        col = 1 if profile == "default" else 2
        cfg = cls({k: v[col] for k, v in table.items()})
        cfg["profile"] = profile
        for key, value in pairs:
            if key == "profile":
                continue
            if key not in table:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                cfg[key] = table[key][0](value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        return cfg

    def model(self) -> ModelConfig:
        base = DEFAULT_CONFIG
        return replace(
            base,
            ioanet=replace(base.ioanet, stem_channels=self["stem_channels"], encoder_widths=tuple(self["encoder_widths"]),
                           num_residual_blocks=self["num_residual_blocks"],
                           attention_reduction=self["attention_reduction"], use_attention=self["use_attention"],
                           skip_connections=self["skip_connections"]),
            refiner=replace(base.refiner, widths=tuple(self["refiner_widths"]), uses_depthwise=self["refiner_depthwise"]),
            masknet=replace(base.masknet, widths=tuple(self["masknet_widths"])),
        ).with_low_res(*self["low_res"])

    def train_config(self, stage: int, out_dir=None, init_from=None) -> TrainConfig:
        prefix = "" if stage == 1 else "stage2_"
        weights = LossWeights(self["l1_weight"], self["perceptual_weight"]) if stage == 1 else LossWeights(1.0, 0.0)
        return TrainConfig(stage=stage, epochs=self["epochs"], max_steps=self["max_steps"], lr=self[prefix + "lr"],
                           lr_min=self[prefix + "lr_min"], composition=dict(self[prefix + "composition"]),
                           seed=self["seed"], checkpoint_every=self["checkpoint_every"], loss_weights=weights,
                           perceptual_seed=self["perceptual_seed"], model=self.model(), out_dir=out_dir,
                           init_from=init_from)

    def dumps(self) -> str:
        lines = []
        for key in sorted(self):
            v = self[key]
            if isinstance(v, dict):
                v = _fmt_composition(v)
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                continue
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"


def _split_pair(line: str):
    key, sep, value = line.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"expected key=value, got {line!r}")
    return key.strip(), value.strip()


def parse_config_file(path) -> list:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    pairs = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            pairs.append(_split_pair(line))
    return pairs


def _config_for_checkpoint(ckpt, config_file=None, overrides=()) -> RunConfig:
    """Config from --config, else the ``run.cfg`` written next to the checkpoint."""
    if config_file is None:
        sidecar = Path(ckpt).parent / RUN_CONFIG
        if not sidecar.is_file():
            raise ConfigError(f"no --config given and no {RUN_CONFIG} beside {ckpt}")
        config_file = sidecar
    return RunConfig.resolve(config_file=config_file, overrides=overrides)


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    rows = generate_dataset(args.clean_dir, args.n, args.out, seed=args.seed, origin=args.origin)
    print(f"wrote {len(rows)} triplets to {args.out}")
    return EXIT_OK


def _load_datasets(dirs) -> dict:
    datasets = {}
    for d in dirs:
        for row in read_manifest(d):
            t = load_triplet(d, row["index"], row["origin"])
            datasets.setdefault(t.origin, []).append(t)
    return datasets


def cmd_train(args) -> int:
    if args.stage == 2 and not args.init_from:
        raise ConfigError("--stage 2 requires --init-from <stage-1 checkpoint>")
    rc = RunConfig.resolve(args.profile, args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG).write_text(rc.dumps())
    log.info("resolved config:\n%s", rc.dumps().rstrip())
    cfg = rc.train_config(args.stage, out_dir=str(out), init_from=args.init_from)
    datasets = _load_datasets(args.data)
    params = adam = None
    if args.resume:
        params, adam = load_checkpoint(args.resume, cfg.model)
        if adam is None:
            raise CheckpointError(f"{args.resume} holds no optimizer state to resume from")
    elif args.stage == 2:
        params, _ = load_checkpoint(args.init_from, cfg.model)

    def on_step(row):
        if row["step"] % 50 == 0:
            log.info("step %d loss %.5f", row["step"], row["loss_total"])

    fn = train_stage1 if args.stage == 1 else train_stage2
    result = fn(cfg, datasets, params=params, adam=adam, on_step=on_step)
    print(f"stage {args.stage}: {len(result.log)} steps, checkpoint {result.checkpoint}")
    return EXIT_OK


def _pad_to_multiple(x: np.ndarray, m: int):
    h, w = x.shape[2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return x, (ph, pw)


def run_model(x: np.ndarray, params, model: ModelConfig, mode: str):
    """Forward an ``N x 3 x H x W`` batch at its own size; returns output and transform record."""
    h, w = x.shape[2:]
    xp, (ph, pw) = _pad_to_multiple(x.astype(np.float32), 4)
    hp, wp = xp.shape[2:]
    with T.no_grad():
        if mode == "lp":
            cfg = model.with_low_res(hp // 4, wp // 4)
            y = lp_ioanet_forward(xp, params, cfg).data
        else:
            y = ioanet_forward(xp, params, model, check_resolution=False).data
    meta = dict(mode=mode, input_size=[h, w], padded_size=[hp, wp], pad=[ph, pw], pad_mode="reflect",
                crop=[0, 0, h, w])
    if mode == "lp":
        meta["ioanet_resolution"] = [hp // 4, wp // 4]
    return y[:, :, :h, :w], meta


def _load_model(args):
    rc = _config_for_checkpoint(args.ckpt, args.config, args.set)
    model = rc.model()
    params, _ = load_checkpoint(args.ckpt, model)
    return model, params


def cmd_infer(args) -> int:
    model, params = _load_model(args)
    src, out = Path(args.inp), Path(args.out)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png")
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / p.name for p in files]
    elif src.is_file():
        files = [src]
        if out.suffix.lower() == ".png":
            out.parent.mkdir(parents=True, exist_ok=True)
            targets = [out]
        else:
            out.mkdir(parents=True, exist_ok=True)
            targets = [out / src.name]
    else:
        raise DataError(f"input not found: {src}")
    failed = 0
    for f, target in zip(files, targets):
        try:
            img = load_png(f)
        except DataError as exc:
            log.warning("%s", exc)
            failed += 1
            continue
        y, meta = run_model(hwc_to_nchw(img), params, model, args.mode)
        save_png(target, nchw_to_hwc(y))
        meta["source"] = str(f)
        target.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"processed {len(files) - failed} of {len(files)} images ({failed} failed)")
    if files and failed == len(files):
        return EXIT_DATA
    return EXIT_OK


def _mean_regions(items):
    out = []
    for field in ("all", "non_shadow", "shadow"):
        vals = [getattr(r, field) for r in items if getattr(r, field) is not None]
        out.append(float(np.mean(vals)) if vals else None)
    return RegionMetrics(*out)


def evaluate(pairs, name: str) -> MetricsReport:
    """Average region metrics over ``(pred, gt, mask)`` HWC triples."""
    maes, psnrs, ssims = [], [], []
    for pred, gt, mask in pairs:
        maes.append(mae_region(hwc_to_nchw(pred), hwc_to_nchw(gt), mask))
        psnrs.append(psnr_region(hwc_to_nchw(pred), hwc_to_nchw(gt), mask))
        ssims.append(ssim(hwc_to_nchw(pred), hwc_to_nchw(gt)))
    return MetricsReport(_mean_regions(maes), _mean_regions(psnrs), float(np.mean(ssims)), count=len(maes), name=name)


def cmd_eval(args) -> int:
    if args.ckpt is None and not args.no_removal:
        raise ConfigError("eval needs --ckpt or --no-removal")
    rows = read_manifest(args.data)
    triplets, skipped = [], 0
    for row in rows:
        try:
            triplets.append(load_triplet(args.data, row["index"], row["origin"], require_mask=True))
        except DataError as exc:
            skipped += 1
            log.warning("skipping item %s: %s", row["index"], exc)
    if not triplets:
        raise DataError(f"no evaluable triplets in {args.data} ({skipped} skipped)")
    reports = []
    if args.no_removal:
        reports.append(evaluate(((t.input, t.target, t.mask) for t in triplets), "no-removal"))
    if args.ckpt is not None:
        model, params = _load_model(args)
        preds = (nchw_to_hwc(run_model(hwc_to_nchw(t.input), params, model, args.mode)[0]) for t in triplets)
        reports.append(evaluate(((p, t.target, t.mask) for p, t in zip(preds, triplets)), f"model-{args.mode}"))
    table = format_table(reports)
    print(table)
    print(f"evaluated {len(triplets)} items, skipped {skipped} without masks")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(metrics_csv(reports))
        out.with_suffix(".txt").write_text(table + "\n")
    return EXIT_OK


def cmd_profile(args) -> int:
    if args.ckpt:
        model, _ = _load_model(args)
    else:
        model = RunConfig.resolve(args.profile, args.config, args.set).model()
    rep = count_model(model)
    if args.runs > 0:
        params = init_params(model, seed=0)
        b = benchmark(lambda x: lp_ioanet_forward(x, params, model), (1, 3, *model.high_res), runs=args.runs,
                      warmup=min(5, args.runs))
        rep.wall_ms, rep.wall_p90_ms = b.median_ms, b.p90_ms
    text = report_text(rep)
    print(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report_csv(rep))
        out.with_suffix(".txt").write_text(text + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def _common_config(p, profile=None):
    if profile is not None:
        p.add_argument("--profile", choices=RunConfig.PROFILES, default=profile,
                       help=f"base configuration (default: {profile})")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="docshadow", description="Document shadow removal pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="composite synthetic shadow triplets")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--origin", choices=ORIGINS, default="SYNTH")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", nargs="+", required=True, help="dataset directories with manifest.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--resume", help="checkpoint with optimizer state to continue from")
    _common_config(p, profile="desk")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="remove shadows from PNG images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True, help="PNG file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("lowres", "lp"), default="lp")
    _common_config(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="region metrics over a dataset")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="CSV report path (a .txt table is written beside it)")
    p.add_argument("--mode", choices=("lowres", "lp"), default="lp")
    p.add_argument("--no-removal", action="store_true", help="also score inputs as predictions")
    _common_config(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="FLOPs, parameters and wall time")
    p.add_argument("--ckpt")
    p.add_argument("--out", help="CSV report path (a .txt table is written beside it)")
    p.add_argument("--runs", type=int, default=0, help="timed forwards (0 skips benchmarking)")
    _common_config(p, profile="default")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
