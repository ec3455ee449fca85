"""``rifcn`` command line: train, predict, eval, selfcheck, synth.

Exit codes: 0 success, 1 configuration or argument error, 2 data error,
3 numeric failure (non-finite loss), 4 self-check failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data_io, ntr
from .metrics import evaluate_tiles
from .model import (
    IGNORE,
    CheckpointError,
    ForwardStreamSpec,
    build_model,
    deserialize_model,
    model_to_bytes,
    probs_to_labels,
)
from .optim import NonFiniteLossError, TrainConfig, train

log = logging.getLogger("rifcn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_SELFCHECK = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    data_dir: str = ""
    checkpoint: str = "model.ntr"
    report: str = "train_report.csv"
    num_classes: int = 6
    levels: int = 4
    width_factor: float = 1.0
    widths: str = ""
    patch: int = 256
    stride: int = 0
    overlap: int = 0
    epochs: int = 30
    batch_size: int = 8
    val_fraction: float = 0.10
    patience: str = "5"
    lr: float = 2e-4
    augment: bool = True
    seed: int = 0

    def spec(self, in_channels: int) -> ForwardStreamSpec:
        if self.widths:
            widths = tuple(int(v) for v in self.widths.split(","))
            return ForwardStreamSpec(self.levels, widths, in_channels)
        return ForwardStreamSpec.default(in_channels, self.width_factor, self.levels)

    def train_config(self) -> TrainConfig:
        patience = None if self.patience.lower() in ("none", "off", "") else int(self.patience)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           val_fraction=self.val_fraction, early_stop_patience=patience,
                           seed=self.seed, lr=self.lr, augment=self.augment)


CONFIG_HELP = {
    "data_dir": "directory holding images/ and labels/ (required)",
    "checkpoint": "output checkpoint path",
    "report": "output CSV with per-epoch loss and accuracy",
    "num_classes": "class count M (1 = binary sigmoid head)",
    "levels": "pooling stages L",
    "width_factor": "scale applied to the 64..1024 block widths",
    "widths": "explicit comma-separated block widths (overrides width_factor)",
    "patch": "training patch size, divisible by 2^levels",
    "stride": "patch sampling stride (0 = patch size)",
    "overlap": "window overlap used by predict",
    "epochs": "maximum epochs",
    "batch_size": "mini-batch size",
    "val_fraction": "share of patches held out for validation",
    "patience": "early-stopping patience in epochs, or 'none'",
    "lr": "Nadam learning rate",
    "augment": "flip augmentation (true/false)",
    "seed": "random seed",
}


def config_schema() -> str:
    lines = ["config file keys (key=value, '#' comments):"]
    for f in fields(RunConfig):
        lines.append(f"  {f.name:<13} default={f.default!r:<20} {CONFIG_HELP[f.name]}")
    return "\n".join(lines)


def _coerce(name: str, typ, raw: str):
    try:
        if typ in (bool, "bool"):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, known[key], raw)
    cfg = RunConfig(**values)
    if not cfg.data_dir:
        raise ConfigError("data_dir is required")
    base = Path(path).parent
    for key in ("data_dir", "checkpoint", "report"):
        p = Path(getattr(cfg, key))
        if not p.is_absolute():
            setattr(cfg, key, str(base / p))
    return cfg


@contextlib.contextmanager
def thread_limit():
    """Honor RIFCN_THREADS: 0 means sequential deterministic mode."""
    raw = os.environ.get("RIFCN_THREADS")
    if raw is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    n = max(1, int(raw))
    with threadpool_limits(limits=n):
        yield


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.patch is not None:
            cfg.patch = args.patch
        if args.width_factor is not None:
            cfg.width_factor = args.width_factor
        tcfg = cfg.train_config()
        cfg.spec(1)
        if cfg.patch % (2 ** cfg.levels):
            raise ConfigError(f"patch {cfg.patch} not divisible by 2^{cfg.levels}")
        palette = data_io.palette_for(cfg.num_classes)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        for sub in ("images", "labels"):
            d = Path(cfg.data_dir) / sub
            if not d.is_dir():
                raise DataError(f"missing directory: {d}")
        for out in (cfg.checkpoint, cfg.report):
            Path(out).parent.mkdir(parents=True, exist_ok=True)
        pairs = data_io.load_pairs(cfg.data_dir, palette)
        channels = {img.shape[0] for _, img, _ in pairs}
        if len(channels) != 1:
            raise DataError(f"images disagree on channel count: {sorted(channels)}")
        stride = cfg.stride or cfg.patch
        patches = []
        for _, img, lab in pairs:
            patches += data_io.sample_patches(img, lab, cfg.patch, stride, cfg.levels)
    except (DataError, data_io.RasterError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA

    model = build_model(cfg.spec(channels.pop()), cfg.num_classes, seed=cfg.seed)
    log.info("training on %d patches, %d parameters", len(patches), model.parameter_count())
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            report = train(model, patches, tcfg)
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    ntr.atomic_write(cfg.checkpoint, model_to_bytes(model))
    ntr.atomic_write(cfg.report, report.to_csv().encode("ascii"))
    last = report.epochs[-1]
    print(f"epochs={len(report.epochs)} best_epoch={report.best_epoch} "
          f"train_acc={last.train_acc:.4f} val_acc={last.val_acc:.4f}")
    print(f"checkpoint: {cfg.checkpoint}\nreport: {cfg.report}")
    return EXIT_OK


def _default_patch(h: int, w: int, levels: int) -> int:
    div = 2 ** levels
    return max(div, min(256, (min(h, w) // div) * div))


def cmd_predict(args) -> int:
    try:
        model = deserialize_model(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        tile = data_io.read_raster(args.tile)
    except (OSError, data_io.RasterError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    c, h, w = tile.shape
    patch = args.patch or _default_patch(h, w, model.levels)
    if patch % (2 ** model.levels) or not 0 <= args.overlap < patch:
        print(f"config error: bad patch/overlap {patch}/{args.overlap}", file=sys.stderr)
        return EXIT_CONFIG
    if c != model.spec.in_channels or patch > min(h, w):
        print(f"data error: tile {tile.shape} incompatible with model input "
              f"({model.spec.in_channels} channels, patch {patch})", file=sys.stderr)
        return EXIT_DATA
    probs = data_io.stitch_predict(model, tile, patch, args.overlap)
    labels = probs_to_labels(probs[None])[0]
    rgb = data_io.encode_labels(labels, data_io.palette_for(model.num_classes))
    try:
        for out in filter(None, (args.out, args.probs)):
            Path(out).parent.mkdir(parents=True, exist_ok=True)
        data_io.write_raster(args.out, rgb)
        if args.probs:
            ntr.atomic_write(args.probs, ntr.encode(probs))
    except OSError as exc:
        print(f"data error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {args.out} ({h}x{w})")
    return EXIT_OK


def cmd_eval(args) -> int:
    num_labels = max(args.num_classes, 2)
    palette = data_io.palette_for(args.num_classes)
    try:
        preds = data_io.list_stems(args.pred_dir, (".ppm",))
        truths = data_io.list_stems(args.gt_dir, (".ppm",))
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    unpaired = sorted(set(preds) ^ set(truths))
    if unpaired:
        print(f"data error: unpaired stems: {', '.join(unpaired)}", file=sys.stderr)
        return EXIT_DATA
    if not preds:
        print("data error: no prediction files", file=sys.stderr)
        return EXIT_DATA
    classes = None
    if args.classes:
        try:
            classes = [int(v) for v in args.classes.split(",")]
        except ValueError:
            print(f"config error: bad --classes {args.classes!r}", file=sys.stderr)
            return EXIT_CONFIG
        if any(not 0 <= c < num_labels for c in classes):
            print(f"config error: --classes outside 0..{num_labels - 1}", file=sys.stderr)
            return EXIT_CONFIG
    items = []
    try:
        for stem in sorted(preds):
            pred = data_io.decode_labels(data_io.read_raw(preds[stem]), palette)
            truth = data_io.decode_labels(data_io.read_raw(truths[stem]), palette)
            if pred.shape != truth.shape:
                raise DataError(f"{stem}: size mismatch {pred.shape} vs {truth.shape}")
            if (pred == IGNORE).any():
                raise DataError(f"{stem}: prediction contains colors outside the palette")
            items.append((stem, truth, pred))
        report = evaluate_tiles(items, num_labels, eroded=args.eroded,
                                class_names=[n for n, _ in palette], classes=classes)
    except (DataError, data_io.RasterError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(report.to_table())
    out = Path(args.csv) if args.csv else Path(args.pred_dir) / "eval_report.csv"
    ntr.atomic_write(out, report.to_csv().encode("ascii"))
    print(f"csv: {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from . import selfcheck

    start = time.perf_counter()
    failed = selfcheck.run_all(fault=args.fault)
    print(f"total {time.perf_counter() - start:.1f}s")
    if failed is not None:
        print(f"selfcheck failed: {failed.name} (max_err={failed.max_error:.3e} "
              f"> tol={failed.tolerance:.0e})", file=sys.stderr)
        return EXIT_SELFCHECK
    print("selfcheck passed")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        stems = data_io.write_synth_dataset(args.out_dir, args.n, args.size, args.classes,
                                            args.seed)
    except ValueError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {len(stems)} tiles to {args.out_dir}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="rifcn", description="RiFCN semantic segmentation of aerial imagery.",
        epilog=config_schema(), formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train from a key=value config file",
                       epilog=config_schema(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--width-factor", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label a whole tile with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("tile")
    p.add_argument("out")
    p.add_argument("--probs", help="also write the probability volume (NTR)")
    p.add_argument("--patch", type=int, default=0)
    p.add_argument("--overlap", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predicted label maps against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--eroded", action="store_true", help="ignore a 3 px band at class borders")
    p.add_argument("--classes", help="comma-separated class indices averaged into mean F1")
    p.add_argument("--num-classes", type=int, default=6)
    p.add_argument("--csv", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", help="run adjoint, gradient and metric oracle suites")
    p.add_argument("--fault", choices=["transpose-deconv"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("synth", help="generate a synthetic desk-scale dataset")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors exit EXIT_CONFIG
        if exc.code not in (0, None):
            return int(exc.code)
        raise
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help()
        return EXIT_OK
    with thread_limit():
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
