"""Command-line entry points.

Exit codes: 0 success, 2 bad flags, 3 I/O failure, 4 shape error,
5 non-finite values during training or attribution.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (Dataset, NormalizationStats, TensorFileError, atomic_write_text, gen_synthetic_cyclones,
                   gen_synthetic_storms, load_manifest, load_tensor_file, read_split_file, save_tensor_file,
                   subsample_stratified, subsample_tc, minmax_normalize)
from .explain import attention_maps, model_integrated_gradients
from .filterbank import build_morlet_bank
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .scattering import path_table, scatter_numpy, write_path_table
from .training import TrainConfig, evaluate, train

EXIT_FLAGS, EXIT_IO, EXIT_SHAPE, EXIT_NONFINITE = 2, 3, 4, 5
SYNTHETIC = {"synthetic:cyclones": "regression", "synthetic:storms": "classification"}

log = logging.getLogger("attnscat")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _positive(name):
    def parse(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}")
        if value < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {value}")
        return value
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnscat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scatter", help="scattering coefficients of a tensor file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", "-J", type=_positive("--scales"), default=3)
    p.add_argument("--orients", "-L", type=_positive("--orients"), default=6)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--task", choices=["regression", "classification"], required=True)
    p.add_argument("--data", required=True, help="manifest CSV or synthetic:cyclones / synthetic:storms")
    p.add_argument("--n", type=_positive("--n"), default=None, help="training samples after subsampling")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=_positive("--epochs"), default=30)
    p.add_argument("--batch-size", type=_positive("--batch-size"), default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=_positive("--patience"), default=10)
    p.add_argument("--arch", choices=["scattering", "conv"], default="scattering")
    p.add_argument("--scales", "-J", type=_positive("--scales"), default=3)
    p.add_argument("--orients", "-L", type=_positive("--orients"), default=6)
    p.add_argument("--val-split", help="file of validation indices (manifest data only)")
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--history")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=_positive("--n"), default=200, help="synthetic test-set size")
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--split", help="file of sample indices to evaluate (manifest data only)")
    p.add_argument("--metrics-out")

    p = sub.add_parser("explain", help="attention maps or integrated gradients for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="tensor file of shape (C, H, W), raw units")
    p.add_argument("--method", choices=["ig", "attention"], default="ig")
    p.add_argument("--steps", type=_positive("--steps"), default=64)
    p.add_argument("--out", required=True)
    return parser


# -- helpers ------------------------------------------------------------------
def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, f"no such file: {p}")
    return p


def _load_tensor(path) -> np.ndarray:
    try:
        return load_tensor_file(_require_file(path))
    except TensorFileError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}")


def _synthetic(name: str, n: int, seed: int, split: str) -> Dataset:
    ds = gen_synthetic_cyclones(n, seed) if name == "synthetic:cyclones" else gen_synthetic_storms(n, seed)
    ds.split = split
    return ds


def _subsample(ds: Dataset, n: int | None, seed: int) -> Dataset:
    if n is None or n >= len(ds):
        return ds
    return subsample_tc(ds, n, seed) if ds.task == "regression" else subsample_stratified(ds, n, seed)


def _training_data(args) -> tuple[Dataset, Dataset]:
    if args.data in SYNTHETIC:
        if SYNTHETIC[args.data] != args.task:
            raise CliError(EXIT_FLAGS, f"{args.data} is a {SYNTHETIC[args.data]} dataset")
        n = args.n or 500
        pool = _synthetic(args.data, n + n // 4, args.seed, "train")
        val = _synthetic(args.data, max(50, n // 5), args.seed + 1000, "val")
        return _subsample(pool, n, args.seed), val
    full = load_manifest(_require_file(args.data), args.task)
    rng = np.random.default_rng(args.seed)
    if args.val_split:
        val_idx = read_split_file(_require_file(args.val_split))
    else:
        val_idx = rng.permutation(len(full))[: max(1, len(full) // 5)]
    train_idx = np.setdiff1d(np.arange(len(full)), val_idx)
    train_set = full.subset(train_idx, "train")
    return _subsample(train_set, args.n, args.seed), full.subset(val_idx, "val")


def _stats_from(extra: dict[str, str]) -> NormalizationStats:
    return NormalizationStats.from_dict(extra)


# -- commands -----------------------------------------------------------------
def cmd_scatter(args) -> int:
    x = _load_tensor(args.input)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise CliError(EXIT_SHAPE, f"expected (C, H, W) or (B, C, H, W) input, got {x.shape}")
    H, W = x.shape[-2:]
    try:
        bank = build_morlet_bank(args.scales, args.orients, H, W)
    except ValueError as exc:
        raise CliError(EXIT_SHAPE, str(exc))
    values = scatter_numpy(x, bank)
    if squeeze:
        values = values[0]
    out = Path(args.out)
    save_tensor_file(out, values)
    write_path_table(str(out) + ".paths.csv", path_table(bank.J, bank.L))
    print(f"wrote {out} shape={tuple(values.shape)}")
    return 0


def cmd_train(args) -> int:
    train_set, val_set = _training_data(args)
    C, H, W = train_set.x.shape[1:]
    try:
        config = ModelConfig(task=args.task, C=C, H=H, W=W, J=args.scales, L=args.orients,
                             arch=args.arch, seed=args.seed)
        model = build_model(config)
    except ValueError as exc:
        raise CliError(EXIT_SHAPE, str(exc))
    stats = train_set.fit_stats()
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       patience=args.patience, task=args.task)
    history = train(model, train_set, val_set, tcfg, stats)
    save_checkpoint(args.out_ckpt, model, stats.to_dict())
    if args.history:
        history.write_csv(args.history)
    last = history.split_rows("val")[-1]
    print(json.dumps({"epochs": history.epochs_completed, "best_epoch": history.best_epoch,
                      "val": {k: v for k, v in last.items() if k not in ("epoch", "split")}}))
    return 0


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(_require_file(args.ckpt))
    stats = _stats_from(extra)
    task = model.config.task
    if args.data in SYNTHETIC:
        if SYNTHETIC[args.data] != task:
            raise CliError(EXIT_FLAGS, f"{args.data} does not match checkpoint task {task}")
        ds = _synthetic(args.data, args.n, args.seed, "test")
    else:
        ds = load_manifest(_require_file(args.data), task, "test")
        if args.split:
            ds = ds.subset(read_split_file(_require_file(args.split)), "test")
    try:
        model.check_input(ds.x.shape)
    except ValueError as exc:
        raise CliError(EXIT_SHAPE, str(exc))
    feats = model.featurize(ds.normalized_inputs(stats))
    metrics = evaluate(model, feats, ds.normalized_targets(stats), task, stats)
    metrics["n"] = len(ds)
    text = json.dumps(metrics)
    print(text)
    if args.metrics_out:
        atomic_write_text(args.metrics_out, text + "\n")
    return 0


def cmd_explain(args) -> int:
    model, extra = load_checkpoint(_require_file(args.ckpt))
    stats = _stats_from(extra)
    x = _load_tensor(args.input)
    cfg = model.config
    if x.shape != (cfg.C, cfg.H, cfg.W):
        raise CliError(EXIT_SHAPE, f"expected input ({cfg.C}, {cfg.H}, {cfg.W}), got {x.shape}")
    x = minmax_normalize(x.astype(np.float32), stats.band_lo.reshape(-1, 1, 1), stats.band_hi.reshape(-1, 1, 1))
    out = Path(args.out)
    if args.method == "ig":
        attr = model_integrated_gradients(model, x, steps=args.steps)
        save_tensor_file(out, attr.scores.astype(np.float32))
        summary = {"method": attr.method, "arch": cfg.arch, "steps": args.steps, "f_x": attr.f_x,
                   "f_baseline": attr.f_baseline, "residual": attr.residual,
                   "relative_residual": attr.relative_residual}
        atomic_write_text(str(out) + ".json", json.dumps(summary) + "\n")
        print(f"completeness residual: {attr.residual:.6g} "
              f"({100 * attr.relative_residual:.4f}% of |f(x) - f(0)|)")
        return 0
    if cfg.arch != "scattering":
        raise CliError(EXIT_FLAGS, "attention maps need a scattering checkpoint")
    overlay, disk = attention_maps(model, x)
    save_tensor_file(out, overlay.astype(np.float32))
    disk.write_csv(str(out) + ".disk.csv")
    print(f"wrote {out} shape={overlay.shape} and {out}.disk.csv")
    return 0


COMMANDS = {"scatter": cmd_scatter, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "lr", 1.0) <= 0:
        parser.error("--lr must be > 0")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        if exc.code == EXIT_FLAGS:
            parser.print_usage(sys.stderr)
        print(f"attnscat: error: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"attnscat: non-finite values: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (OSError, TensorFileError) as exc:
        print(f"attnscat: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"attnscat: shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
