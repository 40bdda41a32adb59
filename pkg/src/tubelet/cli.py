"""Command-line interface: gen-data, train, eval, reconstruct, protocol.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import config as cfg
from . import dataio, datasim
from . import model as mdl
from . import objectives as obj
from . import trainer
from .errors import ConfigError, DataError, NumericalError, TubeletError

THREADS_ENV = "TUBELET_THREADS"


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n <= 0:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_config(args, **overrides):
    return cfg.with_overrides(cfg.load(args.config), **overrides)


def _read_data(path):
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")
    return dataio.load_dataset(path)


def _read_checkpoint(path):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    return dataio.load_checkpoint(path)


def _split_idx(dataset, split):
    return {"train": dataset.train_idx, "val": dataset.val_idx,
            "all": np.arange(len(dataset))}[split]


# -- gen-data --------------------------------------------------------------

def cmd_gen_data(args):
    rc = _load_config(args, **{
        "data.seed": args.seed, "data.n_samples": args.n_samples, "data.clouds": args.clouds,
        "data.cloud_size": args.cloud_size, "data.H": args.height, "data.W": args.width,
        "data.include_sar": False if args.no_sar else None,
    })
    d = rc.data
    ds = datasim.make_dataset(d.seed, d.n_samples, d.H, d.W, d.clouds, d.cloud_size, T=d.T,
                              n_classes=d.n_classes, include_sar=d.include_sar)
    out = args.out or os.path.join(rc.out_dir, "data.rstk")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    dataio.write_container(out, ds)
    meta = dataio.write_sidecar(out, ds)
    frac = ds.mask.mean(axis=(1, 2, 3))
    print(f"wrote {len(ds)} samples ({meta['n_train']} train / {meta['n_val']} val) to {out}; "
          f"clouds {d.clouds}; masked fraction mean {frac.mean():.4f} min {frac.min():.4f} "
          f"max {frac.max():.4f}; digest {meta['digest'][:16]}")
    return 0


# -- train -----------------------------------------------------------------

def write_loss_log(path, result, train_config):
    val = {row["epoch"]: row for row in result.val_log}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss", "val_mse", "val_ssim"])
        for i, loss in enumerate(result.losses):
            v = val.get(i + 1)
            w.writerow([i + 1, repr(trainer.lr_at(i, train_config)), repr(loss),
                        repr(v["mse"]) if v else "", repr(v["ssim"]) if v else ""])


def cmd_train(args):
    dataset = _read_data(args.data)
    rc = _load_config(args, **{
        "model.variant": args.variant, "train.epochs": args.epochs,
        "train.batch_size": args.batch_size, "train.lr": args.lr, "train.seed": args.seed,
        "out_dir": args.out,
    })
    T, _, H, W = dataset.target.shape[1:]
    resume = None
    if args.resume:
        ckpt = _read_checkpoint(args.resume)
        mc, tc, lc = ckpt.model_config, ckpt.train_config, ckpt.loss_config
        if args.epochs is not None:
            tc = trainer.TrainConfig(**{**tc.to_dict(), "epochs": args.epochs})
        resume = dataio.as_train_result(ckpt)
    else:
        mc = rc.model_config(T=T, H=H, W=W)
        tc, lc = rc.train_config(), rc.loss_config()
    os.makedirs(rc.out_dir, exist_ok=True)
    ckpt_path = os.path.join(rc.out_dir, "checkpoint.tblt")
    progress = None if args.quiet else print
    result = trainer.train(dataset, mc, tc, lc, resume=resume, checkpoint_path=ckpt_path,
                           progress=progress, stop_after=args.stop_after)
    write_loss_log(os.path.join(rc.out_dir, "losses.csv"), result, tc)
    with open(os.path.join(rc.out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({"model": mc.to_dict(), "train": tc.to_dict(), "variant": trainer.variant_name(mc)},
                  fh, indent=2)
    print(f"trained {trainer.variant_name(mc)} for {result.epoch} epochs; final loss "
          f"{result.losses[-1]:.6f}; checkpoint {ckpt_path}")
    return 0


# -- eval ------------------------------------------------------------------

def _maybe_remask(dataset, clouds):
    if clouds is None or clouds == dataset.meta.get("clouds"):
        return dataset
    if not dataset.sample_seeds:
        raise DataError("re-masking needs the sample seeds from the dataset sidecar JSON")
    return datasim.remask(dataset, clouds)


def cmd_eval(args):
    dataset = _maybe_remask(_read_data(args.data), args.clouds)
    idx = _split_idx(dataset, args.split)
    clouds = dataset.meta.get("clouds", "-")
    report = obj.MetricsReport()
    if args.identity:
        metrics = obj.evaluate_all(dataset.target[idx], dataset.target[idx], dataset.mask[idx])
        report.add("identity", clouds, "-", args.split, metrics)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint unless --identity is given")
        ckpt = _read_checkpoint(args.checkpoint)
        trainer.check_compatible(dataset, ckpt.model_config)
        metrics = trainer.evaluate(ckpt.params, ckpt.model_config, dataset, idx)
        name = mdl.DISPLAY_NAMES[trainer.variant_name(ckpt.model_config)]
        report.add(name, clouds, ckpt.train_config.seed, args.split, metrics)
    for row in report.rows:
        for key in obj.REPORT_COLUMNS[4:]:
            if not np.isfinite(row[key]) and not key.startswith("masked"):
                raise NumericalError(f"metric {key} is not finite")
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    report.to_csv(os.path.join(out, "metrics.csv"))
    report.to_json(os.path.join(out, "metrics.json"))
    print(report.render())
    return 0


# -- reconstruct -----------------------------------------------------------

def cmd_reconstruct(args):
    dataset = _read_data(args.data)
    if not 0 <= args.sample < len(dataset):
        raise ConfigError(f"--sample {args.sample} out of range for {len(dataset)} samples")
    i = args.sample
    bands = tuple(args.bands)
    dataio.check_bands(bands, dataset.target.shape[2])
    if args.identity:
        recon = dataset.target[i]
    else:
        if not args.checkpoint:
            raise ConfigError("reconstruct needs --checkpoint unless --identity is given")
        ckpt = _read_checkpoint(args.checkpoint)
        trainer.check_compatible(dataset, ckpt.model_config)
        recon = trainer.predict(ckpt.params, ckpt.model_config, dataset, [i])[0]
    if not np.all(np.isfinite(recon)):
        raise NumericalError("reconstruction contains non-finite values")
    error = (recon.astype(np.float64) - dataset.target[i])[:, list(bands)].mean(axis=1)
    limit = float(np.abs(error).max())
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    written = 0
    for k in range(dataset.target.shape[1]):
        stem = os.path.join(out, f"sample{i:03d}_t{k}")
        dataio.write_png(dataset.msi_clouded[i, k], bands, f"{stem}_input.png", args.gain)
        dataio.write_png(recon[k], bands, f"{stem}_recon.png", args.gain)
        dataio.write_error_png(error[k], f"{stem}_error.png", limit)
        dataio.write_png(dataset.target[i, k], bands, f"{stem}_target.png", args.gain)
        written += 4
    print(f"wrote {written} PNGs for sample {i} to {out}")
    return 0


# -- protocol --------------------------------------------------------------

def cmd_protocol(args):
    rc = _load_config(args, **{"train.epochs": args.epochs, "data.n_samples": args.n_samples})
    m = rc.model
    overrides = {"T": rc.data.T, "k_s": m.k_s, "d_e": m.d_e, "depth": m.depth, "heads": m.heads,
                 "ff_dim": m.ff_dim, "use_mask_channel": m.use_mask_channel}
    cells, table = trainer.run_protocol(
        args.variants, tuple(args.clouds), tuple(args.seeds), rc.data.seed, rc.data.n_samples,
        rc.data.H, rc.data.W, rc.data.cloud_size, overrides, rc.train_config(), rc.loss_config(),
        progress=None if args.quiet else print,
    )
    out = args.out or rc.out_dir
    os.makedirs(out, exist_ok=True)
    cells.to_csv(os.path.join(out, "cells.csv"))
    cells.to_json(os.path.join(out, "cells.json"))
    table.to_csv(os.path.join(out, "table.csv"))
    table.to_json(os.path.join(out, "table.json"))
    print(table.render())
    return 0


# -- parser ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="tubelet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset container")
    g.add_argument("--config", help="run config JSON")
    g.add_argument("--out", help="container path (default <out_dir>/data.rstk)")
    g.add_argument("--seed", type=int, help="dataset seed")
    g.add_argument("--n-samples", type=int, help="number of scenes")
    g.add_argument("--clouds", type=int, help="artificial clouds per sequence")
    g.add_argument("--cloud-size", type=float, help="cloud size in (0, 1]")
    g.add_argument("--height", type=int, help="scene height in pixels")
    g.add_argument("--width", type=int, help="scene width in pixels")
    g.add_argument("--no-sar", action="store_true", help="omit SAR entries")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model variant on a container")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--data", required=True, help="dataset container")
    t.add_argument("--out", help="output directory (default out_dir from config)")
    t.add_argument("--variant", choices=mdl.VARIANTS, help="model variant")
    t.add_argument("--epochs", type=int, help="total epochs")
    t.add_argument("--batch-size", type=int, help="batch size")
    t.add_argument("--lr", type=float, help="initial learning rate")
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop after this many completed epochs")
    t.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics report")
    e.add_argument("--checkpoint", help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset container")
    e.add_argument("--out", help="output directory for metrics.csv and metrics.json")
    e.add_argument("--split", choices=("val", "train", "all"), default="val", help="samples to score")
    e.add_argument("--clouds", type=int, help="re-mask the scenes with this many clouds")
    e.add_argument("--identity", action="store_true", help="score the target against itself")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reconstruct", help="write per-timestep PNGs for one sample")
    r.add_argument("--checkpoint", help="checkpoint file")
    r.add_argument("--data", required=True, help="dataset container")
    r.add_argument("--sample", type=int, default=0, help="sample index")
    r.add_argument("--out", help="output directory")
    r.add_argument("--bands", type=int, nargs=3, default=list(dataio.NATURAL_COLOR),
                   metavar=("R", "G", "B"), help="band indices for the RGB composite")
    r.add_argument("--gain", type=float, default=1.0, help="brightness multiplier before clamping")
    r.add_argument("--identity", action="store_true", help="use the target as the reconstruction")
    r.set_defaults(func=cmd_reconstruct)

    pr = sub.add_parser("protocol", help="train and score every variant x clouds x seed cell")
    pr.add_argument("--config", help="run config JSON")
    pr.add_argument("--out", help="output directory")
    pr.add_argument("--variants", nargs="+", choices=mdl.VARIANTS, default=list(mdl.VARIANTS))
    pr.add_argument("--clouds", type=int, nargs="+", default=[20, 30], help="cloud counts")
    pr.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="training seeds")
    pr.add_argument("--epochs", type=int, help="epochs per cell")
    pr.add_argument("--n-samples", type=int, help="scenes per dataset")
    pr.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    pr.set_defaults(func=cmd_protocol)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except TubeletError as exc:
        msg = " ".join(str(exc).split())
        print(f"tubelet {args.command}: error: {msg}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"tubelet {args.command}: error: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
