"""Command-line interface: ``cdslice <command> [options]``.

Commands: scan, preprocess, train, eval, predict, sensitivity, report, synth,
gradcheck. Settings resolve as built-in defaults, then ``--config`` (JSON),
then command-line flags; commands that write files archive the resolved
settings as ``run_config.json`` next to their outputs.

Exit codes: 0 success, 1 a check failed, 2 bad input or usage, 3 some
samples failed (preprocess).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .dataio import (
    build_synthetic_dataset,
    dataset_stats,
    load_manifest,
    load_slice_dataset,
    resolve_m_max,
)
from .errors import CapacityError, CdSliceError
from .geometry import SliceConfig, bin_edges, read_cloud, save_slices, slice_point_cloud
from .metrics import DEFAULT_HIST_WIDTH, compute_metrics
from .model import ModelConfig, init_params, load_params, predict, save_params, slice_sensitivity
from .plotting import plot_error_histogram, plot_loss_curve, plot_scatter, plot_sensitivity, plot_val_r2
from .training import TrainConfig, TrainLog, evaluate, gradcheck_model, standardized_config, train

log = logging.getLogger("cdslice")

CACHE_ENV = "CDSLICE_CACHE_DIR"

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "precision": "f32",
    "slice": {"n_slices": 80, "m_max": None, "strict": True, "normalization": "none"},
    "model": {
        "width_scale": 1.0,
        "point_channels": None,
        "hidden": None,
        "head_channels": None,
        "lstm_layers": 2,
        "lstm_dropout": 0.2,
        "head_dropout": 0.3,
        "lstm_biases": 2,
        "pool_padding": False,
        "standardize_targets": False,
    },
    "train": {
        f.name: f.default for f in fields(TrainConfig) if f.name not in ("seed", "checkpoint_dir")
    },
}


class UsageError(CdSliceError):
    pass


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise UsageError(f"unknown configuration key {where}{key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"configuration key {where}{key!r} must be an object")
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults < config file < flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        cfg = _merge(cfg, data)
    flag_map = {
        "seed": ("seed",),
        "threads": ("threads",),
        "precision": ("precision",),
        "slices": ("slice", "n_slices"),
        "m_max": ("slice", "m_max"),
        "normalization": ("slice", "normalization"),
        "width_scale": ("model", "width_scale"),
        "hidden": ("model", "hidden"),
        "lstm_dropout": ("model", "lstm_dropout"),
        "head_dropout": ("model", "head_dropout"),
        "epochs": ("train", "epochs"),
        "lr": ("train", "learning_rate"),
        "batch_size": ("train", "batch_size"),
        "clip_norm": ("train", "clip_norm"),
    }
    for flag, path in flag_map.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        target = cfg
        for key in path[:-1]:
            target = target[key]
        target[path[-1]] = value
    if getattr(args, "lenient", False):
        cfg["slice"]["strict"] = False
    if getattr(args, "standardize_targets", False):
        cfg["model"]["standardize_targets"] = True
    return cfg


def slice_config(cfg: dict, m_max: int | None = None) -> SliceConfig:
    s = cfg["slice"]
    return SliceConfig(s["n_slices"], m_max if m_max is not None else s["m_max"], s["strict"], s["normalization"])


def model_config(cfg: dict, m_max: int) -> ModelConfig:
    m = cfg["model"]
    overrides = {
        k: m[k] for k in ("lstm_layers", "lstm_dropout", "head_dropout", "lstm_biases", "pool_padding")
    }
    for k in ("point_channels", "hidden", "head_channels"):
        if m[k] is not None:
            overrides[k] = tuple(m[k]) if isinstance(m[k], list) else m[k]
    return ModelConfig.scaled(m["width_scale"], n_slices=cfg["slice"]["n_slices"], m_max=m_max, **overrides)


def train_config(cfg: dict, checkpoint_dir: str | None) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], checkpoint_dir=checkpoint_dir, **cfg["train"])


def write_run_config(cfg: dict, out_dir: Path, command: str, **extra) -> None:
    record = {"command": command, "version": __version__, **cfg, **extra}
    (out_dir / "run_config.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


# ------------------------------------------------------------ commands


def cmd_scan(args, cfg) -> int:
    manifest = load_manifest(args.manifest)
    stats = dataset_stats(manifest, cfg["slice"]["n_slices"])
    lines = [f"M_max: {stats['m_max']}  (S = {stats['n_slices']})"]
    for name, entry in stats["splits"].items():
        if entry["count"]:
            lines.append(
                f"{name:>5}: {entry['count']:5d} samples  Cd min {entry['cd_min']:.5f}"
                f"  mean {entry['cd_mean']:.5f}  max {entry['cd_max']:.5f}"
            )
        else:
            lines.append(f"{name:>5}:     0 samples")
    emit(args, stats, "\n".join(lines))
    return 0


def _cache_dir(args, manifest_path: Path) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    return manifest_path.parent / "slice_cache"


def cmd_preprocess(args, cfg) -> int:
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    S = cfg["slice"]["n_slices"]
    m_max = cfg["slice"]["m_max"] or resolve_m_max(manifest, S)
    sc = slice_config(cfg, m_max)
    out = _cache_dir(args, manifest_path)
    out.mkdir(parents=True, exist_ok=True)

    def work(row):
        try:
            slices = slice_point_cloud(read_cloud(row.cloud_path, row.sample_id), sc)
        except CapacityError as exc:
            return row, None, str(exc)
        path = out / f"{row.sample_id}.slct"
        save_slices(slices, path)
        return row, path, None

    with ThreadPoolExecutor(max(1, cfg["threads"])) as pool:
        results = list(pool.map(work, manifest.rows))
    failures = [(row.sample_id, err) for row, _, err in results if err]
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "path", "cd", "split"])
        for row, path, err in results:
            if path is not None:
                w.writerow([row.sample_id, path.name, repr(row.cd), row.split])
    write_run_config(cfg, out, "preprocess", manifest=str(manifest_path.resolve()), resolved_m_max=m_max)
    payload = {
        "out_dir": str(out),
        "shape": [S, m_max, 2],
        "written": len(results) - len(failures),
        "failed": [{"id": sid, "error": err} for sid, err in failures],
    }
    text = [f"wrote {payload['written']} slice files of shape ({S}, {m_max}, 2) to {out}"]
    for sid, err in failures:
        text.append(f"FAILED {sid}: {err}")
    emit(args, payload, "\n".join(text))
    if failures:
        print(f"{len(failures)} sample(s) failed: {', '.join(s for s, _ in failures)}", file=sys.stderr)
        return 3
    return 0


def cmd_train(args, cfg) -> int:
    manifest = load_manifest(args.manifest)
    S = cfg["slice"]["n_slices"]
    m_max = cfg["slice"]["m_max"] or resolve_m_max(manifest, S)
    sc = slice_config(cfg, m_max)
    mc = model_config(cfg, m_max)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set = load_slice_dataset(manifest.split("train"), sc)
    val_set = load_slice_dataset(manifest.split("val"), sc)
    if cfg["model"]["standardize_targets"]:
        mc = standardized_config(mc, train_set.targets)
    if args.init_from:
        params = load_params(args.init_from, expect=mc)
    else:
        params = init_params(mc, cfg["seed"])
    tc = train_config(cfg, str(out))
    write_run_config(cfg, out, "train", manifest=str(Path(args.manifest).resolve()), resolved_m_max=m_max, model=asdict(mc))
    best, logbook = train(train_set, val_set, params, tc)
    logbook.write_csv(out / "train_log.csv")
    if not logbook.epochs:
        save_params(best, out / "best.cdpm")
    payload = {
        "out_dir": str(out),
        "epochs": len(logbook.epochs),
        "best_epoch": logbook.best_epoch,
        "best_val_r2": max((r.val_r2 for r in logbook.epochs), default=None),
    }
    emit(args, payload, f"trained {payload['epochs']} epochs; best epoch {payload['best_epoch']} "
                        f"(val R2 {payload['best_val_r2']}); outputs in {out}")
    return 0


def cmd_eval(args, cfg) -> int:
    params = load_params(args.checkpoint)
    manifest = load_manifest(args.manifest)
    rows = manifest.split(args.split)
    sc = SliceConfig(params.config.n_slices, params.config.m_max, strict=False, normalization=cfg["slice"]["normalization"])
    dataset = load_slice_dataset(rows, sc)
    report = evaluate(dataset, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "metrics.json")
    report.write_samples_csv(out / "predictions.csv", dataset.ids)
    report.write_histogram_csv(out / "error_hist.csv")
    write_run_config(cfg, out, "eval", checkpoint=str(Path(args.checkpoint).resolve()), split=args.split)
    r2 = "undefined" if report.r_squared is None else f"{report.r_squared:.6f}"
    emit(args, report.summary(),
         f"{args.split}: n={report.n}  MSE={report.mse:.6e}  MAE={report.mae:.6e}  MaxAE={report.max_ae:.6e}  R2={r2}")
    return 0


def cmd_predict(args, cfg) -> int:
    params = load_params(args.checkpoint)
    cloud = read_cloud(args.cloud)
    sc = SliceConfig(params.config.n_slices, params.config.m_max, strict=False, normalization=cfg["slice"]["normalization"])
    t0 = time.perf_counter()
    slices = slice_point_cloud(cloud, sc)
    t1 = time.perf_counter()
    cd = predict(slices, params)
    t2 = time.perf_counter()
    payload = {"cd": cd, "slicing_ms": (t1 - t0) * 1e3, "forward_ms": (t2 - t1) * 1e3, "n_points": cloud.n_points}
    emit(args, payload,
         f"Cd: {cd:.6f}\nlatency: slicing {payload['slicing_ms']:.2f} ms, forward {payload['forward_ms']:.2f} ms")
    return 0


def cmd_sensitivity(args, cfg) -> int:
    params = load_params(args.checkpoint)
    cloud = read_cloud(args.cloud)
    sc = SliceConfig(params.config.n_slices, params.config.m_max, strict=False, normalization=cfg["slice"]["normalization"])
    slices = slice_point_cloud(cloud, sc)
    deltas = slice_sensitivity(slices, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edges = bin_edges(*cloud.x_range, sc.n_slices)
    with open(out / "sensitivity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "x_lo", "x_hi", "points", "delta_cd"])
        for i, d in enumerate(deltas.tolist()):
            w.writerow([i, repr(float(edges[i])), repr(float(edges[i + 1])), int(slices.counts[i]), repr(d)])
    plot_sensitivity(deltas, out / "sensitivity.svg")
    write_run_config(cfg, out, "sensitivity", checkpoint=str(Path(args.checkpoint).resolve()), cloud=str(args.cloud))
    top = int(np.argmax(np.abs(deltas)))
    emit(args, {"deltas": deltas.tolist(), "most_influential": top},
         f"wrote {len(deltas)} slice deltas to {out}; largest |dCd| at slice {top} ({deltas[top]:+.6f})")
    return 0


def _read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"true", "predicted"} <= set(reader.fieldnames):
            raise UsageError(f"{path} lacks 'true'/'predicted' columns")
        pairs = [(float(r["true"]), float(r["predicted"])) for r in reader]
    if not pairs:
        raise UsageError(f"{path} holds no samples")
    arr = np.array(pairs)
    return arr[:, 0], arr[:, 1]


def cmd_report(args, cfg) -> int:
    logbook = TrainLog.read_csv(args.train_log)
    truths, preds = _read_predictions(Path(args.eval_csv))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    epochs = [r.epoch for r in logbook.epochs]
    plot_loss_curve(epochs, [r.train_loss for r in logbook.epochs], out / "loss_curve.svg")
    plot_val_r2(epochs, [r.val_r2 for r in logbook.epochs], out / "val_r2.svg", logbook.best_epoch)
    plot_scatter(truths, preds, out / "scatter.svg")
    plot_error_histogram(preds - truths, out / "error_hist.svg", args.bin_width)
    report = compute_metrics(truths, preds, args.bin_width)
    report.write_histogram_csv(out / "error_hist.csv")
    write_run_config(cfg, out, "report", train_log=str(args.train_log), eval_csv=str(args.eval_csv), bin_width=args.bin_width)
    files = ["loss_curve.svg", "val_r2.svg", "scatter.svg", "error_hist.svg"]
    emit(args, {"out_dir": str(out), "figures": files, "best_epoch": logbook.best_epoch},
         f"wrote {', '.join(files)} to {out}")
    return 0


def cmd_synth(args, cfg) -> int:
    from .dataio import SpecRanges

    ranges = SpecRanges(n_points=args.points) if args.points else SpecRanges()
    out = Path(args.out)
    manifest = build_synthetic_dataset(args.n_bodies, out, seed=cfg["seed"], ranges=ranges, threads=cfg["threads"])
    write_run_config(cfg, out, "synth", n_bodies=args.n_bodies, ranges=asdict(ranges))
    counts = {name: len(manifest.split(name)) for name in ("train", "val", "test")}
    cds = np.array([r.cd for r in manifest.rows])
    emit(args, {"out_dir": str(out), "splits": counts, "cd_mean": float(cds.mean()), "cd_std": float(cds.std())},
         f"wrote {len(manifest)} bodies to {out} (train {counts['train']}, val {counts['val']}, test {counts['test']}); "
         f"Cd mean {cds.mean():.4f}, std {cds.std():.4f}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    mc = ModelConfig(
        n_slices=args.slices or 4,
        m_max=args.m_max or 8,
        point_channels=tuple(int(c) for c in args.channels.split(",")),
        hidden=args.hidden or 8,
        head_channels=tuple(int(c) for c in args.head.split(",")),
    )
    with ad.precision(args.precision or "f64"):
        report = gradcheck_model(mc, seed=cfg["seed"], epsilon=args.epsilon, tolerance=args.tolerance)
    payload = {
        "passed": report.passed,
        "max_rel_error": report.max_rel_error,
        "sections": [asdict(s) for s in report.sections],
    }
    emit(args, payload, report.format_table())
    return 0 if report.passed else 1


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with settings")
    g.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="workers for preprocess/synth")
    g.add_argument("--precision", choices=("f32", "f64"), default=argparse.SUPPRESS)
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="cdslice", description="Slice-based drag coefficient surrogate.", parents=[common])
    parser.add_argument("--version", action="version", version=f"cdslice {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(func=func)
        return p

    def slicing(p):
        p.add_argument("--slices", type=int, help="number of slices S")
        p.add_argument("--m-max", dest="m_max", type=int, help="points per slice (default: scan the data)")
        p.add_argument("--normalization", choices=("none", "per_car_center_scale"))

    p = add("scan", cmd_scan, "report M_max and per-split statistics")
    p.add_argument("manifest")
    slicing(p)

    p = add("preprocess", cmd_preprocess, "write slice caches for every sample")
    p.add_argument("manifest")
    p.add_argument("--out", help=f"cache directory (default: ${CACHE_ENV} or <manifest dir>/slice_cache)")
    p.add_argument("--lenient", action="store_true", help="thin overfull slices instead of failing")
    slicing(p)

    p = add("train", cmd_train, "train a model")
    p.add_argument("manifest", help="manifest of clouds or of slice caches")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--width-scale", dest="width_scale", type=float, help="multiply all channel widths")
    p.add_argument("--hidden", type=int)
    p.add_argument("--init-from", dest="init_from", help="start from this checkpoint")
    p.add_argument("--lstm-dropout", dest="lstm_dropout", type=float, help="dropout between LSTM layers")
    p.add_argument("--head-dropout", dest="head_dropout", type=float, help="dropout in the regressor")
    p.add_argument("--standardize-targets", dest="standardize_targets", action="store_true",
                   help="fit on (cd - mean) / std of the training labels")
    p.add_argument("--lenient", action="store_true")
    slicing(p)

    p = add("eval", cmd_eval, "score a checkpoint on one split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)

    p = add("predict", cmd_predict, "predict Cd for one point cloud")
    p.add_argument("checkpoint")
    p.add_argument("cloud")

    p = add("sensitivity", cmd_sensitivity, "per-slice occlusion sensitivity")
    p.add_argument("checkpoint")
    p.add_argument("cloud")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "render training and test figures")
    p.add_argument("train_log")
    p.add_argument("eval_csv", help="predictions.csv written by eval")
    p.add_argument("--out", required=True)
    p.add_argument("--bin-width", dest="bin_width", type=float, default=DEFAULT_HIST_WIDTH)

    p = add("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("n_bodies", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, help="points per body")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of model gradients")
    p.add_argument("--slices", type=int)
    p.add_argument("--m-max", dest="m_max", type=int)
    p.add_argument("--channels", default="2,4,8,16")
    p.add_argument("--hidden", type=int)
    p.add_argument("--head", default="8,4")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("json", False), ("verbose", False), ("config", None), ("seed", None), ("threads", None), ("precision", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gradcheck":
            return args.func(args, cfg)
        with ad.precision(cfg["precision"]):
            return args.func(args, cfg)
    except (CdSliceError, OSError) as exc:
        print(f"cdslice {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
