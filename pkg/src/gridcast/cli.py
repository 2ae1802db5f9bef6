"""Command-line interface: the batch, non-interactive pipeline driver.

Subcommands: synth, ingest, train, tune, evaluate, predict-map, xsection.
Every output file gets a .meta.json provenance sidecar carrying the
resolved configuration hash, seeds and package version; rerunning a
command with the same configuration reproduces identical outputs.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    Observation,
    build_dataset,
    read_observations,
    write_manifest,
    write_observations,
)
from .errors import DataError, GridcastError, NumericError
from .grid import read_raster, write_raster
from .metrics import evaluate
from .model import build_network, describe, describe_json
from .nn import param_count
from .predict import cross_section, nearby_observations, predict_map
from .synth import make_world, sample_observations
from .train import TrainConfig, train, tune_dropout

logger = logging.getLogger(__name__)

_XSECTION_HEADER = ["northing", "mean", "epi_lo", "epi_hi", "tot_lo", "tot_hi"]


# ---------------------------------------------------------------------------
# Provenance
# ---------------------------------------------------------------------------


def _resolved_config(args: argparse.Namespace) -> dict:
    cfg = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "config"):
            continue
        if isinstance(value, Path):
            value = str(value)
        cfg[key] = value
    return cfg


def _write_sidecar(out_path, args, extra: dict | None = None) -> None:
    cfg = _resolved_config(args)
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    sidecar = {
        "tool": "gridcast",
        "version": __version__,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "config": cfg,
    }
    if extra:
        sidecar.update(extra)
    with open(str(out_path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, columns: dict, header: list[str] | None = None) -> None:
    names = header or list(columns)
    rows = zip(*[np.asarray(columns[name]).tolist() for name in names])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# Shared input pipeline
# ---------------------------------------------------------------------------


def _apply_target_transform(observations, kind: str):
    if kind == "none":
        return observations, 0
    if kind != "log":
        raise DataError(f"unknown target transform {kind!r}")
    kept, dropped = [], 0
    for o in observations:
        if o.target > 0:
            kept.append(Observation(o.easting, o.northing, float(np.log(o.target))))
        else:
            dropped += 1
    if dropped:
        logger.info("target transform dropped %d non-positive values", dropped)
    return kept, dropped


def _load_observations(args):
    observations, n_na = read_observations(args.observations)
    observations, n_log = _apply_target_transform(observations, args.target_transform)
    if not observations:
        raise DataError("no usable observations after ingestion")
    return observations, n_na + n_log


def _build_dataset_from_args(args, raster, observations):
    return build_dataset(
        observations,
        raster,
        patch_size=args.patch_size,
        patch_cellsize=args.patch_cellsize,
        k=args.folds,
        seed=args.data_seed,
    )


def _parse_rates(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = make_world(args.seed, size=args.size, cellsize=args.cellsize,
                       noise_floor=args.noise_floor, noise_scale=args.noise_scale)
    observations = sample_observations(world, args.n_observations, args.seed + 1)
    raster_path = out / "raster.asc"
    obs_path = out / "observations.csv"
    write_raster(world.raster, raster_path)
    write_observations(observations, obs_path)
    _write_sidecar(raster_path, args)
    _write_sidecar(obs_path, args)
    values = world.raster.valid_values()
    print(f"world seed={args.seed} size={args.size} cellsize={args.cellsize:g}")
    print(f"terrain range [{values.min():.1f}, {values.max():.1f}], sd {values.std():.1f}")
    print(f"wrote {raster_path} and {obs_path} ({len(observations)} observations)")
    return 0


def _cmd_ingest(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raster = read_raster(args.raster)
    observations, dropped = _load_observations(args)
    result = _build_dataset_from_args(args, raster, observations)
    manifest_path = out / "manifest.csv"
    write_manifest(result.manifest, manifest_path)
    scaler_path = out / "scaler.json"
    with open(scaler_path, "w", encoding="utf-8") as fh:
        json.dump(result.scaler.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_sidecar(manifest_path, args)
    _write_sidecar(scaler_path, args)
    split = result.split
    print(f"ingested {len(observations)} observations "
          f"({dropped} dropped at read, {result.n_dropped} dropped at extraction)")
    print(f"folds: train {len(split.train)}, eval {len(split.eval)}, test {len(split.test)}")
    return 0


def _train_config(args, dropout_rate: float) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        max_epochs=args.max_epochs,
        patience=args.patience,
        dropout_rate=dropout_rate,
        seed=args.seed,
        eval_samples=args.eval_samples,
    )


def _checkpoint_meta(args, dropout_rate: float) -> dict:
    return {
        "data": {
            "patch_size": args.patch_size,
            "patch_cellsize": args.patch_cellsize,
            "folds": args.folds,
            "seed": args.data_seed,
            "target_transform": args.target_transform,
        },
        "train": {
            "batch_size": args.batch_size,
            "learning_rate": args.learning_rate,
            "max_epochs": args.max_epochs,
            "patience": args.patience,
            "eval_samples": args.eval_samples,
            "seed": args.seed,
            "dropout_rate": dropout_rate,
        },
    }


def _cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raster = read_raster(args.raster)
    observations, _ = _load_observations(args)
    result = _build_dataset_from_args(args, raster, observations)

    if len(args.head_units) != 2:
        raise DataError("--head-units needs two sizes, e.g. 256,128")
    spec, _ = build_network(
        dropout_rate=args.dropout_rate,
        conv_channels=args.conv_channels,
        branch_units=args.branch_units,
        head_units=tuple(args.head_units),
        patch_size=args.patch_size,
        dropout_conv_branch=not args.dropout_dense_only,
    )
    rates = _parse_rates(args.dropout_rates) if args.dropout_rates else [args.dropout_rate]

    if len(rates) > 1:
        tune_result = tune_dropout(spec, result.split, _train_config(args, rates[0]), rates)
        weights, log = tune_result.best_weights, tune_result.best_log
        best_rate = tune_result.best_rate
        table_path = out / "tuning.csv"
        with open(table_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dropout_rate", "eval_nll", "error"])
            for rate in rates:
                writer.writerow([rate,
                                 repr(tune_result.scores.get(rate, float("nan"))),
                                 tune_result.errors.get(rate, "")])
        _write_sidecar(table_path, args)
        print(f"tuned dropout rate: {best_rate:g} (eval NLL {tune_result.best_score:.5f})")
    else:
        best_rate = rates[0]
        weights, log = train(spec, result.split, _train_config(args, best_rate))

    spec = dataclasses.replace(spec, dropout_rate=best_rate)
    ckpt_path = out / "checkpoint.gcw"
    save_checkpoint(ckpt_path, spec, weights, result.scaler,
                    meta=_checkpoint_meta(args, best_rate))
    log_path = out / "trainlog.csv"
    log.to_csv(log_path)
    network_path = out / "network.json"
    network_path.write_text(describe_json(spec) + "\n", encoding="utf-8")
    _write_sidecar(ckpt_path, args, {"dropout_rate": best_rate})
    _write_sidecar(log_path, args)
    _write_sidecar(network_path, args)
    print(describe(spec))
    print(f"best epoch {log.best_epoch} (eval NLL {log.best_eval_nll:.5f}), "
          f"stopped: {log.stop_reason}")
    print(f"wrote {ckpt_path} ({param_count(spec)} parameters)")
    return 0


def _cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.checkpoint)
    raster = read_raster(args.raster)
    data_meta = ckpt.meta.get("data", {})
    args.patch_size = data_meta.get("patch_size", ckpt.spec.patch_size)
    args.patch_cellsize = data_meta.get("patch_cellsize")
    args.folds = data_meta.get("folds", args.folds)
    args.data_seed = data_meta.get("seed", args.data_seed)
    args.target_transform = data_meta.get("target_transform", args.target_transform)
    observations, _ = _load_observations(args)
    result = _build_dataset_from_args(args, raster, observations)

    fold = {"test": result.split.test, "eval": result.split.eval,
            "train": result.split.train}[args.fold]
    report = evaluate(ckpt.weights, ckpt.spec, fold, args.samples,
                      np.random.default_rng(args.seed), levels=args.levels)
    report.meta.update({"fold": args.fold, "seed": args.seed,
                        "dropout_rate": ckpt.spec.dropout_rate})

    report_path = out / "report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.summary_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    scores_path = out / "scores.csv"
    _write_csv(scores_path, report.table)
    scatter_path = out / "scatter.csv"
    _write_csv(scatter_path, {"observed": report.table["observed"],
                              "predicted_mean": report.table["predicted_mean"]})
    hist_path = out / "histogram.csv"
    pooled_kind = ["observed"] * report.n + ["predicted"] * report.y_samples.size
    pooled_value = np.concatenate([report.table["observed"], report.y_samples.ravel()])
    _write_csv(hist_path, {"kind": pooled_kind, "value": pooled_value})
    for p in (report_path, scores_path, scatter_path, hist_path):
        _write_sidecar(p, args, {"n_samples": args.samples})

    cov = " ".join(f"{int(level * 100)}%:{report.coverage[level]:.3f}"
                   for level in sorted(report.coverage))
    print(f"n={report.n} R2={report.r2:.4f} NLL={report.mean_nll:.5f} "
          f"CRPS={report.mean_crps:.5f}")
    print(f"coverage {cov}")
    return 0


def _cmd_predict_map(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.scaler is None:
        raise DataError("checkpoint has no scaler; cannot standardise queries")
    raster = read_raster(args.raster)
    if len(args.region) != 4:
        raise DataError("--region needs xmin,ymin,xmax,ymax")
    region = tuple(args.region)
    products = [p.strip() for p in args.products.split(",") if p.strip()]
    grids = predict_map(
        ckpt.weights, ckpt.spec, raster, ckpt.scaler, region,
        out_cellsize=args.cellsize, n_samples=args.samples, products=products,
        rng=np.random.default_rng(args.seed),
        patch_cellsize=ckpt.meta.get("data", {}).get("patch_cellsize"),
    )
    for name, grid in grids.items():
        path = out / (name.replace(":", "_") + ".asc")
        write_raster(grid, path)
        _write_sidecar(path, args, {
            "product": name,
            "n_samples": args.samples,
            "dropout_rate": ckpt.spec.dropout_rate,
        })
        print(f"wrote {path}")
    return 0


def _cmd_xsection(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.scaler is None:
        raise DataError("checkpoint has no scaler; cannot standardise queries")
    raster = read_raster(args.raster)
    columns = cross_section(
        ckpt.weights, ckpt.spec, raster, ckpt.scaler, args.easting,
        (args.from_northing, args.to_northing), args.step,
        n_samples=args.samples, rng=np.random.default_rng(args.seed),
        level=args.level,
        patch_cellsize=ckpt.meta.get("data", {}).get("patch_cellsize"),
    )
    _write_csv(out, columns, header=_XSECTION_HEADER)
    _write_sidecar(out, args, {"n_samples": args.samples,
                               "dropout_rate": ckpt.spec.dropout_rate})
    print(f"wrote {out} ({len(columns['northing'])} rows)")
    if args.observations is not None:
        observations, _ = _load_observations(args)
        overlay = nearby_observations(observations, args.easting, args.window)
        overlay_path = Path(str(out) + ".observations.csv")
        _write_csv(overlay_path, overlay)
        _write_sidecar(overlay_path, args)
        print(f"wrote {overlay_path} ({len(overlay['northing'])} observations)")
    return 0


# ---------------------------------------------------------------------------
# Parser construction
# ---------------------------------------------------------------------------


def _add_data_options(p, with_observations=True):
    p.add_argument("--raster", required=True, help="auxiliary grid (.asc)")
    if with_observations:
        p.add_argument("--observations", required=True, help="observations CSV")
    p.add_argument("--target-transform", choices=["none", "log"], default="none")
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--patch-cellsize", type=float, default=None,
                   help="patch cell size in metres (default: raster cellsize)")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--data-seed", type=int, default=0, help="fold assignment seed")


def _add_network_options(p):
    p.add_argument("--conv-channels", type=int, default=128)
    p.add_argument("--branch-units", type=int, default=512)
    p.add_argument("--head-units", type=lambda s: [int(t) for t in s.split(",")],
                   default=[256, 128])
    p.add_argument("--dropout-dense-only", action="store_true",
                   help="apply dropout only after dense layers")


def _add_train_options(p):
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--max-epochs", type=int, default=400)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--eval-samples", type=int, default=20)
    p.add_argument("--dropout-rate", type=float, default=0.1)
    p.add_argument("--dropout-rates", default=None,
                   help="comma-separated rates to tune over (overrides --dropout-rate)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridcast",
        description="Probabilistic interpolation from gridded auxiliary data",
    )
    parser.add_argument("--version", action="version", version=f"gridcast {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads for the whole run")
    parser.add_argument("--config", default=None,
                        help="flat key=value config file; flags win over file values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--cellsize", type=float, default=250.0)
    p.add_argument("--n-observations", type=int, default=4000)
    p.add_argument("--noise-floor", type=float, default=0.5)
    p.add_argument("--noise-scale", type=float, default=0.3)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ingest", help="validate inputs and write the fold manifest")
    _add_data_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ingest)

    for name, help_text in (("train", "train a model"), ("tune", "sweep dropout rates")):
        p = sub.add_parser(name, help=help_text)
        _add_data_options(p)
        _add_network_options(p)
        _add_train_options(p)
        p.add_argument("--out", required=True)
        p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a held-out fold")
    _add_data_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=50, help="dropout masks per point")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fold", choices=["test", "eval", "train"], default="test")
    p.add_argument("--allow-train-eval", action="store_true")
    p.add_argument("--levels", type=lambda s: [float(t) for t in s.split(",")],
                   default=[0.5, 0.7, 0.95])
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("predict-map", help="produce prediction product rasters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--raster", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--region", type=lambda s: [float(t) for t in s.split(",")],
                   required=True, help="xmin,ymin,xmax,ymax")
    p.add_argument("--cellsize", type=float, required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--products", default="mean,sd_total",
                   help="comma list: mean sd_total sd_epistemic sd_aleatoric q:L exceed:T")
    p.set_defaults(func=_cmd_predict_map)

    p = sub.add_parser("xsection", help="predict along a south-north section line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--raster", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--easting", type=float, required=True)
    p.add_argument("--from-northing", type=float, required=True)
    p.add_argument("--to-northing", type=float, required=True)
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--observations", default=None,
                   help="overlay observations within --window of the line")
    p.add_argument("--window", type=float, default=500.0)
    p.add_argument("--target-transform", choices=["none", "log"], default="none")
    p.set_defaults(func=_cmd_xsection)

    return parser


def _config_tokens(path: str) -> list[str]:
    tokens = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"config line without '=': {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            tokens.append("--" + key.replace("_", "-"))
            if value.lower() != "true":   # bare flags are represented as key=true
                tokens.append(value)
    return tokens


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    # file config applies before user flags, so explicit flags win
    if "--config" in argv:
        at = argv.index("--config")
        try:
            cfg_path = argv[at + 1]
        except IndexError:
            print("error: --config needs a path", file=sys.stderr)
            return 2
        try:
            tokens = _config_tokens(cfg_path)
        except (GridcastError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 3
        argv = argv[:at] + argv[at + 2:]
        insert_at = 1 if argv and not argv[0].startswith("-") else 0
        argv = argv[:insert_at] + tokens + argv[insert_at:]

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if getattr(args, "fold", None) == "train" and not getattr(args, "allow_train_eval", False):
        print("error: scoring the training fold leaks; pass --allow-train-eval to override",
              file=sys.stderr)
        return 2

    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (GridcastError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
