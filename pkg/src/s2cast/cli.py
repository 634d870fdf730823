"""Command-line entry point: ``s2cast {synth,ingest,train,predict,evaluate}``.

Numeric defaults come from the packaged ``defaults.conf``; ``--config FILE``
overrides them and explicit flags override both. Every command writes a JSON
run manifest next to its outputs.

Exit codes: 0 ok, 2 usage, 3 missing or invalid input, 4 numerical failure,
5 model/dataset feature mismatch.
"""

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    NumericalError,
    SpecMismatchError,
    TrainingError,
)
from .metrics import evaluate, export_report, write_comparison_table
from .model import VARIANTS, Forecaster, ModelConfig, load_bundle, save
from .train import TrainConfig, fit

log = logging.getLogger("s2cast")

EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC, EXIT_MISMATCH = 2, 3, 4, 5


class MissingInput(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def parse_conf(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_settings(config_path=None):
    settings = parse_conf(resources.files("s2cast").joinpath("defaults.conf").read_text())
    if config_path:
        if not os.path.exists(config_path):
            raise MissingInput(f"config file {config_path} not found")
        with open(config_path, encoding="utf-8") as fh:
            extra = parse_conf(fh.read())
        unknown = set(extra) - set(settings)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        settings.update(extra)
    return settings


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _names(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def iso_date(text):
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD, got {text!r}") from None


def resolve(settings, args, mapping):
    """Overlay explicitly-set flags onto settings; ``mapping`` is flag attr -> key."""
    out = dict(settings)
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = ",".join(map(str, value)) if isinstance(value, (list, tuple)) else str(value)
    return out


# ---------------------------------------------------------------------------
# artifacts


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, argv, settings, inputs, outputs, seeds, t0, extra=None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": settings,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        "seeds": seeds,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _require(path):
    if not os.path.exists(path):
        raise MissingInput(f"{path} not found")
    return path


def filter_series(series, threshold):
    kept, dropped = [], 0
    for px in series:
        acq, n = D.ndsi_cloud_filter(px.acquisitions, threshold)
        dropped += n
        kept.append(D.PixelSeries(px.pixel_id, acq, px.truth))
    return kept, dropped


def prepare_datasets(series, settings, out):
    """Cloud-filter, window, split and featurize ``series`` for every task."""
    series, dropped = filter_series(series, float(settings["data.cloud_threshold"]))
    T = int(settings["data.time_steps"])
    samples, skipped = D.build_dataset(series, T)
    if not samples:
        raise DataError(f"no pixel has at least {T + 1} acquisitions after filtering")
    parts = D.split(samples, _floats(settings["data.split"]), int(settings["data.split_seed"]))
    if not parts[0]:
        raise DataError("training split is empty")
    written = []
    for task in _names(settings["data.tasks"]):
        spec = D.fit_normalization(D.FeatureSpec.for_task(task, float(settings["data.time_scale"])), parts[0])
        for name, part in zip(("train", "val", "test"), parts):
            path = out / f"{task}_{name}.s2o1d"
            D.save_featurized(D.featurize(part, spec), path)
            written.append(path)
    report = {
        "acquisitions_dropped_ndsi": dropped,
        "pixels_skipped_short": skipped,
        "samples": {n: len(p) for n, p in zip(("train", "val", "test"), parts)},
    }
    log.info("windows train/val/test = %s; %d acquisitions dropped by NDSI", report["samples"], dropped)
    return written, report


DATA_FLAGS = {
    "time_steps": "data.time_steps",
    "time_scale": "data.time_scale",
    "split": "data.split",
    "split_seed": "data.split_seed",
    "cloud_threshold": "data.cloud_threshold",
    "tasks": "data.tasks",
}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, argv):
    t0 = time.perf_counter()
    settings = resolve(load_settings(args.config), args, {
        "pixels": "synth.pixels",
        "acquisitions": "synth.acquisitions",
        "noise": "synth.noise_sigma",
        "gap_days": "synth.gap_days",
        "cloud_prob": "synth.cloud_prob",
        "start_date": "synth.start_date",
        "seed": "synth.seed",
        **DATA_FLAGS,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = D.SynthConfig(
        n_pixels=int(settings["synth.pixels"]),
        n_acquisitions=int(settings["synth.acquisitions"]),
        noise_sigma=float(settings["synth.noise_sigma"]),
        irregular_gap_days=int(settings["synth.gap_days"]),
        seed=int(settings["synth.seed"]),
        start_date=settings["synth.start_date"],
        cloud_prob=float(settings["synth.cloud_prob"]),
    )
    series = D.generate_synthetic(cfg)
    jsonl = out / "acquisitions.jsonl"
    D.write_jsonl(series, jsonl)
    written, report = prepare_datasets(series, settings, out)
    write_manifest(out / "manifest_synth.json", "synth", argv, settings, [], [jsonl, *written],
                   {"synth": cfg.seed, "split": int(settings["data.split_seed"])}, t0, {"report": report})
    return 0


def cmd_ingest(args, argv):
    t0 = time.perf_counter()
    settings = resolve(load_settings(args.config), args, DATA_FLAGS)
    src = _require(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written, report = prepare_datasets(D.read_jsonl(src), settings, out)
    write_manifest(out / "manifest_ingest.json", "ingest", argv, settings, [src], written,
                   {"split": int(settings["data.split_seed"])}, t0, {"report": report})
    return 0


def cmd_train(args, argv):
    t0 = time.perf_counter()
    settings = resolve(load_settings(args.config), args, {
        "epochs": "train.epochs",
        "batch_size": "train.batch_size",
        "lr": "train.learning_rate",
        "patience": "train.patience",
        "clip_norm": "train.clip_norm",
        "seed": "train.seed",
        "hidden": "model.hidden_sizes",
    })
    data_dir = Path(args.data)
    train_path = _require(data_dir / f"{args.task}_train.s2o1d")
    val_path = _require(data_dir / f"{args.task}_val.s2o1d")
    train_set, val_set = D.load_featurized(train_path), D.load_featurized(val_path)
    spec = train_set.spec
    seed = int(settings["train.seed"])
    clip = settings["train.clip_norm"].lower()
    tcfg = TrainConfig(
        epochs=int(settings["train.epochs"]),
        batch_size=int(settings["train.batch_size"]),
        learning_rate=float(settings["train.learning_rate"]),
        beta1=float(settings["train.beta1"]),
        beta2=float(settings["train.beta2"]),
        eps_opt=float(settings["train.eps_opt"]),
        patience=int(settings["train.patience"]),
        seed=seed,
        clip_norm=None if clip in ("none", "") else float(clip),
    ).validate()
    mcfg = ModelConfig(
        variant=args.variant,
        time_steps=train_set.x.shape[1],
        input_features=spec.n_features,
        hidden_sizes=_ints(settings["model.hidden_sizes"]),
        output_dim=len(spec.targets),
        seed=seed,
        bn_momentum=float(settings["model.bn_momentum"]),
        bn_epsilon=float(settings["model.bn_epsilon"]),
    )
    model = Forecaster(mcfg)
    history = fit(model, (train_set.x, train_set.y), (val_set.x, val_set.y), tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.variant}_{args.task}_s{seed}"
    model_path, log_path = out / f"{stem}.s2o1", out / f"{stem}_log.csv"
    save(model.params, mcfg, model_path, {"task": args.task, "feature_spec": spec.to_dict()})
    history.to_csv(log_path)
    write_manifest(out / f"{stem}_manifest.json", "train", argv, settings, [train_path, val_path],
                   [model_path], {"train": seed}, t0,
                   {"log": str(log_path), "epochs_completed": history.epochs_completed,
                    "best_epoch": history.best_epoch})
    log.info("trained %s for %d epochs (best %s)", stem, history.epochs_completed, history.best_epoch)
    return 0


def select_history(px, target_date, T, mode):
    acq = px.acquisitions
    if mode == "forecast":
        if len(acq) < T:
            raise DataError(f"{px.pixel_id}: needs {T} acquisitions, has {len(acq)}")
        if target_date <= acq[-1].date:
            raise DataError(
                f"{px.pixel_id}: target date {target_date} is not after the last acquisition {acq[-1].date}"
            )
        return acq[-T:]
    pool = [a for a in acq if a.date != target_date]
    if len(pool) < T:
        raise DataError(f"{px.pixel_id}: needs {T} acquisitions besides the target date")
    nearest = sorted(pool, key=lambda a: (abs((a.date - target_date).days), a.date))[:T]
    return sorted(nearest, key=lambda a: a.date)


def cmd_predict(args, argv):
    t0 = time.perf_counter()
    settings = resolve(load_settings(args.config), args, {"cloud_threshold": "data.cloud_threshold"})
    model_path, src = _require(args.model), _require(args.input)
    params, mcfg, meta = load_bundle(model_path)
    spec = D.FeatureSpec.from_dict(meta["feature_spec"])
    series, _ = filter_series(D.read_jsonl(src), float(settings["data.cloud_threshold"]))
    samples = [
        D.SequenceSample(px.pixel_id, select_history(px, args.target_date, mcfg.time_steps, args.mode),
                         args.target_date)
        for px in sorted(series, key=lambda s: s.pixel_id)
    ]
    fset = D.featurize(samples, spec, forecast=args.mode == "forecast")
    y = D.denormalize_targets(Forecaster(mcfg, params).predict(fset.x), spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_path = out / "predictions.csv"
    with open(pred_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pixel_id", "target_date", *spec.targets])
        for pid, row in zip(fset.pixel_ids, y):
            w.writerow([pid, args.target_date.isoformat(), *(f"{v:.12g}" for v in row)])
    write_manifest(out / "manifest_predict.json", "predict", argv, settings, [model_path, src], [pred_path],
                   {}, t0, {"target_date": args.target_date.isoformat(), "mode": args.mode})
    return 0


def _check_spec(model_spec, data_spec, path):
    if model_spec != data_spec:
        raise SpecMismatchError(f"{path}: dataset features/normalization differ from the model's")


def cmd_evaluate(args, argv):
    t0 = time.perf_counter()
    settings = resolve(load_settings(args.config), args, {"exclude_below": "metrics.exclude_below"})
    exclude = float(settings["metrics.exclude_below"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = sorted(args.model)
    inputs, outputs = [], []
    results, reports = {}, {}
    tasks_seen = []
    for model_path in models:
        _require(model_path)
        params, mcfg, meta = load_bundle(model_path)
        task = meta.get("task")
        spec = D.FeatureSpec.from_dict(meta["feature_spec"])
        data_path = _require(Path(args.data) / f"{task}_{args.split}.s2o1d")
        dataset = D.load_featurized(data_path)
        _check_spec(spec, dataset.spec, data_path)
        report = evaluate(Forecaster(mcfg, params), dataset, spec, exclude)
        stem = Path(model_path).stem
        reports[stem] = report
        results.setdefault((mcfg.variant, task), []).append((report.aggregate_rmse, report.aggregate_mape))
        if task not in tasks_seen:
            tasks_seen.append(task)
        inputs += [model_path, data_path]
        if not args.all_variants:
            outputs += export_report(report, str(out / f"{stem}_{args.split}"), method=stem)
    if args.all_variants:
        tasks = [t for t in D.TASKS if t in tasks_seen]
        outputs.append(export_report(reports, str(out / f"all_{args.split}"))[0])
        outputs.append(write_comparison_table(results, out / f"comparison_{args.split}.csv", tasks))
    write_manifest(out / "manifest_evaluate.json", "evaluate", argv, settings, inputs, outputs, {}, t0)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="s2cast", description="Sequence-to-one satellite pixel forecasting.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value file overriding the packaged defaults")
        sp.add_argument("--out", required=True, help="output directory")

    def data_flags(sp):
        sp.add_argument("--time-steps", type=positive_int)
        sp.add_argument("--time-scale", type=float, help="divisor applied to day differences")
        sp.add_argument("--split", type=str, help="train,val,test fractions, e.g. 0.7,0.15,0.15")
        sp.add_argument("--split-seed", type=int)
        sp.add_argument("--cloud-threshold", type=float, help="NDSI above this drops an acquisition")
        sp.add_argument("--tasks", type=str, help=f"comma list from {','.join(D.TASKS)}")

    sp = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    common(sp)
    sp.add_argument("--pixels", type=positive_int)
    sp.add_argument("--acquisitions", type=positive_int)
    sp.add_argument("--noise", type=float, help="per-band Gaussian noise sigma")
    sp.add_argument("--gap-days", type=positive_int, help="upper bound of the uniform revisit gap")
    sp.add_argument("--cloud-prob", type=float)
    sp.add_argument("--start-date", type=str)
    sp.add_argument("--seed", type=int)
    data_flags(sp)

    sp = sub.add_parser("ingest", help="featurize a JSON Lines acquisition file")
    common(sp)
    sp.add_argument("--input", required=True)
    data_flags(sp)

    sp = sub.add_parser("train", help="train one forecaster variant on one task")
    common(sp)
    sp.add_argument("--data", required=True, help="directory written by synth/ingest")
    sp.add_argument("--task", required=True, choices=list(D.TASKS))
    sp.add_argument("--variant", required=True, choices=list(VARIANTS))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=positive_int)
    sp.add_argument("--batch-size", type=positive_int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--patience", type=non_negative_int)
    sp.add_argument("--clip-norm", type=str, help="global gradient-norm cap, or 'none'")
    sp.add_argument("--hidden", type=str, help="comma-separated hidden sizes, e.g. 64,64")

    sp = sub.add_parser("predict", help="predict every pixel at a user-defined date")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="JSON Lines history acquisitions")
    sp.add_argument("--target-date", required=True, type=iso_date)
    sp.add_argument("--mode", choices=("forecast", "gapfill"), default="forecast")
    sp.add_argument("--cloud-threshold", type=float)

    sp = sub.add_parser("evaluate", help="score model files on a featurized split")
    common(sp)
    sp.add_argument("--model", required=True, nargs="+", help="one or more model files")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--all-variants", action="store_true", help="write one combined comparison table")
    sp.add_argument("--exclude-below", type=float, help="MAPE skips targets with |y| below this")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    level = os.environ.get("S2O1_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args, argv)
    except SpecMismatchError as exc:
        print(f"s2cast: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (MissingInput, FileNotFoundError, FormatError, DataError) as exc:
        print(f"s2cast: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, NumericalError) as exc:
        print(f"s2cast: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"s2cast: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
