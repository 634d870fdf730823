"""RMSE / MAPE evaluation and CSV export of metric tables and scatter pairs."""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, SpecMismatchError
from .data import denormalize_targets

EXCLUDE_BELOW = 1e-3


def _g(x):
    return f"{x:.12g}"


def rmse(y, y_hat):
    y, y_hat = np.asarray(y, dtype=float).ravel(), np.asarray(y_hat, dtype=float).ravel()
    if y.size == 0 or y.size != y_hat.size:
        raise DataError(f"rmse needs equal non-empty inputs, got {y.size} and {y_hat.size}")
    d = y_hat - y
    return float(np.sqrt(np.mean(d * d)))


def mape(y, y_hat, exclude_below=EXCLUDE_BELOW):
    """Mean absolute percentage error in percent, skipping ``|y| < exclude_below``.

    Returns ``(mape, n_excluded)``.
    """
    y, y_hat = np.asarray(y, dtype=float).ravel(), np.asarray(y_hat, dtype=float).ravel()
    if y.size != y_hat.size:
        raise DataError(f"mape needs equal-length inputs, got {y.size} and {y_hat.size}")
    keep = np.abs(y) >= exclude_below
    if not keep.any():
        raise DataError("every target is below the MAPE exclusion threshold")
    rel = np.abs(y_hat[keep] - y[keep]) / np.abs(y[keep])
    return float(100.0 * rel.mean()), int(y.size - keep.sum())


@dataclass
class MetricsReport:
    targets: list
    rmse: dict = field(default_factory=dict)
    mape: dict = field(default_factory=dict)
    n_excluded: dict = field(default_factory=dict)
    aggregate_rmse: float = math.nan
    aggregate_mape: float = math.nan
    n_samples: int = 0
    n_mape_excluded: int = 0
    scatter: dict = field(default_factory=dict)  # target -> (true array, predicted array)


def evaluate_arrays(y_true, y_pred, targets, exclude_below=EXCLUDE_BELOW):
    """Metrics of physical-unit arrays of shape (n, len(targets))."""
    y_true = np.asarray(y_true, dtype=float).reshape(-1, len(targets))
    y_pred = np.asarray(y_pred, dtype=float).reshape(-1, len(targets))
    report = MetricsReport(list(targets), n_samples=len(y_true))
    for j, name in enumerate(targets):
        report.scatter[name] = (y_true[:, j].copy(), y_pred[:, j].copy())
    if len(y_true) == 0:
        return report
    for j, name in enumerate(targets):
        report.rmse[name] = rmse(y_true[:, j], y_pred[:, j])
        report.mape[name], report.n_excluded[name] = mape(y_true[:, j], y_pred[:, j], exclude_below)
    report.aggregate_rmse = rmse(y_true, y_pred)
    report.aggregate_mape, report.n_mape_excluded = mape(y_true, y_pred, exclude_below)
    return report


def evaluate(model, dataset, feature_spec=None, exclude_below=EXCLUDE_BELOW):
    """Run ``model`` on a featurized set and score it in physical units."""
    spec = feature_spec or dataset.spec
    if dataset.spec.inputs != spec.inputs or dataset.spec.targets != spec.targets:
        raise SpecMismatchError("dataset features do not match the model's feature spec")
    if model.config.input_features != spec.n_features or model.config.output_dim != len(spec.targets):
        raise SpecMismatchError(
            f"model expects {model.config.input_features} inputs / {model.config.output_dim} outputs, "
            f"feature spec gives {spec.n_features} / {len(spec.targets)}"
        )
    if dataset.y is None:
        raise DataError("dataset has no targets to evaluate against")
    y_pred = denormalize_targets(model.predict(dataset.x), spec)
    y_true = denormalize_targets(dataset.y, spec)
    return evaluate_arrays(y_true, y_pred, spec.targets, exclude_below)


def report_rows(method, report):
    rows = []
    for name in report.targets:
        if name in report.rmse:
            rows.append([method, name, _g(report.rmse[name]), _g(report.mape[name]),
                         report.n_samples, report.n_excluded[name]])
    if report.n_samples:
        rows.append([method, "ALL", _g(report.aggregate_rmse), _g(report.aggregate_mape),
                     report.n_samples * len(report.targets), report.n_mape_excluded])
    return rows


def export_report(reports, path_prefix, method="model"):
    """Write ``<prefix>_metrics.csv`` and one ``<prefix>_scatter_<target>.csv`` per target.

    ``reports`` is a single :class:`MetricsReport` or a mapping method -> report.
    Scatter files are written for the first method only. Returns written paths.
    """
    if isinstance(reports, MetricsReport):
        reports = {method: reports}
    paths = []
    table = f"{path_prefix}_metrics.csv"
    os.makedirs(os.path.dirname(os.path.abspath(table)), exist_ok=True)
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "target", "rmse", "mape", "n", "n_excluded"])
        for name, rep in reports.items():
            w.writerows(report_rows(name, rep))
    paths.append(table)
    first = next(iter(reports.values()))
    for name, (yt, yp) in first.scatter.items():
        path = f"{path_prefix}_scatter_{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true", "predicted"])
            w.writerows([_g(a), _g(b)] for a, b in zip(yt, yp))
        paths.append(path)
    return paths


def read_metrics_csv(path):
    """Parse a metrics table into ``{(method, target): (rmse, mape, n, n_excluded)}``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[(row["method"], row["target"])] = (
                float(row["rmse"]), float(row["mape"]), int(row["n"]), int(row["n_excluded"])
            )
    return out


def read_scatter_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return np.zeros(0), np.zeros(0)
    return data[:, 0], data[:, 1]


def write_comparison_table(results, path, tasks):
    """Table of mean aggregate RMSE/MAPE per method and task.

    ``results`` maps ``(method, task)`` to a list of ``(rmse, mape)`` pairs,
    one per seed. Methods are written in sorted order.
    """
    header = ["method"]
    for task in tasks:
        header += [f"rmse_{task}", f"mape_{task}"]
    header.append("n_seeds")
    methods = sorted({m for m, _ in results})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for m in methods:
            row = [m]
            counts = set()
            for task in tasks:
                vals = results.get((m, task), [])
                counts.add(len(vals))
                if vals:
                    row += [_g(math.fsum(v[0] for v in vals) / len(vals)),
                            _g(math.fsum(v[1] for v in vals) / len(vals))]
                else:
                    row += ["", ""]
            row.append(max(counts))
            w.writerow(row)
    return path
