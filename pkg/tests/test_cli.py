import csv
import json

import numpy as np
import pytest

from s2cast import data as D
from s2cast.cli import main

SMALL = ["--pixels", "16", "--acquisitions", "14", "--seed", "7"]
FAST = ["--epochs", "3", "--hidden", "6,6", "--batch-size", "16"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("models")
    assert main(["train", "--data", str(dataset), "--task", "ndvi", "--variant", "attention_bilstm",
                 "--seed", "1", "--out", str(out), *FAST]) == 0
    return out / "attention_bilstm_ndvi_s1.s2o1"


def test_synth_is_byte_identical(dataset, tmp_path):
    assert main(["synth", "--out", str(tmp_path), *SMALL]) == 0
    for name in ["acquisitions.jsonl"] + [f"{t}_{s}.s2o1d" for t in D.TASKS for s in ("train", "val", "test")]:
        assert (tmp_path / name).read_bytes() == (dataset / name).read_bytes(), name


def test_synth_line_count_and_manifest(dataset):
    lines = (dataset / "acquisitions.jsonl").read_text().splitlines()
    assert len(lines) == 16
    manifest = json.loads((dataset / "manifest_synth.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["config"]["synth.pixels"] == "16"
    assert str(dataset / "ndvi_train.s2o1d") in manifest["outputs"]


def test_synth_rejects_zero_pixels(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth", "--out", str(tmp_path), "--pixels", "0"])
    assert info.value.code == 2


def test_ingest_matches_synth(dataset, tmp_path):
    assert main(["ingest", "--input", str(dataset / "acquisitions.jsonl"), "--out", str(tmp_path)]) == 0
    for t in D.TASKS:
        assert (tmp_path / f"{t}_test.s2o1d").read_bytes() == (dataset / f"{t}_test.s2o1d").read_bytes()


def test_ingest_missing_input(tmp_path):
    assert main(["ingest", "--input", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 3


def test_train_is_reproducible(dataset, trained, tmp_path):
    assert main(["train", "--data", str(dataset), "--task", "ndvi", "--variant", "attention_bilstm",
                 "--seed", "1", "--out", str(tmp_path), *FAST]) == 0
    assert (tmp_path / trained.name).read_bytes() == trained.read_bytes()


def test_train_log_rows_equal_epochs(trained):
    rows = list(csv.reader(open(trained.with_name(trained.stem + "_log.csv"))))
    manifest = json.loads(trained.with_name(trained.stem + "_manifest.json").read_text())
    assert len(rows) - 1 == manifest["epochs_completed"] == 3


def test_train_unknown_variant(dataset, tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--data", str(dataset), "--task", "ndvi", "--variant", "gru", "--out", str(tmp_path)])
    assert info.value.code == 2
    err = capsys.readouterr().err
    assert "attention_bilstm" in err and "attention_lstm" in err and "bilstm" in err


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path), "--task", "ndvi", "--variant", "bilstm",
                 "--out", str(tmp_path)]) == 3


def test_train_nan_targets_exit_4(dataset, tmp_path):
    for split in ("train", "val"):
        f = D.load_featurized(dataset / f"ndvi_{split}.s2o1d")
        f.y = np.full_like(f.y, np.nan)
        D.save_featurized(f, tmp_path / f"ndvi_{split}.s2o1d")
    assert main(["train", "--data", str(tmp_path), "--task", "ndvi", "--variant", "bilstm",
                 "--out", str(tmp_path), *FAST]) == 4


def test_config_file_overrides_defaults(dataset, tmp_path):
    cfg = tmp_path / "run.conf"
    cfg.write_text("train.epochs = 2\nmodel.hidden_sizes = 3,3\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--task", "ndvi",
                 "--variant", "attention_lstm", "--seed", "2", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "attention_lstm_ndvi_s2_log.csv").read_text().splitlines()
    assert len(rows) == 3
    cfg.write_text("train.epoch = 2\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--task", "ndvi",
                 "--variant", "attention_lstm", "--out", str(tmp_path)]) == 2


def _history_file(tmp_path, dataset, drop_last=True):
    series = D.read_jsonl(dataset / "acquisitions.jsonl")
    held = {}
    for px in series:
        if drop_last:
            held[px.pixel_id] = px.acquisitions[-1]
            px.acquisitions = px.acquisitions[:-1]
    path = tmp_path / "history.jsonl"
    D.write_jsonl(series, path)
    return path, series, held


def _predict(trained, history, out, date, mode="forecast"):
    return main(["predict", "--model", str(trained), "--input", str(history), "--target-date", date,
                 "--mode", mode, "--out", str(out)])


def test_predict_writes_physical_values(dataset, trained, tmp_path):
    history, series, _ = _history_file(tmp_path, dataset)
    last = max(a.date for px in series for a in px.acquisitions)
    date = (last.replace(day=1) if last.day > 1 else last).isoformat()
    assert _predict(trained, history, tmp_path / "p1", "2030-01-01") == 0
    rows = list(csv.DictReader(open(tmp_path / "p1" / "predictions.csv")))
    assert len(rows) == 16 and set(rows[0]) == {"pixel_id", "target_date", "NDVI"}
    assert all(-1.5 < float(r["NDVI"]) < 1.5 for r in rows)
    assert (tmp_path / "p1" / "manifest_predict.json").exists()
    assert _predict(trained, history, tmp_path / "p2", date) == 3


def test_predict_depends_on_target_date(dataset, trained, tmp_path):
    history, _, _ = _history_file(tmp_path, dataset)
    assert _predict(trained, history, tmp_path / "a", "2030-01-01") == 0
    assert _predict(trained, history, tmp_path / "b", "2030-03-01") == 0
    a = [float(r["NDVI"]) for r in csv.DictReader(open(tmp_path / "a" / "predictions.csv"))]
    b = [float(r["NDVI"]) for r in csv.DictReader(open(tmp_path / "b" / "predictions.csv"))]
    assert a != b


def test_predict_gapfill_mode(dataset, trained, tmp_path):
    history, series, _ = _history_file(tmp_path, dataset, drop_last=False)
    mid = series[0].acquisitions[7].date.isoformat()
    assert _predict(trained, history, tmp_path / "g", mid, mode="gapfill") == 0


def test_predict_requires_target_date(trained, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["predict", "--model", str(trained), "--input", "x.jsonl", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_evaluate_single_model(dataset, trained, tmp_path):
    assert main(["evaluate", "--model", str(trained), "--data", str(dataset), "--out", str(tmp_path)]) == 0
    table = (tmp_path / f"{trained.stem}_test_metrics.csv").read_text().splitlines()
    assert table[0] == "method,target,rmse,mape,n,n_excluded" and len(table) == 3
    assert len((tmp_path / f"{trained.stem}_test_scatter_NDVI.csv").read_text().splitlines()) > 1


def test_evaluate_all_variants_table(dataset, trained, tmp_path):
    models = [trained]
    for variant in ("attention_lstm", "bilstm"):
        assert main(["train", "--data", str(dataset), "--task", "ndvi", "--variant", variant,
                     "--seed", "1", "--out", str(tmp_path), *FAST]) == 0
        models.append(tmp_path / f"{variant}_ndvi_s1.s2o1")
    assert main(["evaluate", "--all-variants", "--model", *map(str, models), "--data", str(dataset),
                 "--out", str(tmp_path / "e")]) == 0
    rows = list(csv.reader(open(tmp_path / "e" / "comparison_test.csv")))
    assert rows[0] == ["method", "rmse_ndvi", "mape_ndvi", "n_seeds"]
    assert [r[0] for r in rows[1:]] == ["attention_bilstm", "attention_lstm", "bilstm"]


def test_evaluate_spec_mismatch_exit_5(trained, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "other"), "--pixels", "12", "--acquisitions", "12",
                 "--seed", "99"]) == 0
    assert main(["evaluate", "--model", str(trained), "--data", str(tmp_path / "other"),
                 "--out", str(tmp_path)]) == 5
