import csv
import json
from importlib import resources

import numpy as np
import pytest

from caam.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from caam.trainer import TrainHistory

TINY_SPEC = dict(
    num_object_classes=4, num_contexts=5, contexts_seen_per_class=3, image_size=16,
    n_train=64, n_val=16, n_iid_test=16, n_ood_test=32, seed=1,
)
TINY_CONFIG = dict(
    backbone=dict(num_classes=4, image_size=16, stem_channels=8, block_channels=[8], block_strides=[2], reduction=4),
    num_phases=2, epochs_per_phase=1, batch_size=16, theta_steps=3, num_splits=2,
)


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def data_dir(workdir):
    spec = write(workdir / "spec.json", TINY_SPEC)
    assert main(["gen-data", "--spec", spec, "--out", str(workdir / "data")]) == EXIT_OK
    return workdir / "data"


@pytest.fixture(scope="module")
def config_path(workdir):
    return write(workdir / "config.json", TINY_CONFIG)


@pytest.fixture(scope="module")
def train_dir(workdir, data_dir, config_path):
    out = workdir / "run"
    assert main(["train", "--config", config_path, "--data", str(data_dir), "--out", str(out)]) == EXIT_OK
    return out


def test_gen_data_checksum_matches_rerun(workdir, data_dir):
    spec = str(workdir / "spec.json")
    assert main(["gen-data", "--spec", spec, "--out", str(workdir / "data2")]) == EXIT_OK
    a = json.loads((data_dir / "manifest.json").read_text())
    b = json.loads((workdir / "data2" / "manifest.json").read_text())
    assert a["dataset_checksum"] == b["dataset_checksum"]
    assert a["counts"] == {"train": 64, "val": 16, "iid_test": 16, "ood_test": 32}


def test_gen_data_invalid_spec(workdir, capsys):
    spec = write(workdir / "bad.json", {**TINY_SPEC, "decay": 2.0})
    assert main(["gen-data", "--spec", spec, "--out", str(workdir / "bad")]) == EXIT_VALIDATION
    assert "decay" in capsys.readouterr().err


def test_gen_data_refuses_non_empty_out(workdir, data_dir):
    spec = str(workdir / "spec.json")
    assert main(["gen-data", "--spec", spec, "--out", str(data_dir)]) == EXIT_VALIDATION
    assert main(["gen-data", "--spec", spec, "--out", str(data_dir), "--overwrite"]) == EXIT_OK


def test_train_outputs(train_dir):
    names = {p.name for p in train_dir.iterdir()}
    assert {"checkpoint.npz", "partitions.json", "history.ndjson", "report.json", "summary.csv", "manifest.json"} <= names
    report = json.loads((train_dir / "report.json").read_text())
    assert {"iid_test", "ood_test"} <= set(report)
    for rep in report.values():
        assert 0 <= rep["accuracy"] <= 1
    assert len(json.loads((train_dir / "partitions.json").read_text())) == 2


def test_train_erm_baseline(workdir, data_dir):
    cfg = write(workdir / "erm.json", {**TINY_CONFIG, "mode": "erm"})
    out = workdir / "erm"
    assert main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert "accuracy" in report["iid_test"] and "accuracy" in report["ood_test"]


def test_train_rerun_is_bit_identical(workdir, data_dir, config_path, train_dir):
    out = workdir / "run_again"
    assert main(["train", "--config", config_path, "--data", str(data_dir), "--out", str(out)]) == EXIT_OK
    a = json.loads((train_dir / "manifest.json").read_text())
    b = json.loads((out / "manifest.json").read_text())
    assert a["artifacts"] == b["artifacts"]
    first = TrainHistory.from_ndjson(train_dir / "history.ndjson").epochs[0]["loss"]
    assert TrainHistory.from_ndjson(out / "history.ndjson").epochs[0]["loss"] == first


def test_train_missing_dataset_vs_training_failure(workdir, config_path, data_dir):
    code = main(["train", "--config", config_path, "--data", str(workdir / "nowhere"), "--out", str(workdir / "x1")])
    assert code == EXIT_VALIDATION
    # a non-finite learning rate makes training itself fail
    cfg = write(workdir / "nan.json", {**TINY_CONFIG, "lr": float("nan")})
    code = main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(workdir / "x2")])
    assert code == EXIT_RUNTIME
    assert EXIT_VALIDATION != EXIT_RUNTIME


def test_train_bad_config(workdir, data_dir):
    cfg = write(workdir / "typo.json", {**TINY_CONFIG, "learning_rate": 1})
    assert main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(workdir / "x3")]) == EXIT_VALIDATION


def test_eval_reproduces_history_and_writes_heatmaps(workdir, data_dir, train_dir):
    out = workdir / "eval"
    code = main(["eval", "--checkpoint", str(train_dir / "checkpoint.npz"), "--data", str(data_dir), "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    snapshot = TrainHistory.from_ndjson(train_dir / "history.ndjson").evals[-1]
    assert report["iid_test"]["accuracy"] == snapshot["iid_test_acc"]
    assert report["ood_test"]["accuracy"] == snapshot["ood_test_acc"]
    heatmaps = sorted((out / "heatmaps").glob("*.png"))
    assert len(heatmaps) == 16
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert [r["split"] for r in rows] == ["iid_test", "ood_test"]
    for r in rows:
        assert 0 <= float(r["accuracy"]) <= 1


def test_eval_missing_checkpoint(workdir, data_dir):
    code = main(["eval", "--checkpoint", str(workdir / "none.npz"), "--data", str(data_dir), "--out", str(workdir / "e2")])
    assert code == EXIT_VALIDATION


def test_eval_shape_mismatch(workdir, train_dir):
    spec = write(workdir / "spec32.json", {**TINY_SPEC, "image_size": 32})
    assert main(["gen-data", "--spec", spec, "--out", str(workdir / "data32")]) == EXIT_OK
    code = main(["eval", "--checkpoint", str(train_dir / "checkpoint.npz"), "--data", str(workdir / "data32"),
                 "--out", str(workdir / "e3")])
    assert code == EXIT_VALIDATION


def test_oracle_bundled(capsys):
    path = resources.files("caam") / "resources" / "bernoulli_scm.json"
    assert main(["oracle", "check", str(path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "0.74" in out and "0.5" in out


def test_oracle_no_confounding_equal(workdir, capsys):
    scm = {
        "domains": {"S": 2, "X": 2, "M": 2, "Y": 2},
        "P_S": [0.3, 0.7],
        "P_X_given_S": [[0.6, 0.4], [0.6, 0.4]],
        "P_M_given_X": [[0.5, 0.5], [0.2, 0.8]],
        "P_Y_given_XSM": [[[[0.9, 0.1], [0.4, 0.6]], [[0.8, 0.2], [0.3, 0.7]]],
                          [[[0.7, 0.3], [0.1, 0.9]], [[0.6, 0.4], [0.5, 0.5]]]],
    }
    assert main(["oracle", "check", write(workdir / "nc.json", scm)]) == EXIT_OK
    assert "equal" in capsys.readouterr().out


def test_oracle_malformed(workdir, capsys):
    assert main(["oracle", "check", write(workdir / "bad_scm.json", {"P_X_given_S": [[1.0]]})]) == EXIT_VALIDATION
    (workdir / "garbage.json").write_text("{not json")
    assert main(["oracle", "check", str(workdir / "garbage.json")]) == EXIT_VALIDATION


def test_sweep_layers(workdir, data_dir, config_path):
    out = workdir / "sweep"
    assert main(["sweep", "--study", "layers", "--config", config_path, "--data", str(data_dir), "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader((out / "sweep_layers.csv").open()))
    assert [r["value"] for r in rows] == ["1", "2", "4"]
    assert all(r["status"] == "ok" for r in rows)
    assert (out / "sweep_layers.png").stat().st_size > 0


def test_sweep_marks_failed_cells(workdir, data_dir):
    cfg = write(workdir / "nan_sweep.json", {**TINY_CONFIG, "lr": float("nan")})
    out = workdir / "sweep_fail"
    assert main(["sweep", "--study", "splits", "--config", cfg, "--data", str(data_dir), "--out", str(out)]) == EXIT_RUNTIME
    rows = list(csv.DictReader((out / "sweep_splits.csv").open()))
    assert len(rows) == 4 and all(r["status"] == "failed" for r in rows)


def test_num_workers_env(workdir, monkeypatch):
    monkeypatch.setenv("CAAM_NUM_WORKERS", "zero")
    code = main(["gen-data", "--spec", str(workdir / "spec.json"), "--out", str(workdir / "w")])
    assert code == EXIT_VALIDATION
