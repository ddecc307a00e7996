import csv
import hashlib
import json

import numpy as np
import pytest
import yaml

from deepgp import cli
from deepgp.archive import ModelArchive
from deepgp.training import NumericalFailure


def _write_config(path, **tree):
    path.write_text(yaml.safe_dump(tree))
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def usps_csv(tmp_path):
    """Fake USPS file: 60 rows per digit 0..9, pixels in [-1, 1], no header."""
    rng = np.random.default_rng(5)
    labels = np.repeat(np.arange(10), 60)
    pixels = rng.uniform(-1, 1, (labels.size, 256))
    path = tmp_path / "usps.csv"
    np.savetxt(path, np.c_[labels, pixels], delimiter=",", fmt="%.6f")
    return str(path)


@pytest.fixture
def small_dataset(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "small.csv"
    cli.write_dataset(path, rng.normal(size=(12, 5)))
    return str(path)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def test_generate_regression_is_byte_identical(tmp_path):
    cfg = _write_config(tmp_path / "c.yaml", experiment="toy-regression")
    for name in ("a", "b"):
        assert cli.main(["generate", "--config", cfg, "--seed", "7", "--out", str(tmp_path / name)]) == 0
    for f in ("dataset.csv", "truth_warp.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_generate_regression_split(tmp_path):
    cfg = _write_config(tmp_path / "c.yaml", experiment="toy-regression")
    cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "g")])
    rows = _rows(tmp_path / "g" / "dataset.csv")
    assert len(rows) == 120
    assert sum(r["split"] == "train" for r in rows) == 25
    manifest = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert manifest["train_rows"] == 25 and manifest["seed"] == 0
    assert manifest["files"]["dataset.csv"] == _digest(tmp_path / "g" / "dataset.csv")


def test_generate_digits_from_usps(tmp_path, usps_csv):
    cfg = _write_config(tmp_path / "c.yaml", experiment="digits", data={"usps_path": usps_csv})
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "g")]) == 0
    data = cli.read_dataset(tmp_path / "g" / "dataset.csv")
    assert data["outputs"].shape == (150, 256)
    assert sorted(np.unique(data["labels"], return_counts=True)[1]) == [50, 50, 50]
    assert set(data["labels"]) == {0, 1, 6}
    assert data["outputs"].min() >= 0 and data["outputs"].max() <= 1


def test_generate_toy_hierarchy_truth(tmp_path):
    cfg = _write_config(tmp_path / "c.yaml", experiment="toy-hierarchy")
    cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "g")])
    assert cli.read_dataset(tmp_path / "g" / "dataset.csv")["outputs"].shape == (100, 10)
    assert len(_rows(tmp_path / "g" / "truth_level1.csv")[0]) == 2
    assert len(_rows(tmp_path / "g" / "truth_level2.csv")[0]) == 1


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------


def test_train_writes_archive_and_trace(tmp_path):
    cfg = _write_config(tmp_path / "c.yaml", experiment="toy-hierarchy", model={"num_inducing": 6})
    code = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t"), "--max-iters", "5", "--restarts", "1"])
    assert code == cli.EXIT_ITER_CAP
    archive = ModelArchive.load(tmp_path / "t" / "model.dga")
    assert archive.provenance["depth"] == 2
    assert archive.provenance["status"] == "max_iterations"
    lines = (tmp_path / "t" / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 6
    bounds = [json.loads(s)["bound"] for s in lines]
    assert np.all(np.diff(bounds) >= -1e-9)


def test_train_converged_exit_code(tmp_path, small_dataset):
    cfg = _write_config(tmp_path / "c.yaml", experiment="custom", model={"layer_dims": [2], "num_inducing": 4},
                        optimizer={"tolerance": 1e-2, "frozen_iterations": 0})
    code = cli.main(["train", "--config", cfg, "--data", small_dataset, "--out", str(tmp_path / "t"),
                     "--restarts", "1"])
    assert code == cli.EXIT_OK
    assert ModelArchive.load(tmp_path / "t" / "model.dga").provenance["status"] == "converged"


def test_train_depth_one_is_recorded(tmp_path, usps_csv):
    cfg = _write_config(tmp_path / "c.yaml", experiment="digits", data={"usps_path": usps_csv},
                        model={"layer_dims": [2], "num_inducing": 5})
    cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t"), "--max-iters", "2", "--restarts", "1"])
    archive = ModelArchive.load(tmp_path / "t" / "model.dga")
    assert archive.provenance["depth"] == 1
    assert archive.model().depth == 1


@pytest.mark.parametrize("threads", [1, 2])
def test_train_is_bit_identical(tmp_path, threads):
    cfg = _write_config(tmp_path / "c.yaml", experiment="toy-hierarchy", model={"num_inducing": 6})
    for name in ("a", "b"):
        cli.main(["train", "--config", cfg, "--out", str(tmp_path / name), "--max-iters", "8",
                  "--restarts", "2", "--threads", str(threads)])
    assert (tmp_path / "a" / "model.dga").read_bytes() == (tmp_path / "b" / "model.dga").read_bytes()
    assert (tmp_path / "a" / "trace.jsonl").read_bytes() == (tmp_path / "b" / "trace.jsonl").read_bytes()


def test_train_does_not_touch_input(tmp_path, small_dataset):
    from pathlib import Path

    before = _digest(Path(small_dataset))
    cfg = _write_config(tmp_path / "c.yaml", experiment="custom", model={"num_inducing": 4})
    cli.main(["train", "--config", cfg, "--data", small_dataset, "--out", str(tmp_path / "t"),
              "--max-iters", "3", "--restarts", "1"])
    assert _digest(Path(small_dataset)) == before


def test_train_regression_uses_inputs(tmp_path):
    cfg = _write_config(tmp_path / "c.yaml", experiment="toy-regression", model={"num_inducing": 8})
    out = tmp_path / "t"
    cli.main(["train", "--config", cfg, "--out", str(out), "--max-iters", "4", "--restarts", "2"])
    archive = ModelArchive.load(out / "model.dga")
    assert archive.arrays["train_inputs"].shape == (25, 1)
    assert cli.main(["evaluate", "--config", cfg, "--archive", str(out / "model.dga"), "--out", str(tmp_path / "e")]) == 0
    metrics = {r["metric"]: r["value"] for r in _rows(tmp_path / "e" / "metrics.csv")}
    assert float(metrics["test_mse_deep"]) >= 0 and float(metrics["test_mse_flat"]) >= 0
    preds = _rows(tmp_path / "e" / "predictions.csv")
    assert len(preds) == 120
    assert (tmp_path / "e" / "regression.svg").read_text().lstrip().startswith("<?xml")


def test_evaluate_emits_all_outputs(tmp_path):
    cfg = _write_config(tmp_path / "c.yaml", experiment="toy-hierarchy", model={"num_inducing": 6},
                        evaluation={"samples_per_level": 4})
    cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t"), "--max-iters", "5", "--restarts", "1"])
    out = tmp_path / "e"
    assert cli.main(["evaluate", "--config", cfg, "--archive", str(tmp_path / "t" / "model.dga"),
                     "--out", str(out)]) == 0
    ard = _rows(out / "ard_profile.csv")
    assert len(ard) == 5 + 3                      # one row per (layer, group, dimension)
    assert {r["level"] for r in ard} == {"1", "2"}
    for lvl, q in ((1, 5), (2, 3)):
        rows = _rows(out / f"latent_level{lvl}.csv")
        assert len(rows) == 100 and len(rows[0]) == 2 * q
        assert len(_rows(out / f"samples_level{lvl}.csv")) == 4
        assert (out / f"latent_level{lvl}.svg").exists()
    metrics = {r["metric"]: r["value"] for r in _rows(out / "metrics.csv")}
    assert int(metrics["depth"]) == 2
    assert float(metrics["bound"]) == pytest.approx(ModelArchive.load(tmp_path / "t" / "model.dga").report["total"])


def test_evaluate_labelled_data_reports_nn_errors(tmp_path, usps_csv):
    cfg = _write_config(tmp_path / "c.yaml", experiment="digits", data={"usps_path": usps_csv},
                        model={"layer_dims": [3, 2], "num_inducing": 5}, evaluation={"samples_per_level": 0})
    cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t"), "--max-iters", "2", "--restarts", "1"])
    out = tmp_path / "e"
    cli.main(["evaluate", "--config", cfg, "--archive", str(tmp_path / "t" / "model.dga"), "--out", str(out)])
    nn = _rows(out / "nn_errors.csv")
    assert [r["level"] for r in nn] == ["1", "2"]
    assert all(0 <= int(r["errors"]) <= 150 for r in nn)
    assert {r["label"] for r in _rows(out / "latent_level2.csv")} == {"0", "1", "6"}


# ---------------------------------------------------------------------------
# check-grad / sweep-depth / errors
# ---------------------------------------------------------------------------


def test_check_grad_passes(tmp_path, small_dataset, capsys):
    cfg = _write_config(tmp_path / "c.yaml", experiment="custom", model={"layer_dims": [3, 2], "num_inducing": 4})
    assert cli.main(["check-grad", "--config", cfg, "--data", small_dataset, "--out", str(tmp_path / "g")]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")
    assert _rows(tmp_path / "g" / "gradcheck_flagged.csv") == []


def test_sweep_depth_smoke(tmp_path, usps_csv):
    cfg = _write_config(tmp_path / "c.yaml", experiment="digits", data={"usps_path": usps_csv},
                        model={"layer_dims": [3, 2], "num_inducing": 5}, evaluation={"samples_per_level": 0},
                        sweep={"max_depth": 2})
    out = tmp_path / "s"
    code = cli.main(["sweep-depth", "--config", cfg, "--out", str(out), "--max-iters", "2", "--restarts", "1"])
    assert code == cli.EXIT_ITER_CAP
    rows = _rows(out / "model_selection.csv")
    assert [r["depth"] for r in rows] == ["1", "2"]
    for H in (1, 2):
        assert ModelArchive.load(out / f"depth{H}" / "model.dga").provenance["depth"] == H
    assert (out / "model_selection.svg").exists()


def test_config_errors_exit_4(tmp_path, capsys):
    bad = _write_config(tmp_path / "bad.yaml", experiment="toy-hierarchy", optimiser={"restarts": 2})
    assert cli.main(["train", "--config", bad, "--out", str(tmp_path / "t")]) == cli.EXIT_CONFIG
    assert "optimiser" in capsys.readouterr().err
    cfg = _write_config(tmp_path / "c.yaml", experiment="toy-hierarchy")
    missing = str(tmp_path / "nope.dga")
    assert cli.main(["evaluate", "--config", cfg, "--archive", missing, "--out", str(tmp_path / "e")]) == 4
    assert cli.main(["train", "--config", str(tmp_path / "none.yaml")]) == cli.EXIT_CONFIG


def test_numerical_failure_exit_3(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericalFailure("no finite step")

    monkeypatch.setattr(cli, "train_model", boom)
    cfg = _write_config(tmp_path / "c.yaml", experiment="toy-hierarchy")
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == cli.EXIT_NUMERICAL


def test_exit_codes_are_distinct():
    assert len({cli.EXIT_OK, cli.EXIT_ITER_CAP, cli.EXIT_NUMERICAL, cli.EXIT_CONFIG}) == 4
