"""Tests for the command-line driver: subcommands, exit codes, manifests."""

import json
import subprocess
import sys

import numpy as np
import pytest

from ocn.cli import main
from ocn.data import synthesize_digits, write_dataset
from ocn.gabor import deserialize_bank
from ocn.solver import read_landmark_bank


def run_cli(*args):
    """Run the CLI in a subprocess; returns (exit code, stdout, stderr)."""
    proc = subprocess.run(
        [sys.executable, "-m", "ocn.cli", *map(str, args)],
        capture_output=True,
        text=True,
        timeout=300,
    )
    return proc.returncode, proc.stdout, proc.stderr


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("digits")
    write_dataset(synthesize_digits(60, seed=100), d, train=True)
    write_dataset(synthesize_digits(30, seed=200), d, train=False)
    return d


@pytest.fixture(scope="module")
def tiny_bank(tmp_path_factory):
    path = tmp_path_factory.mktemp("bank") / "bank.lgfb"
    code, _, _ = run_cli(
        "gen-bank", "--size", 3, "--angles-step", 5, "--scale", 1, "--out", path
    )
    assert code == 0
    return path


@pytest.fixture(scope="module")
def landmarks(tmp_path_factory, tiny_bank):
    path = tmp_path_factory.mktemp("lm") / "lm.lgf"
    code, _, _ = run_cli(
        "fit-lgf", "--bank", tiny_bank, "--q", 4, "--max-iters", 200, "--out", path
    )
    assert code == 0
    return path


# ---------------------------------------------------------------------------
# gen-bank


def test_gen_bank_writes_bank(tmp_path):
    out = tmp_path / "b.lgfb"
    code, stdout, _ = run_cli(
        "gen-bank", "--size", 5, "--angles-step", 5, "--scale", 1, "--out", out
    )
    assert code == 0
    fm = deserialize_bank(out)
    assert fm.x.shape == (25, 36)
    assert "36 orientations" in stdout


def test_gen_bank_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.lgfb", tmp_path / "b.lgfb"
    for out in (a, b):
        assert run_cli("gen-bank", "--size", 3, "--out", out)[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_bank_even_size_is_usage_error(tmp_path):
    code, _, stderr = run_cli("gen-bank", "--size", 4, "--out", tmp_path / "b")
    assert code == 2
    assert "odd" in stderr


def test_gen_bank_bad_angle_step(tmp_path):
    code, _, stderr = run_cli(
        "gen-bank", "--size", 3, "--angles-step", 7, "--out", tmp_path / "b"
    )
    assert code == 2
    assert "divide 180" in stderr


def test_manifest_written_on_success(tmp_path):
    out = tmp_path / "b.lgfb"
    assert run_cli("gen-bank", "--size", 3, "--out", out)[0] == 0
    manifest = json.loads((tmp_path / "b.lgfb.manifest.json").read_text())
    assert manifest["status"] == "success"
    assert manifest["config"]["size"] == 3
    assert str(out) in manifest["outputs"]
    assert manifest["seed"] == 0
    assert manifest["wall_time_s"] >= 0.0
    assert "gen-bank" in manifest["command_line"]


def test_manifest_written_on_failure(tmp_path):
    out = tmp_path / "lm.lgf"
    code, _, _ = run_cli("fit-lgf", "--bank", tmp_path / "missing.lgfb", "--out", out)
    assert code == 3
    manifest = json.loads((tmp_path / "lm.lgf.manifest.json").read_text())
    assert manifest["status"] == "error"
    assert "missing.lgfb" in manifest["error"]


# ---------------------------------------------------------------------------
# fit-lgf


def test_fit_lgf_outputs(tmp_path, tiny_bank):
    out = tmp_path / "lm.lgf"
    code, stdout, _ = run_cli(
        "fit-lgf", "--bank", tiny_bank, "--q", 3, "--max-iters", 150, "--out", out
    )
    assert code == 0
    assert "D = " in stdout and "iterations" in stdout
    bank = read_landmark_bank(out)
    assert bank.landmarks.shape == (9, 3)
    assert bank.coefficients.shape == (3, 36)
    history = (tmp_path / "lm.lgf.history.csv").read_text().splitlines()
    assert history[0] == "iter,objective"
    assert len(history) > 2


def test_fit_lgf_rerun_is_byte_identical(tmp_path, tiny_bank):
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.lgf"
        assert (
            run_cli(
                "fit-lgf", "--bank", tiny_bank, "--q", 3, "--max-iters", 100,
                "--seed", 7, "--out", out,
            )[0]
            == 0
        )
        blobs.append((out.read_bytes(), (tmp_path / f"{name}.lgf.history.csv").read_bytes()))
    assert blobs[0] == blobs[1]


def test_fit_lgf_zero_q_is_usage_error(tmp_path, tiny_bank):
    code, _, stderr = run_cli(
        "fit-lgf", "--bank", tiny_bank, "--q", 0, "--out", tmp_path / "lm"
    )
    assert code == 2
    assert "q must be positive" in stderr


def test_fit_lgf_requires_bank_flag(tmp_path):
    code, _, stderr = run_cli("fit-lgf", "--out", tmp_path / "lm")
    assert code == 2
    assert "--bank" in stderr


# ---------------------------------------------------------------------------
# now sweep


def write_grid(path, rows):
    path.write_text("# rho,mu,gamma,lambda\n" + "\n".join(rows) + "\n")


def test_sweep_grid_file(tmp_path):
    grid = tmp_path / "grid.csv"
    write_grid(grid, ["0.05,0.05,0.05,0.05", "0.005,0.005,0.005,0.01"])
    out = tmp_path / "sweep.csv"
    code, stdout, _ = run_cli(
        "sweep", "--grid", grid, "--size", 3, "--angles-step", 45,
        "--q", 2, "--max-iters", 100, "--out", out,
    )
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "rho,mu,gamma,lambda,D,iters,objective,error"
    assert len(lines) == 3
    assert "best D" in stdout


def test_sweep_deterministic_and_jobs_invariant(tmp_path):
    grid = tmp_path / "grid.csv"
    write_grid(
        grid,
        ["0.05,0.05,0.05,0.05", "0.01,0.01,0.01,0.01", "0.1,0.1,0.1,0.1"],
    )
    blobs = []
    for name, jobs in (("a", 1), ("b", 1), ("c", 3)):
        out = tmp_path / f"{name}.csv"
        assert (
            run_cli(
                "sweep", "--grid", grid, "--size", 3, "--angles-step", 45,
                "--q", 2, "--max-iters", 80, "--jobs", jobs, "--out", out,
            )[0]
            == 0
        )
        blobs.append(out.read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]


def test_sweep_empty_grid_is_usage_error(tmp_path):
    grid = tmp_path / "grid.csv"
    grid.write_text("# nothing here\n")
    code, _, stderr = run_cli("sweep", "--grid", grid, "--out", tmp_path / "s.csv")
    assert code == 2
    assert "no parameter rows" in stderr


def test_sweep_malformed_grid_line(tmp_path):
    grid = tmp_path / "grid.csv"
    grid.write_text("0.05,0.05\n")
    code, _, stderr = run_cli("sweep", "--grid", grid, "--out", tmp_path / "s.csv")
    assert code == 2
    assert "rho,mu,gamma,lambda" in stderr


# ---------------------------------------------------------------------------
# train / eval


def test_train_then_eval(tmp_path, data_dir, landmarks):
    model = tmp_path / "m.ocnm"
    code, stdout, _ = run_cli(
        "train", "--arch", "ocn", "--widths", "2-3-4-5", "--orientations", 2,
        "--landmarks", landmarks, "--data", data_dir, "--train-count", 40,
        "--epochs", 1, "--batch-size", 16, "--lr", 0.05, "--out", model,
    )
    assert code == 0
    assert "epoch 0" in stdout
    metrics = (tmp_path / "m.ocnm.metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,train_loss,test_error,lr,seconds"
    assert len(metrics) == 2

    report_path = tmp_path / "r.json"
    code, stdout, _ = run_cli(
        "eval", "--checkpoint", model, "--data", data_dir, "--test-count", 20,
        "--rotated", "--out", report_path,
    )
    assert code == 0
    report = json.loads(report_path.read_text())
    assert 0.0 <= report["error_rate"] <= 100.0
    assert len(report["per_class_errors"]) == 10
    assert report["param_count"] > 0
    assert "wall_time" not in report


def test_train_checkpoint_rerun_is_byte_identical(tmp_path, data_dir):
    blobs = []
    for name in ("a", "b"):
        model = tmp_path / f"{name}.ocnm"
        assert (
            run_cli(
                "train", "--arch", "cnn", "--widths", "2-2-2-2", "--data", data_dir,
                "--train-count", 30, "--epochs", 1, "--batch-size", 10,
                "--seed", 3, "--out", model,
            )[0]
            == 0
        )
        blobs.append(model.read_bytes())
    assert blobs[0] == blobs[1]


def test_eval_rerun_is_byte_identical(tmp_path, data_dir):
    model = tmp_path / "m.ocnm"
    assert (
        run_cli(
            "train", "--arch", "cnn", "--widths", "2-2-2-2", "--data", data_dir,
            "--train-count", 20, "--epochs", 0, "--out", model,
        )[0]
        == 0
    )
    blobs = []
    for name in ("a", "b"):
        report = tmp_path / f"{name}.json"
        assert (
            run_cli(
                "eval", "--checkpoint", model, "--data", data_dir, "--rotated",
                "--seed", 5, "--out", report,
            )[0]
            == 0
        )
        blobs.append(report.read_bytes())
    assert blobs[0] == blobs[1]


def test_epochs_zero_gives_chance_level_error(tmp_path, data_dir):
    # an untrained network evaluated on balanced data sits near 90% error
    model = tmp_path / "m.ocnm"
    assert (
        run_cli(
            "train", "--arch", "cnn", "--widths", "2-2-2-2", "--data", data_dir,
            "--train-count", 0, "--epochs", 0, "--out", model,
        )[0]
        == 0
    )
    metrics = (tmp_path / "m.ocnm.metrics.csv").read_text().splitlines()
    assert len(metrics) == 1  # header only, no epochs ran
    report_path = tmp_path / "r.json"
    assert (
        run_cli(
            "eval", "--checkpoint", model, "--data", data_dir,
            "--test-count", 0, "--out", report_path,
        )[0]
        == 0
    )
    report = json.loads(report_path.read_text())
    assert 60.0 <= report["error_rate"] <= 100.0


def test_train_ocn_requires_landmarks(tmp_path, data_dir):
    code, _, stderr = run_cli(
        "train", "--arch", "ocn", "--data", data_dir, "--epochs", 0,
        "--out", tmp_path / "m",
    )
    assert code == 2
    assert "--landmarks" in stderr


def test_train_kernel_bank_mismatch(tmp_path, data_dir, landmarks):
    code, _, stderr = run_cli(
        "train", "--arch", "ocn", "--kernel", 5, "--landmarks", landmarks,
        "--data", data_dir, "--epochs", 0, "--out", tmp_path / "m",
    )
    assert code == 2
    assert "3x3" in stderr and "5x5" in stderr


def test_missing_data_dir_is_data_error(tmp_path, landmarks):
    code, _, _ = run_cli(
        "train", "--arch", "cnn", "--data", tmp_path / "nope", "--epochs", 0,
        "--out", tmp_path / "m",
    )
    assert code == 3


def test_divergence_is_numerical_error(tmp_path, data_dir):
    code, _, stderr = run_cli(
        "train", "--arch", "cnn", "--widths", "2-2-2-2", "--data", data_dir,
        "--train-count", 30, "--epochs", 3, "--batch-size", 8, "--lr", 1e12,
        "--out", tmp_path / "m",
    )
    assert code == 4
    assert "diverged" in stderr


def test_missing_checkpoint_is_data_error(tmp_path, data_dir):
    code, _, _ = run_cli(
        "eval", "--checkpoint", tmp_path / "nope.ocnm", "--data", data_dir,
        "--out", tmp_path / "r.json",
    )
    assert code == 3


# ---------------------------------------------------------------------------
# settings resolution (in-process: needs env control)


def test_data_dir_falls_back_to_env(tmp_path, data_dir, monkeypatch, capsys):
    model = tmp_path / "m.ocnm"
    monkeypatch.setenv("OCN_DATA_DIR", str(data_dir))
    code = main(
        ["train", "--arch", "cnn", "--widths", "2-2-2-2", "--train-count", "10",
         "--epochs", "0", "--out", str(model)]
    )
    assert code == 0
    assert model.exists()


def test_no_data_dir_is_usage_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("OCN_DATA_DIR", raising=False)
    code = main(
        ["train", "--arch", "cnn", "--epochs", "0", "--out", str(tmp_path / "m")]
    )
    assert code == 2
    assert "OCN_DATA_DIR" in capsys.readouterr().err


def test_config_file_supplies_defaults(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"size": 5, "angles_step": 45.0}))
    out = tmp_path / "b.lgfb"
    assert main(["gen-bank", "--config", str(cfg), "--out", str(out)]) == 0
    fm = deserialize_bank(out)
    assert fm.spec.kernel_size == 5
    assert fm.x.shape[1] == 4  # 45 degree lattice


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"size": 5}))
    out = tmp_path / "b.lgfb"
    assert main(["gen-bank", "--config", str(cfg), "--size", "3", "--out", str(out)]) == 0
    assert deserialize_bank(out).spec.kernel_size == 3
    manifest = json.loads((tmp_path / "b.lgfb.manifest.json").read_text())
    assert manifest["config"]["size"] == 3


def test_invalid_config_json_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    assert main(["gen-bank", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 2


def test_unknown_flag_exits_2(tmp_path):
    code, _, _ = run_cli("gen-bank", "--bogus", 1, "--out", tmp_path / "b")
    assert code == 2


def test_missing_out_exits_2():
    code, _, _ = run_cli("gen-bank", "--size", 3)
    assert code == 2
