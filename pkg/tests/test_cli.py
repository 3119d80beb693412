import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import torch
import yaml

from nullspace_recon import cli
from nullspace_recon.data import read_dataset
from nullspace_recon.nn import load_checkpoint
from nullspace_recon.recon import METHODS, ReconMethod

SMALL = """
study: masked_fourier
grid: 16
n_train: 12
n_test: 6
n_val: 4
methods: [Pseudoinverse, Residual1, ProjResidual1, NullSpace1, NullSpace1Unc]
train: {epochs: 2, batch_size: 4, base_channels: 4, depth: 2, learning_rate: 0.003}
eval: {uq_images: 6, ood_images: 2, n_panels: 2, square_size: 4, salt_pepper_size: 4}
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL + f"out: {tmp_path / 'run'}\n")
    return path


def run(*args):
    return cli.main([str(a) for a in args])


def _manifest(tmp_path):
    return json.loads((tmp_path / "run" / "data" / "manifest.json").read_text())


def test_config_dump(capsys):
    assert run("config", "dump") == 0
    dumped = yaml.safe_load(capsys.readouterr().out)
    assert dumped["grid"] == 64 and dumped["n_train"] == 2000
    assert run("config", "dump", "--full", "--seed", "5") == 0
    dumped = yaml.safe_load(capsys.readouterr().out)
    assert dumped["grid"] == 192 and dumped["ct"]["n_angles"] == 60
    assert dumped["train"]["seed"] == 5


def test_usage_errors(cfg_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("train", "--method", "NullSpace9")
    assert exc.value.code == 2
    # no dataset yet
    assert run("train", "--config", cfg_path, "--method", "NullSpace1") == 2
    assert "gen-data" in capsys.readouterr().err


def test_gen_data_counts_refusal_and_reproducibility(cfg_path, tmp_path):
    assert run("gen-data", "--config", cfg_path, "--train", 20, "--test", 5, "--val", 0) == 0
    manifest = _manifest(tmp_path)
    assert sum(s["count"] for s in manifest["splits"].values()) == 25
    assert run("gen-data", "--config", cfg_path) == 2
    assert run("gen-data", "--config", cfg_path, "--train", 20, "--test", 5, "--val", 0,
               "--force") == 0
    assert _manifest(tmp_path) == manifest


def test_train_with_zero_learning_rate(cfg_path, tmp_path):
    assert run("gen-data", "--config", cfg_path) == 0
    assert run("train", "--config", cfg_path, "--method", "NullSpace1", "--epochs", 1,
               "--lr", 0) == 0
    op = cli.effective_config(cli.build_parser().parse_args(
        ["eval", "--config", str(cfg_path)])).build_operator()
    ckpt = tmp_path / "run" / "checkpoints" / "NullSpace1"
    trained, _ = load_checkpoint(ckpt / "final.bin")
    initial = ReconMethod(op, "NullSpace1", base_channels=4, depth=2, seed=0).initialize()
    for a, b in zip(trained[0].state_dict().values(), initial.nets_[0].state_dict().values()):
        assert torch.equal(a, b)
    with open(ckpt / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and np.isfinite(float(rows[0]["loss"]))
    _, splits = read_dataset(tmp_path / "run" / "data", ["val"])
    x_val, y_val = splits["val"]
    pinv_psnr = ReconMethod(op, "Pseudoinverse").score(y_val, x_val)
    assert float(rows[0]["val_psnr"]) == pytest.approx(pinv_psnr, abs=1e-9)
    assert run("train", "--config", cfg_path, "--method", "NullSpace1") == 2  # already trained


def test_train_fault_names_batch_seed(cfg_path, tmp_path, monkeypatch, capsys):
    assert run("gen-data", "--config", cfg_path) == 0
    monkeypatch.setattr(ReconMethod, "_loss", lambda self, a, b: torch.tensor(float("nan")))
    assert run("train", "--config", cfg_path, "--method", "Residual1") == 1
    err = capsys.readouterr().err
    assert "shuffle seed [0, 0]" in err
    fault = json.loads((tmp_path / "run" / "checkpoints" / "Residual1" / "fault.json").read_text())
    assert fault["batch_seed"] == [0, 0]


def test_eval_and_uq_report(cfg_path, tmp_path, capsys):
    assert run("gen-data", "--config", cfg_path) == 0
    for method in ("Residual1", "NullSpace1", "NullSpace1Unc"):
        assert run("train", "--config", cfg_path, "--method", method) == 0
    (tmp_path / "run" / "checkpoints" / "NullSpace1Unc" / "final.bin").rename(
        tmp_path / "run" / "moved.bin")
    assert run("eval", "--config", cfg_path) == 0
    out = capsys.readouterr().out
    assert "NullSpace1Unc" in out and "absent" in out
    with open(tmp_path / "run" / "eval" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    order = [r["method"] for r in rows]
    assert order == sorted(order, key=METHODS.index)
    assert order[0] == "Pseudoinverse"
    by = {r["method"]: r for r in rows}
    assert by["NullSpace1Unc"]["status"] == "absent"
    assert float(by["NullSpace1"]["dc_gap"]) <= 1e-5
    assert float(by["Residual1"]["dc_gap"]) > float(by["NullSpace1"]["dc_gap"])
    assert (tmp_path / "run" / "eval" / "panels.png").exists()
    assert (tmp_path / "run" / "eval" / "recons" / "NullSpace1_000.png.f32").exists()

    (tmp_path / "run" / "moved.bin").rename(
        tmp_path / "run" / "checkpoints" / "NullSpace1Unc" / "final.bin")
    assert run("uq-report", "--config", cfg_path, "--method", "NullSpace1") == 2
    assert run("uq-report", "--config", cfg_path, "--oracle-sigma") == 0
    summary = json.loads((tmp_path / "run" / "uq" / "summary.json").read_text())
    assert all(lv["pearson_r"] == pytest.approx(1.0, abs=1e-9) for lv in summary["levels"])
    assert run("uq-report", "--config", cfg_path) == 0
    summary = json.loads((tmp_path / "run" / "uq" / "summary.json").read_text())
    assert len(summary["levels"]) == 3
    assert set(summary["ood"]) == {"SquareInsert", "SaltPepperRegion"}
    assert (tmp_path / "run" / "uq" / "ood_SquareInsert_00.png").exists()


def test_oracle_check_fault_injection(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("grid: 16\nct: {n_angles: 12}\n")
    assert run("oracle-check", "--config", cfg, "--fault", "adjoint", "--out", tmp_path) == 1
    captured = capsys.readouterr()
    assert "[FAIL] adjoint dot-test: LimitedAngleRadon" in captured.out
    assert "adjoint dot-test: LimitedAngleRadon" in captured.err
    report = json.loads((tmp_path / "oracle_check.json").read_text())
    assert all({"measured", "tolerance"} <= set(r) for r in report)
    assert sum(not r["passed"] for r in report) == 1


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nullspace_recon", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("gen-data", "train", "eval", "uq-report", "oracle-check", "config"):
        assert command in proc.stdout
