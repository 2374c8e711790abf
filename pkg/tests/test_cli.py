import json
import subprocess
import sys

import pytest

from drmgf import bench
from drmgf import diagnostics as dg
from drmgf.cli import main

SMALL = ["--max-iter", "1", "--batch-size", "32", "--data.size", "128", "--data.dim", "8", "--data.classes", "4",
         "--data.tasks", "3", "--model.width", "8", "--model.depth", "3"]


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv(bench.ENV_OUTPUT_ROOT, str(tmp_path / "runs"))
    return tmp_path / "runs"


def test_toy_command(root, capsys):
    assert main(["toy", "--epochs", "3", "--steps-per-epoch", "1"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    table = next(root.glob("toy-*")) / "toy_trajectories.csv"
    rows = dg.read_table(table)
    assert {r["method"] for r in rows} == {"dr-mgf", "sgd-joint", "pcgrad", "independent-0", "independent-1"}
    assert out[-1].endswith(table.parent.name)


def test_gen_data_then_train_on_csv(root, tmp_path, capsys):
    csv = tmp_path / "d.csv"
    assert main(["gen-data", "--size", "96", "--dim", "8", "--classes", "4", "--out", str(csv)]) == 0
    assert csv.read_text().splitlines()[0] == ",".join([f"x{i}" for i in range(8)] + ["y0"])
    assert main(["train", *SMALL, "--set", "data.kind=csv", "--set", f"data.path={csv}",
                 "--probe-conflict", "true"]) == 0
    run_dir = capsys.readouterr().out.splitlines()[-4]
    rec = bench.RunRecord.load(run_dir)
    assert rec.run_config().data.kind == "csv" and len(rec.artifacts["conflict"]) == 1


def test_config_file_and_flag_precedence(root, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("method = sgd-joint\nlr = 0.5\n[model]\nwidth = 8\n")
    assert main(["train", "--config", str(cfg), *SMALL, "--lr", "0.02"]) == 0
    rec = bench.RunRecord.load(next(root.glob("sgd-joint-*")))
    assert rec.config["lr"] == 0.02 and rec.config["model"]["width"] == 8


def test_exit_code_config_error(root, capsys):
    assert main(["train", *SMALL, "--method", "nope"]) == 2
    assert "unknown method" in capsys.readouterr().err
    assert main(["train", *SMALL, "--set", "lr"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_code_numeric_failure(root):
    assert main(["train", *SMALL, "--method", "sgd-joint", "--lr", "1e6", "--max-iter", "3"]) == 3


def test_exit_code_io_failure(root, tmp_path):
    assert main(["report", str(tmp_path / "missing")]) == 4


def test_diagnose_and_report(root, capsys):
    for method in ("dr-mgf", "sgd-joint"):
        assert main(["train", *SMALL, "--method", method]) == 0
    dirs = sorted(str(p) for p in root.iterdir())
    capsys.readouterr()
    assert main(["diagnose", dirs[0], "--studies", "prune,conflict", "--epochs", "1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert "degradation" in summary and "pearson" in summary
    assert main(["report", *dirs]) == 0
    assert (root / "report" / "exits.csv").is_file()
    assert len(dg.read_table(root / "report" / "exits.csv")) == 6


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "drmgf", "gen-data", "--size", "20", "--out", str(tmp_path / "x.csv")],
                         capture_output=True, text=True)
    assert out.returncode == 0 and (tmp_path / "x.csv").is_file()
    bad = subprocess.run([sys.executable, "-m", "drmgf", "frobnicate"], capture_output=True, text=True)
    assert bad.returncode == 2
