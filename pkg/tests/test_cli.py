import json
import subprocess
import sys
from pathlib import Path

import pytest

from gdpdistill.cli import main
from gdpdistill.config import golden_config
from gdpdistill.tasks import MixtureSpec

GOLDEN = json.loads(Path(__file__).with_name("golden.json").read_text())


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_account_to_gdp(capsys):
    code, out, _ = run(capsys, "account", "to-gdp", "--eps", "10", "--delta", "1e-5")
    assert code == 0
    assert out.startswith("mu = ")
    assert abs(float(out.split("=")[1]) - 2.00) <= 0.02


def test_account_compose(capsys):
    code, out, _ = run(capsys, "account", "compose", "--mu", "0.27,1.48,1.30")
    assert code == 0 and out == "mu = 1.98829\n"
    assert run(capsys, "account", "compose", "--mu", "5")[1] == "mu = 5\n"
    assert run(capsys, "account", "compose", "--mu", "0.3,0.7", "--parallel")[1] == "mu = 0.7\n"


def test_account_to_dp_and_subsample(capsys):
    _, out, _ = run(capsys, "account", "to-dp", "--mu", "2", "--eps", "0")
    assert out.splitlines()[1] == "delta = 0.682689"
    _, out, _ = run(capsys, "account", "subsample", "--p", "1", "--T", "1", "--sigma", "1")
    assert out == "mu = 1.31083\n"
    _, out, _ = run(capsys, "account", "sigma", "--mu", "1", "--p", "1", "--T", "1")
    assert out == "sigma = 1.20112\n"


def test_account_errors(capsys):
    code, _, err = run(capsys, "account", "to-gdp", "--eps", "10", "--delta", "0")
    assert code == 2 and "delta" in err
    code, _, err = run(capsys, "account", "subsample", "--p", "0.5", "--T", "10", "--sigma", "0.01")
    assert code == 1 and "0.05" in err
    with pytest.raises(SystemExit) as info:
        main(["account", "compose", "--mu", "a,b"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["account"])
    assert info.value.code == 2


def test_allocate_explicit(capsys):
    code, out, _ = run(capsys, "allocate", "--eps", "10", "--mu-g", "0.27", "--mu-e", "1.30", "--p", "0.0256",
                       "--T", "2000")
    assert code == 0
    rows = dict(line.split(",", 1) for line in out.splitlines()[1:4])
    assert rows["matching"].startswith("1.49629")


def test_allocate_infeasible_names_components(capsys):
    code, _, err = run(capsys, "allocate", "--eps", "10", "--mu-g", "2", "--mu-e", "2", "--p", "0.1", "--T", "10")
    assert code == 1 and "mu_g" in err and "mu_e" in err


def test_allocate_from_config_json(capsys, tmp_path):
    path = tmp_path / "cfg.json"
    golden_config().save(path)
    code, out, _ = run(capsys, "allocate", "--config", str(path), "--json")
    assert code == 0
    plan = json.loads(out)
    assert plan["delta_spent"] <= 1e-5
    assert run(capsys, "allocate", "--config", str(path), "--json")[1] == out


def test_config_command_round_trips(capsys):
    _, out, _ = run(capsys, "config")
    assert out == golden_config().to_json()


def tiny_config(tmp_path):
    cfg = golden_config()
    cfg.task = MixtureSpec(dim=4, num_classes=3, per_class=80, test_per_class=50, seed=3)
    cfg.generator.synthetic_per_class = 100
    cfg.extractor.epochs = 1
    cfg.expert.pretrain_epochs = 1
    cfg.expert.finetune_epochs = 1
    cfg.distill.iterations = 5
    cfg.distill.ipc = 2
    cfg.distill.batch_size = 16
    cfg.distill.n_extractors = 1
    cfg.eval.epochs = 5
    cfg.eval.seeds = [0]
    path = tmp_path / "cfg.json"
    cfg.save(path)
    return path


def test_distill_writes_artifacts(capsys, tmp_path):
    cfg = tiny_config(tmp_path)
    out_dir = tmp_path / "out"
    code, out, _ = run(capsys, "distill", "--config", str(cfg), "--out", str(out_dir), "--seed", "1")
    assert code == 0
    for name in ("distilled.csv", "ledger.json", "report.json", "moments.json", "loss_trace.csv",
                 "loss_trace.png", "budget.png", "projection.png"):
        assert (out_dir / name).stat().st_size > 0
    assert (out_dir / "loss_trace.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    report = json.loads((out_dir / "report.json").read_text())
    assert report["status"] == "complete"
    assert report["ledger"]["delta_spent"] <= 1e-5
    assert "undeclared_reads = 0" in out


def test_distill_reports_are_byte_identical(capsys, tmp_path):
    cfg = tiny_config(tmp_path)
    for d in ("a", "b"):
        assert run(capsys, "distill", "--config", str(cfg), "--out", str(tmp_path / d), "--no-figures")[0] == 0
    for name in ("report.json", "ledger.json", "distilled.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_environment_variable(capsys, tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path)
    monkeypatch.setenv("GDPDISTILL_SEED", "42")
    run(capsys, "distill", "--config", str(cfg), "--out", str(tmp_path / "env"), "--no-figures", "--no-eval")
    assert json.loads((tmp_path / "env" / "report.json").read_text())["seed"] == 42
    run(capsys, "distill", "--config", str(cfg), "--out", str(tmp_path / "flag"), "--no-figures", "--no-eval",
        "--seed", "3")
    assert json.loads((tmp_path / "flag" / "report.json").read_text())["seed"] == 3
    monkeypatch.setenv("GDPDISTILL_SEED", "x")
    assert run(capsys, "distill", "--config", str(cfg), "--out", str(tmp_path / "bad"))[0] == 2


def test_distill_failure_is_flagged(capsys, tmp_path):
    cfg = golden_config()
    cfg.allocation.mode = "explicit"
    cfg.allocation.mu_g = cfg.allocation.mu_e = 2.0
    path = tmp_path / "bad.json"
    cfg.save(path)
    code, _, err = run(capsys, "distill", "--config", str(path), "--out", str(tmp_path / "o"))
    assert code == 1 and "InfeasibleBudgetError" in err
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["status"] == "failed"


def test_distill_bad_config_is_usage_error(capsys, tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"nope": 1}')
    assert run(capsys, "distill", "--config", str(path), "--out", str(tmp_path / "o"))[0] == 2
    assert run(capsys, "distill", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o"))[0] == 2


def test_eval_errors(capsys, tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    code, _, err = run(capsys, "eval", str(empty))
    assert code == 2 and "line 1" in err
    bad = tmp_path / "b.csv"
    bad.write_text("y,x0\n0,1\n")
    code, _, err = run(capsys, "eval", str(bad))
    assert code == 2 and "dimension" in err
    header_only = tmp_path / "h.csv"
    header_only.write_text("y," + ",".join(f"x{i}" for i in range(16)) + "\n")
    code, _, err = run(capsys, "eval", str(header_only))
    assert code == 2 and "no data rows" in err


def test_golden_seed_reproduces_committed_values(capsys, tmp_path):
    out_dir = tmp_path / "golden"
    code, _, _ = run(capsys, "distill", "--out", str(out_dir), "--seed", "7", "--no-figures")
    assert code == 0
    report = json.loads((out_dir / "report.json").read_text())
    assert report["metrics"]["downstream"] == GOLDEN["downstream"]
    code, out, _ = run(capsys, "eval", str(out_dir / "distilled.csv"), "--seeds", "0,1,2", "--json")
    assert json.loads(out) == GOLDEN["eval_replay"]


def test_module_entry_point_exit_codes():
    ok = subprocess.run([sys.executable, "-m", "gdpdistill", "account", "compose", "--mu", "3,4"],
                        capture_output=True, text=True)
    assert ok.returncode == 0 and ok.stdout == "mu = 5\n"
    usage = subprocess.run([sys.executable, "-m", "gdpdistill", "frobnicate"], capture_output=True, text=True)
    assert usage.returncode == 2
