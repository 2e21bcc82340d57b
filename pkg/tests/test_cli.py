import csv
import hashlib
import json
import os
import socket
import subprocess
import sys

import pytest

from upfwatch.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def read_json(p):
    return json.loads(p.read_text())


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("sim", "--out", out, "--duration", 20, "--jitter", 0, "--loss", 0) == 0
    return out


def test_sim_outputs(sim_dir):
    lines = (sim_dir / "trace.jsonl").read_text().splitlines()
    truth = list(csv.DictReader((sim_dir / "ground_truth.csv").open()))
    # 20 s at the default 20 Hz, no loss: one request and one response each
    assert len(truth) == 400
    assert len(lines) == 2 * len(truth)
    m = read_json(sim_dir / "manifest.json")
    assert m["subcommand"] == "sim" and m["format_version"] == 1
    assert m["seeds"] == {"sim": 0}
    for name, digest in m["outputs"].items():
        assert hashlib.sha256((sim_dir / name).read_bytes()).hexdigest() == digest
    assert set(m) >= {"tool_version", "config", "inputs", "backend", "duration_s", "created_at"}


def test_sim_same_seed_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("sim", "--out", tmp_path / name, "--duration", 5, "--seed", 3) == 0
    for f in ("trace.jsonl", "ground_truth.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert run("sim", "--out", tmp_path / "c", "--duration", 5, "--seed", 4) == 0
    assert (tmp_path / "c" / "trace.jsonl").read_bytes() != (tmp_path / "a" / "trace.jsonl").read_bytes()


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_sim_unwritable_dir(tmp_path, capsys):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        assert run("sim", "--out", locked / "x", "--duration", 1) != 0
    finally:
        locked.chmod(0o700)
    assert "error" in capsys.readouterr().err


def test_sim_out_is_a_file(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("sim", "--out", blocker / "sub", "--duration", 1) == 1
    assert "error" in capsys.readouterr().err


def test_sim_bad_value(tmp_path, capsys):
    assert run("sim", "--out", tmp_path, "--loss", 1.5) == 1
    assert capsys.readouterr().err


def test_estimate_noiseless(sim_dir, tmp_path):
    out = tmp_path / "est"
    assert run("estimate", sim_dir / "trace.jsonl", "--out", out, "--svg") == 0
    rep = read_json(out / "regression_report.json")
    assert rep["regression"]["r2_norm"] == pytest.approx(1.0, abs=1e-12)
    assert rep["tracker"]["conserved"] is True
    assert rep["error_hist_mode_bin"] == rep["error_hist_zero_bin"]
    for f in ("samples.csv", "series.csv", "error_hist.csv", "windows.csv", "series.svg"):
        assert (out / f).stat().st_size > 0
    assert (out / "series.svg").read_text().startswith("<svg")
    m = read_json(out / "manifest.json")
    assert m["inputs"] == [str(sim_dir / "trace.jsonl"), str(sim_dir / "ground_truth.csv")]


def test_estimate_missing_truth(sim_dir, tmp_path, capsys):
    lone = tmp_path / "t.jsonl"
    lone.write_bytes((sim_dir / "trace.jsonl").read_bytes())
    assert run("estimate", lone, "--out", tmp_path / "o") == 1
    assert "ground_truth.csv" in capsys.readouterr().err


def test_estimate_missing_trace(tmp_path):
    assert run("estimate", tmp_path / "nope.jsonl", "--out", tmp_path / "o") == 1


def test_train_knn_separable(tmp_path):
    out = tmp_path / "knn"
    assert run("train", "--kind", "knn", "--separation", 10, "--n", 2000, "--runs", 2, "--out", out) == 0
    rep = read_json(out / "report.json")
    assert rep["mean"]["accuracy"] >= 0.99
    rows = list(csv.DictReader((out / "accuracy_runs.csv").open()))
    assert len(rows) == 2
    assert read_json(out / "model.json")["spec"]["kind"] == "knn"
    for cls in ("LOL", "TFT", "VAL"):
        assert (out / f"roc_{cls}.csv").exists() and (out / f"pr_{cls}.csv").exists()


def test_train_params_and_aliases(tmp_path):
    out = tmp_path / "gb"
    assert run("train", "--kind", "catboost", "--param", "n_rounds=3", "--param", "max_depth=2", "--n", 300,
               "--runs", 1, "--out", out) == 0
    spec = read_json(out / "model.json")["spec"]
    assert spec["kind"] == "gradient_boost"
    assert spec["params"]["n_rounds"] == 3 and spec["params"]["max_depth"] == 2


def test_train_bad_param(tmp_path, capsys):
    assert run("train", "--kind", "knn", "--param", "k", "--n", 100, "--out", tmp_path) == 1
    assert run("train", "--kind", "knn", "--param", "k=0", "--n", 100, "--out", tmp_path) == 1


def test_train_unknown_kind_shows_usage(tmp_path):
    res = subprocess.run([sys.executable, "-m", "upfwatch.cli", "train", "--kind", "lstm", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode != 0
    assert "usage:" in res.stderr and "lstm" in res.stderr


def test_train_from_csv(tmp_path):
    rows = ["a,b,game"] + [f"{i % 7},{(i * 3) % 5},{('LOL', 'TFT', 'VAL')[i % 3]}" for i in range(60)]
    data = tmp_path / "d.csv"
    data.write_text("\n".join(rows) + "\n")
    out = tmp_path / "o"
    assert run("train", "--kind", "dt", "--data", data, "--runs", 1, "--out", out) == 0
    assert read_json(out / "manifest.json")["inputs"] == [str(data)]


def test_evaluate_table(tmp_path, capsys):
    out = tmp_path / "ev"
    assert run("evaluate", "--kinds", "knn", "dt", "--n", 600, "--runs", 2, "--out", out) == 0
    rows = list(csv.DictReader((out / "table.csv").open()))
    assert [r["model"] for r in rows] == ["knn", "decision_tree"]
    assert set(rows[0]) == {"model", "accuracy", "precision", "recall", "f1", "accuracy_spread"}
    printed = capsys.readouterr().out
    assert "knn" in printed and "decision_tree" in printed


def test_outputs_deterministic_across_runs(tmp_path):
    for name in ("a", "b"):
        assert run("train", "--kind", "rf", "--param", "n_trees=5", "--n", 400, "--runs", 2,
                   "--out", tmp_path / name) == 0
    ma, mb = read_json(tmp_path / "a" / "manifest.json"), read_json(tmp_path / "b" / "manifest.json")
    assert ma["outputs"] == mb["outputs"]


def test_loop_passes(tmp_path, capsys):
    assert run("loop", "--port", 0, "--out", tmp_path) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in lines] == ["PASS", "PASS"]
    result = read_json(tmp_path / "loop_result.json")
    assert result["passed"] is True


def test_loop_port_conflict(capsys):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        assert run("loop", "--port", s.getsockname()[1]) != 0
    assert "bind" in capsys.readouterr().err


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "upfwatch.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("sim", "estimate", "train", "evaluate", "serve", "loop"):
        assert sub in res.stdout
