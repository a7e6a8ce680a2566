import csv
import json
import subprocess
import sys
import time

from graphshift.cli import main

FAST = ["--set", "graphs_per_class=20", "--set", "num_clients=4", "--set", "num_malicious=1",
        "--set", "rounds=2", "--set", "model=gcn", "--set", "hidden=8", "--set", "pretrain_epochs=30",
        "--set", "stage1_epochs=2", "--set", "stage2_epochs=2", "--set", "repeats=1"]


def test_ingest_fixture(two_graph_dir, tmp_path, capsys):
    assert main(["ingest", str(two_graph_dir), "--out", str(tmp_path / "out")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("graphs=2 classes=2 class_ratio=1/1 avg_nodes=2.50 avg_edges=2.00 feature_dim=1")
    assert (tmp_path / "out" / "dataset" / "TWO_A.txt").exists()


def test_ingest_missing_path(tmp_path, capsys):
    assert main(["ingest", str(tmp_path / "nope")]) != 0
    assert "does not exist" in capsys.readouterr().err


def test_ingest_parse_error(tmp_path, capsys):
    d = tmp_path / "BAD"
    d.mkdir()
    (d / "BAD_A.txt").write_text("1, 9\n")
    (d / "BAD_graph_indicator.txt").write_text("1\n1\n")
    (d / "BAD_graph_labels.txt").write_text("0\n")
    assert main(["ingest", str(d)]) == 2
    assert "BAD_A.txt:1" in capsys.readouterr().err


def test_invalid_override_is_rejected(tmp_path, capsys):
    assert main(["train", "--set", "p=1.5", "--out", str(tmp_path)]) == 2
    assert "p=1.5" in capsys.readouterr().err


def test_every_violation_is_reported(tmp_path, capsys):
    assert main(["train", "--set", "p=1.5", "--set", "k=0", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "p=1.5" in err and "k=0" in err


def test_unknown_key_is_rejected(tmp_path, capsys):
    assert main(["attack", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_train_on_two_graph_fixture_is_fast(two_graph_dir, tmp_path):
    out = tmp_path / "run"
    start = time.perf_counter()
    code = main(["train", "--set", f"dataset={two_graph_dir}", "--set", "rounds=1", "--set", "num_clients=2",
                 "--set", "num_malicious=0", "--set", "repeats=1", "--out", str(out)])
    assert code == 0 and time.perf_counter() - start < 10
    assert {p.name for p in out.iterdir()} == {"manifest.json", "rounds_seed0.csv", "model_seed0.txt"}
    rows = list(csv.reader((out / "rounds_seed0.csv").open()))
    assert len(rows) == 2 and rows[1][0] == "1"


def test_manifest_contents(tmp_path):
    assert main(["attack", *FAST, "--seed", "4", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["command"] == "attack" and doc["seeds"] == [4] and doc["config"]["rounds"] == 2
    rows = list(csv.reader((tmp_path / "results_shifter.csv").open()))
    assert len(rows) == 2 and rows[1][7] == "4"


def test_q3_writes_three_convergence_files(tmp_path, capsys):
    assert main(["q3", *FAST, "--out", str(tmp_path)]) == 0
    names = sorted(p.name for p in tmp_path.glob("convergence_*.csv"))
    assert names == ["convergence_cold.csv", "convergence_full.csv", "convergence_warm.csv"]
    for name in names:
        rows = list(csv.reader((tmp_path / name).open()))
        assert rows[0] == ["variant", "epoch", "asr", "loss"] and len(rows) == 3
    assert "epochs to ASR" in capsys.readouterr().out


def test_rerun_from_manifest_is_bit_identical(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["attack", *FAST, "--set", "attack=random", "--out", str(first)]) == 0
    assert main(["attack", "--config", str(first / "manifest.json"), "--out", str(second)]) == 0
    assert (first / "results_random.csv").read_bytes() == (second / "results_random.csv").read_bytes()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "graphshift", "train", "--set", "p=2", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "p=2" in proc.stderr
