import shutil

import numpy as np
import pytest

from unrollgnn.cli import (ConfigError, load_planetoid_like, parse_config_text, resolve, run)
from unrollgnn.graph import GraphError


def test_toy_fixture_loads(toy_dir):
    d = load_planetoid_like(toy_dir)
    assert d.graph.n == 3 and d.X.shape == (3, 2)
    # the reversed duplicate edge collapses
    assert d.graph.original_triplets() == [(0, 0, 1), (1, 0, 2)]
    np.testing.assert_array_equal(d.labels.labels, [0, 0, 1])
    np.testing.assert_array_equal(d.train, [True, False, True])
    np.testing.assert_array_equal(d.test, [False, True, False])


def test_missing_splits_warns(toy_dir, tmp_path):
    d = tmp_path / "nosplit"
    shutil.copytree(toy_dir, d)
    (d / "splits.csv").unlink()
    with pytest.warns(UserWarning, match="splits.csv"):
        data = load_planetoid_like(d)
    np.testing.assert_array_equal(data.train, data.labels.mask)


def test_duplicate_labels_rejected(toy_dir, tmp_path):
    d = tmp_path / "dup"
    shutil.copytree(toy_dir, d)
    (d / "labels.csv").write_text("0,0\n0,1\n")
    with pytest.raises(GraphError, match="duplicate"):
        load_planetoid_like(d)


def test_node_count_disagreement(toy_dir, tmp_path):
    d = tmp_path / "bad"
    shutil.copytree(toy_dir, d)
    (d / "edges.tsv").write_text("0\t0\t7\n")
    with pytest.raises(GraphError, match="edges.tsv"):
        load_planetoid_like(d)


def test_config_parsing_aggregates_errors():
    cfg = parse_config_text("# c\ngamma = 0.5\nlayers=3\nbacktrack=true\n")
    assert cfg == {"gamma": 0.5, "layers": 3, "backtrack": True}
    with pytest.raises(ConfigError) as exc:
        parse_config_text("colour=red\ngamma=abc\nnoequals\n")
    msg = str(exc.value)
    assert "colour" in msg and "gamma" in msg and ":3:" in msg


def test_missing_keys_reported_together():
    with pytest.raises(ConfigError) as exc:
        resolve({"energy": "quadratic"}, "unroll")
    assert "algo=" in str(exc.value) and "gamma=" in str(exc.value) and "layers=" in str(exc.value)


def test_missing_gamma_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("energy=quadratic\nalgo=gd\nlayers=3\n")
    assert run(["unroll", "--config", str(cfg), "--output-dir", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "gamma=" in err and err.count("error") == 1


def test_unroll_trace_monotone(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("energy=quadratic\nalgo=momentum\ngamma=0.9\nlayers=40\nbacktrack=true\n")
    assert run(["unroll", "--config", str(cfg), "--output-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,energy" and len(lines) == 42
    E = [float(ln.split(",")[1]) for ln in lines[1:]]
    assert all(b <= a for a, b in zip(E, E[1:]))
    assert (tmp_path / "embeddings.csv").exists()
    assert capsys.readouterr().out.count("\n") == 1


def test_outputs_byte_identical(tmp_path, toy_dir):
    outs = []
    for i in range(2):
        o = tmp_path / str(i)
        assert run(["unroll", "--output-dir", str(o), "--set", f"dataset_dir={toy_dir}",
                    "--set", "energy=huber", "--set", "algo=adam", "--set", "gamma=0.1",
                    "--set", "layers=5"]) == 0
        outs.append((o / "trace.csv").read_bytes() + (o / "embeddings.csv").read_bytes())
    assert outs[0] == outs[1]


def test_verify_subset(tmp_path, monkeypatch):
    monkeypatch.setenv("UNROLLGNN_THREADS", "2")
    assert run(["verify", "--seed", "7", "--trials", "1", "--output-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "verify_report.csv").read_text().splitlines()
    assert lines[0] == "pairing,check,max_error,tolerance,status"
    assert len(lines) == 1 + 49 * 5
    assert all(ln.endswith(",pass") for ln in lines[1:])


def test_lp_and_grmlp(tmp_path, capsys):
    assert run(["lp", "--mode", "standard", "--output-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("accuracy=")
    assert (tmp_path / "predictions.csv").read_text().startswith("node_id,class_id\n0,")
    assert run(["grmlp", "--overparam", "--output-dir", str(tmp_path)]) == 0
    assert "accuracy=" in capsys.readouterr().out


def test_lp_on_toy(tmp_path, toy_dir, capsys):
    assert run(["lp", "--mode", "standard", "--set", f"dataset_dir={toy_dir}",
                "--set", "layers=1", "--output-dir", str(tmp_path)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "accuracy=1"
    assert (tmp_path / "predictions.csv").read_text() == "node_id,class_id\n0,0\n1,0\n2,1\n"


def test_train(tmp_path):
    assert run(["train", "--output-dir", str(tmp_path), "--set", "energy=quadratic",
                "--set", "algo=gd", "--set", "gamma=0.2", "--set", "layers=2",
                "--set", "epochs=5", "--set", "lr=0.05"]) == 0
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,val_acc" and len(lines) == 6


def test_kge_train_and_infer(tmp_path, capsys):
    assert run(["kge-train", "--score", "distmult", "--negatives", "1", "--layers", "2",
                "--set", "epochs=3", "--output-dir", str(tmp_path)]) == 0
    for name in ("relations.csv", "nodes.csv", "kge_loss.csv", "kge_meta.txt", "known.tsv"):
        assert (tmp_path / name).exists()
    new = tmp_path / "new.tsv"
    new.write_text("50\t0\t1\n2\t1\t50\n")
    assert run(["kge-infer", "--new-triplets", str(new), "--k", "10",
                "--output-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "rankings.csv").read_text().splitlines()
    assert lines[0] == "query,gold_rank,hits_at_k" and len(lines) == 3
    assert "hits@10=" in capsys.readouterr().out


def test_detect_outliers(tmp_path, capsys):
    assert run(["detect-outliers", "--fraction", "0.2", "--output-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "outliers.csv").read_text().splitlines()
    assert lines[0] == "rank,node_id,residual" and len(lines) == 13
    res = [float(ln.split(",")[2]) for ln in lines[1:]]
    assert res == sorted(res, reverse=True)
    out = capsys.readouterr().out
    assert float(out.split("detect_ratio=")[1]) >= 80.0


def test_bad_input_file_named(tmp_path, toy_dir, capsys):
    d = tmp_path / "broken"
    shutil.copytree(toy_dir, d)
    (d / "features.csv").write_text("1,0\nx,1\n0,1\n")
    assert run(["lp", "--mode", "prox", "--set", f"dataset_dir={d}",
                "--output-dir", str(tmp_path)]) == 2
    assert "features.csv:2" in capsys.readouterr().err
