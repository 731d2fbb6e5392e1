import csv

import numpy as np
import pytest

from densformer.checkpoint import save_checkpoint
from densformer.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, main, read_config
from densformer.model import ModelConfig, init_weights, perturb_heads


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.bin"
    w = perturb_heads(init_weights(ModelConfig(width=16, heads=2, layers=1, decoder_layers=1), seed=0))
    save_checkpoint(path, w, {"step": 0})
    return str(path)


def read_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config-fingerprint: ")
    return list(csv.DictReader(lines[1:]))


def test_eval_score_kde_laplace(tmp_path):
    assert main(["eval-score", "--oracle", "kde", "--dist", "laplace2d", "--n", "512", "--seeds", "2", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "eval_score.csv")
    assert len(rows) == 2 and rows[0]["dist"] == "laplace" and rows[0]["d"] == "2"
    assert 0.1 < float(rows[0]["mse"]) < 1.0


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DENSFORMER_OUT", str(tmp_path))
    assert main(["fisher", "--dist", "gaussian", "--d", "2", "--n", "1000"]) == 0
    row = read_rows(tmp_path / "fisher.csv")[0]
    assert abs(float(row["estimate"]) - 2.0) < 3 * float(row["stderr"])


def test_seeded_runs_are_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["eval-density", "--oracle", "sd-kde-emp", "--n", "256", "--seeds", "1", "--seed", "3", "--out", str(tmp_path / sub)]) == 0
    assert (tmp_path / "a" / "eval_density.csv").read_text() == (tmp_path / "b" / "eval_density.csv").read_text()


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# sweep\noracle = kde\nn = 256 512\nseeds = 3\n")
    assert read_config(cfg)["n"] == "256 512"
    assert main(["eval-score", "--config", str(cfg), "--seeds", "1", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "eval_score.csv")
    assert [r["n"] for r in rows] == ["256", "512"]


def test_functionals(tmp_path):
    out = str(tmp_path)
    assert main(["entropy", "--dist", "gaussian", "--d", "1", "--n", "2000", "--out", out]) == 0
    row = read_rows(tmp_path / "entropy.csv")[0]
    assert abs(float(row["estimate"]) - float(row["truth"])) < 3 * float(row["stderr"])
    assert main(["rfi", "--d", "2", "--n", "2000", "--shift", "0.5", "--out", out]) == 0
    row = read_rows(tmp_path / "rfi.csv")[0]
    assert float(row["estimate"]) == pytest.approx(0.5)


def test_landau(tmp_path):
    args = ["landau", "--oracle", "exact", "--gamma", "0", "--n-particles", "128", "--steps", "5", "--out", str(tmp_path), "--plot"]
    assert main(args) == 0
    rows = read_rows(tmp_path / "landau.csv")
    tr = [sum(float(r[f"cov_{i}{i}"]) for i in range(3)) for r in rows]
    assert len(rows) == 6 and abs(tr[-1] / tr[0] - 1) < 0.01
    assert (tmp_path / "landau.svg").read_text().startswith("<svg")


def test_bench_times_grow_with_n(tmp_path, checkpoint):
    args = ["bench", "--d", "2", "--log2-min", "9", "--log2-max", "12", "--checkpoint", checkpoint, "--out", str(tmp_path)]
    assert main(args) == 0
    rows = read_rows(tmp_path / "bench_d2.csv")
    assert [int(r["n"]) for r in rows] == [512, 1024, 2048, 4096]
    for key in ("kde_seconds", "transformer_seconds"):
        t = [float(r[key]) for r in rows]
        assert all(b >= a for a, b in zip(t, t[1:]))


def test_transformer_oracle_and_attention(tmp_path, checkpoint):
    out = str(tmp_path)
    assert main(["eval-score", "--oracle", "transformer", "--checkpoint", checkpoint, "--n", "128", "--seeds", "1", "--out", out]) == 0
    assert main(["export-attention", "--checkpoint", checkpoint, "--n", "64", "--layer", "1", "--out", out]) == 0
    data = np.load(tmp_path / "attention_layer1.npz")
    np.testing.assert_allclose(data["heads"].sum(-1), 1.0, atol=1e-6)


def test_train_command(tmp_path):
    args = ["train", "--steps", "3", "--batch", "2", "--n-x", "16", "--width", "16", "--heads", "2", "--layers", "1",
            "--decoder-layers", "1", "--checkpoint-every", "2", "--out", str(tmp_path)]
    assert main(args) == 0
    assert (tmp_path / "ckpt_0000003.bin").exists() and (tmp_path / "telemetry.csv").exists()


def test_unknown_oracle():
    assert main(["eval-score", "--oracle", "magic"]) == EXIT_CONFIG


def test_malformed_config(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("this line has no equals sign\n")
    assert main(["eval-score", "--config", str(cfg)]) == EXIT_CONFIG
    cfg.write_text("colour = blue\n")
    assert main(["eval-score", "--oracle", "kde", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["no-such-command"]) == EXIT_CONFIG


def test_missing_checkpoint(tmp_path):
    assert main(["eval-score", "--oracle", "transformer", "--checkpoint", str(tmp_path / "none.bin")]) == EXIT_MISSING
    assert main(["eval-score", "--oracle", "kde", "--config", str(tmp_path / "none.cfg")]) == EXIT_MISSING


def test_numeric_failure(tmp_path, checkpoint):
    # a single context point cannot be whitened
    assert main(["export-attention", "--checkpoint", checkpoint, "--n", "1", "--out", str(tmp_path)]) == EXIT_NUMERIC
