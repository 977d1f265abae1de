from __future__ import annotations

import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import linear_net
from rankae import checks, cli
from rankae.cli import CliError, RunManifest, main
from rankae.data import load_csv
from rankae.net import build_autoencoder, load_net, save_net
from rankae.trainer import TrainConfig, TrainReport, train

TRAIN_FLAGS = ["--rounds", "2", "--M", "20", "--k", "2", "--inner-max-epochs", "1", "--steps-per-epoch", "5",
               "--hidden", "6", "--code-dim", "5"]


def run(tmp_path, *argv):
    return main(["--out-dir", str(tmp_path / "runs"), *argv])


def only_run(tmp_path, prefix):
    dirs = sorted((tmp_path / "runs").glob(prefix + "-*"))
    assert dirs, f"no {prefix} run directory"
    return dirs[-1]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def check_manifest(run_dir, command):
    m = json.loads((run_dir / "manifest.json").read_text())
    assert m["command"] == command and m["status"] in ("ok", "failed")
    for name in ("config", "seeds", "version", "started", "finished", "argv"):
        assert name in m
    for art in m["artifacts"]:
        assert (run_dir / art).exists()
    return m


@pytest.fixture
def stiefel_csv(tmp_path):
    path = tmp_path / "st.csv"
    assert run(tmp_path, "synth", "stiefel", "--n1", "3", "--n2", "1", "--n", "80", "--seed", "2", "--out", str(path)) == 0
    return path


@pytest.fixture
def mixture_csv(tmp_path):
    path = tmp_path / "mix.csv"
    assert run(tmp_path, "synth", "mixture", "--n1", "3", "--n2", "1", "--n", "80", "--seed", "1", "--out", str(path)) == 0
    return path


def test_synth_stiefel_shape_and_determinism(tmp_path):
    out = tmp_path / "a.csv"
    args = ["synth", "stiefel", "--n1", "4", "--n2", "2", "--n", "2000", "--delta", "0.05", "--seed", "7", "--out", str(out)]
    assert run(tmp_path, *args) == 0
    ds = load_csv(out)
    assert ds.points.shape == (2000, 8)
    first = out.read_bytes(), Path(str(out) + ".meta.json").read_bytes()
    assert run(tmp_path, *args) == 0
    assert (out.read_bytes(), Path(str(out) + ".meta.json").read_bytes()) == first
    assert not out.read_bytes().count(b"\r")


def test_synth_toy_into_run_dir(tmp_path):
    assert run(tmp_path, "synth", "toy", "--n", "5000", "--seed", "1") == 0
    d = only_run(tmp_path, "synth")
    assert d.name.endswith("-seed1")
    assert load_csv(d / "toy.csv").points.shape == (5000, 2)
    m = check_manifest(d, "synth")
    assert set(m["artifacts"]) == {"toy.csv", "toy.csv.meta.json"}


def test_synth_with_clean_and_env_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("RANKAE_OUT_DIR", str(tmp_path / "env"))
    assert main(["synth", "stiefel", "--n", "10", "--with-clean"]) == 0
    d = next((tmp_path / "env").glob("synth-*"))
    assert (d / "stiefel.clean.csv").exists() and (d / "stiefel.csv").exists()


def test_synth_io_error(tmp_path):
    (tmp_path / "file").write_text("")
    assert run(tmp_path, "synth", "toy", "--out", str(tmp_path / "file" / "x.csv")) == 2


def test_run_dirs_are_unique(tmp_path):
    for _ in range(3):
        assert run(tmp_path, "synth", "toy", "--n", "5") == 0
    assert len(list((tmp_path / "runs").glob("synth-*"))) == 3


def test_train_writes_artifacts(tmp_path, stiefel_csv):
    assert run(tmp_path, "train", "--data", str(stiefel_csv), *TRAIN_FLAGS) == 0
    d = only_run(tmp_path, "train")
    m = check_manifest(d, "train")
    assert {"state.json", "net.json", "report.json", "rounds.csv", "config.txt"} <= set(m["artifacts"])
    assert len(read_rows(d / "rounds.csv")) == 2
    net = load_net(d / "net.json")
    assert (net.n, net.code_dim) == (3, 5)
    assert TrainConfig.from_file(d / "config.txt").T == 2


def test_train_matches_library_call(tmp_path, stiefel_csv):
    assert run(tmp_path, "train", "--data", str(stiefel_csv), *TRAIN_FLAGS, "--lambda", "0", "--rounds", "1",
               "--seed", "3", "--net-seed", "4") == 0
    d = only_run(tmp_path, "train")
    cfg = TrainConfig.from_file(d / "config.txt")
    assert (cfg.lam, cfg.T, cfg.seed) == (0.0, 1, 3)
    net, _ = train(load_csv(stiefel_csv), build_autoencoder(3, 5, (6,), seed=4), cfg)
    np.testing.assert_array_equal(load_net(d / "net.json").theta, net.theta)


def test_train_flags_override_config_file(tmp_path, stiefel_csv):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("lambda = 40\ngamma = 0.1\nkappa = 2\n")
    assert run(tmp_path, "train", "--data", str(stiefel_csv), "--config", str(cfg), "--gamma", "0.2", *TRAIN_FLAGS) == 0
    got = TrainConfig.from_file(only_run(tmp_path, "train") / "config.txt")
    assert (got.lam, got.gamma, got.curvature_mode) == (40.0, 0.2, "kappa2")


def test_train_validation_before_compute(tmp_path, stiefel_csv, capsys):
    code = run(tmp_path, "train", "--data", str(stiefel_csv), "--M", "500", "--k", "9", "--m", "0")
    assert code == 2
    err = capsys.readouterr().err
    assert "M=500" in err and "k=9" in err and "m must be" in err
    assert not (tmp_path / "runs").exists()
    assert run(tmp_path, "train", "--data", str(stiefel_csv), "--config", str(tmp_path / "none.txt")) == 2
    assert run(tmp_path, "train", "--data", str(tmp_path / "none.csv")) == 2


def test_train_resume_matches_uninterrupted(tmp_path, stiefel_csv):
    flags = [f for f in TRAIN_FLAGS]
    assert run(tmp_path, "train", "--data", str(stiefel_csv), *flags) == 0
    first = only_run(tmp_path, "train")
    assert run(tmp_path, "train", "--data", str(stiefel_csv), "--resume", str(first / "state.json"), "--rounds", "4") == 0
    resumed = sorted((tmp_path / "runs").glob("train-*"))[-1]
    flags[1] = "4"
    assert run(tmp_path, "train", "--data", str(stiefel_csv), *flags) == 0
    fresh = sorted((tmp_path / "runs").glob("train-*"))[-1]
    assert len({first, resumed, fresh}) == 3
    a = TrainReport.from_dict(json.loads((resumed / "report.json").read_text()))
    b = TrainReport.from_dict(json.loads((fresh / "report.json").read_text()))
    assert a.rounds == 4 and a.same_trajectory(b)


def test_train_caeh_and_kappa_flags(tmp_path, stiefel_csv):
    assert run(tmp_path, "train", "--data", str(stiefel_csv), *TRAIN_FLAGS, "--method", "caeh", "--kappa", "0") == 0
    d = only_run(tmp_path, "train")
    assert json.loads((d / "report.json").read_text())["method"] == "caeh"
    assert TrainConfig.from_file(d / "config.txt").curvature_mode == "kappa0"


def test_grid(tmp_path, mixture_csv):
    assert run(tmp_path, "train", "--data", str(mixture_csv), "--label-column", "3", *TRAIN_FLAGS,
               "--grid", "lambda=0,10;gamma=0.1,0.5") == 0
    d = only_run(tmp_path, "train")
    rows = read_rows(d / "grid.csv")
    assert [(r["lambda"], r["gamma"]) for r in rows] == [("0", "0.1"), ("0", "0.5"), ("10", "0.1"), ("10", "0.5")]
    assert all(0 <= float(r["knn1_accuracy"]) <= 1 for r in rows)
    check_manifest(d, "train")
    assert run(tmp_path, "train", "--data", str(mixture_csv), "--grid", "lambda") == 2
    assert run(tmp_path, "train", "--data", str(mixture_csv), *TRAIN_FLAGS, "--grid", "lambda=-1") == 2


def test_eval_stiefel_oracle(tmp_path):
    save_net(linear_net(np.eye(8), np.eye(8)), tmp_path / "id.json")
    assert run(tmp_path, "eval", "--checkpoint", str(tmp_path / "id.json"), "--stiefel", "4,2,0", "--eval-samples", "50") == 0
    d = only_run(tmp_path, "eval")
    row = read_rows(d / "metrics.csv")[0]
    assert float(row["e1"]) < 1e-12 and float(row["e2"]) == 0.0
    check_manifest(d, "eval")


def test_eval_knn_and_mtc(tmp_path, mixture_csv):
    save_net(build_autoencoder(3, 4, (5,), seed=0), tmp_path / "n.json")
    assert run(tmp_path, "eval", "--checkpoint", str(tmp_path / "n.json"), "--data", str(mixture_csv),
               "--label-column", "3", "--knn", "--mtc", "--k", "2", "--mtc-epochs", "2", "--test-fraction", "0.25") == 0
    rows = read_rows(only_run(tmp_path, "eval") / "metrics.csv")
    assert [int(r["K"]) for r in rows if r["metric"] == "knn"] == list(range(1, 20))
    assert [float(r["beta"]) for r in rows if r["metric"] == "mtc"] == [0.0, 0.01, 0.1]


def test_eval_reads_k_from_state(tmp_path, mixture_csv):
    assert run(tmp_path, "train", "--data", str(mixture_csv), "--label-column", "3", *TRAIN_FLAGS) == 0
    state = only_run(tmp_path, "train") / "state.json"
    assert run(tmp_path, "eval", "--checkpoint", str(state), "--data", str(mixture_csv), "--label-column", "3",
               "--mtc", "--betas", "0.5", "--mtc-epochs", "1") == 0


def test_eval_errors(tmp_path, stiefel_csv):
    save_net(build_autoencoder(3, 2), tmp_path / "n.json")
    ck = str(tmp_path / "n.json")
    assert run(tmp_path, "eval", "--checkpoint", ck, "--data", str(stiefel_csv), "--knn") == 2
    assert run(tmp_path, "eval", "--checkpoint", ck) == 2
    assert run(tmp_path, "eval", "--checkpoint", str(tmp_path / "missing.json"), "--knn") == 2
    assert run(tmp_path, "eval", "--checkpoint", ck, "--stiefel", "4,2") == 2


def test_verify_sphere(tmp_path, capsys):
    assert run(tmp_path, "verify", "sphere", "--n", "3") == 0
    d = only_run(tmp_path, "verify")
    check = read_rows(d / "checks.csv")[0]
    assert check["passed"] == "True" and float(check["observed"]) < 0.05
    q = read_rows(d / "quotients.csv")
    assert list(q[0]) == ["scale", "direction_index", "quotient"]
    assert "relative error of curvature estimate" in capsys.readouterr().out


def test_verify_gradients_and_identities(tmp_path):
    assert run(tmp_path, "verify", "gradients", "--seed", "3", "--nets", "2") == 0
    assert run(tmp_path, "verify", "eckart-young", "--trials", "50") == 0
    assert run(tmp_path, "verify", "curvature-bound", "--pairs", "2", "--no-files") == 0


def test_verify_checkpoint_bound(tmp_path):
    save_net(build_autoencoder(3, 3, (4,), seed=2), tmp_path / "n.json")
    assert run(tmp_path, "verify", "curvature-bound", "--checkpoint", str(tmp_path / "n.json"), "--pairs", "2") == 0


def test_verify_failure_exits_one(tmp_path, monkeypatch, capsys):
    bad = checks.Check("forced", "some quantity", 1e-3, 0.5, False)
    monkeypatch.setattr(checks, "eckart_young_checks", lambda trials, seed: [bad])
    assert run(tmp_path, "verify", "eckart-young") == 1
    out = capsys.readouterr().out
    assert "FAIL forced: some quantity = 5.000e-01 (tolerance 1.0e-03)" in out
    assert json.loads((only_run(tmp_path, "verify") / "manifest.json").read_text())["status"] == "failed"


def test_manifest_rejects_missing_artifacts(tmp_path):
    m = RunManifest("x", [], {}, {})
    m.add("nope.csv")
    with pytest.raises(CliError):
        m.write(tmp_path, "ok")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rankae", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("rankae ")
