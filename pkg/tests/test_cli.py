import json
import subprocess
import sys

import numpy as np
import pytest

from convexmix.benchmark import TABLE1_THETA, gof
from convexmix.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main
from convexmix.core import validate_weights
from convexmix.io import read_dataset_csv, read_model_json, read_predictions_csv, write_predictions_csv

SMALL_GEN = ["--T", "300", "--t1", "50", "--t2", "250"]
SMALL_FIT = ["--k-max", "5", "--n-restarts", "2", "--window", "50"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    assert run("gen", *SMALL_GEN, "--seed", 3, "--out", d / "train.csv") == EXIT_OK
    assert run("fit", "--data", d / "train.csv", *SMALL_FIT, "--gating-k", 1, "--out", d / "model.json") == EXIT_OK
    return d


class TestGen:
    def test_default_schema(self, tmp_path, capsys):
        assert run("gen", "--out", tmp_path / "b.csv") == EXIT_OK
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "t,y,x1,x2,x3,x4,omega1,omega2"
        assert len(lines) == 6001
        assert "snr_db" in capsys.readouterr().out

    def test_noise_free_outputs_are_exact_mixtures(self, tmp_path):
        assert run("gen", *SMALL_GEN, "--noise-var", 0, "--out", tmp_path / "b.csv") == EXIT_OK
        ds = read_dataset_csv(tmp_path / "b.csv")
        theta = np.array(TABLE1_THETA)
        assert np.max(np.abs(ds.y - np.sum(ds.true_weights * (ds.X @ theta.T), axis=1))) <= 1e-12

    def test_same_seed_same_file(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen", *SMALL_GEN, "--seed", 7, "--out", tmp_path / f"{name}.csv") == EXIT_OK
        assert run("gen", *SMALL_GEN, "--seed", 8, "--out", tmp_path / "c.csv") == EXIT_OK
        a, b, c = ((tmp_path / f"{n}.csv").read_bytes() for n in "abc")
        assert a == b and a != c


class TestConfig:
    def test_flags_override_config_override_defaults(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"T": 120, "t1": 10, "t2": 100}))
        assert run("gen", "--config", cfg, "--out", tmp_path / "a.csv") == EXIT_OK
        assert read_dataset_csv(tmp_path / "a.csv").T == 120
        assert run("gen", "--config", cfg, "--T", 110, "--out", tmp_path / "b.csv") == EXIT_OK
        assert read_dataset_csv(tmp_path / "b.csv").T == 110

    @pytest.mark.parametrize("doc", ['{"colour": 1}', "[1, 2]", "{", '{"T": "many"}'])
    def test_bad_config(self, tmp_path, doc):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(doc)
        assert run("gen", "--config", cfg, "--out", tmp_path / "a.csv") == EXIT_INVALID

    @pytest.mark.parametrize(
        "argv",
        [
            ["fit", "--k-max", "0"],
            ["gen", "--T", "-5"],
            ["gen", "--seed", "x"],
            ["gen", "--jobs", "0"],
            ["frobnicate"],
            ["fit"],
            ["fit", "--data", "/nonexistent.csv"],
            ["gen", "--out", "/nonexistent-dir/a.csv"],
            ["gen", "--config", "/nonexistent.json"],
        ],
    )
    def test_validation_errors(self, argv):
        assert main(argv) == EXIT_INVALID

    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "sweep" in capsys.readouterr().out


class TestFit:
    def test_deterministic_model_file(self, small, tmp_path):
        assert run("fit", "--data", small / "train.csv", *SMALL_FIT, "--gating-k", 1, "--out", tmp_path / "m.json") == EXIT_OK
        assert (tmp_path / "m.json").read_bytes() == (small / "model.json").read_bytes()
        assert (tmp_path / "m.trace.csv").read_bytes() == (small / "model.trace.csv").read_bytes()

    def test_report(self, small, tmp_path, capsys):
        assert run("fit", "--data", small / "train.csv", *SMALL_FIT, "--out", tmp_path / "m.json") == EXIT_OK
        out = capsys.readouterr().out
        assert "final cost" in out and "weight_mae_vs_truth" in out
        doc = json.loads((tmp_path / "m.json").read_text())
        assert doc["report"]["termination_reason"] and len(doc["report"]["all_restart_costs"]) == 2

    def test_expert_spec_count_mismatch(self, small, tmp_path):
        argv = ["fit", "--data", small / "train.csv", "--experts", "linear", "--out", tmp_path / "m.json"]
        assert run(*argv) == EXIT_INVALID

    def test_overflow_is_numerical_failure(self, tmp_path):
        (tmp_path / "d.csv").write_text("t,y,x1\n1,1e200,1e200\n2,-1e200,2e200\n3,1e200,3e200\n")
        argv = ["fit", "--data", tmp_path / "d.csv", "--n-experts", 1, "--n-restarts", 1, "--out", tmp_path / "m.json"]
        with np.errstate(all="ignore"):
            assert run(*argv) == EXIT_NUMERICAL


class TestPredict:
    def test_gating_k1_on_training_set_returns_fitted_rows(self, small, tmp_path):
        assert run("predict", "--model", small / "model.json", "--data", small / "train.csv", "--out", tmp_path / "p.csv") == EXIT_OK
        _, W = read_predictions_csv(tmp_path / "p.csv")
        assert np.array_equal(W, read_model_json(small / "model.json").train_weights)

    def test_recursive_rows_feasible(self, small, tmp_path):
        argv = ["predict", "--mode", "recursive", "--model", small / "model.json", "--data", small / "train.csv"]
        assert run(*argv, "--out", tmp_path / "p.csv") == EXIT_OK
        y_hat, W = read_predictions_csv(tmp_path / "p.csv")
        assert W.shape == (300, 2) and validate_weights(W).ok and np.all(np.isfinite(y_hat))

    def test_filtered_close_to_recursive_under_weak_smoothing(self, tmp_path):
        assert run("gen", "--T", 50, "--t1", 10, "--t2", 40, "--out", tmp_path / "d.csv") == EXIT_OK
        fit = ["fit", "--data", tmp_path / "d.csv", "--eta", 1e-3, "--window", 10, "--k-max", 10, "--n-restarts", 1]
        assert run(*fit, "--out", tmp_path / "m.json") == EXIT_OK
        W = {}
        for mode in ("filtered", "recursive"):
            argv = ["predict", "--mode", mode, "--model", tmp_path / "m.json", "--data", tmp_path / "d.csv"]
            assert run(*argv, "--out", tmp_path / f"{mode}.csv") == EXIT_OK
            W[mode] = read_predictions_csv(tmp_path / f"{mode}.csv")[1]
        assert np.mean(np.abs(W["filtered"] - W["recursive"])) <= 0.1

    def test_dimension_mismatch(self, small, tmp_path):
        (tmp_path / "d.csv").write_text("t,y,x1\n1,0,1\n2,0,2\n")
        assert run("predict", "--model", small / "model.json", "--data", tmp_path / "d.csv", "--out", tmp_path / "p.csv") == EXIT_INVALID


class TestEval:
    def test_truth_scores_perfectly(self, small, tmp_path, capsys):
        ds = read_dataset_csv(small / "train.csv")
        write_predictions_csv(tmp_path / "p.csv", ds.y, ds.true_weights)
        capsys.readouterr()
        assert run("eval", "--pred", tmp_path / "p.csv", "--data", small / "train.csv", "--out", tmp_path / "m.json") == EXIT_OK
        metrics = json.loads((tmp_path / "m.json").read_text())
        assert metrics == {"mae": 0.0, "gof": 1.0, "weight_mae": 0.0}
        assert "gof 1.000000" in capsys.readouterr().out

    def test_mean_predictor_scores_zero(self, small, tmp_path):
        ds = read_dataset_csv(small / "train.csv")
        write_predictions_csv(tmp_path / "p.csv", np.full(ds.T, ds.y.mean()), np.full((ds.T, 2), 0.5))
        assert run("eval", "--pred", tmp_path / "p.csv", "--data", small / "train.csv", "--out", tmp_path / "m.json") == EXIT_OK
        assert json.loads((tmp_path / "m.json").read_text())["gof"] == pytest.approx(0.0, abs=1e-12)

    def test_misaligned(self, small, tmp_path):
        write_predictions_csv(tmp_path / "p.csv", np.zeros(10), np.full((10, 2), 0.5))
        assert run("eval", "--pred", tmp_path / "p.csv", "--data", small / "train.csv") == EXIT_INVALID


class TestSweep:
    def test_row_count(self, tmp_path, capsys):
        argv = ["sweep", "--param", "noise-var", "--values", "1e-6,1e-2,1,10", "--folds", 2, *SMALL_GEN]
        assert run(*argv, "--k-max", 3, "--n-restarts", 1, "--window", 50, "--out", tmp_path / "s.csv") == EXIT_OK
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "param,value,fold,mae,gof,snr_db,final_cost"
        assert len(lines) == 1 + 4 * 2
        assert "noise_var=1e-06" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "extra",
        [["--param", "eta", "--values", ""], ["--param", "window", "--values", "1"], ["--param", "eta", "--values", "1", "--folds", "1"]],
    )
    def test_rejects(self, tmp_path, extra):
        assert run("sweep", *extra, "--out", tmp_path / "s.csv") == EXIT_INVALID


def test_console_script(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "convexmix.cli", "gen", "--T", "20", "--t1", "5", "--t2", "15", "--out", str(tmp_path / "a.csv")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0 and "snr_db" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "convexmix.cli", "fit", "--k-max", "0"], capture_output=True, text=True)
    assert proc.returncode == 1 and "error" in proc.stderr


@pytest.mark.slow
def test_benchmark_pipeline_with_gating(tmp_path):
    # gen -> fit -> predict (gating) -> eval on a held-out realisation at the default SNR
    assert run("gen", "--seed", 1, "--out", tmp_path / "train.csv") == EXIT_OK
    assert run("gen", "--seed", 2, "--out", tmp_path / "test.csv") == EXIT_OK
    assert run("fit", "--data", tmp_path / "train.csv", "--out", tmp_path / "m.json") == EXIT_OK
    assert run("predict", "--model", tmp_path / "m.json", "--data", tmp_path / "test.csv", "--out", tmp_path / "p.csv") == EXIT_OK
    y_hat, _ = read_predictions_csv(tmp_path / "p.csv")
    score = gof(read_dataset_csv(tmp_path / "test.csv").y, y_hat)
    print(f"gating-mode held-out GoF {score:.4f}")
    assert score >= 0.8
