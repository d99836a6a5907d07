import json

import numpy as np
import pandas as pd
import pytest

from src import config
from src.cli import io
from src.cli.main import main


def write_config(path, **sections):
    raw = {
        "simulation": {"n_calib": 60, "n_test": 150, "trials": 1},
        "optimizer": {"itermax": 3},
    }
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture
def small_config(tmp_path):
    return write_config(tmp_path / "small.json")


@pytest.fixture
def data_dir(tmp_path, small_config):
    out = tmp_path / "data"
    assert main(["--config", str(small_config), "--out", str(out), "simulate"]) == config.EXIT_OK
    return out


def run(small_config, data_dir, out, *args):
    return main(["--config", str(small_config), "--data-dir", str(data_dir), "--out", str(out), *args])


class TestSimulate:
    def test_default_config(self, tmp_path):
        out = tmp_path / "nested" / "results"
        assert main(["--out", str(out), "simulate"]) == config.EXIT_OK
        assert len(pd.read_csv(out / config.CALIB_FILE)) == 100
        assert len(pd.read_csv(out / config.TEST_FILE)) == 600
        for name in (config.SUPERVISORY_FILE, config.SUPERVISORY_SPARSE_FILE, config.DATASET_META_FILE):
            assert (out / name).exists()

    def test_same_seed_same_bytes(self, tmp_path, small_config):
        for name in ("a", "b"):
            assert main(["--config", str(small_config), "--seed", "5", "--out", str(tmp_path / name), "simulate"]) == 0
        for name in (config.CALIB_FILE, config.TEST_FILE, config.SUPERVISORY_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_invalid_config(self, tmp_path, capsys):
        bad = write_config(tmp_path / "bad.json", simulation={"dt": -1.0})
        assert main(["--config", str(bad), "--out", str(tmp_path), "simulate"]) == config.EXIT_CONFIG
        assert "simulation.dt" in capsys.readouterr().err

    def test_malformed_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{\"simulation\": ")
        assert main(["--config", str(bad), "--out", str(tmp_path), "simulate"]) == config.EXIT_CONFIG
        assert "invalid JSON" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.json"), "simulate"]) == config.EXIT_CONFIG

    def test_invalid_override(self, tmp_path, small_config, capsys):
        code = main(["--config", str(small_config), "--trials", "0", "--out", str(tmp_path), "simulate"])
        assert code == config.EXIT_CONFIG
        assert "simulation.trials" in capsys.readouterr().err


class TestCalibrate:
    def test_isotropic_runs_forward_mode(self, tmp_path, small_config, data_dir):
        out = tmp_path / "iso"
        assert run(small_config, data_dir, out, "calibrate", "--param", "isotropic") == config.EXIT_OK
        report = io.read_report(out / config.REPORT_FILE)
        assert report.mode.value == "forward"
        assert report.kind == "isotropic"
        assert len(report.theta_hat) == 1

        history = pd.read_csv(out / config.LOSS_HISTORY_FILE)
        assert list(history["loss"]) == pytest.approx(report.loss_history)
        steps = pd.read_csv(out / config.FILTER_STEPS_FILE)
        assert list(steps.columns) == ["k", "loss", "residual_norm"]
        assert len(steps) == 60
        breakdown = json.loads((out / config.LOSS_BREAKDOWN_FILE).read_text())
        assert breakdown["total"] == pytest.approx(report.final_loss)

    def test_cholesky_defaults_to_reverse(self, tmp_path, small_config, data_dir):
        out = tmp_path / "chol"
        assert run(small_config, data_dir, out, "calibrate") == config.EXIT_OK
        report = io.read_report(out / config.REPORT_FILE)
        assert report.mode.value == "reverse"
        assert len(report.theta_hat) == 6
        assert report.n_supervisory_obs > 0

    def test_modes_agree_with_fixed_step(self, tmp_path, data_dir):
        cfg = write_config(tmp_path / "fixed.json", optimizer={"eta0": 0.001, "line_search": False, "itermax": 4})
        thetas = {}
        for mode in ("forward", "reverse"):
            out = tmp_path / mode
            assert run(cfg, data_dir, out, "calibrate", "--mode", mode) == config.EXIT_OK
            thetas[mode] = io.read_report(out / config.REPORT_FILE).theta_hat
        np.testing.assert_allclose(thetas["forward"], thetas["reverse"], rtol=1e-6, atol=1e-12)

    def test_primary_only(self, tmp_path, small_config, data_dir):
        out = tmp_path / "primary"
        assert run(small_config, data_dir, out, "calibrate", "--loss", "primary-only") == config.EXIT_OK
        report = io.read_report(out / config.REPORT_FILE)
        assert report.loss_history == report.ell_o_history

    def test_missing_data(self, tmp_path, small_config):
        code = run(small_config, tmp_path / "empty", tmp_path / "out", "calibrate")
        assert code == config.EXIT_CONFIG

    def test_evaluate_after_calibrate(self, tmp_path, small_config, data_dir):
        out = tmp_path / "eval"
        assert run(small_config, data_dir, out, "calibrate", "--param", "diagonal") == config.EXIT_OK
        assert run(small_config, data_dir, out, "evaluate") == config.EXIT_OK
        result = json.loads((out / config.EVALUATION_FILE).read_text())
        assert 0 < result["rmse"] < result["raw_rmse"]


class TestGradcheck:
    def test_passes(self, tmp_path, small_config, data_dir):
        out = tmp_path / "check"
        assert run(small_config, data_dir, out, "gradcheck", "--steps", "10") == config.EXIT_OK
        report = json.loads((out / config.GRADCHECK_FILE).read_text())
        assert report["steps"] == 10
        assert sorted(report["fd_sweep"]) == sorted(["0.0001", "1e-05", "1e-06"])

    def test_innovation_form_fails(self, tmp_path, small_config, data_dir):
        out = tmp_path / "check"
        code = run(small_config, data_dir, out, "gradcheck", "--adjoint-form", "innovation", "--steps", "20")
        assert code == config.EXIT_CHECK
        report = json.loads((out / config.GRADCHECK_FILE).read_text())
        failed = {check["name"] for check in report["checks"] if check["status"] == "failed"}
        assert "reverse_vs_fd" in failed
        assert "forward_vs_fd" not in failed

    def test_without_supervision_the_supervisory_check_is_skipped(self, tmp_path):
        cfg = write_config(tmp_path / "nopairs.json", simulation={"threshold": 0.001})
        data = tmp_path / "data"
        assert main(["--config", str(cfg), "--out", str(data), "simulate"]) == config.EXIT_OK
        assert run(cfg, data, tmp_path / "check", "gradcheck", "--steps", "10") == config.EXIT_OK
        report = json.loads((tmp_path / "check" / config.GRADCHECK_FILE).read_text())
        statuses = {check["name"]: check["status"] for check in report["checks"]}
        assert statuses["supervisory_forward_vs_reverse"] == "skipped"
        assert report["n_supervisory_obs"] == 0


class TestBatchCommands:
    @pytest.mark.slow
    def test_montecarlo(self, tmp_path, small_config):
        out = tmp_path / "mc"
        assert main(["--config", str(small_config), "--out", str(out), "montecarlo"]) == config.EXIT_OK
        summary = pd.read_csv(out / config.MONTE_CARLO_FILE)
        assert len(summary) == 10
        assert (out / config.MONTE_CARLO_TRIALS_FILE).exists()

    def test_bench(self, tmp_path, small_config):
        out = tmp_path / "bench"
        code = main(["--config", str(small_config), "--out", str(out),
                     "bench", "--ps", "1", "6", "--Ns", "30", "--repeats", "1"])
        assert code == config.EXIT_OK
        table = pd.read_csv(out / config.BENCH_FILE)
        assert len(table) == 4
        assert set(table["p"]) == {1, 6}
