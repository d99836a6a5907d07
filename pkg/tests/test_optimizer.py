import numpy as np
import pytest
from pydantic import ValidationError

from conftest import scalar_model
from src.calibration.optimizer import calibrate, evaluate, evaluate_detailed, raise_for_status, resolve_mode
from src.errors import NumericalDivergenceError
from src.estimation.grad_reverse import reverse_gradient
from src.estimation.kalman import SupervisorySpec, run_filter
from src.estimation.params import CholeskyMap, CovParam, build_param
from src.lab import NoiseCovarianceLab
from src.models import CalibrationConfig, GradientMode, SimConfig
from src.simulation.scenario import generate_supervisory, simulate_dataset


def fragile_param():
    """Scalar R = exp(theta) that turns NaN more than 0.01 away from theta = 0.45"""

    def R_fn(t, k):
        return np.exp(t[0]) * np.eye(1) if abs(t[0] - 0.45) <= 0.01 else np.full((1, 1), np.nan)

    def dR_fn(t, j, k):
        return R_fn(t, k)

    return CovParam.custom(
        p=1, meas_dim=1, proc_dim=1, R_fn=R_fn, dR_fn=dR_fn,
        Q_fn=lambda t, k: 0.01 * np.eye(1), dQ_fn=lambda t, j, k: np.zeros((1, 1)),
    )


def calib_args(data, supervision="dense"):
    return data.calib.model, data.supervision(supervision), data.calib.measurements


class TestResolveMode:
    def test_defaults(self):
        Q = 0.01 * np.eye(6)
        cfg = CalibrationConfig()
        assert resolve_mode(cfg, build_param("cholesky", 3, Q)) is GradientMode.REVERSE
        assert resolve_mode(cfg, build_param("isotropic", 3, Q)) is GradientMode.FORWARD
        assert resolve_mode(cfg, build_param("diagonal", 3, Q)) is GradientMode.FORWARD

    def test_explicit_mode_wins(self):
        cfg = CalibrationConfig(mode="forward")
        assert resolve_mode(cfg, build_param("cholesky", 3, 0.01 * np.eye(6))) is GradientMode.FORWARD


class TestCalibrate:
    def test_loss_is_monotone_with_line_search(self, lab, lab_data):
        param = lab.build_param(kind="cholesky")
        report = calibrate(*calib_args(lab_data), param, cfg=CalibrationConfig(itermax=6))
        assert report.status in ("max_iter", "converged")
        history = report.loss_history + [report.final_loss]
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
        assert report.final_loss < report.loss_history[0]
        if report.status == "max_iter":
            assert len(report.step_size_history) == len(report.loss_history)

    def test_forward_and_reverse_follow_the_same_path(self, lab, lab_data):
        param = lab.build_param(kind="cholesky")
        reports = {
            mode: calibrate(*calib_args(lab_data), param,
                            cfg=CalibrationConfig(mode=mode, itermax=5, eta0=0.001, line_search=False))
            for mode in ("forward", "reverse")
        }
        np.testing.assert_allclose(reports["forward"].theta_hat, reports["reverse"].theta_hat, rtol=1e-6, atol=1e-12)
        np.testing.assert_allclose(reports["forward"].loss_history, reports["reverse"].loss_history, rtol=1e-10)

    def test_primary_weights_match_empty_supervision(self, lab, lab_data):
        param = lab.build_param(kind="diagonal")
        model, dense, y_o = calib_args(lab_data)
        weighted = calibrate(model, dense, y_o, param, cfg=CalibrationConfig(itermax=4, loss_weights=(1.0, 0.0)))
        plain = calibrate(model, SupervisorySpec.empty(model.d), y_o, param, cfg=CalibrationConfig(itermax=4))
        np.testing.assert_allclose(weighted.loss_history, plain.loss_history, rtol=1e-10)
        np.testing.assert_allclose(weighted.theta_hat, plain.theta_hat, rtol=1e-8, atol=1e-12)
        assert weighted.loss_history == weighted.ell_o_history

    def test_deterministic(self, lab, lab_data):
        param = lab.build_param()
        first = calibrate(*calib_args(lab_data), param, cfg=CalibrationConfig(itermax=3))
        second = calibrate(*calib_args(lab_data), param, cfg=CalibrationConfig(itermax=3))
        assert first.theta_hat == second.theta_hat
        assert first.loss_history == second.loss_history

    def test_large_gradient_tolerance_converges_immediately(self, lab, lab_data):
        report = calibrate(*calib_args(lab_data), lab.build_param(), cfg=CalibrationConfig(grad_tol=1e12))
        assert report.status == "converged"
        assert report.iterations == 1
        assert report.theta_hat == lab.build_param().theta.tolist()

    def test_monitor_is_recorded(self, lab, lab_data):
        report = calibrate(*calib_args(lab_data), lab.build_param(), cfg=CalibrationConfig(itermax=2),
                           monitor=lambda theta: 1.0)
        assert report.rmse_history == [1.0] * report.iterations

    def test_non_finite_start(self, lab, lab_data):
        param = lab.build_param(kind="isotropic")
        with pytest.raises(NumericalDivergenceError):
            calibrate(*calib_args(lab_data), param, theta0=[np.nan])

    def test_negative_weights_are_rejected(self):
        with pytest.raises(ValidationError, match="non-negative"):
            CalibrationConfig(loss_weights=(-1.0, 1.0))


class TestDivergence:
    def test_keeps_the_last_finite_iterate(self):
        model = scalar_model()
        cfg = CalibrationConfig(eta0=100.0, line_search=False, itermax=5)
        report = calibrate(model, SupervisorySpec.empty(1), [[1.0]], fragile_param(), theta0=[0.45], cfg=cfg)
        assert report.status == "diverged"
        assert report.theta_hat == [0.45]
        assert report.final_loss == report.loss_history[-1]
        with pytest.raises(NumericalDivergenceError, match="diverged"):
            raise_for_status(report)

    def test_non_finite_final_iterate(self):
        cfg = CalibrationConfig(eta0=100.0, line_search=False, itermax=1)
        report = calibrate(scalar_model(), SupervisorySpec.empty(1), [[1.0]], fragile_param(), theta0=[0.45], cfg=cfg)
        assert report.status == "diverged"
        assert "final iterate" in report.message
        assert report.theta_hat == [0.45]

    def test_healthy_report_passes_through(self, lab, lab_data):
        report = calibrate(*calib_args(lab_data), lab.build_param(), cfg=CalibrationConfig(itermax=1))
        assert raise_for_status(report) is report


class TestEvaluate:
    @pytest.fixture(scope="class")
    def long_data(self):
        return NoiseCovarianceLab(verbose=False).generate()

    def test_true_r_beats_raw_measurements(self, long_data):
        sim = NoiseCovarianceLab(verbose=False).cfg.simulation
        param = build_param("cholesky", 3, sim.q * np.eye(6))
        theta = CholeskyMap(3).theta_from_matrix(sim.r_true())
        test = long_data.test
        result = evaluate_detailed(test.model, test.measurements, theta, param, test.states)
        assert result.rmse < result.raw_rmse
        assert 2.5 <= result.mean_nis <= 3.5
        assert result.raw_rmse == pytest.approx(test.raw_rmse)

        swamped = CholeskyMap(3).theta_from_matrix(1e6 * np.eye(3))
        assert evaluate(test.model, test.measurements, swamped, param, test.states) > result.rmse

    def test_truth_shape_is_checked(self, long_data):
        test = long_data.test
        param = build_param("isotropic", 3, 0.01 * np.eye(6))
        with pytest.raises(ValueError, match="truth_states"):
            evaluate(test.model, test.measurements, [0.0], param, test.states[:-1])


@pytest.mark.slow
class TestTrueNoiseLevel:
    @pytest.fixture(scope="class")
    def tracking_runs(self):
        """Default-size calibration runs with dense supervision for seeds 0-4"""
        sim = SimConfig()
        runs = []
        for seed in range(5):
            data = simulate_dataset(sim, seed)
            runs.append((data, generate_supervisory(data.states, sim, seed)))
        return sim, runs

    def test_gradient_is_smallest_at_the_true_r(self, tracking_runs):
        sim, runs = tracking_runs
        param = build_param("cholesky", 3, sim.q * np.eye(6))
        theta_true = CholeskyMap(3).theta_from_matrix(sim.r_true())
        for data, spec in runs:
            _, at_truth = reverse_gradient(data.model, spec, data.measurements, param, theta_true)
            _, offset = reverse_gradient(data.model, spec, data.measurements, param, theta_true + 1.0)
            assert np.linalg.norm(at_truth) < np.linalg.norm(offset)

    def test_doubling_r_raises_the_primary_loss(self, tracking_runs):
        sim, runs = tracking_runs
        param = build_param("cholesky", 3, sim.q * np.eye(6))
        theta_true = CholeskyMap(3).theta_from_matrix(sim.r_true())
        theta_double = CholeskyMap(3).theta_from_matrix(2.0 * sim.r_true())
        for data, spec in runs:
            at_truth = run_filter(data.model, spec, data.measurements, param, theta_true)[0].ell_o
            doubled = run_filter(data.model, spec, data.measurements, param, theta_double)[0].ell_o
            assert doubled > at_truth

    def test_dense_supervision_recovers_r(self, tracking_runs):
        sim, runs = tracking_runs
        param = build_param("cholesky", 3, sim.q * np.eye(6))
        r_true = sim.r_true()
        errors = []
        for data, spec in runs[:3]:
            report = calibrate(data.model, spec, data.measurements, param, cfg=CalibrationConfig())
            assert report.mode is GradientMode.REVERSE
            R_hat = param.R(np.asarray(report.theta_hat))
            errors.append(np.linalg.norm(R_hat - r_true) / np.linalg.norm(r_true))
        untuned = np.linalg.norm(param.R(param.theta) - r_true) / np.linalg.norm(r_true)
        assert np.mean(errors) <= 0.5
        assert max(errors) < untuned
