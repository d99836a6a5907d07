"""
Upper-level gradient descent over theta with Armijo backtracking, plus test-set evaluation
"""
import logging
import time
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.linalg import cho_solve

from src.config import ARMIJO_C, ARMIJO_SHRINK, MAX_BACKTRACKS
from src.errors import NumericalDivergenceError
from src.estimation.grad_forward import forward_gradient
from src.estimation.grad_reverse import reverse_gradient
from src.estimation.kalman import AugmentedKalmanFilter, LossBreakdown, SupervisorySpec, SystemModel, run_filter
from src.estimation.params import CovParam, ParamKind
from src.models import CalibrationConfig, CalibrationReport, EvaluationResult, GradientMode

logger = logging.getLogger(__name__)

Monitor = Callable[[np.ndarray], float]


def resolve_mode(cfg: CalibrationConfig, param: CovParam) -> GradientMode:
    """Explicit mode wins; otherwise reverse for Cholesky (large p), forward for the rest"""
    if cfg.mode is not None:
        return GradientMode(cfg.mode)
    return GradientMode.REVERSE if param.kind is ParamKind.CHOLESKY else GradientMode.FORWARD


def loss_and_gradient(
    model: SystemModel,
    spec: SupervisorySpec,
    y_o,
    param: CovParam,
    theta,
    mode: GradientMode,
    weights: Tuple[float, float] = (1.0, 1.0),
) -> Tuple[LossBreakdown, np.ndarray]:
    if GradientMode(mode) is GradientMode.FORWARD:
        return forward_gradient(model, spec, y_o, param, theta, weights=weights)
    return reverse_gradient(model, spec, y_o, param, theta, weights=weights)


def _weighted_loss(model, spec, y_o, param, theta, weights) -> float:
    try:
        loss, _, _ = run_filter(model, spec, y_o, param, theta)
    except ArithmeticError as e:
        logger.debug("Trial step rejected: %s", e)
        return np.inf
    return loss.weighted(weights)


def calibrate(
    model: SystemModel,
    spec: SupervisorySpec,
    y_o,
    param: CovParam,
    theta0=None,
    cfg: Optional[CalibrationConfig] = None,
    monitor: Optional[Monitor] = None,
) -> CalibrationReport:
    """
    Descend theta <- theta - eta * grad L for at most cfg.itermax iterations

    Args:
        theta0: starting point (defaults to param.theta)
        cfg: optimizer settings; defaults to CalibrationConfig()
        monitor: optional callable scored at every iterate (e.g. test RMSE)

    Returns:
        CalibrationReport whose histories hold the values at the start of each iteration
    """
    cfg = cfg or CalibrationConfig()
    mode = resolve_mode(cfg, param)
    weights = tuple(cfg.loss_weights)
    theta = param.check_theta(param.theta if theta0 is None else theta0).copy()
    if not np.all(np.isfinite(theta)):
        raise NumericalDivergenceError(f"theta0 is not finite: {theta}")

    report = CalibrationReport(
        theta_hat=theta.tolist(),
        mode=mode,
        kind=param.kind.value,
        n_supervisory_states=spec.n_states,
        n_supervisory_obs=spec.n_obs,
        rmse_history=[] if monitor is not None else None,
    )
    logger.info(
        "Calibrating %s (p=%d) in %s mode, itermax=%d, weights=%s",
        param.kind.value, param.p, mode.value, cfg.itermax, weights,
    )

    valid = theta.copy()
    for i in range(cfg.itermax):
        started = time.perf_counter()
        try:
            loss, grad = loss_and_gradient(model, spec, y_o, param, theta, mode, weights)
        except ArithmeticError as e:
            report.status, report.message = "diverged", f"iteration {i}: {e}"
            break
        value = loss.weighted(weights)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            report.status, report.message = "diverged", f"iteration {i}: non-finite loss or gradient"
            break
        valid = theta.copy()

        grad_norm = float(np.linalg.norm(grad))
        report.loss_history.append(value)
        report.grad_norm_history.append(grad_norm)
        report.ell_o_history.append(loss.ell_o)
        report.ell_s_history.append(loss.ell_s)
        if monitor is not None:
            report.rmse_history.append(float(monitor(theta)))
        logger.debug("iter %d: loss=%.6f |grad|=%.3e", i, value, grad_norm)

        if grad_norm <= cfg.grad_tol:
            report.wall_time_history.append(time.perf_counter() - started)
            report.status, report.message = "converged", f"gradient norm {grad_norm:.3e} <= {cfg.grad_tol:.1e}"
            break

        if cfg.line_search:
            eta = cfg.eta0
            for _ in range(MAX_BACKTRACKS):
                candidate = theta - eta * grad
                if _weighted_loss(model, spec, y_o, param, candidate, weights) <= value - ARMIJO_C * eta * grad_norm**2:
                    break
                eta *= ARMIJO_SHRINK
            else:
                report.wall_time_history.append(time.perf_counter() - started)
                report.status, report.message = "stalled", f"iteration {i}: no Armijo step in {MAX_BACKTRACKS} backtracks"
                break
        else:
            eta = cfg.eta0
            candidate = theta - eta * grad

        theta = candidate
        report.step_size_history.append(eta)
        report.wall_time_history.append(time.perf_counter() - started)
    else:
        report.status, report.message = "max_iter", f"reached itermax={cfg.itermax}"

    if report.status != "diverged":
        final = _weighted_loss(model, spec, y_o, param, theta, weights)
        if np.isfinite(final):
            report.final_loss = float(final)
        else:
            report.status, report.message = "diverged", "final iterate has a non-finite loss"
    if report.status == "diverged":
        theta = valid
        report.final_loss = report.loss_history[-1] if report.loss_history else None
    report.theta_hat = theta.tolist()
    if report.status == "diverged":
        logger.warning("Calibration aborted: %s", report.message)
    else:
        logger.info("Calibration %s after %d iterations: %s", report.status, report.iterations, report.message)
    return report


def raise_for_status(report: CalibrationReport) -> CalibrationReport:
    """Turn a diverged report into NumericalDivergenceError; pass others through"""
    if report.status == "diverged":
        raise NumericalDivergenceError(f"Calibration diverged ({report.message}); last valid theta {report.theta_hat}")
    return report


def _plain_filter_pass(model: SystemModel, y_test, param: CovParam, theta):
    empty = SupervisorySpec.empty(model.d)
    kf = AugmentedKalmanFilter(model, empty, param, theta)
    estimates = np.zeros((model.N, model.d))
    nis = np.zeros(model.N)
    for step in kf.steps(y_test):
        estimates[step.k - 1] = step.posterior.X[:model.d]
        nis[step.k - 1] = float(step.r @ cho_solve(step.S_factor, step.r))
    return estimates, nis


def _position_rmse(estimates: np.ndarray, truth: np.ndarray, position_dims: int) -> float:
    err = estimates[:, :position_dims] - truth[:, :position_dims]
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def evaluate(
    model_test: SystemModel,
    y_test,
    theta_hat,
    param: CovParam,
    truth_states,
    position_dims: int = 3,
) -> float:
    """Position RMSE of a plain (unsupervised) filter run with R(theta_hat), Q(theta_hat)"""
    return evaluate_detailed(model_test, y_test, theta_hat, param, truth_states, position_dims).rmse


def evaluate_detailed(
    model_test: SystemModel,
    y_test,
    theta_hat,
    param: CovParam,
    truth_states,
    position_dims: int = 3,
) -> EvaluationResult:
    """Filtered RMSE, raw measurement RMSE (y_k vs H_k x_k) and mean NIS"""
    truth = np.asarray(truth_states, dtype=float)
    y_test = np.asarray(y_test, dtype=float)
    if truth.shape != (model_test.N, model_test.d):
        raise ValueError(f"truth_states must have shape ({model_test.N}, {model_test.d}), got {truth.shape}")
    estimates, nis = _plain_filter_pass(model_test, y_test, param, theta_hat)
    raw = y_test - np.einsum("kij,kj->ki", model_test.H, truth)
    return EvaluationResult(
        rmse=_position_rmse(estimates, truth, position_dims),
        raw_rmse=float(np.sqrt(np.mean(np.sum(raw**2, axis=1)))),
        mean_nis=float(np.mean(nis)),
    )
