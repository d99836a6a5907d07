"""
Independent referees: dense joint-Gaussian likelihood and finite differences
"""
import logging
from typing import Callable, Dict, Sequence

import numpy as np
from scipy.linalg import block_diag
from scipy.stats import multivariate_normal

from src.config import FD_STEP, FD_SWEEP_STEPS, ORACLE_MAX_DIM, SUPERVISORY_JITTER
from src.errors import NoiseLabError, OracleScaleError
from src.estimation.kalman import SupervisorySpec, SystemModel
from src.estimation.params import CovParam

logger = logging.getLogger(__name__)


def joint_nll(model: SystemModel, spec: SupervisorySpec, y_o, param: CovParam, theta) -> float:
    """
    -log p(y_o, y_s | theta) from the dense joint distribution of all measurements.

    The stacked states x_1..x_N are written as x = mean + T z with
    z = [x_0 - E x_0; w_1; ...; w_N] ~ N(0, blockdiag(P0, Q_1, ..., Q_N)).
    """
    theta = param.check_theta(theta)
    N, d, m = model.N, model.d, model.m
    n_y = N * m + spec.n_obs
    if max(N * d, n_y) > ORACLE_MAX_DIM:
        raise OracleScaleError(
            f"Dense oracle limited to stacked dimension {ORACLE_MAX_DIM}, got states {N * d}, measurements {n_y}"
        )
    y_o = np.asarray(y_o, dtype=float)

    means = np.zeros((N, d))
    T = np.zeros((N * d, (N + 1) * d))
    prev_mean = model.x0
    prev_T = np.zeros((d, (N + 1) * d))
    prev_T[:, :d] = np.eye(d)
    for i in range(N):
        means[i] = model.F[i] @ prev_mean + model.B[i] @ model.u[i]
        block = model.F[i] @ prev_T
        block[:, (i + 1) * d:(i + 2) * d] += np.eye(d)
        T[i * d:(i + 1) * d] = block
        prev_mean, prev_T = means[i], block

    noise = block_diag(model.P0, *[param.Q(theta, k) for k in range(1, N + 1)])
    cov_x = T @ noise @ T.T

    M_o = block_diag(*[model.H[i] for i in range(N)])
    select = np.zeros((spec.n_states * d, N * d))
    for s, k in enumerate(spec.indices):
        select[s * d:(s + 1) * d, (k - 1) * d:k * d] = np.eye(d)
    M = np.vstack([M_o, spec.Hs @ select]) if spec.n_obs else M_o

    R_blocks = [param.R(theta, k) for k in range(1, N + 1)]
    meas_noise = block_diag(*R_blocks, spec.Psi) if spec.n_obs else block_diag(*R_blocks)
    cov_y = M @ cov_x @ M.T + meas_noise
    cov_y = 0.5 * (cov_y + cov_y.T)
    mean_y = M @ means.reshape(-1)
    y = np.concatenate([y_o.reshape(-1), spec.ys])

    try:
        return -float(multivariate_normal.logpdf(y, mean=mean_y, cov=cov_y))
    except (np.linalg.LinAlgError, ValueError):
        jitter = np.zeros(n_y)
        jitter[N * m:] = SUPERVISORY_JITTER
        return -float(multivariate_normal.logpdf(y, mean=mean_y, cov=cov_y + np.diag(jitter)))


def fd_derivative(fn: Callable[[np.ndarray], np.ndarray], theta, j: int, h: float = FD_STEP) -> np.ndarray:
    """Central difference of an array-valued function in coordinate j"""
    theta = np.asarray(theta, dtype=float)
    step = np.zeros_like(theta)
    step[j] = h
    return (np.asarray(fn(theta + step)) - np.asarray(fn(theta - step))) / (2.0 * h)


def fd_gradient(loss_fn: Callable[[np.ndarray], float], theta, h: float = FD_STEP) -> np.ndarray:
    """
    Central-difference gradient (loss(theta + h e_j) - loss(theta - h e_j)) / 2h.

    Coordinates whose evaluations fail or are non-finite come back as NaN and
    are reported in a warning.
    """
    if h <= 0:
        raise ValueError(f"Finite-difference step must be positive, got {h}")
    theta = np.asarray(theta, dtype=float)
    grad = np.full(theta.shape[0], np.nan)
    failed = []
    for j in range(theta.shape[0]):
        try:
            value = float(fd_derivative(loss_fn, theta, j, h))
        except (NoiseLabError, ArithmeticError, np.linalg.LinAlgError) as e:
            logger.debug("FD evaluation failed at coordinate %d: %s", j, e)
            value = np.nan
        if np.isfinite(value):
            grad[j] = value
        else:
            failed.append(j)
    if failed:
        logger.warning("Non-finite finite-difference evaluations at coordinates %s", failed)
    return grad


def fd_sweep(
    loss_fn: Callable[[np.ndarray], float],
    theta,
    steps: Sequence[float] = FD_SWEEP_STEPS,
) -> Dict[float, np.ndarray]:
    """FD gradients for several step sizes (truncation vs roundoff plateau)"""
    return {h: fd_gradient(loss_fn, theta, h) for h in steps}


def relative_error(a, b, floor: float = 1e-12) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, floor)"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / scale
