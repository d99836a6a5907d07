"""
Forward-mode differentiation of the filter likelihood.

Per-coordinate sensitivities (dX, dP) ride along with the filter and are
overwritten every step, so memory stays at O(p D^2) regardless of N.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_solve

from src.estimation.kalman import (
    AugmentedKalmanFilter,
    FilterStep,
    LossBreakdown,
    SupervisorySpec,
    SystemModel,
    factorize_innovation,
    symmetrize,
)
from src.estimation.params import CovParam

logger = logging.getLogger(__name__)


@dataclass
class SensitivityState:
    """dX[j], dP[j] for every coordinate j, sized to the current augmented dimension"""

    dX: np.ndarray  # (p, D)
    dP: np.ndarray  # (p, D, D)

    @classmethod
    def zeros(cls, p: int, D: int) -> "SensitivityState":
        return cls(dX=np.zeros((p, D)), dP=np.zeros((p, D, D)))

    @property
    def p(self) -> int:
        return self.dX.shape[0]

    @property
    def D(self) -> int:
        return self.dX.shape[1]


def sens_predict(sens: SensitivityState, F: np.ndarray, dQ: Sequence[np.ndarray]) -> SensitivityState:
    """dX <- F0 dX;  dP <- F0 dP F0^T + blockdiag(dQ_j, 0)"""
    d = F.shape[0]
    dX = sens.dX.copy()
    dP = sens.dP.copy()
    for j in range(sens.p):
        dX[j, :d] = F @ sens.dX[j, :d]
        dP[j, :d, :] = F @ dP[j, :d, :]
        dP[j, :, :d] = dP[j, :, :d] @ F.T
        dP[j, :d, :d] += dQ[j]
    return SensitivityState(dX=dX, dP=dP)


def sens_update(
    sens: SensitivityState,
    step: FilterStep,
    dR: Sequence[np.ndarray],
) -> Tuple[SensitivityState, np.ndarray, np.ndarray]:
    """
    Differentiate the measurement update termwise.

    Returns:
        (posterior sensitivities, dr with shape (p, m), dS with shape (p, m, m))
    """
    H, K, r, Sf = step.H, step.K, step.r, step.S_factor
    d = H.shape[1]
    m = H.shape[0]
    PH = step.prior.P[:, :d] @ H.T  # P_bar H0^T

    dX = np.empty_like(sens.dX)
    dP = np.empty_like(sens.dP)
    dr = np.empty((sens.p, m))
    dS = np.empty((sens.p, m, m))
    for j in range(sens.p):
        dX_bar, dP_bar = sens.dX[j], sens.dP[j]
        dPH = dP_bar[:, :d] @ H.T
        dr[j] = -H @ dX_bar[:d]
        dS[j] = symmetrize(H @ dPH[:d] + dR[j])
        dK = cho_solve(Sf, (dPH - K @ dS[j]).T).T
        dX[j] = dX_bar + dK @ r + K @ dr[j]
        dP[j] = symmetrize(dP_bar - K @ dPH.T - dK @ PH.T)
    return SensitivityState(dX=dX, dP=dP), dr, dS


def sens_append(sens: SensitivityState, appended: bool, d: int) -> SensitivityState:
    """Mirror of maybe_append on every coordinate"""
    if not appended:
        return sens
    # J = [I_D; [I_d 0]] only copies the leading d block into the new slot
    dX = np.concatenate([sens.dX, sens.dX[:, :d]], axis=1)
    top = np.concatenate([sens.dP, sens.dP[:, :, :d]], axis=2)
    dP = np.concatenate([top, top[:, :d, :]], axis=1)
    return SensitivityState(dX=dX, dP=dP)


def primary_grad_step(
    r: np.ndarray,
    S: np.ndarray,
    dr_j: np.ndarray,
    dS_j: np.ndarray,
    S_factor: Optional[tuple] = None,
) -> float:
    """d l_k / d theta_j = 1/2 tr(S^-1 dS) + dr^T S^-1 r - 1/2 r^T S^-1 dS S^-1 r"""
    if S_factor is None:
        S_factor = factorize_innovation(S)
    s = cho_solve(S_factor, r)
    return 0.5 * float(np.trace(cho_solve(S_factor, dS_j))) + float(dr_j @ s) - 0.5 * float(s @ dS_j @ s)


def supervisory_grad(
    v: np.ndarray,
    C_factor: tuple,
    dXs_j: np.ndarray,
    dPs_j: np.ndarray,
    Hs: np.ndarray,
) -> float:
    """d l_s / d theta_j with dv = -Hs dXs and dC = Hs dPs Hs^T"""
    if v.shape[0] == 0:
        return 0.0
    dv = -Hs @ dXs_j
    dC = Hs @ dPs_j @ Hs.T
    c = cho_solve(C_factor, v)
    return 0.5 * float(np.trace(cho_solve(C_factor, dC))) + float(dv @ c) - 0.5 * float(c @ dC @ c)


def _derivative_stack(param: CovParam, theta: np.ndarray, k: Optional[int]) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    dR = [param.dR(theta, j, k) for j in range(param.p)]
    dQ = [param.dQ(theta, j, k) for j in range(param.p)]
    return dR, dQ


def forward_gradient(
    model: SystemModel,
    spec: SupervisorySpec,
    y_o,
    param: CovParam,
    theta,
    weights: Tuple[float, float] = (1.0, 1.0),
) -> Tuple[LossBreakdown, np.ndarray]:
    """
    One pass over k interleaving filter steps with sensitivity steps

    Args:
        weights: (w_o, w_s) applied to the primary and supervisory terms of the gradient

    Returns:
        (LossBreakdown of the unweighted terms, gradient of w_o*l_o + w_s*l_s)
    """
    theta = param.check_theta(theta)
    w_o, w_s = weights
    d = model.d
    kf = AugmentedKalmanFilter(model, spec, param, theta)
    sens = SensitivityState.zeros(param.p, d)
    grad = np.zeros(param.p)
    per_step = np.zeros(model.N)

    constant = param.time_invariant
    dR, dQ = _derivative_stack(param, theta, None) if constant else (None, None)

    for step in kf.steps(y_o):
        if not constant:
            dR, dQ = _derivative_stack(param, theta, step.k)
        per_step[step.k - 1] = step.loss
        sens = sens_predict(sens, step.F, dQ)
        sens, dr, dS = sens_update(sens, step, dR)
        for j in range(param.p):
            grad[j] += w_o * primary_grad_step(step.r, step.S, dr[j], dS[j], step.S_factor)
        sens = sens_append(sens, step.appended, d)

    sup = kf.finish()
    if not spec.is_empty:
        for j in range(param.p):
            grad[j] += w_s * supervisory_grad(sup.v, sup.C_factor, sens.dX[j, d:], sens.dP[j, d:, d:], spec.Hs)

    loss = LossBreakdown(
        ell_o=float(np.sum(per_step)), ell_s=sup.ell_s, per_step=per_step,
        v=sup.v, C=sup.C, C_factor=sup.C_factor,
    )
    return loss, grad
