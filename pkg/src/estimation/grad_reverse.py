"""
Reverse-mode differentiation: adjoint sweep over a stored filter trace.

The sweep yields dL/dR_k and dL/dQ_k for every step; the gradient in theta
follows from Frobenius products with the parameterization derivatives, so the
cost of the sweep does not depend on p.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from src.errors import FilterInvariantError
from src.estimation.kalman import (
    FilterTrace,
    LossBreakdown,
    SupervisorySpec,
    SystemModel,
    TraceStep,
    append_operator,
    run_filter,
    symmetrize,
)
from src.estimation.params import CovParam

logger = logging.getLogger(__name__)


class CovarianceAdjointForm(str, Enum):
    """Which inverse sits inside the (I - K H0)^T [...] (I - K H0) sandwich of dL/dP_bar.

    MEASUREMENT uses R_k^-1 r_k (matches finite differences, since
    H0 (I - K H0) = R S^-1 H0); INNOVATION uses S_k^-1 r_k and is kept only as a
    negative control for gradient checking.
    """

    MEASUREMENT = "measurement"
    INNOVATION = "innovation"


@dataclass
class AdjointState:
    dL_dX: np.ndarray  # (D,)
    dL_dP: np.ndarray  # (D, D)

    @property
    def D(self) -> int:
        return self.dL_dX.shape[0]


def init_adjoints(
    v: np.ndarray,
    C_factor,
    Hs: np.ndarray,
    D: int,
    d: int,
    weight: float = 1.0,
) -> AdjointState:
    """
    Terminal adjoints from the supervisory loss, lifted to the full belief via G = [0 I]

        dL/dXs = -Hs^T C^-1 v
        dL/dPs = 1/2 (Hs^T C^-1 Hs - Hs^T C^-1 v v^T C^-1 Hs)
    """
    adj = AdjointState(dL_dX=np.zeros(D), dL_dP=np.zeros((D, D)))
    if v.shape[0] == 0 or weight == 0.0:
        return adj
    Cv = cho_solve(C_factor, v)
    CH = cho_solve(C_factor, Hs)
    g = Hs.T @ Cv
    adj.dL_dX[d:] = -weight * g
    adj.dL_dP[d:, d:] = 0.5 * weight * (Hs.T @ CH - np.outer(g, g))
    return adj


def backward_step(
    adj: AdjointState,
    step: TraceStep,
    R_factor: Optional[tuple],
    form: CovarianceAdjointForm = CovarianceAdjointForm.MEASUREMENT,
    primary_weight: float = 1.0,
) -> Tuple[AdjointState, np.ndarray, np.ndarray]:
    """
    Propagate adjoints from the posterior of step k to the posterior of step k-1.

    Order: append reversal, update reversal (with the l_k sources), the R and Q
    adjoints, then dynamics reversal.

    Args:
        R_factor: lower Cholesky factor of R_k; only the measurement form reads it

    Returns:
        (adjoints at k-1, dL/dR_k, dL/dQ_k)
    """
    if step is None:
        raise FilterInvariantError("Reverse pass reached a step missing from the trace")
    F, H, K, r, Sf = step.F, step.H, step.K, step.r, step.S_factor
    d, D, m = H.shape[1], step.dim, H.shape[0]
    expected = D + d if step.appended else D
    if adj.D != expected:
        raise FilterInvariantError(f"Adjoint dimension {adj.D} != {expected} at step k={step.k}")
    w = primary_weight

    a, G = adj.dL_dX, adj.dL_dP
    if step.appended:
        J = append_operator(D, d)
        a = J.T @ a
        G = J.T @ G @ J

    W = cho_solve(Sf, np.eye(m))
    s = W @ r
    Ka = K.T @ a

    G_S = w * 0.5 * (W - np.outer(s, s)) - 0.5 * (np.outer(Ka, s) + np.outer(s, Ka))
    dL_dR = K.T @ G @ K + G_S

    IKH = np.eye(D)
    IKH[:, :d] -= K @ H
    H0s = np.zeros(D)
    H0s[:d] = H.T @ s
    dL_dXbar = IKH.T @ a - w * H0s

    if form is CovarianceAdjointForm.MEASUREMENT:
        z = cho_solve(R_factor, r)
    else:
        z = s
    H0z = np.zeros(D)
    H0z[:d] = H.T @ z
    inner = G + 0.5 * (np.outer(a, H0z) + np.outer(H0z, a))
    dL_dPbar = IKH.T @ inner @ IKH
    dL_dPbar[:d, :d] += w * 0.5 * H.T @ (W - np.outer(s, s)) @ H
    dL_dQ = dL_dPbar[:d, :d].copy()

    a_prev = dL_dXbar.copy()
    a_prev[:d] = F.T @ dL_dXbar[:d]
    G_prev = dL_dPbar.copy()
    G_prev[:d, :] = F.T @ G_prev[:d, :]
    G_prev[:, :d] = G_prev[:, :d] @ F
    return AdjointState(dL_dX=a_prev, dL_dP=G_prev), dL_dR, dL_dQ


def _frobenius(A: np.ndarray, B: np.ndarray) -> float:
    return float(np.sum(A * B))


def chain_to_theta(
    dL_dR: Sequence[np.ndarray],
    dL_dQ: Sequence[np.ndarray],
    param: CovParam,
    theta,
) -> np.ndarray:
    """dL/dtheta_j = sum_k <dL/dR_k, dR_k/dtheta_j> + <dL/dQ_k, dQ_k/dtheta_j>"""
    theta = param.check_theta(theta)
    grad = np.zeros(param.p)
    if param.time_invariant:
        GR = symmetrize(np.sum(dL_dR, axis=0))
        GQ = symmetrize(np.sum(dL_dQ, axis=0))
        for j in param.r_coordinates():
            grad[j] += _frobenius(GR, param.dR(theta, j))
        for j in param.q_coordinates():
            grad[j] += _frobenius(GQ, param.dQ(theta, j))
        return grad

    for i, (GR, GQ) in enumerate(zip(dL_dR, dL_dQ)):
        k = i + 1
        GR, GQ = symmetrize(GR), symmetrize(GQ)
        for j in range(param.p):
            grad[j] += _frobenius(GR, param.dR(theta, j, k)) + _frobenius(GQ, param.dQ(theta, j, k))
    return grad


def backward_pass(
    trace: FilterTrace,
    adj: AdjointState,
    param: CovParam,
    theta,
    form: CovarianceAdjointForm = CovarianceAdjointForm.MEASUREMENT,
    primary_weight: float = 1.0,
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Run backward_step for k = N..1; returns dL/dR_k and dL/dQ_k in forward order"""
    N = len(trace)
    dL_dR: List[np.ndarray] = [None] * N
    dL_dQ: List[np.ndarray] = [None] * N
    needs_R = form is CovarianceAdjointForm.MEASUREMENT
    R_const = cho_factor(param.R(theta), lower=True) if needs_R and param.time_invariant else None
    for step in reversed(trace.steps):
        R_factor = R_const
        if needs_R and R_factor is None:
            R_factor = cho_factor(param.R(theta, step.k), lower=True)
        adj, dL_dR[step.k - 1], dL_dQ[step.k - 1] = backward_step(adj, step, R_factor, form, primary_weight)
    return dL_dR, dL_dQ


def reverse_gradient(
    model: SystemModel,
    spec: SupervisorySpec,
    y_o,
    param: CovParam,
    theta,
    weights: Tuple[float, float] = (1.0, 1.0),
    form: CovarianceAdjointForm = CovarianceAdjointForm.MEASUREMENT,
) -> Tuple[LossBreakdown, np.ndarray]:
    """
    Traced forward pass, then the adjoint sweep and the chain into theta

    Returns:
        (LossBreakdown, gradient of w_o*l_o + w_s*l_s)
    """
    theta = param.check_theta(theta)
    w_o, w_s = weights
    loss, trace, belief = run_filter(model, spec, y_o, param, theta, keep_trace=True)
    adj = init_adjoints(loss.v, loss.C_factor, spec.Hs, belief.D, model.d, weight=w_s)
    dL_dR, dL_dQ = backward_pass(trace, adj, param, theta, form, primary_weight=w_o)
    logger.debug("Reverse pass retained %d trace elements", trace.n_elements)
    return loss, chain_to_theta(dL_dR, dL_dQ, param, theta)


def retained_elements(model: SystemModel, spec: SupervisorySpec, y_o, param: CovParam, theta) -> int:
    """Number of matrix/vector entries the reverse pass keeps alive"""
    _, trace, _ = run_filter(model, spec, y_o, param, theta, keep_trace=True)
    return trace.n_elements
