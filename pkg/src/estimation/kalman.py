"""
Augmented-state Kalman filter evaluating the factorized negative log-likelihood

    L(theta) = l_o(theta) + l_s(theta)

l_o accumulates the innovation terms of the primary measurements; l_s scores the
supervisory observations against the terminal posterior of the appended states.
"""
import logging
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from src.config import SUPERVISORY_JITTER
from src.errors import (
    FilterInvariantError,
    ModelError,
    NoiseLabError,
    SingularInnovationError,
    SingularSupervisoryError,
    with_step,
)
from src.estimation.params import CovParam

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def chol_logdet(factor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


@dataclass
class SystemModel:
    """Time-varying matrices of x_k = F_k x_{k-1} + B_k u_k + w_k, y_k = H_k x_k + v_k"""

    F: np.ndarray  # (N, d, d)
    B: np.ndarray  # (N, d, q)
    H: np.ndarray  # (N, m, d)
    u: np.ndarray  # (N, q)
    x0: np.ndarray  # (d,)
    P0: np.ndarray  # (d, d)

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        self.P0 = np.asarray(self.P0, dtype=float)
        self.validate()

    @property
    def N(self) -> int:
        return self.F.shape[0]

    @property
    def d(self) -> int:
        return self.x0.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[1]

    def validate(self):
        N, d = self.F.shape[0], self.x0.shape[0]
        if self.F.shape != (N, d, d):
            raise ModelError(f"F must have shape (N, {d}, {d}), got {self.F.shape}")
        if self.H.ndim != 3 or self.H.shape[0] != N or self.H.shape[2] != d:
            raise ModelError(f"H must have shape ({N}, m, {d}), got {self.H.shape}")
        if self.B.ndim != 3 or self.B.shape[:2] != (N, d):
            raise ModelError(f"B must have shape ({N}, {d}, q), got {self.B.shape}")
        if self.u.shape != (N, self.B.shape[2]):
            raise ModelError(f"u must have shape ({N}, {self.B.shape[2]}), got {self.u.shape}")
        if self.P0.shape != (d, d):
            raise ModelError(f"P0 must be {d}x{d}, got {self.P0.shape}")
        if not np.allclose(self.P0, self.P0.T):
            raise ModelError("P0 must be symmetric")
        try:
            np.linalg.cholesky(self.P0)
        except np.linalg.LinAlgError:
            raise ModelError("P0 must be positive definite") from None

    @classmethod
    def time_invariant(cls, F, B, H, u, x0, P0) -> "SystemModel":
        """Repeat constant F, B, H over the horizon given by len(u)"""
        u = np.asarray(u, dtype=float)
        N = u.shape[0]
        return cls(
            F=np.repeat(np.asarray(F, dtype=float)[None], N, axis=0),
            B=np.repeat(np.asarray(B, dtype=float)[None], N, axis=0),
            H=np.repeat(np.asarray(H, dtype=float)[None], N, axis=0),
            u=u,
            x0=x0,
            P0=P0,
        )

    def truncated(self, horizon: int) -> "SystemModel":
        return SystemModel(
            F=self.F[:horizon], B=self.B[:horizon], H=self.H[:horizon],
            u=self.u[:horizon], x0=self.x0, P0=self.P0,
        )


@dataclass
class SupervisorySpec:
    """y_s = H_s X_s + nu_s, nu_s ~ N(0, Psi), over the stacked states at `indices`"""

    indices: Tuple[int, ...]
    Hs: np.ndarray
    Psi: np.ndarray
    ys: np.ndarray
    state_dim: int

    def __post_init__(self):
        self.indices = tuple(int(i) for i in self.indices)
        self.ys = np.asarray(self.ys, dtype=float).reshape(-1)
        n_obs, n_cols = self.ys.shape[0], self.state_dim * len(self.indices)
        if np.size(self.Hs) and np.shape(self.Hs) != (n_obs, n_cols):
            raise ModelError(f"Hs must be {n_obs}x{n_cols}, got {np.shape(self.Hs)}")
        try:
            self.Hs = np.asarray(self.Hs, dtype=float).reshape(n_obs, n_cols)
            self.Psi = np.asarray(self.Psi, dtype=float).reshape(n_obs, n_obs)
        except ValueError as e:
            raise ModelError(f"Supervisory spec shapes inconsistent with {n_obs} observations: {e}") from None
        self.validate()

    @property
    def n_states(self) -> int:
        return len(self.indices)

    @property
    def n_obs(self) -> int:
        return self.ys.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.n_obs == 0

    def validate(self, horizon: Optional[int] = None):
        idx = np.asarray(self.indices)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 1):
            raise ModelError(f"Supervisory indices must be strictly increasing and >= 1: {self.indices}")
        if horizon is not None and idx.size and idx[-1] > horizon:
            raise ModelError(f"Supervisory index {idx[-1]} beyond horizon N={horizon}")
        if not np.allclose(self.Psi, self.Psi.T):
            raise ModelError("Psi must be symmetric")
        if self.n_obs and np.linalg.eigvalsh(self.Psi).min() < -1e-12:
            raise ModelError("Psi must be positive semidefinite")

    @classmethod
    def empty(cls, state_dim: int) -> "SupervisorySpec":
        return cls(indices=(), Hs=np.zeros((0, 0)), Psi=np.zeros((0, 0)), ys=np.zeros(0), state_dim=state_dim)

    @classmethod
    def canonical(cls, indices, Hs, Psi, ys, state_dim: int) -> "SupervisorySpec":
        """Sort indices and permute the column blocks of Hs to match"""
        indices = list(indices)
        order = np.argsort(indices, kind="stable")
        d = state_dim
        cols = np.concatenate([np.arange(i * d, (i + 1) * d) for i in order]) if indices else np.zeros(0, int)
        Hs = np.asarray(Hs, dtype=float)
        return cls(
            indices=tuple(indices[i] for i in order),
            Hs=Hs[:, cols] if indices else Hs,
            Psi=Psi,
            ys=ys,
            state_dim=state_dim,
        )

    def restrict(self, horizon: int) -> "SupervisorySpec":
        """Keep observation rows whose states all lie in the first `horizon` steps"""
        if self.is_empty:
            return self
        d = self.state_dim
        blocks = self.Hs.reshape(self.n_obs, self.n_states, d)
        touched = np.any(blocks != 0.0, axis=2)  # (n_obs, n_states)
        inside = np.asarray(self.indices) <= horizon
        rows = np.where(~np.any(touched & ~inside[None, :], axis=1))[0]
        used = np.any(touched[rows], axis=0) & inside
        states = np.where(used)[0]
        cols = np.concatenate([np.arange(s * d, (s + 1) * d) for s in states]) if states.size else np.zeros(0, int)
        return SupervisorySpec(
            indices=tuple(self.indices[s] for s in states),
            Hs=self.Hs[np.ix_(rows, cols)],
            Psi=self.Psi[np.ix_(rows, rows)],
            ys=self.ys[rows],
            state_dim=d,
        )


@dataclass
class AugmentedBelief:
    """Mean/covariance over [x_k; appended supervisory states]"""

    X: np.ndarray
    P: np.ndarray
    ledger: List[int] = field(default_factory=list)

    @property
    def D(self) -> int:
        return self.X.shape[0]

    def current(self, d: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.X[:d], self.P[:d, :d]

    def supervised(self, d: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.X[d:], self.P[d:, d:]


class UpdateResult(NamedTuple):
    posterior: AugmentedBelief
    r: np.ndarray
    S: np.ndarray
    K: np.ndarray
    S_factor: tuple


class SupervisoryLoss(NamedTuple):
    ell_s: float
    v: np.ndarray
    C: np.ndarray
    C_factor: Optional[tuple]


@dataclass
class FilterStep:
    """Everything one filter step produced; consumed by forward-mode sensitivities"""

    k: int
    F: np.ndarray
    H: np.ndarray
    dim: int  # augmented dimension D during predict/update
    prior: AugmentedBelief
    posterior: AugmentedBelief  # after update, before append
    r: np.ndarray
    S: np.ndarray
    S_factor: tuple
    K: np.ndarray
    loss: float
    appended: bool


@dataclass
class TraceStep:
    """Saved variables for the reverse pass"""

    k: int
    F: np.ndarray
    H: np.ndarray
    K: np.ndarray
    S_factor: tuple
    r: np.ndarray
    appended: bool
    dim: int

    @property
    def n_elements(self) -> int:
        return self.F.size + self.H.size + self.K.size + self.S_factor[0].size + self.r.size + 1


@dataclass
class FilterTrace:
    steps: List[TraceStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def n_elements(self) -> int:
        return sum(step.n_elements for step in self.steps)


@dataclass
class LossBreakdown:
    ell_o: float
    ell_s: float
    per_step: np.ndarray
    v: np.ndarray
    C: np.ndarray
    C_factor: Optional[tuple] = None

    @property
    def total(self) -> float:
        return self.ell_o + self.ell_s

    def weighted(self, weights: Tuple[float, float]) -> float:
        w_o, w_s = weights
        return w_o * self.ell_o + w_s * self.ell_s

    def to_record(self) -> dict:
        return {
            "ell_o": self.ell_o,
            "ell_s": self.ell_s,
            "total": self.total,
            "n_steps": int(self.per_step.shape[0]),
            "n_supervisory": int(self.v.shape[0]),
        }


def predict(belief: AugmentedBelief, F: np.ndarray, B: np.ndarray, u: np.ndarray, Q: np.ndarray) -> AugmentedBelief:
    """X_bar = F0 X_hat + B0 u,  P_bar = F0 P_hat F0^T + Q0 with F0 = blockdiag(F, I)"""
    d = F.shape[0]
    if belief.D < d or Q.shape != (d, d):
        raise ModelError(f"Predict dimension mismatch: D={belief.D}, F {F.shape}, Q {Q.shape}")
    X = belief.X.copy()
    X[:d] = F @ belief.X[:d] + B @ u
    P = belief.P.copy()
    P[:d, :] = F @ P[:d, :]
    P[:, :d] = P[:, :d] @ F.T
    P[:d, :d] += Q
    return AugmentedBelief(X=X, P=symmetrize(P), ledger=list(belief.ledger))


def factorize_innovation(S: np.ndarray, k: Optional[int] = None) -> tuple:
    try:
        factor = cho_factor(S, lower=True)
    except (LinAlgError, ValueError) as e:
        raise SingularInnovationError(step=k, detail=str(e)) from None
    if not np.all(np.isfinite(factor[0])):
        raise SingularInnovationError(step=k, detail="non-finite Cholesky factor")
    return factor


def update(prior: AugmentedBelief, H: np.ndarray, R: np.ndarray, y: np.ndarray, k: Optional[int] = None) -> UpdateResult:
    """Measurement update with H0 = [H 0]; only the current-state block is observed"""
    d = H.shape[1]
    X_bar, P_bar = prior.X, prior.P
    r = y - H @ X_bar[:d]
    PH = P_bar[:, :d] @ H.T  # P_bar H0^T, (D, m)
    S = symmetrize(H @ PH[:d] + R)
    S_factor = factorize_innovation(S, k)
    K = cho_solve(S_factor, PH.T).T
    X = X_bar + K @ r
    P = symmetrize(P_bar - K @ PH.T)
    posterior = AugmentedBelief(X=X, P=P, ledger=list(prior.ledger))
    return UpdateResult(posterior, r, S, K, S_factor)


def append_operator(D: int, d: int) -> np.ndarray:
    """J_k = [I; J] with J = [I_d 0]: copies the current state to the end"""
    J = np.zeros((D + d, D))
    J[:D, :D] = np.eye(D)
    J[D:, :d] = np.eye(d)
    return J


def maybe_append(posterior: AugmentedBelief, k: int, spec: SupervisorySpec) -> AugmentedBelief:
    if k not in spec.indices:
        return posterior
    if k in posterior.ledger:
        raise FilterInvariantError(f"State k={k} appended twice")
    J = append_operator(posterior.D, spec.state_dim)
    return AugmentedBelief(
        X=J @ posterior.X,
        P=symmetrize(J @ posterior.P @ J.T),
        ledger=posterior.ledger + [k],
    )


def primary_loss_step(r: np.ndarray, S: np.ndarray, S_factor: Optional[tuple] = None) -> float:
    """l_k = 1/2 log|S| + 1/2 r^T S^-1 r + (m/2) log 2pi"""
    if S_factor is None:
        S_factor = factorize_innovation(S)
    m = r.shape[0]
    return 0.5 * chol_logdet(S_factor) + 0.5 * float(r @ cho_solve(S_factor, r)) + 0.5 * m * LOG_2PI


def factorize_supervisory(C: np.ndarray) -> tuple:
    # jitter cannot repair NaN/inf entries
    if not np.all(np.isfinite(C)):
        raise SingularSupervisoryError("Supervisory covariance C has non-finite entries")
    try:
        return cho_factor(C, lower=True)
    except (LinAlgError, ValueError):
        pass
    logger.debug("Supervisory covariance singular; retrying with jitter %.1e", SUPERVISORY_JITTER)
    try:
        return cho_factor(C + SUPERVISORY_JITTER * np.eye(C.shape[0]), lower=True)
    except (LinAlgError, ValueError) as e:
        raise SingularSupervisoryError(f"Supervisory covariance C is not SPD after jitter: {e}") from None


def supervisory_loss(Xs_hat: np.ndarray, Ps_hat: np.ndarray, spec: SupervisorySpec) -> SupervisoryLoss:
    """l_s = 1/2 log|C| + 1/2 v^T C^-1 v + (n/2) log 2pi, v = ys - Hs Xs, C = Hs Ps Hs^T + Psi"""
    if spec.is_empty:
        return SupervisoryLoss(0.0, np.zeros(0), np.zeros((0, 0)), None)
    v = spec.ys - spec.Hs @ Xs_hat
    C = symmetrize(spec.Hs @ Ps_hat @ spec.Hs.T + spec.Psi)
    C_factor = factorize_supervisory(C)
    ell_s = 0.5 * chol_logdet(C_factor) + 0.5 * float(v @ cho_solve(C_factor, v)) + 0.5 * spec.n_obs * LOG_2PI
    return SupervisoryLoss(ell_s, v, C, C_factor)


class AugmentedKalmanFilter:
    """
    Step-wise driver of the augmented filter for one (model, spec, theta)

    Example:
        >>> kf = AugmentedKalmanFilter(model, spec, param, theta)
        >>> for step in kf.steps(y_o):
        ...     print(step.k, step.loss)
        >>> sup = kf.finish()
    """

    def __init__(self, model: SystemModel, spec: SupervisorySpec, param: CovParam, theta):
        spec.validate(horizon=model.N)
        if spec.state_dim != model.d:
            raise ModelError(f"Supervisory state_dim {spec.state_dim} != model state dimension {model.d}")
        if param.meas_dim != model.m or param.proc_dim != model.d:
            raise ModelError(
                f"Parameterization dims (m={param.meas_dim}, d={param.proc_dim}) "
                f"do not match model (m={model.m}, d={model.d})"
            )
        self.model = model
        self.spec = spec
        self.param = param
        self.theta = param.check_theta(theta)
        self.belief = AugmentedBelief(X=model.x0.copy(), P=model.P0.copy(), ledger=[])

    def steps(self, y_o) -> Iterator[FilterStep]:
        model = self.model
        y_o = np.asarray(y_o, dtype=float)
        if y_o.shape != (model.N, model.m):
            raise ModelError(f"y_o must have shape ({model.N}, {model.m}), got {y_o.shape}")
        theta_time_invariant = self.param.time_invariant
        R = self.param.R(self.theta) if theta_time_invariant else None
        Q = self.param.Q(self.theta) if theta_time_invariant else None

        for i in range(model.N):
            k = i + 1
            try:
                Q_k = Q if theta_time_invariant else self.param.Q(self.theta, k)
                R_k = R if theta_time_invariant else self.param.R(self.theta, k)
                prior = predict(self.belief, model.F[i], model.B[i], model.u[i], Q_k)
                result = update(prior, model.H[i], R_k, y_o[i], k)
                loss = primary_loss_step(result.r, result.S, result.S_factor)
                self.belief = maybe_append(result.posterior, k, self.spec)
            except NoiseLabError as e:
                raise with_step(e, k)
            yield FilterStep(
                k=k, F=model.F[i], H=model.H[i], dim=prior.D, prior=prior,
                posterior=result.posterior, r=result.r, S=result.S,
                S_factor=result.S_factor, K=result.K, loss=loss,
                appended=self.belief.D > prior.D,
            )

    def finish(self) -> SupervisoryLoss:
        if list(self.belief.ledger) != list(self.spec.indices):
            raise FilterInvariantError(
                f"Appended states {self.belief.ledger} do not match supervisory indices {list(self.spec.indices)}"
            )
        Xs, Ps = self.belief.supervised(self.model.d)
        return supervisory_loss(Xs, Ps, self.spec)


def run_filter(
    model: SystemModel,
    spec: SupervisorySpec,
    y_o: Sequence,
    param: CovParam,
    theta,
    keep_trace: bool = False,
) -> Tuple[LossBreakdown, FilterTrace, AugmentedBelief]:
    """
    Full forward pass: predict, update, append for k = 1..N, then the supervisory loss

    Args:
        keep_trace: retain {F, H, K, S factor, r, append flag} per step for reverse mode

    Returns:
        (LossBreakdown, FilterTrace, terminal AugmentedBelief)
    """
    kf = AugmentedKalmanFilter(model, spec, param, theta)
    trace = FilterTrace()
    per_step = np.zeros(model.N)
    for step in kf.steps(y_o):
        per_step[step.k - 1] = step.loss
        if keep_trace:
            trace.steps.append(TraceStep(
                k=step.k, F=step.F, H=step.H, K=step.K, S_factor=step.S_factor,
                r=step.r, appended=step.appended, dim=step.dim,
            ))
    sup = kf.finish()
    breakdown = LossBreakdown(
        ell_o=float(np.sum(per_step)), ell_s=sup.ell_s, per_step=per_step,
        v=sup.v, C=sup.C, C_factor=sup.C_factor,
    )
    logger.debug("Filter pass: l_o=%.6f l_s=%.6f", breakdown.ell_o, breakdown.ell_s)
    return breakdown, trace, kf.belief
