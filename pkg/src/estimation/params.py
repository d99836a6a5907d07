"""
Covariance parameterizations: theta -> (Q_k(theta), R_k(theta)) with analytic derivatives
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from src.config import THETA_CLAMP
from src.errors import ParameterError


MatrixFn = Callable[[np.ndarray, Optional[int]], np.ndarray]
DerivativeFn = Callable[[np.ndarray, int, Optional[int]], np.ndarray]


class ParamKind(str, Enum):
    """Which map produces R(theta)"""

    ISOTROPIC = "isotropic"
    DIAGONAL = "diagonal"
    CHOLESKY = "cholesky"
    CUSTOM = "custom"


def _exp_clamped(values: np.ndarray) -> np.ndarray:
    return np.exp(np.clip(values, -THETA_CLAMP, THETA_CLAMP))


def _exp_clamped_slope(values: np.ndarray) -> np.ndarray:
    # clip() is flat outside the clamp, so the derivative vanishes there
    inside = np.abs(values) <= THETA_CLAMP
    return np.where(inside, _exp_clamped(values), 0.0)


class CovarianceMap(ABC):
    """A block of theta mapped to one covariance matrix.

    Built-in maps read ``theta[offset:offset + size]``; derivative coordinates
    are global indices into the full theta vector.
    """

    time_varying = False

    def __init__(self, dim: int, offset: int = 0):
        if dim < 1:
            raise ParameterError(f"Covariance dimension must be positive, got {dim}")
        self.dim = dim
        self.offset = offset

    @property
    @abstractmethod
    def size(self) -> int:
        """Number of theta coordinates owned by this map"""

    @abstractmethod
    def value(self, theta: np.ndarray, k: Optional[int] = None) -> np.ndarray:
        """Covariance at theta"""

    @abstractmethod
    def derivative(self, theta: np.ndarray, j: int, k: Optional[int] = None) -> np.ndarray:
        """Partial derivative of value() in global coordinate j"""

    def owns(self, j: int) -> bool:
        return self.offset <= j < self.offset + self.size

    def _block(self, theta: np.ndarray) -> np.ndarray:
        return theta[self.offset:self.offset + self.size]


class FixedMap(CovarianceMap):
    """Constant covariance, independent of theta"""

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=float)
        super().__init__(matrix.shape[0], offset=0)
        self.matrix = matrix

    @property
    def size(self) -> int:
        return 0

    def value(self, theta, k=None):
        return self.matrix.copy()

    def derivative(self, theta, j, k=None):
        return np.zeros_like(self.matrix)


class IsotropicMap(CovarianceMap):
    """exp(theta) * I"""

    @property
    def size(self) -> int:
        return 1

    def value(self, theta, k=None):
        return _exp_clamped(self._block(theta)[0]) * np.eye(self.dim)

    def derivative(self, theta, j, k=None):
        if not self.owns(j):
            return np.zeros((self.dim, self.dim))
        return _exp_clamped_slope(self._block(theta)[0]) * np.eye(self.dim)


class DiagonalMap(CovarianceMap):
    """diag(exp(theta_1), ..., exp(theta_m))"""

    @property
    def size(self) -> int:
        return self.dim

    def value(self, theta, k=None):
        return np.diag(_exp_clamped(self._block(theta)))

    def derivative(self, theta, j, k=None):
        out = np.zeros((self.dim, self.dim))
        if self.owns(j):
            i = j - self.offset
            out[i, i] = _exp_clamped_slope(self._block(theta)[i])
        return out


class CholeskyMap(CovarianceMap):
    """L(theta) L(theta)^T with a lower-triangular L.

    Layout: the first ``dim`` entries are log-diagonals of L, the remaining
    dim*(dim-1)/2 entries fill the strictly lower triangle in row-major order.
    """

    def __init__(self, dim: int, offset: int = 0):
        super().__init__(dim, offset)
        self._rows, self._cols = np.tril_indices(dim, -1)

    @property
    def size(self) -> int:
        return self.dim * (self.dim + 1) // 2

    def factor(self, theta: np.ndarray) -> np.ndarray:
        block = self._block(theta)
        L = np.diag(_exp_clamped(block[:self.dim]))
        L[self._rows, self._cols] = block[self.dim:]
        return L

    def value(self, theta, k=None):
        L = self.factor(theta)
        return L @ L.T

    def derivative(self, theta, j, k=None):
        if not self.owns(j):
            return np.zeros((self.dim, self.dim))
        block = self._block(theta)
        i = j - self.offset
        dL = np.zeros((self.dim, self.dim))
        if i < self.dim:
            dL[i, i] = _exp_clamped_slope(block[i])
        else:
            t = i - self.dim
            dL[self._rows[t], self._cols[t]] = 1.0
        L = self.factor(theta)
        dLLt = dL @ L.T
        return dLLt + dLLt.T

    def theta_from_matrix(self, matrix: np.ndarray) -> np.ndarray:
        """Inverse map: the theta block whose value() reproduces an SPD matrix"""
        L = np.linalg.cholesky(matrix)
        return np.concatenate([np.log(np.diag(L)), L[self._rows, self._cols]])


class CallableMap(CovarianceMap):
    """User-supplied map over the full theta (coordinates may be shared with other maps)"""

    time_varying = True

    def __init__(self, dim: int, size: int, value_fn: MatrixFn, derivative_fn: DerivativeFn):
        super().__init__(dim, offset=0)
        self._size = size
        self._value_fn = value_fn
        self._derivative_fn = derivative_fn

    @property
    def size(self) -> int:
        return self._size

    def owns(self, j: int) -> bool:
        return 0 <= j < self._size

    def value(self, theta, k=None):
        return np.asarray(self._value_fn(theta, k), dtype=float)

    def derivative(self, theta, j, k=None):
        return np.asarray(self._derivative_fn(theta, j, k), dtype=float)


_MAPS = {
    "isotropic": IsotropicMap,
    "diagonal": DiagonalMap,
    "cholesky": CholeskyMap,
}


@dataclass
class CovParam:
    """Parameterization theta -> (Q_k(theta), R_k(theta)).

    For the built-in kinds theta is laid out as [R block, Q block]; with a
    ``FixedMap`` for Q this is the FixedQ-VaryR configuration.
    """

    kind: ParamKind
    r_map: CovarianceMap
    q_map: CovarianceMap
    theta: np.ndarray = field(default=None)
    p: int = field(default=None)

    def __post_init__(self):
        if self.p is None:
            if self.kind is ParamKind.CUSTOM:
                self.p = max(self.r_map.size, self.q_map.size)
            else:
                self.p = self.r_map.size + self.q_map.size
        if self.theta is None:
            self.theta = np.zeros(self.p)
        self.theta = self.check_theta(self.theta)

    @property
    def meas_dim(self) -> int:
        return self.r_map.dim

    @property
    def proc_dim(self) -> int:
        return self.q_map.dim

    @property
    def is_fixed_q_vary_r(self) -> bool:
        return isinstance(self.q_map, FixedMap)

    @property
    def time_invariant(self) -> bool:
        return not (self.r_map.time_varying or self.q_map.time_varying)

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape != (self.p,):
            raise ParameterError(
                f"{self.kind.value} parameterization expects theta of dimension {self.p}, "
                f"got {theta.shape[0]}"
            )
        return theta

    def _check_coordinate(self, j: int):
        if not 0 <= j < self.p:
            raise ParameterError(f"Coordinate j={j} out of range for p={self.p}")

    def R(self, theta, k: Optional[int] = None) -> np.ndarray:
        return self.r_map.value(self.check_theta(theta), k)

    def Q(self, theta, k: Optional[int] = None) -> np.ndarray:
        return self.q_map.value(self.check_theta(theta), k)

    def dR(self, theta, j: int, k: Optional[int] = None) -> np.ndarray:
        self._check_coordinate(j)
        return self.r_map.derivative(self.check_theta(theta), j, k)

    def dQ(self, theta, j: int, k: Optional[int] = None) -> np.ndarray:
        self._check_coordinate(j)
        return self.q_map.derivative(self.check_theta(theta), j, k)

    def r_coordinates(self) -> range:
        if self.kind is ParamKind.CUSTOM:
            return range(self.p)
        return range(self.r_map.offset, self.r_map.offset + self.r_map.size)

    def q_coordinates(self) -> range:
        if self.kind is ParamKind.CUSTOM:
            return range(self.p)
        return range(self.q_map.offset, self.q_map.offset + self.q_map.size)

    @classmethod
    def custom(
        cls,
        p: int,
        meas_dim: int,
        proc_dim: int,
        R_fn: MatrixFn,
        dR_fn: DerivativeFn,
        Q_fn: MatrixFn,
        dQ_fn: DerivativeFn,
        theta=None,
    ) -> "CovParam":
        """Arbitrary (possibly time-varying, possibly shared-coordinate) maps"""
        return cls(
            kind=ParamKind.CUSTOM,
            r_map=CallableMap(meas_dim, p, R_fn, dR_fn),
            q_map=CallableMap(proc_dim, p, Q_fn, dQ_fn),
            theta=theta,
            p=p,
        )


def build_param(
    kind: str,
    meas_dim: int,
    Q: np.ndarray,
    process: str = "fixed",
    theta0=None,
) -> CovParam:
    """
    Build one of the built-in parameterizations.

    Args:
        kind: R map, "isotropic" | "diagonal" | "cholesky"
        meas_dim: rows of R
        Q: configured process noise (the constant for "fixed", the start point otherwise)
        process: Q map, "fixed" | "isotropic" | "diagonal"
        theta0: initial theta; defaults to R = I and Q at its configured value

    Returns:
        CovParam with theta = [R block, Q block]
    """
    if kind not in _MAPS:
        raise ParameterError(f"Unknown parameterization '{kind}' (expected one of {sorted(_MAPS)})")
    Q = np.asarray(Q, dtype=float)
    r_map = _MAPS[kind](meas_dim, offset=0)

    if process == "fixed":
        q_map = FixedMap(Q)
        q_start = np.zeros(0)
    elif process in ("isotropic", "diagonal"):
        q_map = _MAPS[process](Q.shape[0], offset=r_map.size)
        diag = np.diag(Q)
        q_start = np.log([diag.mean()]) if process == "isotropic" else np.log(diag)
    else:
        raise ParameterError(f"Unknown process-noise map '{process}'")

    param = CovParam(kind=ParamKind(kind), r_map=r_map, q_map=q_map)
    if theta0 is None:
        theta0 = np.concatenate([np.zeros(r_map.size), q_start])
    param.theta = param.check_theta(theta0)
    return param


def eval_R(param: CovParam, theta, k: Optional[int] = None) -> np.ndarray:
    return param.R(theta, k)


def eval_Q(param: CovParam, theta, k: Optional[int] = None) -> np.ndarray:
    return param.Q(theta, k)


def dR_dtheta(param: CovParam, theta, j: int, k: Optional[int] = None) -> np.ndarray:
    return param.dR(theta, j, k)


def dQ_dtheta(param: CovParam, theta, j: int, k: Optional[int] = None) -> np.ndarray:
    return param.dQ(theta, j, k)
