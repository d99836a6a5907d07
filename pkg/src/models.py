"""
Pydantic models for run configuration and result reports
"""
import json
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from src import config
from src.errors import ConfigError


class GradientMode(str, Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


class SystemSettings(BaseModel):
    """Filter initialization for the constant-velocity model"""
    p0_scale: float = Field(default=1.0, gt=0, description="P0 = p0_scale * I")
    position_dims: int = Field(default=3, ge=1, description="Leading state entries scored by the RMSE")


class ParameterizationSettings(BaseModel):
    kind: Literal["isotropic", "diagonal", "cholesky"] = Field(
        default="cholesky", description="Map producing R(theta)"
    )
    process: Literal["fixed", "isotropic", "diagonal"] = Field(
        default="fixed", description="Map producing Q(theta); 'fixed' keeps Q = qI"
    )
    theta0: Optional[List[float]] = Field(default=None, description="Initial theta (default: R = I)")


class SupervisorySettings(BaseModel):
    mode: Literal["relative", "anchor"] = Field(
        default="relative", description="Relative position pairs or absolute position anchors"
    )
    sparse_downsample: int = Field(default=config.SPARSE_DOWNSAMPLE, ge=1, description="Downsample rate of the sparse setting")
    sparse_threshold: float = Field(default=config.SPARSE_THRESHOLD, gt=0, description="Distance threshold (m) of the sparse setting")


class CalibrationConfig(BaseModel):
    """Upper-level gradient descent settings"""
    mode: Optional[GradientMode] = Field(
        default=None, description="Gradient mode; None picks reverse for cholesky, forward otherwise"
    )
    itermax: int = Field(default=config.ITERMAX, ge=1)
    eta0: float = Field(default=config.ETA0, gt=0, description="Initial (or fixed) step size")
    line_search: bool = Field(default=True, description="Armijo backtracking from eta0")
    grad_tol: float = Field(default=config.GRAD_TOL, ge=0, description="Early stop on gradient norm")
    loss_weights: Tuple[float, float] = Field(
        default=(1.0, 1.0), description="(w_o, w_s) weights of primary and supervisory loss"
    )

    @model_validator(mode="after")
    def _check_weights(self):
        if min(self.loss_weights) < 0:
            raise ValueError("loss_weights must be non-negative")
        return self


class SimConfig(BaseModel):
    """Constant-velocity tracking experiment"""
    n_calib: int = Field(default=config.N_CALIB, ge=1, description="Calibration trajectory length")
    n_test: int = Field(default=config.N_TEST, ge=1, description="Test trajectory length")
    dt: float = Field(default=config.DT, gt=0, description="Time step (s)")
    q: float = Field(default=config.PROCESS_Q, ge=0, description="Process noise Q = qI")
    alpha: float = Field(default=config.SUPERVISORY_ALPHA, ge=0, description="Supervisory noise Psi = alpha I")
    r_base_diag: float = Field(default=config.R_BASE_DIAG, description="Diagonal of R_base (m^2)")
    r_base_offdiag: float = Field(default=config.R_BASE_OFFDIAG, description="Off-diagonal of R_base (m^2)")
    r_d: List[float] = Field(default_factory=lambda: list(config.R_D_DIAG), description="Per-axis R_d (m^2)")
    downsample: int = Field(default=config.DOWNSAMPLE, ge=1, description="Every r-th step is a supervision candidate")
    threshold: float = Field(default=config.DISTANCE_THRESHOLD, gt=0, description="Pair distance threshold (m)")
    trials: int = Field(default=config.TRIALS, ge=1, description="Monte-Carlo trials")
    seed: int = Field(default=0, ge=0)
    amplitude: List[float] = Field(default_factory=lambda: [4.0, 4.0, 0.5], description="Loop radius per axis (m)")
    period: float = Field(default=25.0, gt=0, description="Primary loop period (steps)")
    period_ratio: float = Field(default=1.618033988749895, gt=0, description="Ratio of the second, incommensurate period")
    secondary_weight: float = Field(default=0.2, ge=0, description="Relative amplitude of the second sinusoid")
    kp: float = Field(default=0.1, ge=0, description="Position gain tracking the reference loop")
    kd: float = Field(default=0.4, ge=0, description="Velocity gain tracking the reference loop")

    @model_validator(mode="after")
    def _check_noise(self):
        if len(self.r_d) != 3 or len(self.amplitude) != 3:
            raise ValueError("r_d and amplitude must have three entries")
        try:
            np.linalg.cholesky(self.r_true())
        except np.linalg.LinAlgError:
            raise ValueError("R_true = R_base + R_d must be positive definite") from None
        return self

    def r_base(self) -> np.ndarray:
        return np.full((3, 3), self.r_base_offdiag) + (self.r_base_diag - self.r_base_offdiag) * np.eye(3)

    def r_true(self) -> np.ndarray:
        return self.r_base() + np.diag(self.r_d)


class RunConfig(BaseModel):
    """Single JSON document driving every command"""
    system: SystemSettings = Field(default_factory=SystemSettings)
    parameterization: ParameterizationSettings = Field(default_factory=ParameterizationSettings)
    supervisory: SupervisorySettings = Field(default_factory=SupervisorySettings)
    optimizer: CalibrationConfig = Field(default_factory=CalibrationConfig)
    simulation: SimConfig = Field(default_factory=SimConfig)


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    """Read and validate a run config; missing path means all defaults"""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        problems = [
            f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}"
            for err in e.errors()
        ]
        raise ConfigError(f"{path}: " + "; ".join(problems)) from None


class CalibrationReport(BaseModel):
    """Outcome of one calibration run"""
    theta_hat: List[float]
    loss_history: List[float] = Field(default_factory=list, description="Weighted loss at each iterate")
    grad_norm_history: List[float] = Field(default_factory=list)
    ell_o_history: List[float] = Field(default_factory=list)
    ell_s_history: List[float] = Field(default_factory=list)
    wall_time_history: List[float] = Field(default_factory=list, description="Seconds per iteration")
    rmse_history: Optional[List[float]] = Field(default=None, description="Monitor value at each iterate")
    step_size_history: List[float] = Field(default_factory=list)
    final_loss: Optional[float] = None
    status: Literal["converged", "max_iter", "stalled", "diverged"] = "max_iter"
    message: str = ""
    mode: GradientMode = GradientMode.REVERSE
    kind: str = ""
    n_supervisory_states: int = 0
    n_supervisory_obs: int = 0

    @property
    def iterations(self) -> int:
        return len(self.loss_history)


class EvaluationResult(BaseModel):
    rmse: float = Field(..., description="Position RMSE of the filtered estimates (m)")
    raw_rmse: float = Field(..., description="Position RMSE of the raw measurements (m)")
    mean_nis: float = Field(..., description="Mean normalized innovation squared (about m when consistent)")


class CheckResult(BaseModel):
    name: str
    value: Optional[float] = None
    threshold: float
    status: Literal["passed", "failed", "skipped"]


class GradcheckReport(BaseModel):
    checks: List[CheckResult]
    steps: int
    n_supervisory_obs: int
    fd_sweep: Dict[str, List[Optional[float]]] = Field(
        default_factory=dict, description="Central-difference gradient per step size h"
    )

    @property
    def passed(self) -> bool:
        return all(check.status != "failed" for check in self.checks)


class MethodSpec(BaseModel):
    """One column/row of the Monte-Carlo comparison"""
    name: str
    kind: Literal["isotropic", "diagonal", "cholesky"] = "cholesky"
    mode: Optional[GradientMode] = None
    loss_weights: Tuple[float, float] = (1.0, 1.0)
    supervision: Literal["dense", "sparse", "none"] = "dense"
    tune: bool = True


class MonteCarloRow(BaseModel):
    method: str
    mean_rmse: float
    stderr: float
    n_ok: int
    n_failed: int
    mean_supervisory_states: float = 0.0
    mean_supervisory_obs: float = 0.0
    mean_relative_r_error: Optional[float] = None


class BenchRow(BaseModel):
    mode: GradientMode
    p: int
    N: int
    median_seconds: float
    retained_elements: Optional[int] = None
