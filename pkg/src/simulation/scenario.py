"""
Constant-velocity tracking scenario: looping ground truth, noisy position fixes
and distance-gated supervisory pairs
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from src.estimation.kalman import SupervisorySpec, SystemModel
from src.models import SimConfig

logger = logging.getLogger(__name__)

POSITION_DIM = 3
STATE_DIM = 6

# Independent random streams per dataset role and per generator
CALIB, TEST = 0, 1
TRAJECTORY_STREAM, PRIMARY_STREAM, SUPERVISORY_STREAM = 0, 1, 2


def stream_rng(seed: int, role: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), role, stream])


def cv_matrices(dt: float):
    """F = [[I, dt I], [0, I]], B = [[0], [dt I]], H = [I 0]"""
    I3 = np.eye(POSITION_DIM)
    Z3 = np.zeros((POSITION_DIM, POSITION_DIM))
    F = np.block([[I3, dt * I3], [Z3, I3]])
    B = np.vstack([Z3, dt * I3])
    H = np.hstack([I3, Z3])
    return F, B, H


def constant_velocity_model(inputs, x0, dt: float = 1.0, p0_scale: float = 1.0) -> SystemModel:
    F, B, H = cv_matrices(dt)
    return SystemModel.time_invariant(F, B, H, inputs, x0, p0_scale * np.eye(STATE_DIM))


class Trajectory(NamedTuple):
    states: np.ndarray  # (N, 6) true x_1..x_N
    inputs: np.ndarray  # (N, 3) u_1..u_N
    x0: np.ndarray  # (6,) true x_0


def _reference(cfg: SimConfig, t: float):
    """Position, velocity and acceleration of the looping reference path at time t"""
    amp = np.asarray(cfg.amplitude, dtype=float)
    w1 = 2.0 * np.pi / cfg.period
    w2 = w1 / cfg.period_ratio
    c = cfg.secondary_weight

    pos = amp * np.array([
        np.cos(w1 * t) + c * np.cos(w2 * t),
        np.sin(w1 * t) + c * np.sin(w2 * t),
        np.sin(w2 * t),
    ])
    vel = amp * np.array([
        -w1 * np.sin(w1 * t) - c * w2 * np.sin(w2 * t),
        w1 * np.cos(w1 * t) + c * w2 * np.cos(w2 * t),
        w2 * np.cos(w2 * t),
    ])
    acc = amp * np.array([
        -w1**2 * np.cos(w1 * t) - c * w2**2 * np.cos(w2 * t),
        -w1**2 * np.sin(w1 * t) - c * w2**2 * np.sin(w2 * t),
        -w2**2 * np.sin(w2 * t),
    ])
    return pos, vel, acc


def generate_trajectory(
    cfg: SimConfig,
    seed: int,
    n_steps: Optional[int] = None,
    x0=None,
    role: int = CALIB,
) -> Trajectory:
    """
    Simulate x_k = F x_{k-1} + B u_k + w_k, w_k ~ N(0, qI).

    u_k is the reference acceleration plus a PD term pulling the state back
    toward the reference loop, so the noisy path keeps revisiting earlier places.
    With zero amplitude, zero gains and q = 0 the motion is a straight line from x0.
    """
    N = cfg.n_calib if n_steps is None else n_steps
    rng = stream_rng(seed, role, TRAJECTORY_STREAM)
    F, B, _ = cv_matrices(cfg.dt)
    if x0 is None:
        pos, vel, _ = _reference(cfg, 0.0)
        x0 = np.concatenate([pos, vel])
    x0 = np.asarray(x0, dtype=float)

    states = np.zeros((N, STATE_DIM))
    inputs = np.zeros((N, POSITION_DIM))
    noise = rng.normal(scale=np.sqrt(cfg.q), size=(N, STATE_DIM)) if cfg.q > 0 else np.zeros((N, STATE_DIM))
    x = x0
    for i in range(N):
        pos, vel, acc = _reference(cfg, i * cfg.dt)
        inputs[i] = acc + cfg.kp * (pos - x[:POSITION_DIM]) + cfg.kd * (vel - x[POSITION_DIM:])
        x = F @ x + B @ inputs[i] + noise[i]
        states[i] = x
    return Trajectory(states=states, inputs=inputs, x0=x0)


def generate_primary(states, R_true, seed: int, role: int = CALIB) -> np.ndarray:
    """y_k = p_k + nu_k, nu_k ~ N(0, R_true)"""
    states = np.asarray(states, dtype=float)
    R_true = np.asarray(R_true, dtype=float)
    rng = stream_rng(seed, role, PRIMARY_STREAM)
    noise = rng.multivariate_normal(np.zeros(R_true.shape[0]), R_true, size=states.shape[0])
    return states[:, :R_true.shape[0]] + noise


def candidate_indices(n_steps: int, downsample: int):
    return [k for k in range(1, n_steps + 1) if k % downsample == 0]


def generate_supervisory(
    states,
    cfg: SimConfig,
    seed: int,
    mode: str = "relative",
    downsample: Optional[int] = None,
    threshold: Optional[float] = None,
    role: int = CALIB,
) -> SupervisorySpec:
    """
    Build the supervisory spec from every `downsample`-th true state.

    relative: pairs (i, j), i < j, with |p_i - p_j| <= threshold give
              y_s = p_i - p_j + nu, one +[I 0] and one -[I 0] block per row group
    anchor:   every candidate's position observed directly, y_s = p_k + nu

    nu ~ N(0, alpha I). No pairs yields an empty spec and a warning.
    """
    states = np.asarray(states, dtype=float)
    rate = cfg.downsample if downsample is None else downsample
    gate = cfg.threshold if threshold is None else threshold
    positions = states[:, :POSITION_DIM]
    candidates = candidate_indices(states.shape[0], rate)

    if mode == "relative":
        pairs = [
            (i, j)
            for a, i in enumerate(candidates)
            for j in candidates[a + 1:]
            if np.linalg.norm(positions[i - 1] - positions[j - 1]) <= gate
        ]
        indices = sorted({k for pair in pairs for k in pair})
    elif mode == "anchor":
        pairs = [(k, None) for k in candidates]
        indices = list(candidates)
    else:
        raise ValueError(f"Unknown supervisory mode '{mode}' (expected 'relative' or 'anchor')")

    if not pairs:
        logger.warning(
            "No supervisory measurements (downsample=%d, threshold=%.2f); run reduces to the primary loss", rate, gate
        )
        return SupervisorySpec.empty(STATE_DIM)

    rng = stream_rng(seed, role, SUPERVISORY_STREAM)
    slot = {k: s for s, k in enumerate(indices)}
    n_obs = POSITION_DIM * len(pairs)
    Hs = np.zeros((n_obs, STATE_DIM * len(indices)))
    ys = np.zeros(n_obs)
    select = np.hstack([np.eye(POSITION_DIM), np.zeros((POSITION_DIM, STATE_DIM - POSITION_DIM))])
    for row, (i, j) in enumerate(pairs):
        rows = slice(row * POSITION_DIM, (row + 1) * POSITION_DIM)
        Hs[rows, slot[i] * STATE_DIM:(slot[i] + 1) * STATE_DIM] = select
        ys[rows] = positions[i - 1]
        if j is not None:
            Hs[rows, slot[j] * STATE_DIM:(slot[j] + 1) * STATE_DIM] = -select
            ys[rows] -= positions[j - 1]
    ys += rng.normal(scale=np.sqrt(cfg.alpha), size=n_obs) if cfg.alpha > 0 else 0.0

    logger.info("Supervision: %d states, %d measurements (%s mode)", len(indices), n_obs, mode)
    return SupervisorySpec(
        indices=tuple(indices),
        Hs=Hs,
        Psi=cfg.alpha * np.eye(n_obs),
        ys=ys,
        state_dim=STATE_DIM,
    )


@dataclass
class Dataset:
    """One simulated run: model (with recorded inputs), ground truth and primary measurements"""

    model: SystemModel
    states: np.ndarray
    measurements: np.ndarray

    @property
    def raw_rmse(self) -> float:
        err = self.measurements - self.states[:, :POSITION_DIM]
        return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def simulate_dataset(
    cfg: SimConfig,
    seed: int,
    role: int = CALIB,
    n_steps: Optional[int] = None,
    p0_scale: float = 1.0,
) -> Dataset:
    """Trajectory plus primary measurements; the filter starts at the true x0 with P0 = p0_scale I"""
    if n_steps is None:
        n_steps = cfg.n_calib if role == CALIB else cfg.n_test
    traj = generate_trajectory(cfg, seed, n_steps=n_steps, role=role)
    y = generate_primary(traj.states, cfg.r_true(), seed, role=role)
    model = constant_velocity_model(traj.inputs, traj.x0, dt=cfg.dt, p0_scale=p0_scale)
    return Dataset(model=model, states=traj.states, measurements=y)
