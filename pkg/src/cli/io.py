"""
File codecs: trajectory CSVs, supervisory spec JSON, reports and result tables.

Floats are written with 17 significant digits and read back with pandas'
round-trip parser, so a written dataset reloads bit for bit.
"""
import json
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from src.errors import ConfigError
from src.estimation.kalman import SupervisorySpec
from src.models import CalibrationReport
from src.simulation.scenario import POSITION_DIM, STATE_DIM, Dataset, constant_velocity_model

FLOAT_FORMAT = "%.17g"

STATE_COLUMNS = [f"x{i}" for i in range(STATE_DIM)]
INPUT_COLUMNS = [f"u{i}" for i in range(POSITION_DIM)]
MEASUREMENT_COLUMNS = [f"y{i}" for i in range(POSITION_DIM)]


class DatasetMeta(BaseModel):
    """Everything besides the per-step rows needed to rebuild the filter model"""
    seed: int
    dt: float
    p0_scale: float = 1.0
    calib_x0: List[float] = Field(..., min_length=STATE_DIM, max_length=STATE_DIM)
    test_x0: List[float] = Field(..., min_length=STATE_DIM, max_length=STATE_DIM)


class SupervisoryFile(BaseModel):
    indices: List[int]
    state_dim: int
    Hs: List[List[float]]
    Psi: List[List[float]]
    ys: List[float]


def _require(path: Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Missing input file: {path} (run `simulate` first?)")
    return path


def write_table(df: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_table(path: Path) -> pd.DataFrame:
    return pd.read_csv(_require(path), float_precision="round_trip")


def write_dataset(path: Path, data: Dataset) -> Path:
    """One row per step k = 1..N: truth state, input, measurement"""
    frame = pd.DataFrame(
        np.hstack([data.states, data.model.u, data.measurements]),
        columns=STATE_COLUMNS + INPUT_COLUMNS + MEASUREMENT_COLUMNS,
    )
    frame.insert(0, "k", np.arange(1, data.model.N + 1))
    return write_table(frame, path)


def read_dataset(path: Path, x0, dt: float, p0_scale: float = 1.0) -> Dataset:
    frame = read_table(path)
    missing = set(STATE_COLUMNS + INPUT_COLUMNS + MEASUREMENT_COLUMNS) - set(frame.columns)
    if missing:
        raise ConfigError(f"{path}: missing columns {sorted(missing)}")
    model = constant_velocity_model(frame[INPUT_COLUMNS].to_numpy(), x0, dt=dt, p0_scale=p0_scale)
    return Dataset(
        model=model,
        states=frame[STATE_COLUMNS].to_numpy(),
        measurements=frame[MEASUREMENT_COLUMNS].to_numpy(),
    )


def write_json(path: Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        path.write_text(payload.model_dump_json(indent=2))
    else:
        path.write_text(json.dumps(payload, indent=2))
    return path


def _read_model(path: Path, model_cls):
    path = _require(path)
    try:
        return model_cls.model_validate_json(path.read_text())
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{path}: {problems}") from None


def read_meta(path: Path) -> DatasetMeta:
    return _read_model(path, DatasetMeta)


def write_spec(path: Path, spec: SupervisorySpec) -> Path:
    return write_json(path, SupervisoryFile(
        indices=list(spec.indices),
        state_dim=spec.state_dim,
        Hs=spec.Hs.tolist(),
        Psi=spec.Psi.tolist(),
        ys=spec.ys.tolist(),
    ))


def read_spec(path: Path) -> SupervisorySpec:
    raw = _read_model(path, SupervisoryFile)
    if not raw.ys:
        return SupervisorySpec.empty(raw.state_dim)
    return SupervisorySpec.canonical(
        indices=raw.indices,
        Hs=np.asarray(raw.Hs, dtype=float),
        Psi=np.asarray(raw.Psi, dtype=float),
        ys=np.asarray(raw.ys, dtype=float),
        state_dim=raw.state_dim,
    )


def read_report(path: Path) -> CalibrationReport:
    return _read_model(path, CalibrationReport)


def loss_history_frame(report: CalibrationReport) -> pd.DataFrame:
    n = report.iterations

    def padded(values):
        values = list(values or [])
        return values + [np.nan] * (n - len(values))

    frame = pd.DataFrame({
        "iteration": np.arange(n),
        "loss": report.loss_history,
        "ell_o": report.ell_o_history,
        "ell_s": report.ell_s_history,
        "grad_norm": report.grad_norm_history,
        "step_size": padded(report.step_size_history),
        "wall_time": padded(report.wall_time_history),
    })
    if report.rmse_history is not None:
        frame["rmse"] = padded(report.rmse_history)
    return frame
