"""
Shared fixtures: seeded generators, small run configs and tiny hand-checkable systems
"""
import numpy as np
import pytest

from src.estimation.kalman import SystemModel
from src.estimation.params import build_param
from src.lab import NoiseCovarianceLab
from src.models import CalibrationConfig, RunConfig, SimConfig


def scalar_model(N: int = 1, x0: float = 0.0, p0: float = 1.0) -> SystemModel:
    """x_k = x_{k-1} + w_k, y_k = x_k + v_k with no input"""
    return SystemModel.time_invariant(
        F=[[1.0]], B=[[0.0]], H=[[1.0]], u=np.zeros((N, 1)), x0=[x0], P0=[[p0]]
    )


def scalar_param(q: float = 0.01):
    """Isotropic R = exp(theta) on a 1-D measurement, fixed Q = q"""
    return build_param("isotropic", 1, np.array([[q]]))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_sim():
    return SimConfig(n_calib=60, n_test=150, trials=2)


@pytest.fixture
def run_cfg(small_sim):
    return RunConfig(simulation=small_sim, optimizer=CalibrationConfig(itermax=5))


@pytest.fixture
def lab(run_cfg):
    return NoiseCovarianceLab(run_cfg, verbose=False)


@pytest.fixture
def lab_data(lab):
    return lab.generate()
