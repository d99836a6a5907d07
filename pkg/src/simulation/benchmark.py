"""
Wall-time and memory scaling of the two gradient modes
"""
import logging
import time
from typing import Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.calibration.optimizer import loss_and_gradient
from src.estimation.grad_reverse import retained_elements
from src.estimation.params import CovParam, build_param
from src.models import BenchRow, GradientMode, SimConfig
from src.simulation.scenario import CALIB, generate_supervisory, simulate_dataset

logger = logging.getLogger(__name__)

BENCH_PS = (1, 3, 6, 12)
BENCH_NS = (100, 400, 1600)
BENCH_REPEATS = 5
# Anchors within the first steps only, so the augmented dimension D is the same for every N
BENCH_SUPERVISION_HORIZON = 25

# p -> (R map, Q map) on the 3-D position / 6-D state model
PARAM_FOR_P = {
    1: ("isotropic", "fixed"),
    3: ("diagonal", "fixed"),
    6: ("cholesky", "fixed"),
    12: ("cholesky", "diagonal"),
}


def param_for_p(p: int, meas_dim: int, Q: np.ndarray) -> CovParam:
    if p not in PARAM_FOR_P:
        raise ValueError(f"No benchmark parameterization with p={p} (choose from {sorted(PARAM_FOR_P)})")
    kind, process = PARAM_FOR_P[p]
    return build_param(kind, meas_dim, Q, process=process)


def time_gradient(model, spec, y_o, param, theta, mode: GradientMode, repeats: int = BENCH_REPEATS) -> float:
    """Median seconds per gradient evaluation after one warm-up call"""
    loss_and_gradient(model, spec, y_o, param, theta, mode)
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        loss_and_gradient(model, spec, y_o, param, theta, mode)
        samples.append(time.perf_counter() - started)
    return float(np.median(samples))


def bench_modes(
    sim: SimConfig,
    ps: Sequence[int] = BENCH_PS,
    Ns: Sequence[int] = BENCH_NS,
    repeats: int = BENCH_REPEATS,
    seed: int = 0,
    progress: bool = True,
) -> pd.DataFrame:
    """
    Time both modes over the (p, N) grid; runs sequentially so timers do not compete.

    Returns:
        DataFrame of BenchRow records, retained_elements filled for reverse mode
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    grid = [(N, p, mode) for N in Ns for p in ps for mode in GradientMode]
    datasets = {}
    for N, p, mode in tqdm(grid, desc="Benchmark", disable=not progress):
        if N not in datasets:
            data = simulate_dataset(sim, seed, role=CALIB, n_steps=N)
            spec = generate_supervisory(data.states, sim, seed, mode="anchor").restrict(BENCH_SUPERVISION_HORIZON)
            datasets[N] = (data, spec)
        data, spec = datasets[N]
        param = param_for_p(p, data.model.m, sim.q * np.eye(data.model.d))
        seconds = time_gradient(data.model, spec, data.measurements, param, param.theta, mode, repeats)
        retained = None
        if mode is GradientMode.REVERSE:
            retained = retained_elements(data.model, spec, data.measurements, param, param.theta)
        logger.debug("N=%d p=%d %s: %.4fs", N, p, mode.value, seconds)
        rows.append(BenchRow(mode=mode, p=p, N=N, median_seconds=seconds, retained_elements=retained).model_dump(mode="json"))
    return pd.DataFrame(rows)
