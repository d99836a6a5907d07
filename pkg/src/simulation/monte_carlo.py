"""
Monte-Carlo comparison of calibration methods on independently simulated data
"""
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.calibration.optimizer import calibrate, evaluate
from src.errors import NoiseLabError
from src.estimation.kalman import SupervisorySpec
from src.estimation.params import build_param
from src.models import MethodSpec, MonteCarloRow, RunConfig
from src.simulation.scenario import CALIB, TEST, generate_supervisory, simulate_dataset

logger = logging.getLogger(__name__)

DEFAULT_METHODS: List[MethodSpec] = [
    MethodSpec(name="untuned", kind="isotropic", supervision="none", tune=False),
    MethodSpec(name="isotropic_primary", kind="isotropic", loss_weights=(1.0, 0.0), supervision="none"),
    MethodSpec(name="diagonal_primary", kind="diagonal", loss_weights=(1.0, 0.0), supervision="none"),
    MethodSpec(name="cholesky_primary", kind="cholesky", loss_weights=(1.0, 0.0), supervision="none"),
    MethodSpec(name="isotropic_sparse", kind="isotropic", supervision="sparse"),
    MethodSpec(name="diagonal_sparse", kind="diagonal", supervision="sparse"),
    MethodSpec(name="cholesky_sparse", kind="cholesky", supervision="sparse"),
    MethodSpec(name="isotropic_dense", kind="isotropic", supervision="dense"),
    MethodSpec(name="diagonal_dense", kind="diagonal", supervision="dense"),
    MethodSpec(name="cholesky_dense", kind="cholesky", supervision="dense"),
]


def run_trial(run_cfg: RunConfig, methods: Sequence[MethodSpec], trial: int) -> List[Dict]:
    """Fresh calibration and test data for seed + trial, then every method on them"""
    sim = run_cfg.simulation
    seed = sim.seed + trial
    p0 = run_cfg.system.p0_scale
    calib = simulate_dataset(sim, seed, role=CALIB, p0_scale=p0)
    test = simulate_dataset(sim, seed, role=TEST, p0_scale=p0)

    sup_mode = run_cfg.supervisory.mode
    specs = {
        "dense": generate_supervisory(calib.states, sim, seed, mode=sup_mode),
        "sparse": generate_supervisory(
            calib.states, sim, seed, mode=sup_mode,
            downsample=run_cfg.supervisory.sparse_downsample,
            threshold=run_cfg.supervisory.sparse_threshold,
        ),
        "none": SupervisorySpec.empty(calib.model.d),
    }
    r_true = sim.r_true()
    Q = sim.q * np.eye(calib.model.d)

    rows = []
    for method in methods:
        row = {"trial": trial, "method": method.name, "ok": False, "rmse": np.nan,
               "supervisory_states": 0, "supervisory_obs": 0, "relative_r_error": np.nan, "error": ""}
        try:
            param = build_param(method.kind, calib.model.m, Q, process=run_cfg.parameterization.process)
            theta = param.theta
            if method.tune:
                spec = specs[method.supervision]
                cfg = run_cfg.optimizer.model_copy(update={"mode": method.mode, "loss_weights": method.loss_weights})
                report = calibrate(calib.model, spec, calib.measurements, param, cfg=cfg)
                if report.status == "diverged":
                    raise ArithmeticError(report.message)
                theta = np.asarray(report.theta_hat)
                if method.supervision != "none":
                    row["supervisory_states"] = spec.n_states
                    row["supervisory_obs"] = spec.n_obs
            row["rmse"] = evaluate(test.model, test.measurements, theta, param, test.states, run_cfg.system.position_dims)
            row["relative_r_error"] = float(np.linalg.norm(param.R(theta) - r_true) / np.linalg.norm(r_true))
            row["ok"] = bool(np.isfinite(row["rmse"]))
        except (NoiseLabError, ArithmeticError) as e:
            row["error"] = str(e)
            logger.warning("Trial %d, method %s failed: %s", trial, method.name, e)
        rows.append(row)
    return rows


def summarize(trials: pd.DataFrame, methods: Sequence[MethodSpec]) -> pd.DataFrame:
    """Mean RMSE and standard error per method over successful trials"""
    summary = []
    for method in methods:
        group = trials[trials["method"] == method.name]
        ok = group[group["ok"]]
        n_ok = len(ok)
        stderr = float(ok["rmse"].std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else 0.0
        summary.append(MonteCarloRow(
            method=method.name,
            mean_rmse=float(ok["rmse"].mean()) if n_ok else float("nan"),
            stderr=stderr,
            n_ok=n_ok,
            n_failed=len(group) - n_ok,
            mean_supervisory_states=float(ok["supervisory_states"].mean()) if n_ok else 0.0,
            mean_supervisory_obs=float(ok["supervisory_obs"].mean()) if n_ok else 0.0,
            mean_relative_r_error=float(ok["relative_r_error"].mean()) if n_ok else None,
        ).model_dump())
    return pd.DataFrame(summary)


def monte_carlo(
    run_cfg: RunConfig,
    methods: Optional[Sequence[MethodSpec]] = None,
    trials: Optional[int] = None,
    workers: int = 1,
    progress: bool = True,
):
    """
    Run `trials` independent trials of every method.

    Args:
        run_cfg: full run configuration (simulation seed, optimizer settings, ...)
        methods: methods to compare; defaults to DEFAULT_METHODS
        trials: overrides run_cfg.simulation.trials
        workers: >1 fans trials out to a process pool

    Returns:
        (summary DataFrame, per-trial DataFrame)
    """
    methods = list(methods or DEFAULT_METHODS)
    n_trials = run_cfg.simulation.trials if trials is None else trials
    if n_trials < 1:
        raise ValueError("trials must be >= 1")

    rows: List[Dict] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_trial, run_cfg, methods, t) for t in range(n_trials)]
            for future in tqdm(as_completed(futures), total=n_trials, desc="Trials", disable=not progress):
                rows.extend(future.result())
    else:
        for t in tqdm(range(n_trials), desc="Trials", disable=not progress):
            rows.extend(run_trial(run_cfg, methods, t))

    per_trial = pd.DataFrame(rows).sort_values(["trial", "method"], kind="stable").reset_index(drop=True)
    failed = int((~per_trial["ok"]).sum())
    if failed:
        logger.warning("%d of %d method runs failed and are excluded from the means", failed, len(per_trial))
    return summarize(per_trial, methods), per_trial
