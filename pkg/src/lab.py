"""
Main orchestrator - simulation, calibration, evaluation and gradient checks behind one object
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from src import __version__, config
from src.calibration.optimizer import calibrate, evaluate, evaluate_detailed
from src.cli import io
from src.estimation.grad_forward import forward_gradient
from src.estimation.grad_reverse import CovarianceAdjointForm, reverse_gradient
from src.estimation.kalman import LossBreakdown, SupervisorySpec, run_filter
from src.estimation.oracle import fd_sweep, joint_nll, relative_error
from src.estimation.params import CovParam, build_param
from src.models import (
    CalibrationReport,
    CheckResult,
    EvaluationResult,
    GradcheckReport,
    RunConfig,
)
from src.simulation.scenario import (
    CALIB,
    POSITION_DIM,
    STATE_DIM,
    TEST,
    Dataset,
    generate_supervisory,
    simulate_dataset,
)

logger = logging.getLogger(__name__)


@dataclass
class LabData:
    """Calibration/test datasets with their dense and sparse supervision"""

    calib: Dataset
    test: Dataset
    spec: SupervisorySpec
    sparse_spec: SupervisorySpec

    def supervision(self, setting: str = "dense") -> SupervisorySpec:
        if setting == "dense":
            return self.spec
        if setting == "sparse":
            return self.sparse_spec
        if setting == "none":
            return SupervisorySpec.empty(self.calib.model.d)
        raise ValueError(f"Unknown supervision setting '{setting}'")


class NoiseCovarianceLab:
    """
    Primary interface for the noise covariance toolkit

    Example:
        >>> lab = NoiseCovarianceLab()
        >>> data = lab.generate()
        >>> report = lab.calibrate(data)
        >>> print(lab.evaluate(data, report.theta_hat).rmse)
    """

    def __init__(self, run_cfg: Optional[RunConfig] = None, verbose: bool = True):
        self.cfg = run_cfg or RunConfig()
        self.verbose = verbose

    def _say(self, message: str):
        if self.verbose:
            print(message)

    # ----------------------------------------------------------- data
    def generate(self, seed: Optional[int] = None) -> LabData:
        sim = self.cfg.simulation
        seed = sim.seed if seed is None else seed
        p0 = self.cfg.system.p0_scale
        calib = simulate_dataset(sim, seed, role=CALIB, p0_scale=p0)
        test = simulate_dataset(sim, seed, role=TEST, p0_scale=p0)
        sup = self.cfg.supervisory
        spec = generate_supervisory(calib.states, sim, seed, mode=sup.mode)
        sparse = generate_supervisory(
            calib.states, sim, seed, mode=sup.mode,
            downsample=sup.sparse_downsample, threshold=sup.sparse_threshold,
        )
        return LabData(calib=calib, test=test, spec=spec, sparse_spec=sparse)

    def simulate(self, out_dir: Path, seed: Optional[int] = None) -> Dict[str, Path]:
        """Generate both datasets and write them (plus supervision and metadata) to out_dir"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        seed = self.cfg.simulation.seed if seed is None else seed
        self._say(f"🚀 Simulating calibration/test runs (seed {seed})...")
        data = self.generate(seed)

        paths = {
            "calibration": io.write_dataset(out_dir / config.CALIB_FILE, data.calib),
            "test": io.write_dataset(out_dir / config.TEST_FILE, data.test),
            "supervisory": io.write_spec(out_dir / config.SUPERVISORY_FILE, data.spec),
            "supervisory_sparse": io.write_spec(out_dir / config.SUPERVISORY_SPARSE_FILE, data.sparse_spec),
            "meta": io.write_json(out_dir / config.DATASET_META_FILE, io.DatasetMeta(
                seed=seed,
                dt=self.cfg.simulation.dt,
                p0_scale=self.cfg.system.p0_scale,
                calib_x0=data.calib.model.x0.tolist(),
                test_x0=data.test.model.x0.tolist(),
            )),
        }
        self._say(f"✅ {data.calib.model.N} calibration steps, {data.test.model.N} test steps")
        self._say(f"📊 Supervision: dense ({data.spec.n_states}, {data.spec.n_obs}), "
                  f"sparse ({data.sparse_spec.n_states}, {data.sparse_spec.n_obs}) (states, measurements)")
        self._say(f"📊 Raw measurement RMSE: {data.calib.raw_rmse:.3f} m")
        return paths

    def load(self, data_dir: Path) -> LabData:
        data_dir = Path(data_dir)
        meta = io.read_meta(data_dir / config.DATASET_META_FILE)
        data = LabData(
            calib=io.read_dataset(data_dir / config.CALIB_FILE, meta.calib_x0, meta.dt, meta.p0_scale),
            test=io.read_dataset(data_dir / config.TEST_FILE, meta.test_x0, meta.dt, meta.p0_scale),
            spec=io.read_spec(data_dir / config.SUPERVISORY_FILE),
            sparse_spec=io.read_spec(data_dir / config.SUPERVISORY_SPARSE_FILE),
        )
        logger.info("Loaded %d calibration and %d test steps from %s (seed %d)",
                    data.calib.model.N, data.test.model.N, data_dir, meta.seed)
        return data

    # ----------------------------------------------------------- calibration
    def build_param(self, kind: Optional[str] = None, process: Optional[str] = None) -> CovParam:
        settings = self.cfg.parameterization
        return build_param(
            kind or settings.kind,
            POSITION_DIM,
            self.cfg.simulation.q * np.eye(STATE_DIM),
            process=process or settings.process,
            theta0=settings.theta0 if kind in (None, settings.kind) else None,
        )

    def calibrate(
        self,
        data: LabData,
        param: Optional[CovParam] = None,
        mode: Optional[str] = None,
        primary_only: bool = False,
        supervision: str = "dense",
        track_rmse: bool = True,
    ) -> CalibrationReport:
        """
        Calibrate on data.calib, optionally tracking test RMSE at every iterate

        Args:
            param: parameterization (default from the run config)
            mode: "forward" | "reverse"; None defers to the config / kind default
            primary_only: loss weights (1, 0), the primary-loss baseline
            supervision: "dense" | "sparse" | "none"
        """
        param = param or self.build_param()
        update = {}
        if mode is not None:
            update["mode"] = mode
        if primary_only:
            update["loss_weights"] = (1.0, 0.0)
        cfg = self.cfg.optimizer.model_copy(update=update)
        spec = data.supervision(supervision)

        monitor = None
        if track_rmse:
            def monitor(theta):
                return evaluate(data.test.model, data.test.measurements, theta, param,
                                data.test.states, self.cfg.system.position_dims)

        self._say(f"🔧 Calibrating {param.kind.value} R (p={param.p}) on {data.calib.model.N} steps...")
        report = calibrate(data.calib.model, spec, data.calib.measurements, param, cfg=cfg, monitor=monitor)
        icon = "❌" if report.status == "diverged" else "✅"
        self._say(f"{icon} {report.status} after {report.iterations} iterations ({report.mode.value} mode): {report.message}")
        return report

    def evaluate(self, data: LabData, theta, param: Optional[CovParam] = None) -> EvaluationResult:
        param = param or self.build_param()
        return evaluate_detailed(
            data.test.model, data.test.measurements, np.asarray(theta, dtype=float), param,
            data.test.states, self.cfg.system.position_dims,
        )

    def breakdown(
        self,
        data: LabData,
        theta,
        param: Optional[CovParam] = None,
        supervision: str = "dense",
    ) -> Tuple[LossBreakdown, pd.DataFrame]:
        """Loss terms at theta on the calibration run, plus per-step (k, l_k, |r_k|)"""
        param = param or self.build_param()
        spec = data.supervision(supervision)
        loss, trace, _ = run_filter(
            data.calib.model, spec, data.calib.measurements, param, np.asarray(theta, dtype=float), keep_trace=True
        )
        steps = pd.DataFrame({
            "k": [step.k for step in trace.steps],
            "loss": loss.per_step,
            "residual_norm": [float(np.linalg.norm(step.r)) for step in trace.steps],
        })
        return loss, steps

    # ----------------------------------------------------------- checks
    def gradcheck(
        self,
        data: LabData,
        steps: int = config.GRADCHECK_STEPS,
        param: Optional[CovParam] = None,
        theta=None,
        form: CovarianceAdjointForm = CovarianceAdjointForm.MEASUREMENT,
    ) -> GradcheckReport:
        """
        Compare forward vs reverse gradients, both vs central differences, and the
        filter loss vs the dense joint likelihood, on the first `steps` steps
        """
        if steps < 1:
            raise ValueError(f"gradcheck needs at least one step, got {steps}")
        param = param or self.build_param()
        theta = param.theta if theta is None else param.check_theta(theta)
        steps = min(steps, data.calib.model.N)
        model = data.calib.model.truncated(steps)
        spec = data.spec.restrict(steps)
        y_o = data.calib.measurements[:steps]

        loss, g_fwd = forward_gradient(model, spec, y_o, param, theta)
        _, g_rev = reverse_gradient(model, spec, y_o, param, theta, form=form)

        def total_loss(t):
            return run_filter(model, spec, y_o, param, t)[0].total

        sweep = fd_sweep(total_loss, theta, steps=sorted({config.FD_STEP, *config.FD_SWEEP_STEPS}, reverse=True))
        g_fd = sweep[config.FD_STEP]
        checks = [
            CheckResult(name="forward_vs_reverse", value=float(np.max(relative_error(g_fwd, g_rev))),
                        threshold=config.MODE_TOLERANCE, status="passed"),
            CheckResult(name="forward_vs_fd", value=float(np.max(relative_error(g_fwd, g_fd, config.FD_FLOOR))),
                        threshold=config.FD_TOLERANCE, status="passed"),
            CheckResult(name="reverse_vs_fd", value=float(np.max(relative_error(g_rev, g_fd, config.FD_FLOOR))),
                        threshold=config.FD_TOLERANCE, status="passed"),
            CheckResult(name="filter_vs_oracle", value=abs(loss.total - joint_nll(model, spec, y_o, param, theta)),
                        threshold=config.ORACLE_TOLERANCE, status="passed"),
        ]
        if spec.is_empty:
            checks.append(CheckResult(name="supervisory_forward_vs_reverse", threshold=config.MODE_TOLERANCE,
                                      status="skipped"))
        else:
            _, s_fwd = forward_gradient(model, spec, y_o, param, theta, weights=(0.0, 1.0))
            _, s_rev = reverse_gradient(model, spec, y_o, param, theta, weights=(0.0, 1.0), form=form)
            checks.append(CheckResult(name="supervisory_forward_vs_reverse",
                                      value=float(np.max(relative_error(s_fwd, s_rev))),
                                      threshold=config.MODE_TOLERANCE, status="passed"))

        for check in checks:
            if check.value is not None and not check.value <= check.threshold:
                check.status = "failed"
        report = GradcheckReport(
            checks=checks, steps=steps, n_supervisory_obs=spec.n_obs,
            fd_sweep={f"{h:g}": [None if np.isnan(g) else float(g) for g in grad] for h, grad in sweep.items()},
        )
        for check in checks:
            icon = {"passed": "✅", "failed": "❌", "skipped": "⏭️ "}[check.status]
            value = "-" if check.value is None else f"{check.value:.3e}"
            self._say(f"{icon} {check.name:32s} {value:>10s}  (threshold {check.threshold:.0e})")
        return report

    def health_check(self) -> Dict:
        """Filter-vs-oracle agreement on a short simulated run"""
        data = self.generate()
        param = self.build_param()
        model = data.calib.model.truncated(10)
        spec = data.spec.restrict(10)
        y_o = data.calib.measurements[:10]
        loss = run_filter(model, spec, y_o, param, param.theta)[0]
        gap = abs(loss.total - joint_nll(model, spec, y_o, param, param.theta))
        return {
            "loss": loss.to_record(),
            "status": "healthy" if gap <= config.ORACLE_TOLERANCE else "unhealthy",
            "version": __version__,
            "oracle_gap": gap,
            "parameterization": param.kind.value,
            "p": param.p,
        }
