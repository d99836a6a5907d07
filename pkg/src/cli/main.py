"""
Command-line front end: simulate, calibrate, evaluate, gradcheck, montecarlo, bench

Usage:
    python -m src.cli.main simulate --out data/results
    python -m src.cli.main calibrate --param cholesky --loss full
    python -m src.cli.main gradcheck --steps 20
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from src import config
from src.cli import io
from src.errors import ConfigError, NoiseLabError
from src.estimation.grad_reverse import CovarianceAdjointForm
from src.lab import NoiseCovarianceLab
from src.models import RunConfig, load_run_config
from src.simulation.benchmark import BENCH_NS, BENCH_PS, BENCH_REPEATS, bench_modes
from src.simulation.monte_carlo import monte_carlo

logger = logging.getLogger(__name__)


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Fold --seed/--trials/--itermax into the config and re-validate"""
    raw = cfg.model_dump()
    if getattr(args, "seed", None) is not None:
        raw["simulation"]["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        raw["simulation"]["trials"] = args.trials
    if getattr(args, "itermax", None) is not None:
        raw["optimizer"]["itermax"] = args.itermax
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid command-line override: {problems}") from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    path = args.config
    if path is None and config.DEFAULT_CONFIG_PATH.exists():
        path = config.DEFAULT_CONFIG_PATH
    return apply_overrides(load_run_config(path), args)


def cmd_simulate(args, cfg: RunConfig) -> int:
    lab = NoiseCovarianceLab(cfg)
    paths = lab.simulate(args.out)
    for name, path in paths.items():
        print(f"💾 {name}: {path}")
    return config.EXIT_OK


def cmd_calibrate(args, cfg: RunConfig) -> int:
    lab = NoiseCovarianceLab(cfg)
    data = lab.load(args.data_dir)
    param = lab.build_param(kind=args.param)
    report = lab.calibrate(
        data, param=param, mode=args.mode,
        primary_only=args.loss == "primary-only",
        supervision=args.supervision,
    )
    out = Path(args.out)
    io.write_json(out / config.REPORT_FILE, report)
    io.write_table(io.loss_history_frame(report), out / config.LOSS_HISTORY_FILE)
    if report.status != "diverged":
        loss, steps = lab.breakdown(data, report.theta_hat, param, supervision=args.supervision)
        io.write_json(out / config.LOSS_BREAKDOWN_FILE, loss.to_record())
        io.write_table(steps, out / config.FILTER_STEPS_FILE)
    print(f"💾 Report saved to {out / config.REPORT_FILE}")
    if report.loss_history and report.final_loss is not None:
        print(f"📊 Loss {report.loss_history[0]:.4f} -> {report.final_loss:.4f}")
    print(f"📊 Supervision used: ({report.n_supervisory_states}, {report.n_supervisory_obs}) (states, measurements)")
    if report.status == "diverged":
        print(f"❌ Numerical failure: {report.message}")
        return config.EXIT_NUMERICAL
    return config.EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    lab = NoiseCovarianceLab(cfg)
    data = lab.load(args.data_dir)
    report_path = Path(args.report) if args.report else Path(args.out) / config.REPORT_FILE
    report = io.read_report(report_path)
    param = lab.build_param(kind=report.kind)
    result = lab.evaluate(data, report.theta_hat, param)
    io.write_json(Path(args.out) / config.EVALUATION_FILE, result)
    print(f"📊 Test RMSE: {result.rmse:.4f} m (raw measurements {result.raw_rmse:.4f} m)")
    print(f"📊 Mean NIS: {result.mean_nis:.3f} (m = {param.meas_dim} when consistent)")
    return config.EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    lab = NoiseCovarianceLab(cfg)
    data = lab.load(args.data_dir)
    param = lab.build_param(kind=args.param)
    report = lab.gradcheck(data, steps=args.steps, param=param, form=CovarianceAdjointForm(args.adjoint_form))
    io.write_json(Path(args.out) / config.GRADCHECK_FILE, report)
    if not report.passed:
        print("❌ Gradient check failed")
        return config.EXIT_CHECK
    print("✅ Gradient check passed")
    return config.EXIT_OK


def cmd_montecarlo(args, cfg: RunConfig) -> int:
    print(f"🚀 Monte-Carlo: {cfg.simulation.trials} trials, seed {cfg.simulation.seed}")
    summary, per_trial = monte_carlo(cfg, workers=args.workers)
    out = Path(args.out)
    io.write_table(summary, out / config.MONTE_CARLO_FILE)
    io.write_table(per_trial, out / config.MONTE_CARLO_TRIALS_FILE)
    print(summary[["method", "mean_rmse", "stderr", "n_ok", "n_failed"]].to_string(index=False))
    print(f"💾 Results saved to {out / config.MONTE_CARLO_FILE}")
    return config.EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    table = bench_modes(cfg.simulation, ps=args.ps, Ns=args.Ns, repeats=args.repeats, seed=cfg.simulation.seed)
    out = Path(args.out)
    io.write_table(table, out / config.BENCH_FILE)
    print(table.to_string(index=False))
    print(f"💾 Results saved to {out / config.BENCH_FILE}")
    return config.EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Noise covariance estimation from primary and supervisory measurements")
    parser.add_argument("--config", type=Path, default=None, help="Run config JSON (default: data/configs/default.json)")
    parser.add_argument("--seed", type=int, default=None, help="Override simulation.seed")
    parser.add_argument("--trials", type=int, default=None, help="Override simulation.trials")
    parser.add_argument("--itermax", type=int, default=None, help="Override optimizer.itermax")
    parser.add_argument("--out", type=Path, default=config.RESULTS_DIR, help="Output directory")
    parser.add_argument("--data-dir", type=Path, default=None, help="Simulated data directory (default: --out)")
    parser.add_argument("--workers", type=int, default=1, help="Monte-Carlo worker processes")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", help="Write calibration/test trajectories and supervision")

    calib = sub.add_parser("calibrate", help="Estimate theta by gradient descent")
    calib.add_argument("--mode", choices=["forward", "reverse"], default=None)
    calib.add_argument("--param", choices=config.PARAM_KINDS, default=None)
    calib.add_argument("--loss", choices=["full", "primary-only"], default="full")
    calib.add_argument("--supervision", choices=["dense", "sparse", "none"], default="dense")

    evaluate = sub.add_parser("evaluate", help="Score a calibration report on the test run")
    evaluate.add_argument("--report", type=Path, default=None)

    check = sub.add_parser("gradcheck", help="Forward vs reverse vs finite differences vs dense likelihood")
    check.add_argument("--steps", type=int, default=config.GRADCHECK_STEPS)
    check.add_argument("--param", choices=config.PARAM_KINDS, default=None)
    check.add_argument("--adjoint-form", choices=[f.value for f in CovarianceAdjointForm],
                       default=CovarianceAdjointForm.MEASUREMENT.value)

    sub.add_parser("montecarlo", help="Compare methods over independent trials")

    bench = sub.add_parser("bench", help="Time both gradient modes over p and N")
    bench.add_argument("--ps", type=int, nargs="+", default=list(BENCH_PS))
    bench.add_argument("--Ns", type=int, nargs="+", default=list(BENCH_NS))
    bench.add_argument("--repeats", type=int, default=BENCH_REPEATS)
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "montecarlo": cmd_montecarlo,
    "bench": cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.data_dir is None:
        args.data_dir = args.out
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"❌ Config error: {e}", file=sys.stderr)
        return config.EXIT_CONFIG
    except ArithmeticError as e:
        print(f"❌ Numerical failure: {e}", file=sys.stderr)
        return config.EXIT_NUMERICAL
    except (NoiseLabError, ValueError) as e:
        print(f"❌ Invalid input: {e}", file=sys.stderr)
        return config.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
