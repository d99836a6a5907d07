"""
Acceptance runner: likelihood identity, gradient agreement, monotone calibration,
method ordering, noise realism, mode scaling and parameter recovery
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np
from tqdm import tqdm

sys.path.insert(0, str(Path(__file__).parent.parent))

from src import config
from src.calibration.optimizer import calibrate
from src.estimation.grad_forward import forward_gradient
from src.estimation.grad_reverse import reverse_gradient
from src.estimation.kalman import run_filter
from src.estimation.oracle import fd_gradient, joint_nll, relative_error
from src.estimation.params import build_param
from src.models import CalibrationConfig, RunConfig
from src.simulation.benchmark import bench_modes
from src.simulation.monte_carlo import monte_carlo
from src.simulation.random_systems import random_problem
from src.simulation.scenario import CALIB, generate_primary, generate_supervisory, generate_trajectory, simulate_dataset


def check_oracle_and_gradients(n_instances: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    worst = {"oracle_gap": 0.0, "forward_vs_reverse": 0.0, "forward_vs_fd": 0.0, "reverse_vs_fd": 0.0}
    for _ in tqdm(range(n_instances), desc="Random instances"):
        prob = random_problem(rng)
        loss, g_fwd = forward_gradient(prob.model, prob.spec, prob.y_o, prob.param, prob.theta)
        _, g_rev = reverse_gradient(prob.model, prob.spec, prob.y_o, prob.param, prob.theta)
        g_fd = fd_gradient(
            lambda t: run_filter(prob.model, prob.spec, prob.y_o, prob.param, t)[0].total, prob.theta
        )
        oracle = joint_nll(prob.model, prob.spec, prob.y_o, prob.param, prob.theta)
        worst["oracle_gap"] = max(worst["oracle_gap"], abs(loss.total - oracle))
        worst["forward_vs_reverse"] = max(worst["forward_vs_reverse"], float(np.max(relative_error(g_fwd, g_rev))))
        worst["forward_vs_fd"] = max(worst["forward_vs_fd"], float(np.max(relative_error(g_fwd, g_fd, config.FD_FLOOR))))
        worst["reverse_vs_fd"] = max(worst["reverse_vs_fd"], float(np.max(relative_error(g_rev, g_fd, config.FD_FLOOR))))
    return {
        "oracle": {"value": worst["oracle_gap"], "passed": worst["oracle_gap"] <= config.ORACLE_TOLERANCE},
        "gradients": {
            **{k: worst[k] for k in ("forward_vs_reverse", "forward_vs_fd", "reverse_vs_fd")},
            "passed": worst["forward_vs_reverse"] <= config.MODE_TOLERANCE
            and max(worst["forward_vs_fd"], worst["reverse_vs_fd"]) <= config.FD_TOLERANCE,
        },
    }


def check_monotone(run_cfg: RunConfig, n_runs: int) -> dict:
    sim = run_cfg.simulation
    violations = 0
    for seed in tqdm(range(n_runs), desc="Monotone runs"):
        data = simulate_dataset(sim, sim.seed + seed)
        spec = generate_supervisory(data.states, sim, sim.seed + seed)
        param = build_param("cholesky", data.model.m, sim.q * np.eye(data.model.d))
        report = calibrate(data.model, spec, data.measurements, param, cfg=CalibrationConfig(itermax=20))
        if np.any(np.diff(report.loss_history) > 0):
            violations += 1
    return {"runs": n_runs, "violations": violations, "passed": violations == 0}


def check_noise_realism(run_cfg: RunConfig, seed: int) -> dict:
    sim = run_cfg.simulation.model_copy(update={"n_calib": 1000})
    traj = generate_trajectory(sim, seed)
    y = generate_primary(traj.states, sim.r_true(), seed, role=CALIB)
    rmse = float(np.sqrt(np.mean(np.sum((y - traj.states[:, :3]) ** 2, axis=1))))
    return {"value": rmse, "passed": 2.8 <= rmse <= 3.0}


def check_ordering(summary) -> dict:
    rows = summary.set_index("method")
    untuned = rows.loc["untuned", "mean_rmse"]
    tuned = rows.drop(index="untuned")
    full = rows.loc["cholesky_dense"]
    primary = rows.loc["cholesky_primary"]
    sparse = rows.loc["cholesky_sparse"]
    return {
        "tuned_beat_untuned": bool((tuned["mean_rmse"] < untuned).all()),
        "full_le_primary": bool(full["mean_rmse"] <= primary["mean_rmse"]),
        "dense_le_sparse_plus_se": bool(full["mean_rmse"] <= sparse["mean_rmse"] + sparse["stderr"]),
        "table": summary.to_dict(orient="records"),
    }


def check_scaling(run_cfg: RunConfig, repeats: int) -> dict:
    table = bench_modes(run_cfg.simulation, ps=(1, 12), Ns=(100, 400, 1600), repeats=repeats)
    at_400 = table[table["N"] == 400].set_index(["mode", "p"])["median_seconds"]
    forward_ratio = float(at_400[("forward", 12)] / at_400[("forward", 1)])
    reverse_ratio = float(at_400[("reverse", 12)] / at_400[("reverse", 1)])
    retained = table[(table["mode"] == "reverse") & (table["p"] == 1)].set_index("N")["retained_elements"]
    growth = [float(retained[1600] / retained[400] / 4.0), float(retained[400] / retained[100] / 4.0)]
    return {
        "forward_ratio_p12_p1": forward_ratio,
        "reverse_ratio_p12_p1": reverse_ratio,
        "retained_growth_vs_linear": growth,
        "passed": forward_ratio >= 6.0 and reverse_ratio <= 1.5 and all(abs(g - 1.0) <= 0.1 for g in growth),
    }


def main():
    parser = argparse.ArgumentParser(description="Run the acceptance checks and write a metrics JSON")
    parser.add_argument("--quick", action="store_true", help="Reduced instance/trial counts")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", type=Path, default=config.RESULTS_DIR / "acceptance.json")
    args = parser.parse_args()

    print("""
╔══════════════════════════════════════════════════════════════╗
║  Noise Covariance Estimation - Acceptance Checks             ║
╚══════════════════════════════════════════════════════════════╝
""")
    instances, runs, trials, repeats = (20, 5, 5, 3) if args.quick else (200, 100, 100, 5)
    run_cfg = RunConfig.model_validate({"simulation": {"seed": args.seed, "trials": trials}})

    metrics = check_oracle_and_gradients(instances, args.seed)
    metrics["monotone"] = check_monotone(run_cfg, runs)
    metrics["noise_realism"] = check_noise_realism(run_cfg, args.seed)

    summary, _ = monte_carlo(run_cfg, workers=args.workers)
    metrics["ordering"] = check_ordering(summary)
    recovery = float(summary.set_index("method").loc["cholesky_dense", "mean_relative_r_error"])
    metrics["recovery"] = {"value": recovery, "passed": recovery <= 0.5}
    metrics["scaling"] = check_scaling(run_cfg, repeats)

    print(f"\n{'='*80}")
    print("📊 ACCEPTANCE SUMMARY")
    print(f"{'='*80}")
    print(f"Oracle gap:            {metrics['oracle']['value']:.2e} {'✅' if metrics['oracle']['passed'] else '❌'}")
    grads = metrics["gradients"]
    print(f"Forward vs reverse:    {grads['forward_vs_reverse']:.2e} {'✅' if grads['passed'] else '❌'}")
    print(f"Analytic vs FD:        {max(grads['forward_vs_fd'], grads['reverse_vs_fd']):.2e}")
    print(f"Monotone violations:   {metrics['monotone']['violations']}/{runs}")
    print(f"Measurement RMSE:      {metrics['noise_realism']['value']:.3f} m")
    order = metrics["ordering"]
    print(f"Ordering:              tuned<untuned {order['tuned_beat_untuned']}, "
          f"full<=primary {order['full_le_primary']}, dense<=sparse+se {order['dense_le_sparse_plus_se']}")
    print(f"R recovery (rel. F):   {recovery:.3f}")
    scaling = metrics["scaling"]
    print(f"Scaling:               forward x{scaling['forward_ratio_p12_p1']:.1f}, "
          f"reverse x{scaling['reverse_ratio_p12_p1']:.2f}")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as f:
        json.dump(metrics, f, indent=2, default=float)
    print(f"\n💾 Results saved to {args.out}")

    passed = all(
        section.get("passed", True) for section in metrics.values() if isinstance(section, dict)
    ) and order["tuned_beat_untuned"] and order["full_le_primary"] and order["dense_le_sparse_plus_se"]
    return config.EXIT_OK if passed else config.EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
