"""Acceptance suite: every exit criterion with its stated tolerance.

The heavy artifacts (a trained model and a 5-seed benchmark grid) are built
once per session at desk scale: 512 rollout samples and 30 s episodes, the
reductions the criteria allow.  Each criterion prints one PASS/FAIL line.

Run order matters only through fixtures; each test is independent given the
session artifacts.  Expect roughly an hour of wall clock for the full suite.
"""

import json
import time
import numpy as np
import pytest

from residual_mppi.cli import main as cli_main
from residual_mppi.config import build_path, from_dict
from residual_mppi.dynamics import VehicleConfig
from residual_mppi.icode import (
    grad_tensors,
    init_params,
    loss_and_grad,
    param_tensors,
    residual_derivative,
)
from residual_mppi.metrics import compute_rmse
from residual_mppi.mppi import compute_weights, savgol_smooth, savgol_weights
from residual_mppi.simulate import run_episode
from residual_mppi.streams import PARAM_INIT, TASK_COLLECT, subseed, substream
from residual_mppi.training import run_training_loop
from residual_mppi.dynamics import plant_step, DisturbanceConfig

# ---------------------------------------------------------------------------
# desk-scale configuration: K=512 and 30 s episodes (allowed reductions);
# everything else at the package defaults
# ---------------------------------------------------------------------------

DESK_OVERRIDES = {
    "mppi": {"num_samples": 512},
    "episode_duration": 30.0,
    "train": {
        "n_random": 2000,
        "epochs_per_iter": 100,
        "n_iterations": 2,
        "task_episodes_per_iter": 2,
    },
}
N_SEEDS = 5
CELL_TARGET_SECONDS = 600.0


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")


def desk_config(**extra):
    data = json.loads(json.dumps(DESK_OVERRIDES))
    for key, value in extra.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    cfg, _ = from_dict(data)
    return cfg


def train_for_trajectory(trajectory: str):
    """One data-aggregation training run against the given reference path."""
    cfg = desk_config(path={"kind": trajectory})
    path = build_path(cfg.path)
    pts = path.points
    bounds = (
        (float(pts[:, 0].min()) - 5.0, float(pts[:, 0].max()) + 5.0),
        (float(pts[:, 1].min()) - 5.0, float(pts[:, 1].max()) + 5.0),
    )

    def task_runner(params, iteration, episode):
        seed = subseed(cfg.seed, TASK_COLLECT, iteration, episode)
        res = run_episode(cfg, params, seed=seed)
        return res.times, res.states, res.controls

    t0 = time.perf_counter()
    params, rows = run_training_loop(
        cfg.vehicle, cfg.disturbance, cfg.train, cfg.seed, task_runner, position_bounds=bounds
    )
    wall = time.perf_counter() - t0
    print(f"\n[acceptance] {trajectory} training: {wall/60:.1f} min; "
          f"holdout combined={rows[-1]['holdout_loss_combined']:.3e} "
          f"nominal={rows[-1]['holdout_loss_nominal']:.3e}")
    return {"params": params, "rows": rows, "config": cfg}


@pytest.fixture(scope="session")
def trained():
    """Per-trajectory models, each trained by the same iterative loop."""
    return {traj: train_for_trajectory(traj) for traj in ("ellipse", "sine", "figure8")}


@pytest.fixture(scope="session")
def bench(trained):
    """5-seed closed-loop grid: 3 trajectories x {nominal, icode}."""
    results: dict = {}
    walls: dict = {}
    for trajectory in ("ellipse", "sine", "figure8"):
        for method in ("nominal", "icode"):
            params = trained[trajectory]["params"] if method == "icode" else None
            cfg = desk_config(path={"kind": trajectory})
            path = build_path(cfg.path)
            t0 = time.perf_counter()
            cell = []
            for i in range(N_SEEDS):
                res = run_episode(cfg, params, seed=cfg.seed + i)
                cell.append(res.metrics(path, cfg.vehicle.dt))
            walls[(trajectory, method)] = time.perf_counter() - t0
            results[(trajectory, method)] = cell
    for key, wall in sorted(walls.items()):
        print(f"[acceptance] bench cell {key[0]}/{key[1]}: {wall/60:.1f} min "
              f"({'within' if wall < CELL_TARGET_SECONDS else 'OVER'} the 10 min target)")
    return {"cells": results, "walls": walls}


def cell_mean(bench_data, trajectory, method, attr):
    cell = bench_data["cells"][(trajectory, method)]
    return float(np.mean([getattr(m, attr) for m in cell]))


# ---------------------------------------------------------------------------
# criterion 1: directional Y-RMSE reduction on ellipse and figure-8
# ---------------------------------------------------------------------------


def test_criterion_1_directional_y_rmse_reduction(bench):
    ratio_ellipse = cell_mean(bench, "ellipse", "icode", "rmse_y") / cell_mean(
        bench, "ellipse", "nominal", "rmse_y"
    )
    ratio_fig8 = cell_mean(bench, "figure8", "icode", "rmse_y") / cell_mean(
        bench, "figure8", "nominal", "rmse_y"
    )
    ok = ratio_ellipse <= 0.6 and ratio_fig8 <= 0.7
    report(
        "1 (Y-RMSE reduction)",
        ok,
        f"ellipse ratio {ratio_ellipse:.3f} <= 0.6, figure8 ratio {ratio_fig8:.3f} <= 0.7, "
        f"5-seed means",
    )
    assert ratio_ellipse <= 0.6
    assert ratio_fig8 <= 0.7


def test_criterion_1_runtime_target(bench):
    worst = max(bench["walls"].values())
    ok = worst < CELL_TARGET_SECONDS
    report("1 (desk-scale runtime target)", ok, f"slowest cell {worst/60:.1f} min vs 10 min target")
    # the 10 min figure is a stated target at desk scale, asserted here
    assert worst < CELL_TARGET_SECONDS


# ---------------------------------------------------------------------------
# criterion 2: positional improvement on every trajectory; yaw bounded
# ---------------------------------------------------------------------------


def test_criterion_2_positional_improvement_universality(bench):
    details = []
    ok = True
    for trajectory in ("ellipse", "sine", "figure8"):
        x_icode = cell_mean(bench, trajectory, "icode", "rmse_x")
        x_nominal = cell_mean(bench, trajectory, "nominal", "rmse_x")
        yaw_icode = cell_mean(bench, trajectory, "icode", "rmse_yaw")
        yaw_nominal = cell_mean(bench, trajectory, "nominal", "rmse_yaw")
        details.append(f"{trajectory}: X {x_icode:.3f}<{x_nominal:.3f}, yaw ratio {yaw_icode/yaw_nominal:.2f}")
        ok &= x_icode < x_nominal and yaw_icode <= 1.5 * yaw_nominal
    report("2 (X-RMSE improvement on all paths, yaw <= 1.5x)", ok, "; ".join(details))
    for trajectory in ("ellipse", "sine", "figure8"):
        assert cell_mean(bench, trajectory, "icode", "rmse_x") < cell_mean(
            bench, trajectory, "nominal", "rmse_x"
        )
        assert cell_mean(bench, trajectory, "icode", "rmse_yaw") <= 1.5 * cell_mean(
            bench, trajectory, "nominal", "rmse_yaw"
        )


# ---------------------------------------------------------------------------
# criterion 3: steering smoothness
# ---------------------------------------------------------------------------


def test_criterion_3_steering_smoothness(bench):
    details = []
    ok = True
    for trajectory in ("ellipse", "sine", "figure8"):
        std_icode = cell_mean_rate(bench, trajectory, "icode", "std")
        std_nominal = cell_mean_rate(bench, trajectory, "nominal", "std")
        peak_icode = cell_mean_rate(bench, trajectory, "icode", "zero_peak")
        peak_nominal = cell_mean_rate(bench, trajectory, "nominal", "zero_peak")
        details.append(
            f"{trajectory}: std {std_icode:.2f}<{std_nominal:.2f}, peak {peak_icode:.2f}>{peak_nominal:.2f}"
        )
        ok &= std_icode < std_nominal and peak_icode > peak_nominal
    report("3 (steering-rate std down, zero-peak up)", ok, "; ".join(details))
    for trajectory in ("ellipse", "sine", "figure8"):
        assert cell_mean_rate(bench, trajectory, "icode", "std") < cell_mean_rate(
            bench, trajectory, "nominal", "std"
        )
        assert cell_mean_rate(bench, trajectory, "icode", "zero_peak") > cell_mean_rate(
            bench, trajectory, "nominal", "zero_peak"
        )


def cell_mean_rate(bench_data, trajectory, method, attr):
    cell = bench_data["cells"][(trajectory, method)]
    return float(np.mean([getattr(m.steer_rate, attr) for m in cell]))


# ---------------------------------------------------------------------------
# criterion 4: model fidelity on a shared holdout
# ---------------------------------------------------------------------------


def test_criterion_4_model_fidelity(trained):
    details = []
    worst = 0.0
    for trajectory, artifacts in trained.items():
        row = artifacts["rows"][-1]
        ratio = row["holdout_loss_combined"] / row["holdout_loss_nominal"]
        details.append(f"{trajectory}: {ratio:.3f}")
        worst = max(worst, ratio)
    ok = worst < 0.5
    report("4 (holdout MSE ratio < 0.5)", ok, "; ".join(details))
    assert worst < 0.5


# ---------------------------------------------------------------------------
# criterion 5: gradient correctness against central finite differences
# ---------------------------------------------------------------------------


def test_criterion_5_gradient_correctness():
    t0 = time.perf_counter()
    vcfg = VehicleConfig()
    params = init_params((8, 8), substream(0, PARAM_INIT), vcfg)
    rng = np.random.default_rng(11)
    for net in (params.drift, params.gain):
        net.weights[-1][:] = rng.normal(0, 0.05, net.weights[-1].shape)
        net.biases[-1][:] = rng.normal(0, 0.02, net.biases[-1].shape)
    dist = DisturbanceConfig()
    states = rng.normal(0, 1.0, size=(4, 5))
    states[:, 3] = rng.uniform(0.5, 3.0, 4)
    states[:, 4] = rng.uniform(-0.5, 0.5, 4)
    controls = rng.uniform(-1, 1, size=(4, 2))
    next_states = np.stack(
        [plant_step(s, u, t, vcfg, dist) for s, u, t in zip(states, controls, rng.uniform(0, 20, 4))]
    )
    _, grads = loss_and_grad(params, states, controls, next_states, vcfg.dt, vcfg)
    h = 1e-5
    worst = 0.0
    n_checked = 0
    for tensor, grad in zip(param_tensors(params), grad_tensors(grads)):
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + h
            lp, _ = loss_and_grad(params, states, controls, next_states, vcfg.dt, vcfg)
            tensor[idx] = orig - h
            lm, _ = loss_and_grad(params, states, controls, next_states, vcfg.dt, vcfg)
            tensor[idx] = orig
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(grad[idx]))
            if denom < 1e-10:
                continue
            worst = max(worst, abs(fd - grad[idx]) / denom)
            n_checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10.0
    report(
        "5 (gradient vs finite differences)",
        ok,
        f"worst rel err {worst:.2e} over {n_checked} components, {elapsed:.1f}s < 10s",
    )
    assert worst < 1e-4
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# criterion 6: numerical-core properties
# ---------------------------------------------------------------------------


def test_criterion_6_numerical_core_properties():
    import math

    from residual_mppi.dynamics import nominal_derivative, rk4_step

    vcfg = VehicleConfig()
    checks = []

    # RK4 convergence order against a fine Euler oracle
    def euler(state, control, total, n_sub):
        x, y, th, v, de = (float(s) for s in state)
        a, om = (float(u) for u in control)
        h = total / n_sub
        for _ in range(n_sub):
            x += h * v * math.cos(th)
            y += h * v * math.sin(th)
            th += h * v / vcfg.wheelbase * math.tan(de)
            v += h * a
            de += h * om
        return np.array([x, y, th, v, de])

    s0 = np.array([0.0, 0.0, 0.2, 2.0, 0.5])
    u = np.array([0.4, 0.3])
    ref = euler(s0, u, 1.0, 1_000_000)
    f = lambda s, c: nominal_derivative(s, c, vcfg)

    def integrate(h):
        s = s0.copy()
        for _ in range(int(round(1.0 / h))):
            s = rk4_step(f, s, u, h, vcfg)
        return s

    slope = np.log2(
        np.linalg.norm(integrate(0.5) - ref) / np.linalg.norm(integrate(0.25) - ref)
    )
    checks.append(("rk4 order", abs(slope - 4.0) <= 0.2, f"slope {slope:.3f}"))

    # weight normalization, shift invariance, argmin concentration
    rng = np.random.default_rng(12)
    costs = rng.uniform(0, 100, size=3000)
    w = compute_weights(costs, 0.05)
    checks.append(("weight normalization", abs(w.sum() - 1.0) < 1e-12, f"|sum-1|={abs(w.sum()-1.0):.1e}"))
    dyadic = np.array([1.0, 2.5, 3.25, 0.75])
    shift_ok = np.array_equal(compute_weights(dyadic + 128.0, 0.05), compute_weights(dyadic, 0.05))
    checks.append(("shift invariance", shift_ok, "exact on exactly-representable shifts"))
    w_cold = compute_weights(rng.uniform(0, 1, 500), 1e-6)
    conc = w_cold.max()
    checks.append(("argmin concentration", conc >= 1 - 1e-9, f"max weight {conc:.12f}"))

    # residual control affinity
    params = init_params((8, 8), substream(3, PARAM_INIT), vcfg)
    rng2 = np.random.default_rng(13)
    for net in (params.drift, params.gain):
        net.weights[-1][:] = rng2.normal(0, 0.05, net.weights[-1].shape)
    s = rng2.normal(size=5)
    u1, u2 = rng2.normal(size=2), rng2.normal(size=2)
    r0 = residual_derivative(params, s, np.zeros(2))
    lhs = residual_derivative(params, s, u1 + u2) - r0
    rhs = (residual_derivative(params, s, u1) - r0) + (residual_derivative(params, s, u2) - r0)
    affine_err = float(np.max(np.abs(lhs - rhs)))
    checks.append(("control affinity", affine_err < 1e-10, f"superposition err {affine_err:.1e}"))

    # Savitzky-Golay: polynomial reproduction and the classic window-5 weights
    x = np.arange(25, dtype=float)
    poly_ok = True
    for order in (1, 2, 3):
        for degree in range(order + 1):
            out = savgol_smooth(x**degree, 7, order)
            poly_ok &= bool(np.allclose(out[3:-3], (x**degree)[3:-3], atol=1e-8))
    checks.append(("savgol polynomial reproduction", poly_ok, "degrees 0..order, interior"))
    w5 = savgol_weights(5, 2)
    w5_err = float(np.max(np.abs(w5 - np.array([-3, 12, 17, 12, -3]) / 35.0)))
    checks.append(("savgol window-5 weights", w5_err < 1e-12, f"max err {w5_err:.1e}"))

    ok = all(c[1] for c in checks)
    report("6 (numerical core)", ok, "; ".join(f"{name}: {detail}" for name, passed, detail in checks))
    for name, passed, detail in checks:
        assert passed, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# criterion 7: end-to-end bench determinism through the CLI
# ---------------------------------------------------------------------------


def test_criterion_7_bench_determinism(tmp_path):
    from residual_mppi.icode import save_checkpoint

    vcfg = VehicleConfig()
    ckpt = tmp_path / "zero.ckpt"
    save_checkpoint(ckpt, init_params((8, 8), substream(0, PARAM_INIT), vcfg))
    cfg = {
        "mppi": {"num_samples": 32, "horizon": 8, "sg_window": 5},
        "path": {"n_points": 200},
        "episode_duration": 1.5,
        "train": {"hidden_dims": [8, 8]},
        "checkpoint_path": str(ckpt),
    }
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps(cfg))
    out1, out2 = tmp_path / "b1", tmp_path / "b2"
    assert cli_main(["bench", "--config", str(cfg_file), "--out", str(out1)]) == 0
    assert cli_main(["bench", "--config", str(cfg_file), "--out", str(out2)]) == 0
    report_same = (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()
    svgs1 = sorted(p.name for p in out1.glob("*.svg"))
    svgs_same = bool(svgs1) and all(
        (out1 / n).read_bytes() == (out2 / n).read_bytes() for n in svgs1
    )
    ok = report_same and svgs_same
    report("7 (bench determinism)", ok, f"report.csv identical={report_same}, {len(svgs1)} SVGs identical={svgs_same}")
    assert report_same and svgs_same


# ---------------------------------------------------------------------------
# criterion 8: undisturbed tracking sanity
# ---------------------------------------------------------------------------


def test_criterion_8_undisturbed_sanity():
    cfg = desk_config(disturbance={"enabled": False})
    path = build_path(cfg.path)
    res = run_episode(cfg, None)
    rmse_x, rmse_y, _ = compute_rmse(res.states[:-1], path)
    ok = rmse_x < 0.15 and rmse_y < 0.15
    report("8 (undisturbed sanity)", ok, f"rmse_x {rmse_x:.3f} m, rmse_y {rmse_y:.3f} m, both < 0.15 m")
    assert rmse_x < 0.15
    assert rmse_y < 0.15
