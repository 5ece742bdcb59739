"""Command-line entry points: train, run, bench, plot.

Exit codes: 0 success, 1 configuration/input validation error, 2 runtime
failure.  All outputs (CSV, JSON, SVG, checkpoints) are deterministic
functions of the config file and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import icode
from .config import (
    ParseError,
    RunConfiguration,
    ValidationError,
    build_path,
    from_dict,
    load_config,
    to_dict,
)
from .metrics import read_metrics_csv, write_metrics_csv, write_summary_json
from .simulate import run_episode
from .streams import TASK_COLLECT, subseed
from .training import run_training_loop
from .dynamics import wrap_angle
from .metrics import control_rate_density, distribution_summary
from .svgplot import error_boxplots, rate_density_plot, trajectory_overlay

REPORT_COLUMNS = [
    "trajectory", "method", "seed",
    "rmse_x", "rmse_y", "rmse_yaw",
    "steer_rate_std", "steer_rate_zero_peak", "accel_rate_std",
]
TRAJECTORIES = ("ellipse", "sine", "figure8")
BENCH_SEEDS = 5


class MissingCheckpoint(ValueError):
    pass


class MissingInput(ValueError):
    pass


def _fmt(v) -> str:
    return repr(float(v))


def _resolve_checkpoint(template: str, trajectory: str) -> Path:
    """Checkpoint paths may carry a '{path}' placeholder for per-trajectory models."""
    return Path(template.replace("{path}", trajectory))


def _load_params_if_needed(cfg: RunConfiguration):
    if cfg.method != "icode":
        return None
    if not cfg.checkpoint_path:
        raise MissingCheckpoint("method 'icode' requires checkpoint_path in the config")
    path = _resolve_checkpoint(cfg.checkpoint_path, cfg.path.kind)
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    return icode.load_checkpoint(path)


def _write_diagnostics_csv(path: Path, times, diagnostics) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "cost_min", "cost_mean", "ess"])
        for t, d in zip(times, diagnostics):
            writer.writerow([_fmt(t), _fmt(d["cost_min"]), _fmt(d["cost_mean"]), _fmt(d["ess"])])


def cmd_run(cfg: RunConfiguration, out_dir: Path) -> int:
    params = _load_params_if_needed(cfg)
    result = run_episode(cfg, params)
    path = build_path(cfg.path)
    tag = f"{cfg.path.kind}_{cfg.method}"
    write_metrics_csv(out_dir / f"metrics_{tag}.csv", result.times, result.states,
                      result.ref_points, result.controls)
    write_summary_json(out_dir / f"summary_{tag}.json", result.metrics(path, cfg.vehicle.dt))
    _write_diagnostics_csv(out_dir / f"diagnostics_{tag}.csv", result.times, result.diagnostics)
    return 0


def _path_bounds(cfg: RunConfiguration, margin: float = 5.0):
    pts = build_path(cfg.path).points
    return (
        (float(pts[:, 0].min()) - margin, float(pts[:, 0].max()) + margin),
        (float(pts[:, 1].min()) - margin, float(pts[:, 1].max()) + margin),
    )


def cmd_train(cfg: RunConfiguration, out_dir: Path) -> int:
    def task_runner(params, iteration, episode):
        seed = subseed(cfg.seed, TASK_COLLECT, iteration, episode)
        result = run_episode(cfg, params, seed=seed)
        return result.times, result.states, result.controls

    def checkpoint_fn(iteration, params):
        icode.save_checkpoint(out_dir / f"icode_iter_{iteration}.ckpt", params)

    _, rows = run_training_loop(
        cfg.vehicle,
        cfg.disturbance,
        cfg.train,
        cfg.seed,
        task_runner,
        checkpoint_fn=checkpoint_fn,
        position_bounds=_path_bounds(cfg),
    )
    with open(out_dir / "training_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "buffer_size", "train_loss_final",
                         "holdout_loss_combined", "holdout_loss_nominal"])
        for row in rows:
            writer.writerow([row["iteration"], row["buffer_size"], _fmt(row["train_loss_final"]),
                             _fmt(row["holdout_loss_combined"]), _fmt(row["holdout_loss_nominal"])])
    return 0


def _cell_config(cfg: RunConfiguration, trajectory: str, method: str) -> RunConfiguration:
    data = to_dict(cfg)
    data["path"]["kind"] = trajectory
    data["method"] = method
    cell, _ = from_dict(data)
    return cell


def cmd_bench(cfg: RunConfiguration, out_dir: Path, n_seeds: int = BENCH_SEEDS) -> int:
    """3x2 benchmark grid over seed repetitions; emits report.csv, report.txt,
    one representative metrics CSV per cell, and the comparison figures.

    With a '{path}' placeholder in checkpoint_path each trajectory loads its
    own trained model; otherwise one checkpoint serves all three.
    """
    if not cfg.checkpoint_path:
        raise MissingCheckpoint("bench requires checkpoint_path for the icode cells")
    params_cache: dict[Path, object] = {}

    def params_for(trajectory: str):
        ckpt = _resolve_checkpoint(cfg.checkpoint_path, trajectory)
        if ckpt not in params_cache:
            if not ckpt.exists():
                raise MissingCheckpoint(f"checkpoint not found: {ckpt}")
            params_cache[ckpt] = icode.load_checkpoint(ckpt)
        return params_cache[ckpt]

    for trajectory in TRAJECTORIES:  # fail fast on any missing model
        params_for(trajectory)

    rows = []
    failures = []
    cell_metrics: dict[tuple[str, str], list] = {}
    cell_walls: dict[tuple[str, str], float] = {}
    for trajectory in TRAJECTORIES:
        for method in ("nominal", "icode"):
            cell = _cell_config(cfg, trajectory, method)
            cell_params = params_for(trajectory) if method == "icode" else None
            path = build_path(cell.path)
            t_start = time.perf_counter()
            for i in range(n_seeds):
                seed = cfg.seed + i
                try:
                    result = run_episode(cell, cell_params, seed=seed)
                except Exception as exc:  # record the cell failure, keep the grid going
                    failures.append({"trajectory": trajectory, "method": method,
                                     "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
                    continue
                metrics = result.metrics(path, cell.vehicle.dt)
                cell_metrics.setdefault((trajectory, method), []).append(metrics)
                rows.append([
                    trajectory, method, seed,
                    metrics.rmse_x, metrics.rmse_y, metrics.rmse_yaw,
                    metrics.steer_rate.std, metrics.steer_rate.zero_peak, metrics.accel_rate.std,
                ])
                if i == 0:
                    tag = f"{trajectory}_{method}"
                    write_metrics_csv(out_dir / f"metrics_{tag}.csv", result.times,
                                      result.states, result.ref_points, result.controls)
                    write_summary_json(out_dir / f"summary_{tag}.json", metrics)
            cell_walls[(trajectory, method)] = time.perf_counter() - t_start

    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row[0], row[1], row[2]] + [_fmt(v) for v in row[3:]])

    _write_report_summary(out_dir, cell_metrics, cell_walls, failures)
    _emit_bench_figures(out_dir)
    if failures:
        sys.stderr.write(f"{len(failures)} bench cell run(s) failed; see report_summary.json\n")
        return 2
    return 0


def _cell_means(metrics_list) -> dict[str, float]:
    mean = lambda attr: float(np.mean([getattr(m, attr) for m in metrics_list]))
    return {
        "rmse_x": mean("rmse_x"),
        "rmse_y": mean("rmse_y"),
        "rmse_yaw": mean("rmse_yaw"),
        "steer_rate_std": float(np.mean([m.steer_rate.std for m in metrics_list])),
        "steer_rate_zero_peak": float(np.mean([m.steer_rate.zero_peak for m in metrics_list])),
        "accel_rate_std": float(np.mean([m.accel_rate.std for m in metrics_list])),
    }


def _write_report_summary(out_dir: Path, cell_metrics, cell_walls, failures) -> None:
    summary: dict = {"cells": {}, "ratios": {}, "wall_clock_s": {}, "failures": failures}
    for (trajectory, method), metrics_list in sorted(cell_metrics.items()):
        summary["cells"][f"{trajectory}/{method}"] = _cell_means(metrics_list)
    for trajectory in TRAJECTORIES:
        nom = cell_metrics.get((trajectory, "nominal"))
        ico = cell_metrics.get((trajectory, "icode"))
        if nom and ico:
            nm, im = _cell_means(nom), _cell_means(ico)
            summary["ratios"][trajectory] = {
                "rmse_x": im["rmse_x"] / nm["rmse_x"],
                "rmse_y": im["rmse_y"] / nm["rmse_y"],
                "rmse_yaw": im["rmse_yaw"] / nm["rmse_yaw"],
            }
    for (trajectory, method), wall in sorted(cell_walls.items()):
        summary["wall_clock_s"][f"{trajectory}/{method}"] = wall
    with open(out_dir / "report_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    lines = ["Tracking RMSE comparison (mean over seed runs)", ""]
    lines.append(f"{'Trajectory':<12}{'Method':<12}{'X Error (m)':>14}{'Y Error (m)':>14}{'Yaw Error (rad)':>17}")
    lines.append("-" * 69)
    for trajectory in TRAJECTORIES:
        for method in ("nominal", "icode"):
            m = cell_metrics.get((trajectory, method))
            if not m:
                lines.append(f"{trajectory:<12}{method:<12}{'FAILED':>14}")
                continue
            c = _cell_means(m)
            lines.append(
                f"{trajectory:<12}{method:<12}{c['rmse_x']:>14.3f}{c['rmse_y']:>14.3f}{c['rmse_yaw']:>17.3f}"
            )
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")


def _emit_bench_figures(out_dir: Path) -> None:
    files = sorted(out_dir.glob("metrics_*_*.csv"))
    if files:
        cmd_plot([str(f) for f in files], out_dir)


def _parse_metrics_name(path: Path) -> tuple[str, str]:
    stem = path.stem
    if not stem.startswith("metrics_") or stem.count("_") < 2:
        raise MissingInput(
            f"cannot infer (trajectory, method) from '{path.name}'; expected metrics_<path>_<method>.csv"
        )
    _, trajectory, method = stem.split("_", 2)
    return trajectory, method


def cmd_plot(files: list[str], out_dir: Path) -> int:
    by_traj: dict[str, dict[str, dict]] = {}
    for name in files:
        p = Path(name)
        if not p.exists():
            raise MissingInput(f"metrics file not found: {p}")
        trajectory, method = _parse_metrics_name(p)
        by_traj.setdefault(trajectory, {})[method] = read_metrics_csv(p)

    for trajectory, by_method in sorted(by_traj.items()):
        ref_cols = next(iter(by_method.values()))
        ref_xy = np.column_stack([ref_cols["ref_x"], ref_cols["ref_y"]])
        for method, cols in sorted(by_method.items()):
            xy = np.column_stack([cols["x"], cols["y"]])
            svg, _ = trajectory_overlay(ref_xy, {method: xy}, f"{trajectory}: reference vs {method}")
            (out_dir / f"traj_{trajectory}_{method}.svg").write_text(svg)

        summaries = {}
        densities = {}
        for method, cols in sorted(by_method.items()):
            ex = cols["x"] - cols["ref_x"]
            ey = cols["y"] - cols["ref_y"]
            eyaw = wrap_angle(cols["theta"] - cols["ref_theta"])
            summaries[method] = {
                "x": distribution_summary(np.abs(ex)),
                "y": distribution_summary(np.abs(ey)),
                "yaw": distribution_summary(np.abs(eyaw)),
            }
            dt = float(cols["t"][1] - cols["t"][0])
            controls = np.column_stack([cols["a_cmd"], cols["omega_cmd"]])
            densities[method] = control_rate_density(controls, dt)
        svg, _ = error_boxplots(summaries, f"{trajectory}: absolute tracking errors")
        (out_dir / f"box_{trajectory}.svg").write_text(svg)
        svg, _ = rate_density_plot(densities, f"{trajectory}: control rate densities")
        (out_dir / f"rates_{trajectory}.svg").write_text(svg)
    return 0


def _print_config(cfg: RunConfiguration, sources: dict[str, str]) -> None:
    print(json.dumps({"config": to_dict(cfg), "sources": sources}, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="residual-mppi",
        description="MPPI bicycle tracking with a learned control-affine residual model",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("train", "run the iterative data-aggregation training loop"),
        ("run", "simulate one closed-loop tracking episode"),
        ("bench", "run the 3x2 trajectory/method benchmark grid"),
        ("plot", "render SVG figures from metrics CSV files"),
    ):
        p = sub.add_parser(name, help=desc)
        if name != "plot":
            p.add_argument("--config", type=str, default=None, help="JSON config file")
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
            p.add_argument("--print-config", action="store_true",
                           help="print the resolved config with per-field sources and exit")
        else:
            p.add_argument("metrics", nargs="+", help="metrics_<path>_<method>.csv files")
        p.add_argument("--out", type=str, default=".", help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "plot":
            return cmd_plot(args.metrics, out_dir)
        if args.config is not None:
            cfg, sources = load_config(args.config)
        else:
            cfg, sources = from_dict({})
        if args.seed is not None:
            cfg.seed = args.seed
            sources["seed"] = "user"
        if args.print_config:
            _print_config(cfg, sources)
            return 0
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "run":
            return cmd_run(cfg, out_dir)
        return cmd_bench(cfg, out_dir)
    except (ParseError, ValidationError, MissingCheckpoint, MissingInput) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # runtime failure
        sys.stderr.write(f"runtime failure: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
