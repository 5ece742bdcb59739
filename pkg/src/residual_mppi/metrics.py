"""Tracking-error metrics: per-axis RMSE, error distributions, control-rate densities."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .dynamics import wrap_angle
from .paths import ReferencePath, match_series

METRICS_CSV_COLUMNS = [
    "t", "x", "y", "theta", "v", "delta",
    "ref_x", "ref_y", "ref_theta", "a_cmd", "omega_cmd",
]

RATE_HISTOGRAM_BINS = 50


class EmptySeries(ValueError):
    pass


class SeriesTooShort(ValueError):
    pass


@dataclass
class DistributionSummary:
    """Five-number-style summary with Tukey whiskers (1.5 IQR rule)."""

    median: float
    mean: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    n_outliers: int


@dataclass
class RateDensity:
    """Normalized histogram of finite-difference control rates for one channel."""

    bin_edges: list[float]
    density: list[float]
    zero_peak: float
    std: float


@dataclass
class RunMetrics:
    """Everything reported for one closed-loop episode."""

    rmse_x: float
    rmse_y: float
    rmse_yaw: float
    rmse_cross_track: float
    error_summaries: dict[str, DistributionSummary]
    accel_rate: RateDensity
    steer_rate: RateDensity
    extras: dict = field(default_factory=dict)


def tracking_errors(states, path: ReferencePath, start_index: int = 0):
    """Per-sample errors against the monotonely matched reference.

    Returns (ex, ey, eyaw, cross_track, matched_indices); the yaw error is
    wrapped to (-pi, pi] before use and the cross-track error is the signed
    lateral offset in the reference tangent frame.
    """
    states = np.asarray(states, dtype=float)
    if states.size == 0:
        raise EmptySeries("no states")
    idx = match_series(path, states[:, :2], start_index)
    ref = path.points[idx]
    ex = states[:, 0] - ref[:, 0]
    ey = states[:, 1] - ref[:, 1]
    eyaw = wrap_angle(states[:, 2] - ref[:, 2])
    cross = -np.sin(ref[:, 2]) * ex + np.cos(ref[:, 2]) * ey
    return ex, ey, eyaw, cross, idx


def compute_rmse(states, path: ReferencePath, start_index: int = 0):
    """Root-mean-square tracking error per axis: (rmse_x, rmse_y, rmse_yaw)."""
    ex, ey, eyaw, _, _ = tracking_errors(states, path, start_index)
    rms = lambda e: float(np.sqrt(np.mean(np.square(e))))
    return rms(ex), rms(ey), rms(eyaw)


def distribution_summary(errors) -> DistributionSummary:
    """Median/mean/quartiles with whiskers at the furthest points within 1.5 IQR."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise EmptySeries("no samples")
    q1, med, q3 = np.quantile(errors, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    lo_fence = q1 - 1.5 * iqr
    hi_fence = q3 + 1.5 * iqr
    inside = errors[(errors >= lo_fence) & (errors <= hi_fence)]
    return DistributionSummary(
        median=float(med),
        mean=float(np.mean(errors)),
        q1=float(q1),
        q3=float(q3),
        whisker_low=float(np.min(inside)),
        whisker_high=float(np.max(inside)),
        n_outliers=int(errors.size - inside.size),
    )


def control_rate_density(controls, dt: float, n_bins: int = RATE_HISTOGRAM_BINS) -> tuple[RateDensity, RateDensity]:
    """Per-channel densities of the finite-difference rates (u[t+1]-u[t])/dt.

    Histograms span symmetric bounds +-max|rate| and integrate to one; the
    zero peak is the density of the bin containing rate zero.
    """
    controls = np.asarray(controls, dtype=float)
    if len(controls) < 2:
        raise SeriesTooShort("need at least 2 control samples")
    rates = np.diff(controls, axis=0) / dt
    out = []
    for ch in range(controls.shape[1]):
        r = rates[:, ch]
        bound = float(np.max(np.abs(r)))
        if bound == 0.0:
            bound = 1.0
        edges = np.linspace(-bound, bound, n_bins + 1)
        counts, edges = np.histogram(r, bins=edges)
        width = edges[1] - edges[0]
        density = counts / (r.size * width)
        zero_bin = int(np.clip(np.searchsorted(edges, 0.0, side="right") - 1, 0, n_bins - 1))
        out.append(
            RateDensity(
                bin_edges=[float(e) for e in edges],
                density=[float(d) for d in density],
                zero_peak=float(density[zero_bin]),
                std=float(np.std(r)),
            )
        )
    return out[0], out[1]


def episode_metrics(states, controls, path: ReferencePath, dt: float) -> RunMetrics:
    """Aggregate metrics for one episode (states over time, applied controls)."""
    ex, ey, eyaw, cross, _ = tracking_errors(states, path)
    rms = lambda e: float(np.sqrt(np.mean(np.square(e))))
    accel_rate, steer_rate = control_rate_density(controls, dt)
    summaries = {
        "x": distribution_summary(np.abs(ex)),
        "y": distribution_summary(np.abs(ey)),
        "yaw": distribution_summary(np.abs(eyaw)),
    }
    return RunMetrics(
        rmse_x=rms(ex),
        rmse_y=rms(ey),
        rmse_yaw=rms(eyaw),
        rmse_cross_track=rms(cross),
        error_summaries=summaries,
        accel_rate=accel_rate,
        steer_rate=steer_rate,
    )


def _fmt(v) -> str:
    # repr round-trips floats exactly, which keeps output byte-stable
    return repr(float(v))


def write_metrics_csv(path: Path, times, states, ref_points, controls) -> None:
    """One row per timestep in the fixed column order METRICS_CSV_COLUMNS."""
    states = np.asarray(states)
    ref_points = np.asarray(ref_points)
    controls = np.asarray(controls)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_COLUMNS)
        for i in range(len(controls)):
            row = [
                times[i],
                states[i, 0], states[i, 1], states[i, 2], states[i, 3], states[i, 4],
                ref_points[i, 0], ref_points[i, 1], ref_points[i, 2],
                controls[i, 0], controls[i, 1],
            ]
            writer.writerow([_fmt(v) for v in row])


def read_metrics_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_CSV_COLUMNS:
            raise ValueError(f"unexpected metrics CSV header in {path}")
        rows = np.array([[float(v) for v in row] for row in reader])
    if rows.size == 0:
        raise EmptySeries(f"{path} has no data rows")
    return {name: rows[:, i] for i, name in enumerate(METRICS_CSV_COLUMNS)}


def write_summary_json(path: Path, metrics: RunMetrics) -> None:
    with open(path, "w") as fh:
        json.dump(asdict(metrics), fh, indent=2, sort_keys=True)
        fh.write("\n")
