"""Sampling-based path-integral controller.

One control step: draw Gaussian perturbations around the warm-started plan,
roll every perturbed sequence forward through the supplied dynamics, score
the rollouts against the reference path, softmax-weight the perturbations by
cost, update the plan with the weighted noise average, smooth it with a
Savitzky-Golay filter, and apply the first command.

The dynamics argument is any callable ``dyn(states, controls) -> derivatives``
operating on batched arrays, so the same controller runs the nominal bicycle
model or the residual-augmented model unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import VehicleConfig, clamp_control, rk4_step, wrap_angle
from .paths import ReferencePath, nearest_reference, window_indices
from .streams import MPPI_NOISE, substream


class WindowTooLarge(ValueError):
    pass


@dataclass
class MppiConfig:
    """Sampler and filter settings.

    ``rollout_dtype`` selects the floating precision of the forward rollouts
    only (weights, smoothing, and the applied command stay float64); float32
    roughly halves the per-step cost of network-augmented rollouts.
    """

    horizon: int = 20
    num_samples: int = 3000
    temperature: float = 0.05
    noise_cov_a: float = 0.1
    noise_cov_omega: float = 0.5
    sg_window: int = 5
    sg_order: int = 3
    gamma_control_cost: float = 0.0
    rollout_dtype: str = "float32"

    def validate(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon >= 1")
        if self.num_samples < 1:
            raise ValueError("num_samples >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature > 0")
        if self.noise_cov_a <= 0 or self.noise_cov_omega <= 0:
            raise ValueError("noise variances > 0")
        if self.sg_window % 2 != 1 or self.sg_window <= self.sg_order or self.sg_order < 0:
            raise ValueError("sg_window odd and > sg_order >= 0")
        if self.sg_window > self.horizon:
            raise ValueError("sg_window <= horizon")
        if self.gamma_control_cost < 0:
            raise ValueError("gamma_control_cost >= 0")
        if self.rollout_dtype not in ("float32", "float64"):
            raise ValueError("rollout_dtype in {float32, float64}")

    @property
    def dtype(self):
        return np.float32 if self.rollout_dtype == "float32" else np.float64


@dataclass
class CostConfig:
    """Quadratic tracking-cost weights."""

    w_pos: float = 10.0
    w_heading: float = 2.0
    w_speed: float = 1.0
    w_terminal: float = 5.0
    ref_speed: float = 2.0

    def validate(self) -> None:
        if min(self.w_pos, self.w_heading, self.w_speed, self.w_terminal) < 0:
            raise ValueError("all weights >= 0")


def sample_noise(cfg: MppiConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian perturbation tensor of shape (num_samples, horizon, 2)."""
    std = np.sqrt([cfg.noise_cov_a, cfg.noise_cov_omega])
    return rng.standard_normal((cfg.num_samples, cfg.horizon, 2)) * std


def rollout_trajectory(dyn, x0, nominal, noise, cfg: VehicleConfig) -> np.ndarray:
    """Forward-simulate perturbed control sequences.

    ``noise`` is (H, 2) for a single rollout or (K, H, 2) for a batch; the
    result is the corresponding (H+1, 5) or (K, H+1, 5) state sequence.
    Controls are clamped per step and held constant over each RK4 update.
    """
    x0 = np.asarray(x0)
    nominal = np.asarray(nominal)
    noise = np.asarray(noise)
    batched = noise.ndim == 3
    if not batched:
        noise = noise[None]
    k, horizon = noise.shape[0], noise.shape[1]
    if nominal.shape[0] != horizon:
        raise ValueError("nominal length must equal the horizon")
    states = np.empty((k, horizon + 1, 5), dtype=x0.dtype)
    states[:, 0] = x0
    for t in range(horizon):
        u = clamp_control(nominal[t] + noise[:, t], cfg).astype(x0.dtype)
        states[:, t + 1] = rk4_step(dyn, states[:, t], u, cfg.dt, cfg)
    return states if batched else states[0]


def state_cost(states, ref_points, cost: CostConfig):
    """Quadratic penalty of one state against one reference point (broadcasts)."""
    states = np.asarray(states)
    ref_points = np.asarray(ref_points)
    dx = states[..., 0] - ref_points[..., 0]
    dy = states[..., 1] - ref_points[..., 1]
    dth = wrap_angle(states[..., 2] - ref_points[..., 2])
    dv = states[..., 3] - cost.ref_speed
    return cost.w_pos * (dx * dx + dy * dy) + cost.w_heading * dth * dth + cost.w_speed * dv * dv


def match_rollout_references(states, path: ReferencePath, start_index: int) -> np.ndarray:
    """Reference points for every rollout state, preserving forward progress.

    All rollouts share the forward window anchored at ``start_index``; within
    a rollout the matched window position never decreases over time.
    Returns (..., H+1, 3).
    """
    states = np.asarray(states)
    batched = states.ndim == 3
    if not batched:
        states = states[None]
    idx = window_indices(path, start_index)
    px = path.points[idx, 0].astype(states.dtype)
    py = path.points[idx, 1].astype(states.dtype)
    n_steps = states.shape[1]
    pos = np.zeros(states.shape[0], dtype=int)
    matched = np.empty((states.shape[0], n_steps), dtype=int)
    for t in range(n_steps):
        dx = states[:, t, 0, None] - px[None, :]
        dy = states[:, t, 1, None] - py[None, :]
        best = np.argmin(dx * dx + dy * dy, axis=1)
        pos = np.maximum(pos, best)
        matched[:, t] = pos
    refs = path.points[idx[matched]]
    return refs if batched else refs[0]


def trajectory_cost(
    states,
    controls,
    path: ReferencePath,
    cost: CostConfig,
    cfg: MppiConfig,
    noise=None,
    start_index: int = 0,
):
    """Total rollout cost: running state costs plus the terminal penalty.

    ``states`` is (H+1, 5) or (K, H+1, 5); ``controls`` is the nominal (H, 2)
    plan.  With ``gamma_control_cost > 0`` and the perturbations supplied, the
    standard path-integral control-cost term gamma * u^T Sigma^-1 eps is added
    per step.
    """
    states = np.asarray(states)
    refs = match_rollout_references(states, path, start_index)
    costs = state_cost(states, refs, cost)
    total = np.sum(costs[..., :-1], axis=-1, dtype=np.float64)
    total += cost.w_terminal * costs[..., -1].astype(np.float64)
    if cfg.gamma_control_cost > 0.0 and noise is not None:
        controls = np.asarray(controls, dtype=np.float64)
        noise = np.asarray(noise, dtype=np.float64)
        inv_cov = np.array([1.0 / cfg.noise_cov_a, 1.0 / cfg.noise_cov_omega])
        total = total + cfg.gamma_control_cost * np.sum(
            (controls * inv_cov) * noise, axis=(-2, -1)
        )
    return total


def compute_weights(costs, temperature: float) -> np.ndarray:
    """Softmax weights over rollout costs.

    The minimum cost is subtracted before exponentiation, which makes the
    weights exactly invariant to any common cost offset and numerically safe
    for small temperatures.
    """
    costs = np.asarray(costs, dtype=np.float64)
    shifted = (costs - costs.min()) / temperature
    w = np.exp(-shifted)
    return w / w.sum()


def update_controls(nominal, noise, weights) -> np.ndarray:
    """Plan update: nominal plus the probability-weighted average perturbation."""
    nominal = np.asarray(nominal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    return nominal + np.einsum("k,khc->hc", weights, noise)


def savgol_weights(window: int, order: int) -> np.ndarray:
    """Least-squares coefficients of the centered smoothing window."""
    if window % 2 != 1 or window <= order:
        raise ValueError("window must be odd and > order")
    half = window // 2
    offsets = np.arange(-half, half + 1, dtype=float)
    design = np.vander(offsets, order + 1, increasing=True)
    return np.linalg.pinv(design)[0]


def _edge_weights(offsets: np.ndarray, order: int) -> np.ndarray:
    # near the boundary the window truncates; cap the fit order at what the
    # remaining points can support
    eff_order = min(order, len(offsets) - 1)
    design = np.vander(offsets.astype(float), eff_order + 1, increasing=True)
    return np.linalg.pinv(design)[0]


def savgol_smooth(seq, window: int, order: int) -> np.ndarray:
    """Savitzky-Golay smoothing with truncated one-sided fits at the ends.

    Each output sample is the value at the window center of a least-squares
    polynomial fit; boundary samples are fit on whatever one-sided window
    remains rather than on mirrored data, so no fabricated samples beyond the
    sequence ends enter the fit.  Works per channel on (n,) or (n, C) input.
    """
    seq = np.asarray(seq, dtype=np.float64)
    n = seq.shape[0]
    if window > n:
        raise WindowTooLarge(f"window {window} exceeds sequence length {n}")
    if window % 2 != 1 or window <= order or order < 0:
        raise ValueError("window odd and > order >= 0")
    half = window // 2
    interior = savgol_weights(window, order)
    out = np.empty_like(seq)
    for i in range(n):
        lo, hi = i - half, i + half
        if lo >= 0 and hi < n:
            w = interior
            lo_clip = lo
        else:
            lo_clip, hi_clip = max(lo, 0), min(hi, n - 1)
            w = _edge_weights(np.arange(lo_clip, hi_clip + 1) - i, order)
        out[i] = w @ seq[lo_clip : lo_clip + len(w)]
    return out


def mppi_step(
    x0,
    warm,
    dyn,
    path: ReferencePath,
    vcfg: VehicleConfig,
    mcfg: MppiConfig,
    ccfg: CostConfig,
    seed: int,
    step_index: int,
    match_index: int = 0,
):
    """Run one full control step.

    Returns ``(u_applied, next_warm, diagnostics, match_index)`` where the
    warm start for the next step is the smoothed plan shifted left with its
    last element repeated.  Noise comes from the counter-based stream keyed by
    (seed, step_index), so results do not depend on call context.
    """
    dtype = mcfg.dtype
    x0 = np.asarray(x0, dtype=np.float64)
    match_index, _ = nearest_reference(path, x0[:2], match_index)
    rng = substream(seed, MPPI_NOISE, step_index)
    noise = sample_noise(mcfg, rng)

    states = rollout_trajectory(dyn, x0.astype(dtype), warm.astype(dtype), noise.astype(dtype), vcfg)
    costs = trajectory_cost(states, warm, path, ccfg, mcfg, noise=noise, start_index=match_index)
    weights = compute_weights(costs, mcfg.temperature)
    updated = update_controls(warm, noise, weights)
    smoothed = savgol_smooth(updated, mcfg.sg_window, mcfg.sg_order)
    # keep the stored plan inside the control box: once outside, every rollout
    # saturates identically and the cost gradient w.r.t. the plan vanishes
    smoothed = clamp_control(smoothed, vcfg)

    u_applied = clamp_control(smoothed[0], vcfg)
    next_warm = np.empty_like(smoothed)
    next_warm[:-1] = smoothed[1:]
    next_warm[-1] = smoothed[-1]
    diagnostics = {
        "cost_min": float(costs.min()),
        "cost_mean": float(costs.mean()),
        "ess": float(1.0 / np.sum(weights**2)),
    }
    return u_applied, next_warm, diagnostics, match_index


class MppiController:
    """Receding-horizon wrapper: owns the warm start and path progress."""

    def __init__(
        self,
        dyn,
        path: ReferencePath,
        vcfg: VehicleConfig,
        mcfg: MppiConfig,
        ccfg: CostConfig,
        seed: int,
    ):
        mcfg.validate()
        ccfg.validate()
        self.dyn = dyn
        self.path = path
        self.vcfg = vcfg
        self.mcfg = mcfg
        self.ccfg = ccfg
        self.seed = seed
        self.warm = np.zeros((mcfg.horizon, 2))
        self.match_index = 0
        self.step_count = 0

    def step(self, state):
        u, self.warm, diag, self.match_index = mppi_step(
            state,
            self.warm,
            self.dyn,
            self.path,
            self.vcfg,
            self.mcfg,
            self.ccfg,
            self.seed,
            self.step_count,
            self.match_index,
        )
        self.step_count += 1
        return u, diag
