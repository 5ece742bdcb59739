"""Closed-loop episode execution: disturbed plant driven by the MPPI controller."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfiguration, build_path
from .dynamics import plant_step
from .icode import ResidualParams, make_rollout_derivative
from .metrics import RunMetrics, episode_metrics
from .mppi import MppiController
from .paths import ReferencePath


@dataclass
class EpisodeResult:
    times: np.ndarray        # (T,) command timestamps
    states: np.ndarray       # (T+1, 5) plant states, states[0] is the initial state
    controls: np.ndarray     # (T, 2) applied commands
    ref_points: np.ndarray   # (T, 3) reference matched to each pre-step state
    diagnostics: list        # per-step controller diagnostics dicts

    def metrics(self, path: ReferencePath, dt: float) -> RunMetrics:
        return episode_metrics(self.states[:-1], self.controls, path, dt)


def initial_state(path: ReferencePath, ref_speed: float) -> np.ndarray:
    """Start on the reference: first path point, tangent heading, reference speed."""
    x, y, theta = path.points[0]
    return np.array([x, y, theta, ref_speed, 0.0])


def run_episode(
    cfg: RunConfiguration,
    params: ResidualParams | None,
    seed: int | None = None,
    duration: float | None = None,
) -> EpisodeResult:
    """Simulate one tracking episode.

    The plant always evolves under the true disturbed dynamics; ``params``
    selects the controller's internal model (None for the nominal bicycle).
    ``seed``/``duration`` default to the config values.
    """
    path = build_path(cfg.path)
    seed = cfg.seed if seed is None else seed
    duration = cfg.episode_duration if duration is None else duration
    dt = cfg.vehicle.dt
    n_steps = int(round(duration / dt))

    dyn = make_rollout_derivative(params, cfg.vehicle, dtype=cfg.mppi.dtype)
    controller = MppiController(dyn, path, cfg.vehicle, cfg.mppi, cfg.cost, seed)

    states = np.empty((n_steps + 1, 5))
    controls = np.empty((n_steps, 2))
    times = np.arange(n_steps) * dt
    ref_points = np.empty((n_steps, 3))
    diagnostics: list = []

    states[0] = initial_state(path, cfg.cost.ref_speed)
    for i in range(n_steps):
        u, diag = controller.step(states[i])
        ref_points[i] = path.points[controller.match_index]
        controls[i] = u
        diagnostics.append(diag)
        states[i + 1] = plant_step(states[i], u, times[i], cfg.vehicle, cfg.disturbance)
    return EpisodeResult(
        times=times, states=states, controls=controls, ref_points=ref_points, diagnostics=diagnostics
    )
