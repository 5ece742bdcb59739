"""Kinematic bicycle dynamics, sinusoidal disturbance injection, and RK4 stepping.

State and control layout used throughout the package (trailing array axis):

    state   = [x, y, theta, v, delta]   positions (m), heading (rad),
                                        speed (m/s), steering angle (rad)
    control = [a, omega]                acceleration (m/s^2), steering rate (rad/s)

All functions broadcast over leading axes, so a single state ``(5,)`` and a
batch of rollout states ``(K, 5)`` go through the same code path.  Everything
here is a pure function of its inputs and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

STATE_DIM = 5
CONTROL_DIM = 2

# Margin below pi/2 at which tan(delta) is treated as singular.
STEER_SINGULARITY_MARGIN = 0.02


class SingularSteering(ValueError):
    """Steering angle too close to +-pi/2 for tan(delta) to be meaningful."""


class NonFiniteState(FloatingPointError):
    """An integration stage or result produced NaN or Inf."""


@dataclass
class VehicleConfig:
    """Physical limits and sampling time of the bicycle plant."""

    wheelbase: float = 2.5
    a_max: float = 2.0
    delta_max: float = 1.571
    omega_max: float = 1.0
    dt: float = 0.05

    def validate(self) -> None:
        if self.wheelbase <= 0:
            raise ValueError("wheelbase > 0")
        if self.dt <= 0:
            raise ValueError("dt > 0")
        if self.a_max <= 0 or self.delta_max <= 0 or self.omega_max <= 0:
            raise ValueError("all limits > 0")

    def steer_limit(self) -> float:
        """Effective steering clamp.

        Bounded away from the tan singularity by the guard margin plus one
        full integrator step of steering drift (dt * omega_max), so that every
        RK4 stage evaluation of a clamped state stays strictly inside the
        singularity guard.  The extra 1e-6 absorbs float32 rounding of the
        clamp bound and the stage update in single-precision rollouts.
        """
        guard = np.pi / 2 - STEER_SINGULARITY_MARGIN
        return min(self.delta_max, guard - self.dt * self.omega_max - 1e-6)


@dataclass
class DisturbanceConfig:
    """Composite sinusoidal drift on the x/y/theta derivative channels."""

    amp_x: float = 0.3
    amp_y: float = 0.3
    amp_theta: float = 0.1
    freq_x: float = 0.5
    freq_y: float = 0.7
    freq_theta: float = 0.9
    enabled: bool = True

    def validate(self) -> None:
        amps = (self.amp_x, self.amp_y, self.amp_theta)
        freqs = (self.freq_x, self.freq_y, self.freq_theta)
        if any(a < 0 for a in amps):
            raise ValueError("all amplitudes >= 0")
        if any(f < 0 for f in freqs):
            raise ValueError("all frequencies >= 0")


def wrap_angle(theta):
    """Wrap angles to (-pi, pi].

    Exact (bit-identical) on inputs already in range, which makes the
    operation idempotent.
    """
    theta = np.asarray(theta)
    shift = np.ceil((theta - np.pi) / (2 * np.pi))
    return theta - 2 * np.pi * shift


def _as_float_array(arr):
    arr = np.asarray(arr)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


def clamp_control(control, cfg: VehicleConfig):
    """Project a control onto the box [-a_max, a_max] x [-omega_max, omega_max]."""
    control = _as_float_array(control)
    out = np.empty_like(control)
    np.clip(control[..., 0], -cfg.a_max, cfg.a_max, out=out[..., 0])
    np.clip(control[..., 1], -cfg.omega_max, cfg.omega_max, out=out[..., 1])
    return out


def nominal_derivative(state, control, cfg: VehicleConfig):
    """Bicycle-model state derivative [v cos(th), v sin(th), v/l tan(de), a, omega].

    Raises SingularSteering when any |delta| is within the guard margin of
    pi/2, where tan(delta) stops being a usable yaw-rate map.
    """
    state = np.asarray(state, dtype=float)
    control = np.asarray(control, dtype=float)
    theta = state[..., 2]
    v = state[..., 3]
    delta = state[..., 4]
    if np.any(np.abs(delta) >= np.pi / 2 - STEER_SINGULARITY_MARGIN):
        raise SingularSteering(
            f"|delta| >= pi/2 - {STEER_SINGULARITY_MARGIN} (max |delta| = {np.max(np.abs(delta)):.4f})"
        )
    out = np.empty_like(state)
    out[..., 0] = v * np.cos(theta)
    out[..., 1] = v * np.sin(theta)
    out[..., 2] = v / cfg.wheelbase * np.tan(delta)
    out[..., 3] = control[..., 0]
    out[..., 4] = control[..., 1]
    return out


def nominal_state_jacobian(state, cfg: VehicleConfig):
    """d(nominal_derivative)/d(state), shape (..., 5, 5).

    Used by the training backward pass; the control block is constant
    [[0,0],[0,0],[0,0],[1,0],[0,1]] and handled by the caller.
    """
    state = np.asarray(state, dtype=float)
    theta = state[..., 2]
    v = state[..., 3]
    delta = state[..., 4]
    jac = np.zeros(state.shape[:-1] + (STATE_DIM, STATE_DIM))
    jac[..., 0, 2] = -v * np.sin(theta)
    jac[..., 0, 3] = np.cos(theta)
    jac[..., 1, 2] = v * np.cos(theta)
    jac[..., 1, 3] = np.sin(theta)
    jac[..., 2, 3] = np.tan(delta) / cfg.wheelbase
    jac[..., 2, 4] = v / (cfg.wheelbase * np.cos(delta) ** 2)
    return jac


def disturbance_at(t, cfg: DisturbanceConfig):
    """Disturbance derivative [Ax sin(wx t), Ay cos(wy t), Ath sin(wth t), 0, 0].

    The speed and steering channels are identically zero.
    """
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape + (STATE_DIM,))
    if cfg.enabled:
        out[..., 0] = cfg.amp_x * np.sin(cfg.freq_x * t)
        out[..., 1] = cfg.amp_y * np.cos(cfg.freq_y * t)
        out[..., 2] = cfg.amp_theta * np.sin(cfg.freq_theta * t)
    return out


def plant_derivative(state, control, t, cfg: VehicleConfig, dist: DisturbanceConfig):
    """True plant field: nominal bicycle dynamics plus the time-varying drift."""
    return nominal_derivative(state, control, cfg) + disturbance_at(t, dist)


def _check_finite(arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteState("integration stage produced NaN/Inf")


def _finish_step(state_next, cfg: VehicleConfig):
    _check_finite(state_next)
    state_next[..., 2] = wrap_angle(state_next[..., 2])
    limit = cfg.steer_limit()
    np.clip(state_next[..., 4], -limit, limit, out=state_next[..., 4])
    return state_next


def rk4_step(f: Callable, state, control, dt: float, cfg: VehicleConfig):
    """Classical RK4 update with the control held constant over the step.

    ``f(state, control)`` evaluates the (time-invariant) vector field.  After
    the update the heading is re-wrapped to (-pi, pi] and the steering angle
    clamped; the stages themselves evaluate the unmodified smooth field.
    Computation stays in the floating dtype of ``state``.
    """
    state = _as_float_array(state)
    k1 = f(state, control)
    _check_finite(k1)
    k2 = f(state + (0.5 * dt) * k1, control)
    k3 = f(state + (0.5 * dt) * k2, control)
    k4 = f(state + dt * k3, control)
    _check_finite(k4)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return _finish_step(out, cfg)


def rk4_step_timed(f: Callable, state, control, t: float, dt: float, cfg: VehicleConfig):
    """RK4 update for a time-varying field ``f(state, control, t)``.

    Stages are evaluated at the proper stage times t, t+dt/2, t+dt; used for
    the disturbed plant where the drift is an explicit function of time.
    """
    state = _as_float_array(state)
    k1 = f(state, control, t)
    _check_finite(k1)
    k2 = f(state + (0.5 * dt) * k1, control, t + 0.5 * dt)
    k3 = f(state + (0.5 * dt) * k2, control, t + 0.5 * dt)
    k4 = f(state + dt * k3, control, t + dt)
    _check_finite(k4)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return _finish_step(out, cfg)


def plant_step(state, control, t: float, cfg: VehicleConfig, dist: DisturbanceConfig):
    """Advance the disturbed plant one sampling interval."""
    return rk4_step_timed(
        lambda s, u, tau: plant_derivative(s, u, tau, cfg, dist),
        state,
        control,
        t,
        cfg.dt,
        cfg,
    )
