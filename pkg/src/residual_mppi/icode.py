"""Control-affine neural residual dynamics and its training gradients.

The residual field has the structure

    r(state, u) = drift(state) + gain(state) @ u

with two independent multilayer perceptrons: ``drift`` maps an encoded state
to one correction per state derivative, and ``gain`` maps it to a 5x2 matrix
of control-effectiveness corrections.  Hidden layers use softplus, output
layers are linear and zero-initialized, so a fresh model reproduces the
nominal dynamics exactly.

States are encoded as [x/sx, y/sy, sin(theta), cos(theta), v/sv, delta/sd],
which removes the heading wrap discontinuity and keeps inputs O(1).

Training minimizes the mean squared one-step (optionally multi-step) RK4
prediction error against recorded transitions.  Gradients are computed by
reverse-mode differentiation through the unrolled RK4 stages, i.e. they are
exact gradients of the discrete loss; `tests` verify them against central
finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    STEER_SINGULARITY_MARGIN,
    VehicleConfig,
    nominal_state_jacobian,
    rk4_step,
    wrap_angle,
)

# Steering angle at which the combined model saturates tan(delta) instead of
# raising: sampled rollouts and aggressive training data may transiently push
# intermediate RK4 stages past the plant's clamp (the residual adds its own
# delta-channel derivative), and a saturated, finite yaw rate lets the cost
# blow up and the softmax discard the rollout rather than crashing the
# controller.  The nominal-only field keeps its hard singularity guard.
STEER_TAN_SATURATION = np.pi / 2 - STEER_SINGULARITY_MARGIN

FEATURE_DIM = 6
CHECKPOINT_VERSION = 1

# default feature normalization: positions, speed, steering
POSITION_SCALE = 10.0
SPEED_SCALE = 5.0


class DimensionMismatch(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


def softplus(z):
    z = np.asarray(z)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


@dataclass
class Mlp:
    """Affine-softplus chain; the final layer is affine with no activation."""

    weights: list
    biases: list

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.weights[0].shape[0]:
            raise DimensionMismatch(
                f"input dim {x.shape[-1]} != first layer {self.weights[0].shape[0]}"
            )
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = softplus(h @ w + b)
        return h @ self.weights[-1] + self.biases[-1]

    def forward_cached(self, x: np.ndarray):
        """Forward pass retaining per-layer inputs and pre-activations."""
        if x.shape[-1] != self.weights[0].shape[0]:
            raise DimensionMismatch(
                f"input dim {x.shape[-1]} != first layer {self.weights[0].shape[0]}"
            )
        inputs, preacts = [], []
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            inputs.append(h)
            z = h @ w + b
            preacts.append(z)
            h = softplus(z)
        inputs.append(h)
        return h @ self.weights[-1] + self.biases[-1], (inputs, preacts)

    def vjp(self, cache, gy: np.ndarray):
        """Backward pass: returns (input cotangent, [(gW, gb) per layer])."""
        inputs, preacts = cache
        grads: list = [None] * self.n_layers
        g = gy
        grads[-1] = (inputs[-1].T @ g, g.sum(axis=0))
        g = g @ self.weights[-1].T
        for layer in range(self.n_layers - 2, -1, -1):
            g = g * sigmoid(preacts[layer])
            grads[layer] = (inputs[layer].T @ g, g.sum(axis=0))
            g = g @ self.weights[layer].T
        return g, grads


@dataclass
class ResidualParams:
    """Weights of the drift and gain networks plus the feature normalization."""

    drift: Mlp
    gain: Mlp
    feature_scale: np.ndarray  # [s_x, s_y, s_v, s_delta]

    def copy(self) -> "ResidualParams":
        return ResidualParams(
            drift=Mlp([w.copy() for w in self.drift.weights], [b.copy() for b in self.drift.biases]),
            gain=Mlp([w.copy() for w in self.gain.weights], [b.copy() for b in self.gain.biases]),
            feature_scale=self.feature_scale.copy(),
        )


@dataclass
class ParamGrads:
    """Per-parameter loss gradients, shape-congruent with ResidualParams."""

    drift: list
    gain: list


def param_tensors(params: ResidualParams) -> list:
    """Flat list of parameter arrays in a fixed traversal order."""
    out = []
    for net in (params.drift, params.gain):
        for w, b in zip(net.weights, net.biases):
            out.extend((w, b))
    return out


def grad_tensors(grads: ParamGrads) -> list:
    out = []
    for net in (grads.drift, grads.gain):
        for gw, gb in net:
            out.extend((gw, gb))
    return out


def _make_mlp(dims: list[int], rng: np.random.Generator) -> Mlp:
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if i == len(dims) - 2:
            w = np.zeros((fan_in, fan_out))  # zero output layer: residual starts at 0
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def init_params(hidden_dims, rng: np.random.Generator, cfg: VehicleConfig) -> ResidualParams:
    """Fresh model: random hidden layers, zero output layers (zero residual)."""
    hidden = list(hidden_dims)
    scale = np.array([POSITION_SCALE, POSITION_SCALE, SPEED_SCALE, cfg.delta_max])
    return ResidualParams(
        drift=_make_mlp([FEATURE_DIM] + hidden + [5], rng),
        gain=_make_mlp([FEATURE_DIM] + hidden + [10], rng),
        feature_scale=scale,
    )


def encode_features(states, scale) -> np.ndarray:
    states = np.asarray(states)
    if states.dtype.kind != "f":
        states = states.astype(np.float64)
    out = np.empty(states.shape[:-1] + (FEATURE_DIM,), dtype=states.dtype)
    out[..., 0] = states[..., 0] / scale[0]
    out[..., 1] = states[..., 1] / scale[1]
    out[..., 2] = np.sin(states[..., 2])
    out[..., 3] = np.cos(states[..., 2])
    out[..., 4] = states[..., 3] / scale[2]
    out[..., 5] = states[..., 4] / scale[3]
    return out


def _feature_vjp(states, scale, gfeat) -> np.ndarray:
    """Cotangent pullback of encode_features."""
    states = np.asarray(states)
    theta = states[..., 2]
    g = np.empty_like(states)
    g[..., 0] = gfeat[..., 0] / scale[0]
    g[..., 1] = gfeat[..., 1] / scale[1]
    g[..., 2] = gfeat[..., 2] * np.cos(theta) - gfeat[..., 3] * np.sin(theta)
    g[..., 3] = gfeat[..., 4] / scale[2]
    g[..., 4] = gfeat[..., 5] / scale[3]
    return g


def residual_derivative(params: ResidualParams, state, control) -> np.ndarray:
    """Learned correction drift(x) + gain(x) @ u; affine in the control."""
    state = np.asarray(state, dtype=np.float64)
    control = np.asarray(control, dtype=np.float64)
    feats = encode_features(state, params.feature_scale)
    drift = params.drift.forward(feats)
    gain = params.gain.forward(feats)
    g = gain.reshape(gain.shape[:-1] + (5, 2))
    return drift + np.einsum("...ij,...j->...i", g, control)


def _saturated_nominal(state, control, cfg: VehicleConfig) -> np.ndarray:
    """Bicycle field with tan(delta) saturated at the singularity guard.

    Identical to nominal_derivative wherever |delta| is inside the guard.
    """
    state = np.asarray(state)
    control = np.asarray(control)
    theta = state[..., 2]
    v = state[..., 3]
    delta = np.clip(state[..., 4], -STEER_TAN_SATURATION, STEER_TAN_SATURATION)
    out = np.empty_like(state)
    out[..., 0] = v * np.cos(theta)
    out[..., 1] = v * np.sin(theta)
    out[..., 2] = v / cfg.wheelbase * np.tan(delta)
    out[..., 3] = control[..., 0]
    out[..., 4] = control[..., 1]
    return out


def combined_derivative(params: ResidualParams, state, control, cfg: VehicleConfig) -> np.ndarray:
    """Nominal bicycle field plus the learned residual (saturated steering)."""
    state = np.asarray(state, dtype=np.float64)
    control = np.asarray(control, dtype=np.float64)
    return _saturated_nominal(state, control, cfg) + residual_derivative(params, state, control)


def predict_next(params: ResidualParams, state, control, dt: float, cfg: VehicleConfig) -> np.ndarray:
    """One RK4 step of the combined model (heading wrapped, steering clamped)."""
    return rk4_step(
        lambda s, u: combined_derivative(params, s, u, cfg), state, control, dt, cfg
    )


# ---------------------------------------------------------------------------
# training loss and exact reverse-mode gradients through the RK4 stages
# ---------------------------------------------------------------------------


def _combined_cached(params: ResidualParams, states, controls, cfg: VehicleConfig):
    """Batched combined field evaluation retaining everything backward needs."""
    feats = encode_features(states, params.feature_scale)
    drift, drift_cache = params.drift.forward_cached(feats)
    gain, gain_cache = params.gain.forward_cached(feats)
    g = gain.reshape(gain.shape[:-1] + (5, 2))
    value = _saturated_nominal(states, controls, cfg) + drift + np.einsum(
        "nij,nj->ni", g, controls
    )
    cache = (states, controls, drift_cache, gain_cache)
    return value, cache


def _combined_vjp(params: ResidualParams, cfg: VehicleConfig, cache, cot):
    """Pull a cotangent on the field value back to states and parameters."""
    states, controls, drift_cache, gain_cache = cache
    gfeat_d, drift_grads = params.drift.vjp(drift_cache, cot)
    ggain = (cot[:, :, None] * controls[:, None, :]).reshape(cot.shape[0], 10)
    gfeat_g, gain_grads = params.gain.vjp(gain_cache, ggain)
    gstate = _feature_vjp(states, params.feature_scale, gfeat_d + gfeat_g)
    # nominal-part jacobian, consistent with the saturated forward: evaluate
    # at the clipped steering angle and cut the delta column where clipped
    sat_mask = np.abs(states[:, 4]) <= STEER_TAN_SATURATION
    safe = states.copy()
    safe[:, 4] = np.clip(safe[:, 4], -STEER_TAN_SATURATION, STEER_TAN_SATURATION)
    jac = nominal_state_jacobian(safe, cfg)
    jac[:, 2, 4] *= sat_mask
    gstate += np.einsum("nij,ni->nj", jac, cot)
    return gstate, ParamGrads(drift=drift_grads, gain=gain_grads)


def _zero_grads(params: ResidualParams) -> ParamGrads:
    zeros = lambda net: [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
    return ParamGrads(drift=zeros(params.drift), gain=zeros(params.gain))


def _accumulate(total: ParamGrads, part: ParamGrads) -> None:
    for t, p in zip(grad_tensors(total), grad_tensors(part)):
        t += p


def _predict_step_cached(params, states, controls, dt, cfg):
    """RK4 step of the combined field with per-stage caches for backward."""
    k1, c1 = _combined_cached(params, states, controls, cfg)
    k2, c2 = _combined_cached(params, states + (0.5 * dt) * k1, controls, cfg)
    k3, c3 = _combined_cached(params, states + (0.5 * dt) * k2, controls, cfg)
    k4, c4 = _combined_cached(params, states + dt * k3, controls, cfg)
    raw = states + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    limit = cfg.steer_limit()
    clamp_mask = (np.abs(raw[:, 4]) <= limit).astype(raw.dtype)
    out = raw.copy()
    out[:, 2] = wrap_angle(out[:, 2])
    out[:, 4] = np.clip(out[:, 4], -limit, limit)
    return out, ((c1, c2, c3, c4), clamp_mask)


def _predict_step_vjp(params, cfg, dt, cache, g_out, grads: ParamGrads):
    """Backward through one RK4 step; returns the cotangent on the input state."""
    (c1, c2, c3, c4), clamp_mask = cache
    g_raw = g_out.copy()
    g_raw[:, 4] *= clamp_mask  # clamped outputs pass no gradient
    gk1 = (dt / 6.0) * g_raw
    gk2 = (dt / 3.0) * g_raw
    gk3 = (dt / 3.0) * g_raw
    gk4 = (dt / 6.0) * g_raw
    g_x0 = g_raw.copy()

    gs4, pg = _combined_vjp(params, cfg, c4, gk4)
    _accumulate(grads, pg)
    g_x0 += gs4
    gk3 = gk3 + dt * gs4

    gs3, pg = _combined_vjp(params, cfg, c3, gk3)
    _accumulate(grads, pg)
    g_x0 += gs3
    gk2 = gk2 + (0.5 * dt) * gs3

    gs2, pg = _combined_vjp(params, cfg, c2, gk2)
    _accumulate(grads, pg)
    g_x0 += gs2
    gk1 = gk1 + (0.5 * dt) * gs2

    gs1, pg = _combined_vjp(params, cfg, c1, gk1)
    _accumulate(grads, pg)
    g_x0 += gs1
    return g_x0


def loss_and_grad(
    params: ResidualParams,
    states,
    controls,
    next_states,
    dt: float,
    cfg: VehicleConfig,
):
    """Mean squared multi-step prediction error and its exact parameter gradients.

    ``states`` is (N, 5).  For the one-step loss ``controls`` is (N, 2) and
    ``next_states`` (N, 5); for an M-step unroll they carry an extra step axis
    (N, M, 2) / (N, M, 5) of consecutive recorded controls and states.  The
    heading component of every error is compared through the wrapped
    difference.  Returns (loss, ParamGrads).
    """
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    next_states = np.asarray(next_states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] == 0:
        raise EmptyBatch("batch must contain at least one transition")
    if controls.ndim == 2:
        controls = controls[:, None, :]
        next_states = next_states[:, None, :]
    n, m = controls.shape[0], controls.shape[1]

    # forward: unroll M prediction steps, caching stage data
    caches, errors = [], []
    s = states
    loss = 0.0
    for j in range(m):
        s, cache = _predict_step_cached(params, s, controls[:, j], dt, cfg)
        err = s - next_states[:, j]
        err[:, 2] = wrap_angle(err[:, 2])
        loss += float(np.sum(err * err))
        caches.append(cache)
        errors.append(err)
    denom = n * m
    loss /= denom

    # backward: walk the unroll in reverse, folding in each step's error term
    grads = _zero_grads(params)
    g_state = np.zeros_like(states)
    for j in range(m - 1, -1, -1):
        g_out = g_state + (2.0 / denom) * errors[j]
        g_state = _predict_step_vjp(params, cfg, dt, caches[j], g_out, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# fast batched field evaluation for MPPI rollouts
# ---------------------------------------------------------------------------


def _softplus_inplace(z: np.ndarray, tmp: np.ndarray) -> None:
    np.abs(z, out=tmp)
    np.negative(tmp, out=tmp)
    np.exp(tmp, out=tmp)
    np.log1p(tmp, out=tmp)
    np.maximum(z, 0.0, out=z)
    z += tmp


def make_rollout_derivative(params: ResidualParams | None, cfg: VehicleConfig, dtype=np.float64):
    """Batched ``dyn(states, controls) -> derivatives`` closure for rollouts.

    With ``params=None`` only the nominal bicycle field is evaluated.  The
    steering nonlinearity saturates at the singularity guard (see
    STEER_TAN_SATURATION), so extreme sampled rollouts cost much and weigh
    nothing instead of aborting the control step.  Network weights are
    pre-cast to ``dtype`` and hidden-layer scratch buffers are reused across
    calls, which keeps the per-step cost dominated by the matrix products.
    """
    dtype = np.dtype(dtype)
    sat = dtype.type(STEER_TAN_SATURATION)
    wheelbase = float(cfg.wheelbase)

    if params is not None:
        drift_w = [w.astype(dtype) for w in params.drift.weights]
        drift_b = [b.astype(dtype) for b in params.drift.biases]
        gain_w = [w.astype(dtype) for w in params.gain.weights]
        gain_b = [b.astype(dtype) for b in params.gain.biases]
        scale = params.feature_scale.astype(dtype)
        scratch: dict = {}

    def _mlp_fast(ws, bs, x, bufs):
        # bufs: one (k, width) hidden buffer per hidden layer, one shared tmp,
        # one output buffer; everything written in place
        h = x
        for i in range(len(ws) - 1):
            z = np.matmul(h, ws[i], out=bufs[i])
            z += bs[i]
            _softplus_inplace(z, bufs[-2][:, : z.shape[1]])
            h = z
        out = np.matmul(h, ws[-1], out=bufs[-1])
        out += bs[-1]
        return out

    def dyn(states, controls):
        squeeze = states.ndim == 1
        if squeeze:
            states = states[None]
            controls = np.asarray(controls)[None]
        theta = states[..., 2]
        v = states[..., 3]
        delta = states[..., 4]
        out = np.empty_like(states)
        out[..., 0] = v * np.cos(theta)
        out[..., 1] = v * np.sin(theta)
        out[..., 2] = v / wheelbase * np.tan(np.clip(delta, -sat, sat))
        out[..., 3] = controls[..., 0]
        out[..., 4] = controls[..., 1]
        if params is None:
            return out[0] if squeeze else out

        k = states.shape[0]
        bufs = scratch.get(k)
        if bufs is None:
            widest = max(w.shape[1] for w in drift_w[:-1]) if len(drift_w) > 1 else 1
            tmp = np.empty((k, widest), dtype=dtype)
            make = lambda ws: [np.empty((k, w.shape[1]), dtype=dtype) for w in ws[:-1]] + [
                tmp,
                np.empty((k, ws[-1].shape[1]), dtype=dtype),
            ]
            bufs = {
                "feats": np.empty((k, FEATURE_DIM), dtype=dtype),
                "drift": make(drift_w),
                "gain": make(gain_w),
            }
            scratch[k] = bufs
        feats = bufs["feats"]
        feats[..., 0] = states[..., 0] / scale[0]
        feats[..., 1] = states[..., 1] / scale[1]
        np.sin(theta, out=feats[..., 2])
        np.cos(theta, out=feats[..., 3])
        feats[..., 4] = v / scale[2]
        feats[..., 5] = delta / scale[3]
        drift = _mlp_fast(drift_w, drift_b, feats, bufs["drift"])
        gain = _mlp_fast(gain_w, gain_b, feats, bufs["gain"])
        out += drift
        # gain rows are (5, 2) row-major: even entries multiply a, odd entries omega
        out += gain[..., 0::2] * controls[..., 0, None]
        out += gain[..., 1::2] * controls[..., 1, None]
        return out[0] if squeeze else out

    return dyn


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ResidualParams) -> None:
    """Versioned binary checkpoint; arrays are stored exactly (bit round-trip)."""
    arrays = {"feature_scale": params.feature_scale}
    for name, net in (("drift", params.drift), ("gain", params.gain)):
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{name}_w{i}"] = w
            arrays[f"{name}_b{i}"] = b
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "drift_layers": params.drift.n_layers,
        "gain_layers": params.gain.n_layers,
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=json.dumps(meta, sort_keys=True), **arrays)


def load_checkpoint(path) -> ResidualParams:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        nets = {}
        for name in ("drift", "gain"):
            n = meta[f"{name}_layers"]
            nets[name] = Mlp(
                weights=[data[f"{name}_w{i}"] for i in range(n)],
                biases=[data[f"{name}_b{i}"] for i in range(n)],
            )
        return ResidualParams(
            drift=nets["drift"], gain=nets["gain"], feature_scale=data["feature_scale"]
        )
