"""Iterative residual-model training with data aggregation.

The loop alternates between collecting transitions and refitting the model:
iteration 0 excites the disturbed plant with random controls, later
iterations run the path-tracking controller with the current model and record
the on-policy transitions.  Both sources accumulate in one replay buffer, so
the model stays anchored on broad-excitation data while sharpening on the
states the task actually visits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import icode
from .dynamics import DisturbanceConfig, VehicleConfig, clamp_control, plant_step, rk4_step, nominal_derivative, wrap_angle
from .streams import RANDOM_COLLECT, TRAIN_SHUFFLE, substream


class EmptyBuffer(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class Transition:
    """One recorded plant step (x_t, u_t, x_{t+1}) with its sample time."""

    state: np.ndarray
    control: np.ndarray
    next_state: np.ndarray
    dt: float
    source: str  # "random" | "task"
    time: float


@dataclass
class ReplayBuffer:
    """Append-only transition store with oldest-first eviction."""

    capacity: int
    transitions: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.transitions)


def aggregate(buffer: ReplayBuffer, new: list) -> ReplayBuffer:
    """Append transitions, evicting the oldest beyond capacity."""
    merged = buffer.transitions + list(new)
    if len(merged) > buffer.capacity:
        merged = merged[len(merged) - buffer.capacity :]
    return ReplayBuffer(capacity=buffer.capacity, transitions=merged)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 64
    epochs_per_iter: int = 200
    n_random: int = 2000
    task_episodes_per_iter: int = 2
    n_iterations: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    holdout_fraction: float = 0.1
    capacity: int = 50000
    hidden_dims: tuple = (256, 256)
    unroll_steps: int = 1

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size >= 1")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("0 <= holdout_fraction < 1")
        if self.n_iterations < 0 or self.epochs_per_iter < 1 or self.n_random < 1:
            raise ValueError("counts must be positive (n_iterations >= 0)")
        if self.unroll_steps < 1:
            raise ValueError("unroll_steps >= 1")


@dataclass
class AdamState:
    """First/second-moment accumulators, one pair per parameter tensor."""

    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params: icode.ResidualParams) -> "AdamState":
        tensors = icode.param_tensors(params)
        return cls(m=[np.zeros_like(t) for t in tensors], v=[np.zeros_like(t) for t in tensors])


def adam_step(
    params: icode.ResidualParams,
    grads: icode.ParamGrads,
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[icode.ResidualParams, AdamState]:
    """Standard bias-corrected Adam update; returns fresh params and state."""
    p_tensors = icode.param_tensors(params)
    g_tensors = icode.grad_tensors(grads)
    if len(p_tensors) != len(g_tensors):
        raise ShapeMismatch("gradient structure does not match parameters")
    out = params.copy()
    o_tensors = icode.param_tensors(out)
    t = state.step + 1
    new_m, new_v = [], []
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for p, g, m, v, dst in zip(p_tensors, g_tensors, state.m, state.v, o_tensors):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        dst -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m.append(m)
        new_v.append(v)
    return out, AdamState(m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------------------
# data collection
# ---------------------------------------------------------------------------

RANDOM_HOLD_STEPS = 10
RANDOM_EPISODE_STEPS = 50
SPEED_BOUND = 6.0
POSITION_MARGIN = 5.0
TIME_PHASE_SPAN = 60.0


def _random_initial_state(rng, bounds, cfg: VehicleConfig) -> np.ndarray:
    (xmin, xmax), (ymin, ymax) = bounds
    return np.array(
        [
            rng.uniform(xmin, xmax),
            rng.uniform(ymin, ymax),
            rng.uniform(-np.pi, np.pi),
            rng.uniform(0.0, 4.0),
            rng.uniform(-0.3, 0.3),
        ]
    )


def collect_random(
    vcfg: VehicleConfig,
    dist: DisturbanceConfig,
    n: int,
    seed: int,
    position_bounds=((-25.0, 25.0), (-25.0, 25.0)),
) -> list:
    """Excite the disturbed plant with piecewise-constant uniform controls.

    Episodes start from randomized states and a randomized disturbance phase
    (start time uniform over one phase span), reset after a fixed step budget
    or when speed or position leaves the operating envelope, and stop once
    exactly ``n`` transitions are recorded.
    """
    rng = substream(seed, RANDOM_COLLECT)
    (xmin, xmax), (ymin, ymax) = position_bounds
    exit_x = (xmin - 2 * POSITION_MARGIN, xmax + 2 * POSITION_MARGIN)
    exit_y = (ymin - 2 * POSITION_MARGIN, ymax + 2 * POSITION_MARGIN)
    out: list = []
    while len(out) < n:
        state = _random_initial_state(rng, position_bounds, vcfg)
        t = rng.uniform(0.0, TIME_PHASE_SPAN)
        control = np.zeros(2)
        for step in range(RANDOM_EPISODE_STEPS):
            if len(out) >= n:
                break
            if step % RANDOM_HOLD_STEPS == 0:
                control = np.array(
                    [rng.uniform(-vcfg.a_max, vcfg.a_max), rng.uniform(-vcfg.omega_max, vcfg.omega_max)]
                )
            u = clamp_control(control, vcfg)
            nxt = plant_step(state, u, t, vcfg, dist)
            out.append(
                Transition(state=state, control=u, next_state=nxt, dt=vcfg.dt, source="random", time=t)
            )
            state = nxt
            t += vcfg.dt
            if abs(state[3]) > SPEED_BOUND:
                break
            if not (exit_x[0] <= state[0] <= exit_x[1] and exit_y[0] <= state[1] <= exit_y[1]):
                break
    return out


def collect_task(run_episode_fn, n_episodes: int) -> list:
    """On-policy transitions from closed-loop tracking episodes.

    ``run_episode_fn(episode_index)`` runs one episode with the current model
    and returns (times, states, controls); episodes are re-tagged as task
    transitions here so the caller stays free of buffer concerns.
    """
    out: list = []
    for ep in range(n_episodes):
        times, states, controls = run_episode_fn(ep)
        for i in range(len(controls)):
            out.append(
                Transition(
                    state=states[i],
                    control=np.asarray(controls[i], dtype=float),
                    next_state=states[i + 1],
                    dt=float(times[1] - times[0]),
                    source="task",
                    time=float(times[i]),
                )
            )
    return out


# ---------------------------------------------------------------------------
# batch assembly and the optimization loop
# ---------------------------------------------------------------------------


def build_windows(transitions: list, unroll_steps: int):
    """Stack transitions into (states, controls, next_states) training arrays.

    For multi-step unrolls only runs of consecutive transitions (matching
    next_state/state and sample times) form windows; one-step training uses
    every transition.
    """
    if unroll_steps == 1:
        states = np.stack([tr.state for tr in transitions])
        controls = np.stack([tr.control for tr in transitions])
        next_states = np.stack([tr.next_state for tr in transitions])
        return states, controls, next_states
    windows_s, windows_u, windows_n = [], [], []
    m = unroll_steps
    for start in range(len(transitions) - m + 1):
        run = transitions[start : start + m]
        ok = all(
            np.array_equal(run[j].next_state, run[j + 1].state)
            and abs(run[j].time + run[j].dt - run[j + 1].time) < 1e-9
            and run[j].source == run[j + 1].source
            for j in range(m - 1)
        )
        if not ok:
            continue
        windows_s.append(run[0].state)
        windows_u.append(np.stack([tr.control for tr in run]))
        windows_n.append(np.stack([tr.next_state for tr in run]))
    if not windows_s:
        raise EmptyBuffer(f"no runs of {m} consecutive transitions in the buffer")
    return np.stack(windows_s), np.stack(windows_u), np.stack(windows_n)


def holdout_split(transitions: list, fraction: float, rng: np.random.Generator):
    """Deterministic train/holdout split, stratified by source tag."""
    if fraction == 0.0:
        return list(transitions), []
    train: list = []
    held: list = []
    for tag in ("random", "task"):
        group = [tr for tr in transitions if tr.source == tag]
        if not group:
            continue
        n_hold = int(round(fraction * len(group)))
        perm = rng.permutation(len(group))
        hold_idx = set(perm[:n_hold].tolist())
        for i, tr in enumerate(group):
            (held if i in hold_idx else train).append(tr)
    return train, held


def prediction_mse(params: icode.ResidualParams | None, transitions: list, vcfg: VehicleConfig) -> float:
    """Mean squared one-step prediction error of the combined (or nominal) model."""
    if not transitions:
        raise EmptyBuffer("no transitions to evaluate")
    states, controls, next_states = build_windows(transitions, 1)
    dt = transitions[0].dt
    if params is None:
        pred = rk4_step(
            lambda s, u: nominal_derivative(s, u, vcfg), states, controls, dt, vcfg
        )
    else:
        pred = icode.predict_next(params, states, controls, dt, vcfg)
    err = pred - next_states
    err[:, 2] = wrap_angle(err[:, 2])
    return float(np.mean(np.sum(err * err, axis=1)))


def train_iteration(
    params: icode.ResidualParams,
    buffer: ReplayBuffer,
    cfg: TrainConfig,
    vcfg: VehicleConfig,
    seed: int,
    iteration: int,
    adam: AdamState | None = None,
):
    """Epochs of shuffled mini-batch Adam on the buffer; holdout scored at the end.

    Returns (params, adam_state, train_loss_curve, holdout_loss).  The holdout
    split is stratified by source tag and excluded from every batch; with an
    empty holdout the final training loss is reported instead.
    """
    if len(buffer) == 0:
        raise EmptyBuffer("replay buffer is empty")
    cfg.validate()
    rng = substream(seed, TRAIN_SHUFFLE, iteration)
    train_set, held_set = holdout_split(buffer.transitions, cfg.holdout_fraction, rng)
    if not train_set:
        raise EmptyBuffer("holdout split left no training data")
    states, controls, next_states = build_windows(train_set, cfg.unroll_steps)
    dt = train_set[0].dt
    n = len(states)
    adam = AdamState.for_params(params) if adam is None else adam
    loss_curve = []
    for _ in range(cfg.epochs_per_iter):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            loss, grads = icode.loss_and_grad(
                params, states[sel], controls[sel], next_states[sel], dt, vcfg
            )
            params, adam = adam_step(params, grads, adam, cfg)
            epoch_loss += loss * len(sel)
        loss_curve.append(epoch_loss / n)
    if held_set:
        holdout_loss = prediction_mse(params, held_set, vcfg)
    else:
        holdout_loss = loss_curve[-1]
    return params, adam, loss_curve, holdout_loss, held_set


def run_training_loop(
    vcfg: VehicleConfig,
    dist: DisturbanceConfig,
    tcfg: TrainConfig,
    seed: int,
    task_runner,
    checkpoint_fn=None,
    position_bounds=((-25.0, 25.0), (-25.0, 25.0)),
):
    """Full data-aggregation loop: collect, aggregate, retrain, redeploy.

    Iteration 0 fills the buffer with random-excitation data and fits the
    first model; each later iteration collects task episodes with the current
    model via ``task_runner(params, iteration, episode) -> (times, states,
    controls)``, aggregates, and retrains.  ``checkpoint_fn(iteration,
    params)``, when given, persists the model after every iteration.

    Returns (final params, per-iteration metric rows).  With zero iterations
    the freshly initialized zero-residual model is returned untouched and a
    single degenerate row is logged.
    """
    from .streams import PARAM_INIT

    tcfg.validate()
    params = icode.init_params(tcfg.hidden_dims, substream(seed, PARAM_INIT), vcfg)
    rows: list[dict] = []
    if tcfg.n_iterations == 0:
        if checkpoint_fn is not None:
            checkpoint_fn(0, params)
        rows.append(
            {
                "iteration": 0,
                "buffer_size": 0,
                "train_loss_final": float("nan"),
                "holdout_loss_combined": float("nan"),
                "holdout_loss_nominal": float("nan"),
            }
        )
        return params, rows

    buffer = ReplayBuffer(capacity=tcfg.capacity)
    for iteration in range(tcfg.n_iterations + 1):
        if iteration == 0:
            new = collect_random(vcfg, dist, tcfg.n_random, seed, position_bounds)
        else:
            new = collect_task(
                lambda ep: task_runner(params, iteration, ep), tcfg.task_episodes_per_iter
            )
        buffer = aggregate(buffer, new)
        params, _, loss_curve, holdout_loss, held_set = train_iteration(
            params, buffer, tcfg, vcfg, seed, iteration
        )
        nominal_loss = prediction_mse(None, held_set, vcfg) if held_set else float("nan")
        rows.append(
            {
                "iteration": iteration,
                "buffer_size": len(buffer),
                "train_loss_final": loss_curve[-1],
                "holdout_loss_combined": holdout_loss,
                "holdout_loss_nominal": nominal_loss,
            }
        )
        if checkpoint_fn is not None:
            checkpoint_fn(iteration, params)
    return params, rows
