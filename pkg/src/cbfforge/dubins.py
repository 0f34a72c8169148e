"""Dubins car testbed: dynamics, failure margins, nominal policy, rollouts.

States are numpy arrays ``[x, y, theta]`` (batches are ``(n, 3)``).  The car
moves at unit speed, the action is the turn rate in [-2, 2], integration is
RK4 with dt = 0.1 by default.  Positions are clamped to the workspace box
[-1.5, 1.5]^2 after every step and theta is wrapped to [-pi, pi).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

XY_BOUND = 1.5
ACTION_BOUND = 2.0
DEFAULT_DT = 0.1

# An executed action counts as an override of the nominal one when the two
# differ by at least this much.
OVERRIDE_THRESHOLD = 1e-9


@dataclass(frozen=True)
class FailureSpec:
    """Failure set: union of circles, each (center_x, center_y, radius)."""

    circles: tuple[tuple[float, float, float], ...] = (
        (0.25, 0.65, 0.5),
        (0.25, -0.65, 0.5),
    )

    def __post_init__(self) -> None:
        if not self.circles or any(r <= 0 for _, _, r in self.circles):
            raise ValueError("failure circles need positive radii")


DEFAULT_FAILURE = FailureSpec()


def wrap_angle(theta):
    """Wrap angles to [-pi, pi); array-aware."""
    return np.mod(theta + np.pi, 2.0 * np.pi) - np.pi


def equispaced_actions(n: int = 25) -> np.ndarray:
    """n equally spaced turn rates spanning [-2, 2], endpoints included.

    This is the shared action discretization: the grid solver maximizes over
    it and the action filter samples it (plus the nominal and fallback
    anchors).
    """
    if n < 2:
        raise ValueError("need at least two actions to span the range")
    return np.linspace(-ACTION_BOUND, ACTION_BOUND, n)


def state_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Distance between states with geodesic (wrapped) angular component."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d_xy = a[..., :2] - b[..., :2]
    d_th = wrap_angle(a[..., 2] - b[..., 2])
    return np.sqrt(np.sum(d_xy * d_xy, axis=-1) + d_th * d_th)


def _validate_actions(actions: np.ndarray) -> None:
    if not np.all(np.isfinite(actions)):
        raise ValueError("non-finite action")
    if np.any(np.abs(actions) > ACTION_BOUND + 1e-12):
        raise ValueError(f"turn rate outside [-{ACTION_BOUND}, {ACTION_BOUND}]")


def dynamics_step_batch(states: np.ndarray, actions, dt: float = DEFAULT_DT) -> np.ndarray:
    """RK4 step of (cos theta, sin theta, a) for a batch of states.

    Args:
        states: (n, 3) array of [x, y, theta].
        actions: scalar or (n,) turn rates in [-2, 2].
        dt: positive step length.

    Returns:
        (n, 3) successor states, positions clamped and theta wrapped.
    """
    states = np.asarray(states, dtype=float)
    actions = np.broadcast_to(np.asarray(actions, dtype=float), states.shape[:-1])
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not np.all(np.isfinite(states)):
        raise ValueError("non-finite state")
    _validate_actions(actions)

    theta = states[..., 2]
    # theta evolves linearly (theta_dot = a), so the RK4 stage angles are exact.
    t1 = theta
    t2 = theta + 0.5 * dt * actions
    t4 = theta + dt * actions
    dx = (np.cos(t1) + 4.0 * np.cos(t2) + np.cos(t4)) / 6.0
    dy = (np.sin(t1) + 4.0 * np.sin(t2) + np.sin(t4)) / 6.0

    out = np.empty_like(states)
    out[..., 0] = np.clip(states[..., 0] + dt * dx, -XY_BOUND, XY_BOUND)
    out[..., 1] = np.clip(states[..., 1] + dt * dy, -XY_BOUND, XY_BOUND)
    out[..., 2] = wrap_angle(theta + dt * actions)
    return out


def dynamics_step(state: np.ndarray, action: float, dt: float = DEFAULT_DT) -> np.ndarray:
    """RK4 step for a single state (3,); see dynamics_step_batch."""
    return dynamics_step_batch(np.asarray(state, dtype=float)[None, :], action, dt)[0]


def signed_distance_margin(states: np.ndarray, spec: FailureSpec = DEFAULT_FAILURE):
    """Signed distance to the failure set: min over circles of (dist - r).

    Negative inside a circle.  Accepts a single state (3,) or a batch (n, 3);
    theta is ignored.
    """
    states = np.asarray(states, dtype=float)
    single = states.ndim == 1
    pts = states[None, :2] if single else states[..., :2]
    margins = np.full(pts.shape[0], np.inf)
    for cx, cy, r in spec.circles:
        d = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) - r
        margins = np.minimum(margins, d)
    return float(margins[0]) if single else margins


@dataclass
class NominalPolicyConfig:
    """Scripted proportional goal-seeking controller.

    obstacle_blind steers straight at the goal; obstacle_aware adds a
    repulsive heading away from nearby failure circles.  Gaussian heading
    noise (noise_std, in action units) makes the policy multimodal around
    the obstacles.
    """

    goal: tuple[float, float] = (1.3, 0.0)
    gain: float = 2.0
    mode: str = "obstacle_blind"
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.mode not in ("obstacle_blind", "obstacle_aware"):
            raise ValueError(f"unknown nominal policy mode {self.mode!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def nominal_policy(
    state: np.ndarray,
    cfg: NominalPolicyConfig,
    rng: np.random.Generator | None = None,
    failure: FailureSpec = DEFAULT_FAILURE,
) -> float:
    """Proportional heading controller toward cfg.goal, clamped to [-2, 2].

    With rng None the deterministic part of the policy is returned even if
    noise_std > 0; rollout harnesses pass a per-rollout generator.
    """
    x, y, theta = float(state[0]), float(state[1]), float(state[2])
    gx, gy = cfg.goal
    to_goal = np.array([gx - x, gy - y])
    heading = to_goal / max(np.linalg.norm(to_goal), 1e-9)

    if cfg.mode == "obstacle_aware":
        # Push the desired heading away from any circle we are about to graze.
        influence = 0.45
        for cx, cy, r in failure.circles:
            away = np.array([x - cx, y - cy])
            dist = np.linalg.norm(away)
            margin = dist - r
            if margin < influence:
                weight = 2.0 * (influence - max(margin, 0.0)) / influence
                heading = heading + weight * away / max(dist, 1e-9)
        heading = heading / max(np.linalg.norm(heading), 1e-9)

    err = wrap_angle(np.arctan2(heading[1], heading[0]) - theta)
    a = cfg.gain * err
    if cfg.noise_std > 0 and rng is not None:
        a += cfg.noise_std * rng.standard_normal()
    return float(np.clip(a, -ACTION_BOUND, ACTION_BOUND))


def sample_initial_states(rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Uniform draw from the initial-condition box x in [-1.5, -1],
    y in [-1, 1], theta in [-pi/3, pi/3]."""
    out = np.empty((n, 3))
    out[:, 0] = rng.uniform(-1.5, -1.0, size=n)
    out[:, 1] = rng.uniform(-1.0, 1.0, size=n)
    out[:, 2] = rng.uniform(-np.pi / 3.0, np.pi / 3.0, size=n)
    return out


@dataclass
class TrajectoryRecord:
    """One executed episode.

    states has one more entry than the action arrays; margin_values holds the
    true signed-distance margin at every visited state.  diagnostics carries
    optional per-step filter columns (feasible_count, q_nominal, q_fallback).
    """

    states: np.ndarray
    actions_nominal: np.ndarray
    actions_executed: np.ndarray
    margin_values: np.ndarray
    collided: bool
    override_magnitudes: np.ndarray
    diagnostics: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.actions_executed.shape[0]


def rollout(
    policy,
    x0: np.ndarray,
    n_steps: int,
    action_filter=None,
    failure: FailureSpec = DEFAULT_FAILURE,
    dt: float = DEFAULT_DT,
) -> TrajectoryRecord:
    """Execute a policy for n_steps or until the state enters the failure set.

    Args:
        policy: callable state -> nominal action.
        x0: initial state (3,).
        n_steps: cap on executed steps, >= 1.
        action_filter: optional callable (state, a_nominal) -> decision.  The
            decision is either a plain action or an object with an ``action``
            attribute plus feasible_count / q_nominal / q_fallback fields,
            which are then recorded per step.
        failure: failure circles used for collision accounting.
        dt: integrator step.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    state = np.asarray(x0, dtype=float).copy()
    states = [state.copy()]
    margins = [signed_distance_margin(state, failure)]
    a_nom_hist, a_exec_hist = [], []
    diag_hist: list[tuple[int, float, float]] = []
    has_diag = False
    collided = margins[0] < 0.0

    for _ in range(n_steps):
        if collided:
            break
        a_nom = float(policy(state))
        if action_filter is None:
            a_exec = a_nom
        else:
            decision = action_filter(state, a_nom)
            if hasattr(decision, "action"):
                a_exec = float(decision.action)
                diag_hist.append(
                    (int(decision.feasible_count), float(decision.q_nominal), float(decision.q_fallback))
                )
                has_diag = True
            else:
                a_exec = float(decision)
        state = dynamics_step(state, a_exec, dt)
        states.append(state.copy())
        margins.append(signed_distance_margin(state, failure))
        a_nom_hist.append(a_nom)
        a_exec_hist.append(a_exec)
        if margins[-1] < 0.0:
            collided = True

    a_nom_arr = np.array(a_nom_hist)
    a_exec_arr = np.array(a_exec_hist)
    diagnostics: dict[str, np.ndarray] = {}
    if has_diag:
        diag_arr = np.array(diag_hist)
        diagnostics = {
            "feasible_count": diag_arr[:, 0],
            "q_nominal": diag_arr[:, 1],
            "q_fallback": diag_arr[:, 2],
        }
    return TrajectoryRecord(
        states=np.array(states),
        actions_nominal=a_nom_arr,
        actions_executed=a_exec_arr,
        margin_values=np.array(margins),
        collided=bool(collided),
        override_magnitudes=np.abs(a_exec_arr - a_nom_arr),
        diagnostics=diagnostics,
    )


def save_trajectory_csv(record: TrajectoryRecord, path: str) -> None:
    """Write one row per executed step: t,x,y,theta,a_nom,a_exec,margin,
    overridden, plus filter diagnostic columns when present.

    The margin column is the margin at the pre-step state; the terminal
    state's margin lives only in the record.
    """
    extra = [k for k in ("feasible_count", "q_nominal", "q_fallback") if k in record.diagnostics]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "y", "theta", "a_nom", "a_exec", "margin", "overridden"] + extra)
        for t in range(record.n_steps):
            x, y, theta = record.states[t]
            overridden = int(record.override_magnitudes[t] >= OVERRIDE_THRESHOLD)
            row = [
                t,
                "%.17g" % x,
                "%.17g" % y,
                "%.17g" % theta,
                "%.17g" % record.actions_nominal[t],
                "%.17g" % record.actions_executed[t],
                "%.17g" % record.margin_values[t],
                overridden,
            ]
            row += ["%.17g" % record.diagnostics[k][t] for k in extra]
            writer.writerow(row)


def estimate_dynamics_lipschitz(
    dt: float = DEFAULT_DT,
    n_samples: int = 1000,
    perturbation: float = 1e-4,
    seed: int = 0,
    step_fn=None,
) -> float:
    """Empirical Lipschitz constant of the one-step dynamics in the state.

    Samples (state, action, unit direction) triples and returns the largest
    ratio ||f(s + h d, a) - f(s, a)|| / h, with the angular component of both
    the perturbation and the distance taken geodesically.

    Args:
        dt: integrator step for the default dynamics.
        n_samples: number of sampled triples, >= 1000 for the reported figure.
        perturbation: finite-difference step h.
        seed: RNG seed; the reference figure is the seed-0 run.
        step_fn: override (state, action) -> state, e.g. toy dynamics in tests.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if step_fn is None:
        step_fn = lambda s, a: dynamics_step(s, a, dt)
    rng = np.random.default_rng(seed)
    states = np.empty((n_samples, 3))
    states[:, 0] = rng.uniform(-XY_BOUND, XY_BOUND, size=n_samples)
    states[:, 1] = rng.uniform(-XY_BOUND, XY_BOUND, size=n_samples)
    states[:, 2] = rng.uniform(-np.pi, np.pi, size=n_samples)
    actions = rng.uniform(-ACTION_BOUND, ACTION_BOUND, size=n_samples)
    dirs = rng.standard_normal(size=(n_samples, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    worst = 0.0
    for s, a, d in zip(states, actions, dirs):
        s_pert = s + perturbation * d
        s_pert[2] = wrap_angle(s_pert[2])
        dist = state_distance(step_fn(s_pert, a), step_fn(s, a))
        worst = max(worst, float(dist) / perturbation)
    return worst
