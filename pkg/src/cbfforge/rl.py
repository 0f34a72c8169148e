"""Actor-critic training of the safety Q-function with a mixed replay buffer.

The critic regresses the discounted safety backup

    y = (1 - gamma) * l + gamma * min(l, Q_target(z', pi_target(z')))

over transitions (z, a, l, z', a') collected through the true dynamics,
where l = tanh(margin(z)) keeps labels bounded and the bootstrap action is
the target actor's choice at z', so the critic scores any action by the
safety of following the fallback policy afterwards.  Episodes come from
the learned fallback actor or, with a per-episode fair coin, from the
nominal task policy; the nominal episodes widen the visited action
distribution so the critic stays accurate on the task-relevant actions a
runtime filter will ask about.  The actor ascends the critic.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .dubins import (
    ACTION_BOUND,
    DEFAULT_DT,
    XY_BOUND,
    NominalPolicyConfig,
    dynamics_step,
    nominal_policy,
)
from .filters import actor_action
from .hj import GridField, q_from_value
from .nets import (
    AdamState,
    MlpNet,
    adam_step,
    input_gradient,
    mlp_forward,
    mlp_init,
    param_gradient,
    save_model,
)

SOURCE_FALLBACK = 0
SOURCE_NOMINAL = 1
DIVERGENCE_LIMIT = 1e3
CHECKPOINT_EVERY = 10000


@dataclass(frozen=True)
class RlConfig:
    """Hyperparameters of the safety actor-critic.

    iterations defaults to a desk-scale 40000; the full-scale 120000 budget
    is available through the same field.  exploration_std anneals linearly
    to exploration_std_final over the run and perturbs fallback actions
    only.  mix_nominal toggles the per-episode coin between the nominal and
    fallback behavior policies.
    """

    gamma: float = 0.995
    critic_lr: float = 3e-4
    actor_lr: float = 1e-4
    batch_size: int = 512
    buffer_capacity: int = 100000
    iterations: int = 40000
    episode_len: int = 8
    actor_dims: tuple = (512, 512, 512)
    critic_dims: tuple = (512, 512, 512)
    tau: float = 0.005
    exploration_std: float = 0.3
    exploration_std_final: float = 0.05
    mix_nominal: bool = True
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("critic_lr", "actor_lr", "tau"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "buffer_capacity", "iterations", "episode_len", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.exploration_std < 0.0 or self.exploration_std_final < 0.0:
            raise ValueError("exploration noise levels must be non-negative")
        if min(len(self.actor_dims), len(self.critic_dims)) < 1:
            raise ValueError("actor and critic need at least one hidden layer")


@dataclass
class Transition:
    """One stored step: state, action, bounded margin label, successor,
    successor action from the same behavior policy, and that policy's tag."""

    z: np.ndarray
    a: float
    l: float
    z_next: np.ndarray
    a_next: float
    source: int


class ReplayBuffer:
    """Fixed-capacity FIFO transition store with per-source counters."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.z = np.zeros((capacity, 3))
        self.a = np.zeros(capacity)
        self.l = np.zeros(capacity)
        self.z_next = np.zeros((capacity, 3))
        self.a_next = np.zeros(capacity)
        self.source = np.zeros(capacity, dtype=np.int8)
        self._next = 0
        self._size = 0
        self.source_counts = {SOURCE_FALLBACK: 0, SOURCE_NOMINAL: 0}

    def __len__(self) -> int:
        return self._size

    def add(self, tr: Transition) -> None:
        i = self._next
        if self._size == self.capacity:
            self.source_counts[int(self.source[i])] -= 1
        self.z[i] = tr.z
        self.a[i] = tr.a
        self.l[i] = tr.l
        self.z_next[i] = tr.z_next
        self.a_next[i] = tr.a_next
        self.source[i] = tr.source
        self.source_counts[tr.source] += 1
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def nominal_fraction(self) -> float:
        if self._size == 0:
            return 0.0
        return self.source_counts[SOURCE_NOMINAL] / self._size

    def sample(self, rng: np.random.Generator, batch_size: int) -> dict:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        return {
            "z": self.z[idx],
            "a": self.a[idx],
            "l": self.l[idx],
            "z_next": self.z_next[idx],
            "a_next": self.a_next[idx],
            "source": self.source[idx],
        }


def _as_margin_fn(margin_net):
    """Accept a trained net or any batched callable as the margin source."""
    if isinstance(margin_net, MlpNet):
        return lambda pts: mlp_forward(margin_net, np.atleast_2d(pts))[:, 0]
    return lambda pts: np.atleast_1d(np.asarray(margin_net(np.atleast_2d(pts)), dtype=float))


def _reset_state(rng: np.random.Generator) -> np.ndarray:
    """Uniform draw over the full state box."""
    return np.array(
        [
            rng.uniform(-XY_BOUND, XY_BOUND),
            rng.uniform(-XY_BOUND, XY_BOUND),
            rng.uniform(-np.pi, np.pi),
        ]
    )


def collect_episode(
    actor: MlpNet,
    nominal_cfg: NominalPolicyConfig,
    margin_net,
    buffer: ReplayBuffer,
    cfg: RlConfig,
    rng: np.random.Generator,
    exploration_std: float | None = None,
    dt: float = DEFAULT_DT,
) -> list[Transition]:
    """Roll one episode through the true dynamics and append its transitions.

    A fair coin picks the behavior policy for the whole episode (nominal
    task policy vs fallback actor) when cfg.mix_nominal is set; otherwise
    every episode is fallback-driven.  Fallback actions receive clipped
    Gaussian exploration noise; nominal actions are stored as produced.
    Labels are l = tanh(margin(z)); the stored a' of each step is the action
    the same policy takes at the successor.

    Args:
        actor: current fallback actor (tanh head).
        nominal_cfg: nominal task policy parameters.
        margin_net: margin net or batched callable state -> margin.
        buffer: destination buffer.
        cfg: supplies episode_len, mix_nominal, exploration_std.
        rng: generator driving resets, the coin, and the noise.
        exploration_std: override of cfg.exploration_std (the trainer passes
            the annealed value).
        dt: integrator step.

    Returns:
        The list of transitions appended, in time order.
    """
    sigma = cfg.exploration_std if exploration_std is None else float(exploration_std)
    margin_fn = _as_margin_fn(margin_net)
    use_nominal = bool(cfg.mix_nominal) and rng.random() < 0.5
    source = SOURCE_NOMINAL if use_nominal else SOURCE_FALLBACK

    def behavior(state: np.ndarray) -> float:
        if use_nominal:
            return float(nominal_policy(state, nominal_cfg))
        a = actor_action(actor, state)
        if sigma > 0.0:
            a += sigma * rng.standard_normal()
        return float(np.clip(a, -ACTION_BOUND, ACTION_BOUND))

    state = _reset_state(rng)
    action = behavior(state)
    out: list[Transition] = []
    for _ in range(cfg.episode_len):
        succ = dynamics_step(state, action, dt)
        action_next = behavior(succ)
        label = float(np.tanh(margin_fn(state)[0]))
        tr = Transition(
            z=state.copy(), a=action, l=label, z_next=succ.copy(), a_next=action_next, source=source
        )
        buffer.add(tr)
        out.append(tr)
        state, action = succ, action_next
    return out


def _critic_features(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.hstack([np.atleast_2d(states), np.atleast_1d(actions)[:, None]])


def soft_update(target: MlpNet, source: MlpNet, tau: float) -> None:
    """In-place Polyak blend target <- (1 - tau) * target + tau * source."""
    for t, s in zip(target.weights + target.biases, source.weights + source.biases):
        t *= 1.0 - tau
        t += tau * s


def critic_update(
    critic: MlpNet,
    target_critic: MlpNet,
    target_actor: MlpNet,
    batch: dict,
    cfg: RlConfig,
    opt: AdamState | None = None,
) -> float:
    """One supervised step of the critic toward the discounted safety backup.

    The target y = (1-gamma) l + gamma min(l, Q_target(z', a')) bootstraps
    the safe continuation: a' is the target actor's action at z_next, so the
    critic estimates the value of playing a once and then following the
    fallback policy.  Stored transitions supply (z, a, l, z_next) from both
    source policies, which is what keeps the estimate accurate at nominal
    actions; the stored successor action is a data-collection artifact and
    does not enter the target.  Takes one Adam step on the critic and
    Polyak-updates the target critic by tau.

    Args:
        critic: live critic (state+action input, scalar output).
        target_critic: slow copy providing the bootstrap term.
        target_actor: slow actor copy choosing the bootstrap action at z_next.
        batch: arrays z, a, l, z_next, a_next.
        cfg: supplies gamma, critic_lr, tau.
        opt: persistent Adam state; a fresh one is used when omitted.

    Returns:
        The scalar mean-squared-error loss before the step.
    """
    if batch["z"].shape[0] == 0:
        raise ValueError("batch must be non-empty")
    opt = opt if opt is not None else AdamState(learning_rate=cfg.critic_lr)
    a_next = actor_action(target_actor, batch["z_next"])
    q_next = mlp_forward(target_critic, _critic_features(batch["z_next"], a_next))[:, 0]
    y = (1.0 - cfg.gamma) * batch["l"] + cfg.gamma * np.minimum(batch["l"], q_next)
    n = y.size

    def mse(outputs: np.ndarray):
        resid = outputs[:, 0] - y
        return float(np.mean(resid**2)), (2.0 / n) * resid[:, None]

    loss, grads = param_gradient(critic, _critic_features(batch["z"], batch["a"]), mse)
    adam_step(critic, grads, opt)
    soft_update(target_critic, critic, cfg.tau)
    return loss


def actor_update(
    actor: MlpNet,
    critic: MlpNet,
    batch: dict,
    cfg: RlConfig,
    opt: AdamState | None = None,
) -> float:
    """One Adam step of the actor on the loss -mean Q(z, actor(z)).

    The actor's tanh output is rescaled to the action interval before the
    critic scores it; the chain rule runs through the critic's action input.

    Args:
        actor: live fallback actor (tanh head).
        critic: frozen critic scoring the actor's actions.
        batch: must contain z.
        cfg: supplies actor_lr.
        opt: persistent Adam state; a fresh one is used when omitted.

    Returns:
        The scalar loss -mean Q before the step.
    """
    states = batch["z"]
    if states.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    opt = opt if opt is not None else AdamState(learning_rate=cfg.actor_lr)
    n = states.shape[0]

    def neg_mean_q(outputs: np.ndarray):
        acts = ACTION_BOUND * outputs[:, 0]
        feats = _critic_features(states, acts)
        q = mlp_forward(critic, feats)[:, 0]
        dq_da = input_gradient(critic, feats)[:, -1]
        return float(-np.mean(q)), (-(ACTION_BOUND / n) * dq_da)[:, None]

    loss, grads = param_gradient(actor, states, neg_mean_q)
    adam_step(actor, grads, opt)
    return loss


@dataclass
class TrainingHistory:
    """Per-log-point training curve."""

    iterations: list = field(default_factory=list)
    critic_losses: list = field(default_factory=list)
    actor_losses: list = field(default_factory=list)
    buffer_nominal_fracs: list = field(default_factory=list)

    def save_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("iter,critic_loss,actor_loss,buffer_nominal_frac\n")
            for it, cl, al, bf in zip(
                self.iterations, self.critic_losses, self.actor_losses, self.buffer_nominal_fracs
            ):
                fh.write(f"{it},{cl:.17g},{al:.17g},{bf:.17g}\n")


def train_safety_rl(
    margin_net,
    nominal_cfg: NominalPolicyConfig,
    cfg: RlConfig,
    out_dir: str | None = None,
) -> tuple[MlpNet, MlpNet, TrainingHistory]:
    """Train the fallback actor and safety critic.

    Each iteration collects one episode (with linearly annealed exploration
    noise) and, once the buffer can fill a batch, performs one critic and
    one actor update.  Deterministic given cfg.seed.  When out_dir is set,
    checkpoints are written every 10000 iterations and a training curve CSV
    at the end.

    Args:
        margin_net: margin net or batched callable labeling states.
        nominal_cfg: nominal task policy parameters.
        cfg: hyperparameters.
        out_dir: optional directory for checkpoints and the curve CSV.

    Returns:
        (actor, critic, history).

    Raises:
        RuntimeError: critic loss exceeded the divergence limit.
    """
    rng = np.random.default_rng(cfg.seed)
    actor = mlp_init([3, *cfg.actor_dims, 1], output_activation="tanh", seed=cfg.seed)
    critic = mlp_init([4, *cfg.critic_dims, 1], seed=cfg.seed + 1)
    target_critic = critic.copy()
    target_actor = actor.copy()
    critic_opt = AdamState(learning_rate=cfg.critic_lr)
    actor_opt = AdamState(learning_rate=cfg.actor_lr)
    history = TrainingHistory()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    buffer = ReplayBuffer(cfg.buffer_capacity)

    span = max(cfg.iterations - 1, 1)
    critic_loss = actor_loss = float("nan")
    for it in range(cfg.iterations):
        frac = it / span
        sigma = cfg.exploration_std + frac * (cfg.exploration_std_final - cfg.exploration_std)
        collect_episode(actor, nominal_cfg, margin_net, buffer, cfg, rng, exploration_std=sigma)
        if len(buffer) >= cfg.batch_size:
            batch = buffer.sample(rng, cfg.batch_size)
            critic_loss = critic_update(critic, target_critic, target_actor, batch, cfg, critic_opt)
            actor_loss = actor_update(actor, critic, batch, cfg, actor_opt)
            soft_update(target_actor, actor, cfg.tau)
            if critic_loss > DIVERGENCE_LIMIT:
                raise RuntimeError(
                    f"critic diverged at iteration {it}: loss {critic_loss:.3g} "
                    f"(buffer size {len(buffer)}, nominal fraction {buffer.nominal_fraction():.3f})"
                )
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.iterations.append(it)
            history.critic_losses.append(critic_loss)
            history.actor_losses.append(actor_loss)
            history.buffer_nominal_fracs.append(buffer.nominal_fraction())
        if out_dir is not None and it > 0 and it % CHECKPOINT_EVERY == 0:
            save_model(actor, os.path.join(out_dir, f"actor_{it}.txt"))
            save_model(critic, os.path.join(out_dir, f"critic_{it}.txt"))

    if out_dir is not None:
        save_model(actor, os.path.join(out_dir, "actor.txt"))
        save_model(critic, os.path.join(out_dir, "critic.txt"))
        history.save_csv(os.path.join(out_dir, "training_curve.csv"))
    return actor, critic, history


def critic_error_vs_oracle(
    critic: MlpNet,
    value_grid: GridField,
    margin_grid: GridField,
    eval_source: str,
    actor: MlpNet | None = None,
    nominal_cfg: NominalPolicyConfig | None = None,
    gamma: float = 0.995,
    dt: float = DEFAULT_DT,
    n: int = 10000,
    seed: int = 0,
) -> float:
    """Mean absolute error of the critic against the grid backup Q.

    Draws n states uniformly over the box, pairs each with an action from
    the chosen source policy, and compares the critic to the one-step
    backup on the solved grid.  The grid must be solved on the same label
    scale the critic was trained on.

    Args:
        critic: trained critic net, or a callable (states, actions) -> q.
        value_grid: solved value field.
        margin_grid: margin field of the same solve.
        eval_source: "nominal_policy" or "fallback_policy".
        actor: fallback actor (required for fallback_policy).
        nominal_cfg: nominal policy parameters (required for nominal_policy).
        gamma: discount the grid was solved with.
        dt: integrator step.
        n: number of state-action pairs.
        seed: draw seed.

    Returns:
        Mean |Q_critic - Q_grid| over the pairs.
    """
    rng = np.random.default_rng(seed)
    states = np.column_stack(
        [
            rng.uniform(-XY_BOUND, XY_BOUND, size=n),
            rng.uniform(-XY_BOUND, XY_BOUND, size=n),
            rng.uniform(-np.pi, np.pi, size=n),
        ]
    )
    if eval_source == "nominal_policy":
        if nominal_cfg is None:
            raise ValueError("nominal_policy evaluation needs nominal_cfg")
        actions = np.array([float(nominal_policy(s, nominal_cfg)) for s in states])
    elif eval_source == "fallback_policy":
        if actor is None:
            raise ValueError("fallback_policy evaluation needs the actor")
        actions = actor_action(actor, states)
    else:
        raise ValueError(f"unknown eval_source {eval_source!r}")
    if isinstance(critic, MlpNet):
        q_critic = mlp_forward(critic, _critic_features(states, actions))[:, 0]
    else:
        q_critic = np.asarray(critic(states, actions), dtype=float)
    q_grid = q_from_value(value_grid, margin_grid, states, actions, gamma, dt)
    return float(np.mean(np.abs(q_critic - q_grid)))
