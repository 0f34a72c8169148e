"""Margin-function training and evaluation.

Two learned margins share one trainer: the gradient-penalized smooth margin
(GP: identity output, WGAN-style separation term plus a gradient-norm penalty
toward beta, plus a zero-margin hinge sign loss) and the saturated classifier
baseline (NoGP: tanh output, hinge sign loss with a positive margin delta).
Labels come from the ground-truth signed distance; states are sampled
uniformly over the workspace box.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dubins import DEFAULT_FAILURE, FailureSpec, signed_distance_margin, wrap_angle
from .nets import (
    AdamState,
    MlpNet,
    adam_step,
    mlp_forward,
    mlp_init,
    param_gradient,
    penalty_param_gradient,
)


@dataclass
class MarginDataset:
    """Labeled states: safe_points have true margin >= 0, fail_points < 0."""

    safe_points: np.ndarray
    fail_points: np.ndarray

    def __post_init__(self) -> None:
        self.safe_points = np.atleast_2d(np.asarray(self.safe_points, dtype=float))
        self.fail_points = np.atleast_2d(np.asarray(self.fail_points, dtype=float))


def build_margin_dataset(
    n_total: int = 50_000,
    seed: int = 0,
    failure: FailureSpec = DEFAULT_FAILURE,
) -> MarginDataset:
    """Sample n_total states uniformly over the box and label by true margin."""
    rng = np.random.default_rng(seed)
    states = np.stack(
        [
            rng.uniform(-1.5, 1.5, n_total),
            rng.uniform(-1.5, 1.5, n_total),
            rng.uniform(-np.pi, np.pi, n_total),
        ],
        axis=1,
    )
    safe = signed_distance_margin(states, failure) >= 0.0
    return MarginDataset(states[safe], states[~safe])


@dataclass
class MarginTrainConfig:
    """Loss weights and optimization knobs for train_margin.

    delta is the sign-loss margin of the NoGP objective; the GP objective
    always uses the zero-margin hinge.  hidden_dims sizes the MLP.
    """

    lambda_zs: float = 0.1
    lambda_gp: float = 10.0
    lambda_sign: float = 1.0
    beta: float = 0.1
    delta: float = 0.75
    batch_size: int = 256
    iterations: int = 8000
    learning_rate: float = 1e-3
    use_gp: bool = True
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        if min(self.lambda_zs, self.lambda_gp, self.lambda_sign) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def sign_loss(margin_net: MlpNet, batch_safe: np.ndarray, batch_fail: np.ndarray, delta: float) -> float:
    """Hinge classification loss:
    mean max(0, delta - l(z+)) + mean max(0, delta + l(z-))."""
    batch_safe = np.atleast_2d(batch_safe)
    batch_fail = np.atleast_2d(batch_fail)
    if batch_safe.shape[0] == 0 or batch_fail.shape[0] == 0:
        raise ValueError("sign_loss needs non-empty batches")
    l_safe = mlp_forward(margin_net, batch_safe)[:, 0]
    l_fail = mlp_forward(margin_net, batch_fail)[:, 0]
    return float(np.mean(np.maximum(0.0, delta - l_safe)) + np.mean(np.maximum(0.0, delta + l_fail)))


def interpolate_pair(z_plus: np.ndarray, z_minus: np.ndarray, eta) -> np.ndarray:
    """Linear interpolation (1 - eta) z+ + eta z-, theta along the shorter arc.

    Accepts single states (3,) with scalar eta or batches (n, 3) with (n,) eta.
    """
    z_plus = np.asarray(z_plus, dtype=float)
    z_minus = np.asarray(z_minus, dtype=float)
    eta_arr = np.asarray(eta, dtype=float)
    if np.any(eta_arr < 0.0) or np.any(eta_arr > 1.0):
        raise ValueError("eta must lie in [0, 1]")
    single = z_plus.ndim == 1
    zp = z_plus[None, :] if single else z_plus
    zm = z_minus[None, :] if single else z_minus
    e = np.broadcast_to(eta_arr, zp.shape[:1]).astype(float)
    out = np.empty_like(zp)
    out[:, :2] = (1.0 - e)[:, None] * zp[:, :2] + e[:, None] * zm[:, :2]
    out[:, 2] = wrap_angle(zp[:, 2] + e * wrap_angle(zm[:, 2] - zp[:, 2]))
    return out[0] if single else out


def _hinge_seed(values: np.ndarray, delta: float, sign: float) -> np.ndarray:
    """d/d l of mean max(0, delta - sign * l): -sign/n on active hinges."""
    active = (delta - sign * values) > 0.0
    return np.where(active, -sign / values.size, 0.0)


def wgan_loss(
    margin_net: MlpNet,
    batch_safe: np.ndarray,
    batch_fail: np.ndarray,
    cfg: MarginTrainConfig,
    rng: np.random.Generator | None = None,
):
    """Separation term plus gradient penalty, with parameter gradients.

    loss = lambda_zs * (mean l(z-) - mean l(z+))
         + lambda_gp * mean (||grad l(zhat)|| - beta)^2,

    where each zhat interpolates one (z+, z-) pair at its own eta ~ U(0, 1).
    Pairs are formed by index up to the shorter batch.

    Returns:
        (loss value, MlpGrads).
    """
    batch_safe = np.atleast_2d(batch_safe)
    batch_fail = np.atleast_2d(batch_fail)
    if batch_safe.shape[0] == 0 or batch_fail.shape[0] == 0:
        raise ValueError("wgan_loss needs non-empty batches")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    n_s, n_f = batch_safe.shape[0], batch_fail.shape[0]

    def zs_term(outputs):
        l_safe = outputs[:n_s, 0]
        l_fail = outputs[n_s:, 0]
        value = cfg.lambda_zs * (l_fail.mean() - l_safe.mean())
        seed = np.concatenate([np.full(n_s, -cfg.lambda_zs / n_s), np.full(n_f, cfg.lambda_zs / n_f)])
        return value, seed[:, None]

    value, grads = param_gradient(margin_net, np.vstack([batch_safe, batch_fail]), zs_term)

    n_pairs = min(n_s, n_f)
    eta = rng.uniform(0.0, 1.0, size=n_pairs)
    zhat = interpolate_pair(batch_safe[:n_pairs], batch_fail[:n_pairs], eta)
    pen_value, pen_grads = penalty_param_gradient(margin_net, zhat, cfg.beta)
    grads.add_scaled(pen_grads, cfg.lambda_gp)
    return value + cfg.lambda_gp * pen_value, grads


def train_margin(dataset: MarginDataset, cfg: MarginTrainConfig) -> MlpNet:
    """Train a margin net on labeled states.

    GP mode (cfg.use_gp): identity output; minimizes the wgan_loss plus
    lambda_sign times the zero-margin hinge.  NoGP mode: tanh output;
    minimizes the hinge sign loss at cfg.delta only.  Deterministic given
    (dataset, cfg).
    """
    if dataset.safe_points.shape[0] == 0 or dataset.fail_points.shape[0] == 0:
        raise ValueError("train_margin needs both classes in the dataset")
    rng = np.random.default_rng(cfg.seed)
    output_act = "identity" if cfg.use_gp else "tanh"
    net = mlp_init([3, *cfg.hidden_dims, 1], "silu", output_act, seed=cfg.seed)
    adam = AdamState(learning_rate=cfg.learning_rate)

    n_s, n_f = dataset.safe_points.shape[0], dataset.fail_points.shape[0]
    sign_delta = 0.0 if cfg.use_gp else cfg.delta
    for _ in range(cfg.iterations):
        batch_safe = dataset.safe_points[rng.integers(0, n_s, cfg.batch_size)]
        batch_fail = dataset.fail_points[rng.integers(0, n_f, cfg.batch_size)]

        def sign_term(outputs):
            l_safe = outputs[: cfg.batch_size, 0]
            l_fail = outputs[cfg.batch_size :, 0]
            value = np.mean(np.maximum(0.0, sign_delta - l_safe)) + np.mean(
                np.maximum(0.0, sign_delta + l_fail)
            )
            seed = np.concatenate([_hinge_seed(l_safe, sign_delta, 1.0), _hinge_seed(l_fail, sign_delta, -1.0)])
            return cfg.lambda_sign * value, cfg.lambda_sign * seed[:, None]

        _, grads = param_gradient(net, np.vstack([batch_safe, batch_fail]), sign_term)
        if cfg.use_gp:
            _, wgan_grads = wgan_loss(net, batch_safe, batch_fail, cfg, rng)
            grads.add_scaled(wgan_grads)
        adam_step(net, grads, adam)
    return net


def net_margin_fn(net: MlpNet, clip: tuple[float, float] | None = None):
    """Batched callable (n, 3) -> (n,) margins from a net, optionally clipped.

    Clipping to [-1, 1] is how an unbounded GP margin is made boundable when
    it labels grid cells for value iteration; leave clip None for evaluation
    of the raw margin.
    """

    def fn(states: np.ndarray) -> np.ndarray:
        out = mlp_forward(net, np.atleast_2d(states))[:, 0]
        if clip is not None:
            out = np.clip(out, clip[0], clip[1])
        return out

    return fn


def evaluate_margin(margin, trajectories) -> dict[str, float]:
    """Classification and smoothness metrics along executed trajectories.

    Args:
        margin: MlpNet or batched callable (n, 3) -> (n,).
        trajectories: TrajectoryRecords carrying ground-truth margin_values.

    Returns:
        dict with f1 (safe = positive class), confusion fractions tp/tn/fp/fn,
        and the per-trajectory max one-step |delta l| mean and std.
    """
    records = list(trajectories)
    if not records:
        raise ValueError("evaluate_margin needs at least one trajectory")
    margin_fn = net_margin_fn(margin) if isinstance(margin, MlpNet) else margin

    true_safe, pred_safe, max_deltas = [], [], []
    for rec in records:
        values = np.asarray(margin_fn(rec.states))
        true_safe.append(np.asarray(rec.margin_values) >= 0.0)
        pred_safe.append(values >= 0.0)
        if values.shape[0] >= 2:
            max_deltas.append(float(np.max(np.abs(np.diff(values)))))
    t = np.concatenate(true_safe)
    p = np.concatenate(pred_safe)
    n = t.shape[0]
    tp = float(np.sum(p & t)) / n
    tn = float(np.sum(~p & ~t)) / n
    fp = float(np.sum(p & ~t)) / n
    fn = float(np.sum(~p & t)) / n
    denom = 2.0 * tp + fp + fn
    f1 = 2.0 * tp / denom if denom > 0 else 0.0
    deltas = np.asarray(max_deltas) if max_deltas else np.zeros(1)
    return {
        "f1": f1,
        "tp": tp,
        "tn": tn,
        "fp": fp,
        "fn": fn,
        "max_step_delta_mean": float(deltas.mean()),
        "max_step_delta_std": float(deltas.std()),
    }


def save_metrics_csv(metrics: dict[str, float], path: str) -> None:
    """Write a flat metric,value CSV (17 significant digits)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key, value in metrics.items():
            writer.writerow([key, "%.17g" % value])
