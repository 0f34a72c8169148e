"""Dense multilayer perceptrons with hand-rolled differentiation.

Everything downstream (margin training, the safety critic and actor) runs on
the small MLP type defined here.  Three derivative routes are provided:

* parameter gradients of scalar losses (reverse mode),
* gradients of a scalar-valued network with respect to its input,
* parameter gradients of the gradient-norm penalty ``(||d y / d z|| - beta)^2``,
  which needs mixed second derivatives.  These are computed with a tangent
  (forward-mode) pass in the input direction followed by reverse mode over the
  augmented computation, never by finite differences.

Weights are stored row-major: ``weights[k]`` has shape ``(fan_out, fan_in)``
and layer k maps ``h -> act(weights[k] @ h + biases[k])``.  Batched calls take
``(n, d)`` arrays and return ``(n, out)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "silu")
OUTPUT_ACTIVATIONS = ("identity", "tanh")

# Below this input-gradient norm the penalty direction w = g / ||g|| is
# undefined; the penalty gradient for that sample is taken to be zero.
GRAD_NORM_FLOOR = 1e-12


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _relu_d(x: np.ndarray) -> np.ndarray:
    # Subgradient 0 at exactly 0.
    return (x > 0.0).astype(x.dtype)


def _relu_dd(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _silu_d(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _silu_dd(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


def _tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def _tanh_d(x: np.ndarray) -> np.ndarray:
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_dd(x: np.ndarray) -> np.ndarray:
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _identity(x: np.ndarray) -> np.ndarray:
    return x


def _identity_d(x: np.ndarray) -> np.ndarray:
    return np.ones_like(x)


def _identity_dd(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


# name -> (value, first derivative, second derivative), all elementwise
_ACT_TABLE = {
    "relu": (_relu, _relu_d, _relu_dd),
    "silu": (_silu, _silu_d, _silu_dd),
    "tanh": (_tanh, _tanh_d, _tanh_dd),
    "identity": (_identity, _identity_d, _identity_dd),
}


@dataclass
class MlpNet:
    """A dense MLP: per-layer weight matrices, biases, and two activations.

    ``hidden_activation`` applies after every layer except the last,
    ``output_activation`` after the last.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str
    output_activation: str

    def __post_init__(self) -> None:
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be parallel, non-empty lists")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k + 1 < len(self.weights) and self.weights[k + 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k}->{k + 1}: inner dimensions do not chain")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def _activation_at(self, k: int):
        name = self.hidden_activation if k + 1 < len(self.weights) else self.output_activation
        return _ACT_TABLE[name]

    def copy(self) -> "MlpNet":
        return MlpNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )


@dataclass
class MlpGrads:
    """Per-parameter gradients, shaped exactly like an MlpNet's parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @staticmethod
    def zeros_like(net: MlpNet) -> "MlpGrads":
        return MlpGrads(
            [np.zeros_like(w) for w in net.weights],
            [np.zeros_like(b) for b in net.biases],
        )

    def add_scaled(self, other: "MlpGrads", scale: float = 1.0) -> "MlpGrads":
        for w, ow in zip(self.weights, other.weights):
            w += scale * ow
        for b, ob in zip(self.biases, other.biases):
            b += scale * ob
        return self


def mlp_init(
    layer_dims: list[int],
    hidden_activation: str = "relu",
    output_activation: str = "identity",
    seed: int = 0,
) -> MlpNet:
    """Build an MLP with uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] init.

    Args:
        layer_dims: [input_dim, hidden..., output_dim], at least two entries.
        hidden_activation: "relu" or "silu".
        output_activation: "identity" or "tanh".
        seed: seed for the init draw; equal seeds give equal nets.
    """
    if len(layer_dims) < 2:
        raise ValueError("layer_dims needs at least input and output dims")
    if any(d <= 0 for d in layer_dims):
        raise ValueError(f"layer_dims must be positive, got {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpNet(weights, biases, hidden_activation, output_activation)


def _forward_cached(net: MlpNet, x: np.ndarray):
    """Batched forward pass keeping pre-activations for later backward passes.

    Returns (output (n, out), pre_acts list of (n, d_k+1), acts list of
    (n, d_k) inputs to each layer).
    """
    h = x
    pre_acts, acts = [], []
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        acts.append(h)
        s = h @ w.T + b
        pre_acts.append(s)
        act, _, _ = net._activation_at(k)
        h = act(s)
    return h, pre_acts, acts


def mlp_forward(net: MlpNet, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    out, _, _ = _forward_cached(net, x[None, :] if single else x)
    return out[0] if single else out


def _backward(net: MlpNet, pre_acts, acts, out_seed: np.ndarray):
    """Reverse pass from d(loss)/d(output) seeds.

    Returns (MlpGrads summed over the batch, d(loss)/d(input) of shape (n, d)).
    """
    grads = MlpGrads.zeros_like(net)
    u = out_seed
    for k in reversed(range(len(net.weights))):
        _, act_d, _ = net._activation_at(k)
        s_bar = u * act_d(pre_acts[k])
        grads.weights[k] += s_bar.T @ acts[k]
        grads.biases[k] += s_bar.sum(axis=0)
        u = s_bar @ net.weights[k]
    return grads, u


def param_gradient(net: MlpNet, inputs: np.ndarray, loss_fn):
    """Value and parameter gradient of a scalar loss of the network outputs.

    Args:
        net: network to differentiate.
        inputs: (n, d) batch fed through the network.
        loss_fn: maps outputs (n, out) to (scalar loss, d loss / d outputs
            of shape (n, out)).  Affine combinations, squares and hinges of
            outputs all fit this shape.

    Returns:
        (loss value, MlpGrads).
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    out, pre_acts, acts = _forward_cached(net, inputs)
    loss, out_seed = loss_fn(out)
    grads, _ = _backward(net, pre_acts, acts, np.asarray(out_seed, dtype=float))
    return float(loss), grads


def input_gradient(net: MlpNet, x: np.ndarray) -> np.ndarray:
    """Gradient of a scalar-output network with respect to its input.

    Accepts one state (d,) or a batch (n, d); returns matching shape.
    """
    if net.output_dim != 1:
        raise ValueError("input_gradient requires a scalar-output network")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    _, pre_acts, acts = _forward_cached(net, xb)
    _, g = _backward(net, pre_acts, acts, np.ones((xb.shape[0], 1)))
    return g[0] if single else g


def penalty_values(net: MlpNet, points: np.ndarray, beta: float) -> np.ndarray:
    """Per-point values of the gradient-norm penalty (||d y/d z|| - beta)^2."""
    g = input_gradient(net, np.atleast_2d(points))
    norms = np.linalg.norm(g, axis=1)
    return (norms - beta) ** 2


def penalty_param_gradient(net: MlpNet, points: np.ndarray, beta: float):
    """Mean gradient-norm penalty over points and its parameter gradient.

    The penalty per point z is ``(||g(z)|| - beta)^2`` with ``g = d y / d z``.
    Its parameter gradient equals the gradient of ``w^T g`` with the direction
    ``w = 2 (||g|| - beta) g / ||g||`` held constant, which is a mixed second
    derivative: a tangent pass propagates the directional derivative of the
    forward computation along w, and a reverse pass over that augmented
    computation yields the parameter gradient.  Points whose gradient norm is
    below GRAD_NORM_FLOOR contribute zero gradient.

    Args:
        net: scalar-output network.
        points: (n, d) batch of evaluation points.
        beta: target gradient norm, >= 0.

    Returns:
        (mean penalty value, MlpGrads of the mean penalty).
    """
    if net.output_dim != 1:
        raise ValueError("penalty_param_gradient requires a scalar-output network")
    z = np.atleast_2d(np.asarray(points, dtype=float))
    n = z.shape[0]

    _, pre_acts, acts = _forward_cached(net, z)
    _, g = _backward(net, pre_acts, acts, np.ones((n, 1)))
    norms = np.linalg.norm(g, axis=1)
    value = float(np.mean((norms - beta) ** 2))

    live = norms >= GRAD_NORM_FLOOR
    grads = MlpGrads.zeros_like(net)
    if not np.any(live):
        return value, grads
    safe_norms = np.where(live, norms, 1.0)
    w_dir = (2.0 * (norms - beta) / safe_norms)[:, None] * g
    w_dir[~live] = 0.0

    # Tangent pass: directional derivative of every intermediate along w_dir.
    tangents_pre, tangents_post = [], []
    r = w_dir
    for k, w in enumerate(net.weights):
        t = r @ w.T
        tangents_pre.append(t)
        _, act_d, _ = net._activation_at(k)
        r = act_d(pre_acts[k]) * t
        tangents_post.append(r)

    # Reverse pass over the augmented (forward + tangent) computation.  The
    # scalar being differentiated is mean_i of the tangent output r_L[i].
    r_bar = np.full((n, 1), 1.0 / n)
    h_bar = np.zeros((n, 1))
    for k in reversed(range(len(net.weights))):
        _, act_d, act_dd = net._activation_at(k)
        d1 = act_d(pre_acts[k])
        t_bar = r_bar * d1
        s_bar = r_bar * act_dd(pre_acts[k]) * tangents_pre[k] + h_bar * d1
        r_prev = w_dir if k == 0 else tangents_post[k - 1]
        grads.weights[k] += s_bar.T @ acts[k] + t_bar.T @ r_prev
        grads.biases[k] += s_bar.sum(axis=0)
        h_bar = s_bar @ net.weights[k]
        r_bar = t_bar @ net.weights[k]
    return value, grads


@dataclass
class AdamState:
    """Bias-corrected Adam optimizer state for one MlpNet."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: MlpGrads | None = field(default=None, repr=False)
    second_moment: MlpGrads | None = field(default=None, repr=False)


def adam_step(net: MlpNet, grads: MlpGrads, state: AdamState) -> None:
    """Apply one in-place Adam update to the network parameters."""
    if state.first_moment is None:
        state.first_moment = MlpGrads.zeros_like(net)
        state.second_moment = MlpGrads.zeros_like(net)
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    params = net.weights + net.biases
    gs = grads.weights + grads.biases
    ms = state.first_moment.weights + state.first_moment.biases
    vs = state.second_moment.weights + state.second_moment.biases
    for p, g, m, v in zip(params, gs, ms, vs):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def save_model(net: MlpNet, path: str) -> None:
    """Write the network to a text file.

    Line 1 is ``mlp <L> <d0> ... <dL> <hidden_act> <output_act>``; then for
    each layer, one line per weight-matrix row followed by one bias line.
    Floats use 17 significant digits so that load(save(net)) round-trips
    exactly.
    """
    dims = net.layer_dims
    lines = [
        "mlp %d %s %s %s"
        % (len(net.weights), " ".join(str(d) for d in dims), net.hidden_activation, net.output_activation)
    ]
    for w, b in zip(net.weights, net.biases):
        for row in w:
            lines.append(" ".join("%.17g" % v for v in row))
        lines.append(" ".join("%.17g" % v for v in b))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path: str) -> MlpNet:
    """Read a network written by save_model; raises ValueError on mismatch."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty model file")
    head = lines[0].split()
    if len(head) < 5 or head[0] != "mlp":
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    try:
        n_layers = int(head[1])
        dims = [int(tok) for tok in head[2 : 2 + n_layers + 1]]
    except ValueError as exc:
        raise ValueError(f"{path}: unparseable header {lines[0]!r}") from exc
    if len(head) != 2 + n_layers + 1 + 2:
        raise ValueError(f"{path}: header field count does not match layer count")
    hidden_act, output_act = head[-2], head[-1]
    expected_lines = 1 + sum(dims[k + 1] + 1 for k in range(n_layers))
    if len(lines) != expected_lines:
        raise ValueError(f"{path}: expected {expected_lines} lines, found {len(lines)}")
    weights, biases = [], []
    cursor = 1
    for k in range(n_layers):
        fan_in, fan_out = dims[k], dims[k + 1]
        rows = []
        for r in range(fan_out):
            vals = np.array([float(tok) for tok in lines[cursor].split()])
            if vals.shape[0] != fan_in:
                raise ValueError(f"{path}: layer {k} row {r} has {vals.shape[0]} values, expected {fan_in}")
            rows.append(vals)
            cursor += 1
        b = np.array([float(tok) for tok in lines[cursor].split()])
        if b.shape[0] != fan_out:
            raise ValueError(f"{path}: layer {k} bias has {b.shape[0]} values, expected {fan_out}")
        cursor += 1
        weights.append(np.stack(rows))
        biases.append(b)
    return MlpNet(weights, biases, hidden_act, output_act)
