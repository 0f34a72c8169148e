"""Grid-based reachability values for the Dubins car.

The solver iterates the discounted backup

    V <- (1 - gamma) * margin + gamma * min(margin, max_a V(f(s, a)))

to its fixed point on a regular (x, y, theta) grid with trilinear
interpolation, periodic in theta.  gamma = 1 gives the undiscounted avoid
value, which is a fixed point but not a contraction, so it may legitimately
stop non-converged.  A brute-force finite-horizon oracle and empirical
Lipschitz scans provide independent checks on the solved fields.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .dubins import (
    DEFAULT_DT,
    XY_BOUND,
    dynamics_step_batch,
    wrap_angle,
)

FIELD_KINDS = ("margin", "value")


@dataclass(frozen=True)
class GridSpec:
    """Regular grid over the workspace box with a periodic theta axis.

    x and y nodes span [-1.5, 1.5] inclusive; theta nodes start at -pi with
    spacing 2 pi / ntheta (no duplicate node at +pi).
    """

    nx: int = 61
    ny: int = 61
    ntheta: int = 31

    def __post_init__(self) -> None:
        if self.nx < 3 or self.ny < 3:
            raise ValueError("nx, ny must be >= 3")
        if self.ntheta < 4:
            raise ValueError("ntheta must be >= 4")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(-XY_BOUND, XY_BOUND, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(-XY_BOUND, XY_BOUND, self.ny)

    @property
    def thetas(self) -> np.ndarray:
        return -np.pi + 2.0 * np.pi * np.arange(self.ntheta) / self.ntheta

    @property
    def dx(self) -> float:
        return 2.0 * XY_BOUND / (self.nx - 1)

    @property
    def dy(self) -> float:
        return 2.0 * XY_BOUND / (self.ny - 1)

    @property
    def dtheta(self) -> float:
        return 2.0 * np.pi / self.ntheta

    def nodes(self) -> np.ndarray:
        """All grid nodes as an (nx * ny * ntheta, 3) array in x-major order."""
        gx, gy, gt = np.meshgrid(self.xs, self.ys, self.thetas, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gt.ravel()], axis=1)


@dataclass
class GridField:
    """Values on a GridSpec; kind is "margin" or "value"."""

    spec: GridSpec
    values: np.ndarray
    kind: str = "value"

    def __post_init__(self) -> None:
        expected = (self.spec.nx, self.spec.ny, self.spec.ntheta)
        self.values = np.asarray(self.values, dtype=float).reshape(expected)
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")


def margin_field(spec: GridSpec, margin_fn) -> GridField:
    """Evaluate a batched margin function at every node."""
    values = np.asarray(margin_fn(spec.nodes()), dtype=float)
    return GridField(spec, values.reshape(spec.nx, spec.ny, spec.ntheta), kind="margin")


def _interp_coeffs(spec: GridSpec, states: np.ndarray):
    """Trilinear corner indices and weights for a batch of query states.

    Positions are clamped into the box and theta is wrapped.  Returns
    (idx, w): two (8, n) arrays with flat x-major corner indices and weights
    summing to one per column.
    """
    states = np.asarray(states, dtype=float)
    fx = (np.clip(states[:, 0], -XY_BOUND, XY_BOUND) + XY_BOUND) / spec.dx
    fy = (np.clip(states[:, 1], -XY_BOUND, XY_BOUND) + XY_BOUND) / spec.dy
    ft = (wrap_angle(states[:, 2]) + np.pi) / spec.dtheta

    ix0 = np.minimum(fx.astype(np.int64), spec.nx - 2)
    iy0 = np.minimum(fy.astype(np.int64), spec.ny - 2)
    it0 = np.minimum(ft.astype(np.int64), spec.ntheta - 1)
    wx = fx - ix0
    wy = fy - iy0
    wt = ft - it0
    ix1 = ix0 + 1
    iy1 = iy0 + 1
    it1 = (it0 + 1) % spec.ntheta

    n = states.shape[0]
    idx = np.empty((8, n), dtype=np.int64)
    w = np.empty((8, n))
    stride_x = spec.ny * spec.ntheta
    stride_y = spec.ntheta
    corner = 0
    for cx, wxc in ((ix0, 1.0 - wx), (ix1, wx)):
        for cy, wyc in ((iy0, 1.0 - wy), (iy1, wy)):
            for ct, wtc in ((it0, 1.0 - wt), (it1, wt)):
                idx[corner] = cx * stride_x + cy * stride_y + ct
                w[corner] = wxc * wyc * wtc
                corner += 1
    return idx, w


def interpolate(field: GridField, states: np.ndarray):
    """Trilinear interpolation of the field, periodic in theta.

    Accepts one state (3,) or a batch (n, 3).
    """
    states = np.asarray(states, dtype=float)
    single = states.ndim == 1
    batch = states[None, :] if single else states
    idx, w = _interp_coeffs(field.spec, batch)
    out = np.einsum("cn,cn->n", w, field.values.ravel()[idx])
    return float(out[0]) if single else out


@dataclass
class ValueSolution:
    """Solved field plus convergence bookkeeping."""

    field: GridField
    converged: bool
    sweeps: int
    residuals: list[float]


def value_iteration(
    margin: GridField,
    action_set: np.ndarray,
    gamma: float,
    dt: float = DEFAULT_DT,
    tol: float = 1e-6,
    max_iters: int = 2000,
) -> ValueSolution:
    """Solve the discounted avoid fixed point by Jacobi sweeps.

    Every sweep writes into a fresh buffer (deterministic under parallel cell
    updates) and applies, at each node s,

        V(s) = (1 - gamma) * margin(s)
               + gamma * min(margin(s), max_a Interp(V, f(s, a))).

    For gamma < 1 this is a gamma-contraction and must converge; gamma = 1 is
    the undiscounted fixed point and may hit max_iters, in which case the
    solution is returned flagged non-converged.

    Args:
        margin: gridded margin (kind "margin").
        action_set: non-empty 1-D array of turn rates.
        gamma: discount in [0, 1].
        dt: dynamics step.
        tol: sup-norm residual threshold, > 0.
        max_iters: sweep cap.
    """
    action_set = np.atleast_1d(np.asarray(action_set, dtype=float))
    if action_set.size == 0:
        raise ValueError("action_set must be non-empty")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if tol <= 0:
        raise ValueError("tol must be positive")

    spec = margin.spec
    nodes = spec.nodes()
    coeffs = []
    for a in action_set:
        succ = dynamics_step_batch(nodes, a, dt)
        coeffs.append(_interp_coeffs(spec, succ))

    ell = margin.values.ravel()
    v = ell.copy()
    residuals: list[float] = []
    converged = False
    sweeps = 0
    for sweeps in range(1, max_iters + 1):
        best = np.full(v.shape, -np.inf)
        for idx, w in coeffs:
            np.maximum(best, np.einsum("cn,cn->n", w, v[idx]), out=best)
        v_new = (1.0 - gamma) * ell + gamma * np.minimum(ell, best)
        residual = float(np.max(np.abs(v_new - v)))
        residuals.append(residual)
        v = v_new
        if residual < tol:
            converged = True
            break
    field = GridField(spec, v.reshape(margin.values.shape), kind="value")
    return ValueSolution(field, converged, sweeps, residuals)


def q_from_value(
    value: GridField,
    margin: GridField,
    states: np.ndarray,
    actions,
    gamma: float,
    dt: float = DEFAULT_DT,
):
    """One-step backup Q(z, a) = (1-g) l(z) + g min(l(z), V(f(z, a))).

    Accepts a single state (3,) with scalar action, or batches: states (n, 3)
    with actions scalar or (n,).  The margin l(z) is interpolated from the
    margin field, so the two fields must share a GridSpec.
    """
    if value.spec != margin.spec:
        raise ValueError("value and margin fields must share a GridSpec")
    states = np.asarray(states, dtype=float)
    single = states.ndim == 1
    batch = states[None, :] if single else states
    succ = dynamics_step_batch(batch, actions, dt)
    ell = interpolate(margin, batch)
    nxt = interpolate(value, succ)
    q = (1.0 - gamma) * ell + gamma * np.minimum(ell, nxt)
    return float(q[0]) if single else q


def brute_force_avoid_oracle(
    state: np.ndarray,
    margin_fn,
    action_subset: np.ndarray,
    horizon: int,
    dt: float = DEFAULT_DT,
) -> float:
    """Finite-horizon avoid value by exhaustive sequence enumeration.

    Returns max over all |A|^horizon action sequences of the min margin along
    the induced trajectory (including the start state).  No grid is involved;
    this is the independent check on the solver.

    Args:
        state: start state (3,).
        margin_fn: batched margin, (n, 3) -> (n,).
        action_subset: 1-D array of allowed turn rates.
        horizon: number of steps, >= 0.
        dt: dynamics step.
    """
    action_subset = np.atleast_1d(np.asarray(action_subset, dtype=float))
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    n_seq = action_subset.size**horizon
    if n_seq > 10**6:
        raise ValueError(f"{action_subset.size}^{horizon} sequences exceed the 1e6 budget")
    start = float(margin_fn(np.asarray(state, dtype=float)[None, :])[0])
    if horizon == 0:
        return start
    seqs = np.array(list(itertools.product(action_subset, repeat=horizon)))
    cur = np.broadcast_to(np.asarray(state, dtype=float), (n_seq, 3)).copy()
    worst = np.full(n_seq, start)
    for t in range(horizon):
        cur = dynamics_step_batch(cur, seqs[:, t], dt)
        worst = np.minimum(worst, margin_fn(cur))
    return float(worst.max())


def empirical_lipschitz(field: GridField) -> float:
    """Largest |value difference| / distance over axis-adjacent node pairs.

    The theta axis uses geodesic spacing and includes the wrap-around pair.
    """
    v = field.values
    spec = field.spec
    worst = 0.0
    if spec.nx > 1:
        worst = max(worst, float(np.max(np.abs(np.diff(v, axis=0)))) / spec.dx)
    if spec.ny > 1:
        worst = max(worst, float(np.max(np.abs(np.diff(v, axis=1)))) / spec.dy)
    d_theta = np.abs(v - np.roll(v, -1, axis=2))
    worst = max(worst, float(np.max(d_theta)) / spec.dtheta)
    return worst


@dataclass
class LipschitzReport:
    """Empirical margin/value Lipschitz constants against the analytic bound.

    bound = L_ell * max(1, (1 - gamma) / (1 - gamma * L_f)), valid only under
    the hypothesis gamma * L_f < 1; holds means L_V <= bound * (1 + tol).
    """

    L_ell: float
    L_V: float
    L_f: float
    gamma: float
    bound: float
    holds: bool


def verify_margin_value_bound(
    margin: GridField,
    gamma: float,
    dt: float,
    action_set: np.ndarray,
    L_f: float,
    tol: float = 0.05,
    vi_tol: float = 1e-6,
    max_iters: int = 2000,
) -> LipschitzReport:
    """Solve the discounted field and check the margin-to-value
    Lipschitz bound L_V <= L_ell * max(1, (1-gamma)/(1-gamma L_f)).

    Rejects gamma * L_f >= 1, where the bound's hypothesis fails.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("the bound needs gamma in [0, 1)")
    if gamma * L_f >= 1.0:
        raise ValueError(f"hypothesis violated: gamma * L_f = {gamma * L_f:.4f} >= 1")
    solution = value_iteration(margin, action_set, gamma, dt, tol=vi_tol, max_iters=max_iters)
    l_ell = empirical_lipschitz(margin)
    l_v = empirical_lipschitz(solution.field)
    bound = l_ell * max(1.0, (1.0 - gamma) / (1.0 - gamma * L_f))
    return LipschitzReport(
        L_ell=l_ell,
        L_V=l_v,
        L_f=L_f,
        gamma=gamma,
        bound=bound,
        holds=bool(l_v <= bound * (1.0 + tol)),
    )


def save_field(field: GridField, path: str) -> None:
    """Text dump: `grid <nx> <ny> <ntheta>` then one value per line, x-major."""
    spec = field.spec
    lines = [f"grid {spec.nx} {spec.ny} {spec.ntheta}"]
    lines.extend("%.17g" % v for v in field.values.ravel())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_field(path: str, kind: str = "value") -> GridField:
    """Read a field written by save_field; raises ValueError on mismatch."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("grid "):
        raise ValueError(f"{path}: missing grid header")
    parts = lines[0].split()
    if len(parts) != 4:
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    nx, ny, ntheta = (int(p) for p in parts[1:])
    expected = nx * ny * ntheta
    if len(lines) - 1 != expected:
        raise ValueError(f"{path}: expected {expected} values, found {len(lines) - 1}")
    values = np.array([float(ln) for ln in lines[1:]]).reshape(nx, ny, ntheta)
    return GridField(GridSpec(nx, ny, ntheta), values, kind=kind)


def save_slice_csv(field: GridField, theta: float, path: str) -> None:
    """Write the x,y,value plane at the grid theta nearest to the request."""
    spec = field.spec
    k = int(np.argmin(np.abs(wrap_angle(spec.thetas - theta))))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "value"])
        for i, x in enumerate(spec.xs):
            for j, y in enumerate(spec.ys):
                writer.writerow(["%.17g" % x, "%.17g" % y, "%.17g" % field.values[i, j, k]])
