"""Forward residual chains, interpolating vector fields, and a
high-accuracy ODE oracle.

A depth-N chain takes N steps of size 1/N.  The single-stage update is

    x_{n+1} = x_n + (1/N) f(x_n, theta_n),

and the two-stage (midpoint-corrected) update is

    y_n     = x_n + (1/N) f(x_n, theta_n)
    x_{n+1} = x_n + (1/2N) (f(x_n, theta_n) + f(y_n, theta_{n+1})),

where theta_N falls back to theta_{N-1} (see WeightSchedule.padded_row).
Interpolating fields turn a schedule into a continuous-time right-hand
side that agrees with f(., theta_n) at every grid time n/N, which is the
property all error measurements below are anchored on.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .numerics import require_finite
from .residual_models import ResidualFamily, WeightSchedule

__all__ = [
    "Trajectory",
    "VectorField",
    "ODESolution",
    "DivergenceError",
    "forward_euler_chain",
    "forward_heun_chain",
    "interpolate",
    "solve_ode_oracle",
    "approximation_error",
    "approximation_bound",
    "estimate_c_n",
    "trajectory_to_csv",
]

# A state this large has left the regime where any of the error bounds
# mean anything; fail fast with the layer index instead of overflowing.
DIVERGENCE_THRESHOLD = 1e12


class DivergenceError(RuntimeError):
    """A chain or ODE solve produced a state above the divergence threshold."""

    def __init__(self, message: str, layer: int):
        super().__init__(message)
        self.layer = layer


@dataclass
class Trajectory:
    """Forward states x_0..x_N, plus the stage points y_n for two-stage runs."""

    depth: int
    nodes: np.ndarray                 # (N+1, d) or (N+1, d, B)
    scheme: str                       # "euler" | "heun"
    midpoints: Optional[np.ndarray] = None  # (N, d...) when scheme == "heun"

    def __post_init__(self):
        if self.scheme not in ("euler", "heun"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.nodes.shape[0] != self.depth + 1:
            raise ValueError("nodes must hold N+1 states")
        if (self.midpoints is not None) != (self.scheme == "heun"):
            raise ValueError("midpoints are recorded exactly for the heun scheme")


@dataclass
class VectorField:
    """Right-hand side of dx/ds = eval(x, s) on s in [0, 1]."""

    eval: Callable[[np.ndarray, float], np.ndarray]
    kind: str        # "residual_interp" | "weight_interp" | "direct"
    depth: int = 1   # grid resolution the field is piecewise-defined on
    state_dim: int = 1


@dataclass
class ODESolution:
    grid: np.ndarray        # (steps+1,) times, 0 to 1
    states: np.ndarray      # (steps+1, d)
    oracle_steps: int


def _check_divergence(x, layer: int, context: str):
    if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_THRESHOLD:
        raise DivergenceError(f"{context} diverged at layer {layer}", layer)


def forward_euler_chain(family: ResidualFamily, schedule: WeightSchedule,
                        x0) -> Trajectory:
    """Run the single-stage chain; nodes[0] is x0, nodes[N] the output."""
    x = require_finite(x0, "x0")
    if x.shape[0] != family.state_dim:
        raise ValueError("x0 dimension does not match the family")
    N = schedule.depth
    nodes = np.empty((N + 1,) + x.shape)
    nodes[0] = x
    for n in range(N):
        x = x + family.eval(x, schedule[n]) / N
        _check_divergence(x, n, "forward chain")
        nodes[n + 1] = x
    return Trajectory(N, nodes, "euler")


def forward_heun_chain(family: ResidualFamily, schedule: WeightSchedule,
                       x0) -> Trajectory:
    """Run the two-stage chain, recording the stage points y_n."""
    x = require_finite(x0, "x0")
    if x.shape[0] != family.state_dim:
        raise ValueError("x0 dimension does not match the family")
    N = schedule.depth
    nodes = np.empty((N + 1,) + x.shape)
    mids = np.empty((N,) + x.shape)
    nodes[0] = x
    for n in range(N):
        f_here = family.eval(x, schedule[n])
        y = x + f_here / N
        mids[n] = y
        x = x + (f_here + family.eval(y, schedule.padded_row(n + 1))) / (2.0 * N)
        _check_divergence(x, n, "forward chain")
        nodes[n + 1] = x
    return Trajectory(N, nodes, "heun", midpoints=mids)


def interpolate(family: ResidualFamily, schedule: WeightSchedule, kind: str,
                theta_end: Optional[np.ndarray] = None) -> VectorField:
    """Continuous-time field agreeing with the chain's residuals on the grid.

    kind "residual_interp" blends the residual values,

        phi(x, s) = (n+1-Ns) f(x, theta_n) + (Ns-n) f(x, theta_{n+1}),

    kind "weight_interp" blends the parameters,

        phi(x, s) = f(x, (n+1-Ns) theta_n + (Ns-n) theta_{n+1}),

    both on s in [n/N, (n+1)/N].  The last interval needs theta_N: by
    default the padding rule (theta_N = theta_{N-1}) applies; pass
    ``theta_end`` to extend the schedule differently, e.g. to continue
    an analytic pattern.
    """
    if kind not in ("residual_interp", "weight_interp"):
        raise ValueError(f"unknown interpolation kind {kind!r}")
    N = schedule.depth
    if theta_end is None:
        last = schedule.padded_row(N)
    else:
        last = require_finite(theta_end, "theta_end")
        if last.shape != (schedule.param_dim,):
            raise ValueError("theta_end must match the schedule's parameter dimension")
    rows = np.vstack([schedule.params, last[None, :]])

    def eval_field(x, s):
        if not (0.0 <= s <= 1.0):
            raise ValueError(f"field time {s} outside [0, 1]")
        u = s * N
        # Snap to the grid so evaluations at n/N hit the layer residual
        # bit-exactly instead of through a 1-ulp interpolation sliver.
        nearest = round(u)
        if abs(u - nearest) < 1e-9 and 0 <= nearest <= N:
            u = float(nearest)
        n = min(max(int(math.ceil(u)) - 1, 0), N - 1)
        alpha = u - n  # in [0, 1] within interval n
        if kind == "residual_interp":
            return (1.0 - alpha) * family.eval(x, rows[n]) \
                + alpha * family.eval(x, rows[n + 1])
        return family.eval(x, (1.0 - alpha) * rows[n] + alpha * rows[n + 1])

    return VectorField(eval_field, kind, depth=N, state_dim=family.state_dim)


def solve_ode_oracle(field: VectorField, x0, fine_steps: int) -> ODESolution:
    """Classical 4-stage Runge-Kutta reference solution on a uniform fine grid.

    ``fine_steps`` must be a multiple of the field's grid resolution and
    at least 4x it, so every chain node time n/N lands exactly on the
    fine grid and sub-steps never straddle an interpolation interval.
    """
    x = require_finite(x0, "x0").astype(float)
    n_grid = max(int(field.depth), 1)
    if fine_steps % n_grid != 0:
        raise ValueError(f"fine_steps {fine_steps} must be a multiple of {n_grid}")
    if fine_steps < 4 * n_grid:
        raise ValueError(f"fine_steps {fine_steps} too coarse; need >= {4 * n_grid}")

    h = 1.0 / fine_steps
    states = np.empty((fine_steps + 1,) + x.shape)
    grid = np.empty(fine_steps + 1)
    states[0] = x
    grid[0] = 0.0
    for i in range(fine_steps):
        s = i / fine_steps
        s_mid = (i + 0.5) / fine_steps
        s_next = (i + 1) / fine_steps
        k1 = field.eval(x, s)
        k2 = field.eval(x + 0.5 * h * k1, s_mid)
        k3 = field.eval(x + 0.5 * h * k2, s_mid)
        k4 = field.eval(x + h * k3, s_next)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_divergence(x, i, "ode oracle")
        states[i + 1] = x
        grid[i + 1] = s_next
    return ODESolution(grid, states, fine_steps)


def approximation_error(traj: Trajectory, sol: ODESolution):
    """Per-node gaps ||x_n - x(n/N)|| and their maximum."""
    N = traj.depth
    if sol.oracle_steps % N != 0:
        raise ValueError("oracle grid does not contain the chain grid")
    stride = sol.oracle_steps // N
    if traj.nodes.ndim != 2 or sol.states.shape[1] != traj.nodes.shape[1]:
        raise ValueError("trajectory and solution dimensions do not match")
    gaps = np.linalg.norm(traj.nodes - sol.states[::stride], axis=1)
    return gaps, float(np.max(gaps))


def approximation_bound(L: float, c_n: float, N: int) -> float:
    """Worst-case chain-vs-ODE gap: (e^L - 1)/(2NL) * c_n, or c_n/(2N) at L = 0."""
    if L < 0.0 or c_n < 0.0 or N < 1:
        raise ValueError("bound inputs must be nonnegative with N >= 1")
    if L == 0.0:
        return c_n / (2.0 * N)
    # expm1 keeps the L -> 0 limit (e^L - 1)/L -> 1 continuous.
    return float(np.expm1(L) / (2.0 * N * L) * c_n)


def estimate_c_n(field: VectorField, region_radius: float, samples: int,
                 seed: int = 0) -> float:
    """Sampled supremum of ||d_s phi + d_x phi[phi]|| over ball x [0, 1].

    The time derivative is one-sided with step 1/(100N), taken inside
    the interpolation interval the sample falls in: the field is only
    piecewise smooth in s, and differences across a grid point would
    measure the (generally large) jump instead of the derivative.
    """
    if region_radius <= 0.0 or samples < 1:
        raise ValueError("need positive radius and at least one sample")
    rng = np.random.default_rng(seed)
    N = max(int(field.depth), 1)
    d = field.state_dim
    hs = 1.0 / (100.0 * N)
    best = 0.0
    for _ in range(samples):
        v = rng.standard_normal(d)
        v /= max(np.linalg.norm(v), 1e-300)
        x = region_radius * rng.random() ** (1.0 / d) * v
        interval = int(rng.integers(0, N))
        u = 0.02 + 0.96 * rng.random()  # stay clear of the interval edges
        s = (interval + u) / N
        phi = field.eval(x, s)
        # forward difference, flipped near the right edge of the interval
        if u + hs * N < 0.995:
            ds = (field.eval(x, s + hs) - phi) / hs
        else:
            ds = (phi - field.eval(x, s - hs)) / hs
        eps = 1e-6 * max(1.0, float(np.linalg.norm(x))) / max(1.0, float(np.linalg.norm(phi)))
        jvp = (field.eval(x + eps * phi, s) - field.eval(x - eps * phi, s)) / (2.0 * eps)
        best = max(best, float(np.linalg.norm(ds + jvp)))
    return best


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Dump nodes as rows node_index,s,x_0,...,x_{d-1}."""
    if traj.nodes.ndim != 2:
        raise ValueError("CSV export only supports unbatched trajectories")
    d = traj.nodes.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_index", "s"] + [f"x_{j}" for j in range(d)])
        for n in range(traj.depth + 1):
            s = n / traj.depth
            writer.writerow([n, f"{s:.17g}"] + [f"{v:.17g}" for v in traj.nodes[n]])
