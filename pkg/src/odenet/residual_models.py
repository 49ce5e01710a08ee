"""Residual-function families f(x, theta) with exact VJPs, plus
schedule statistics and sampled smoothness constants.

A family evaluates states of shape (d,) or batched (d, B); parameter
vectors are always flat 1-D arrays.  ``vjp_params`` sums over the batch
axis, matching the gradient of a batch-summed scalar loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import require_finite, spectral_norm

__all__ = [
    "ResidualFamily",
    "WeightSchedule",
    "SmoothnessConstants",
    "make_linear_family",
    "make_mlp_family",
    "make_square_family",
    "make_identity_family",
    "make_index_schedule",
    "estimate_constants",
    "weight_smoothness",
]


class ResidualFamily:
    """A residual function f(x, theta) with exact derivatives.

    eval:       (x, theta) -> f(x, theta), same shape as x
    vjp_state:  (x, theta, v) -> [d_x f]^T v, same shape as x
    vjp_params: (x, theta, v) -> [d_theta f]^T v, flat (param_dim,)
    jac_state:  (x, theta) -> (d, d) Jacobian of f in x (unbatched)
    """

    def __init__(self, name: str, state_dim: int, param_dim: int,
                 eval_fn: Callable, vjp_state: Callable,
                 vjp_params: Callable, jac_state: Callable):
        self.name = name
        self.state_dim = int(state_dim)
        self.param_dim = int(param_dim)
        self._eval = eval_fn
        self._vjp_state = vjp_state
        self._vjp_params = vjp_params
        self._jac_state = jac_state

    def _check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.state_dim or x.ndim not in (1, 2):
            raise ValueError(
                f"state shape {x.shape} does not match state_dim {self.state_dim}")
        return x

    def _check_params(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_dim,):
            raise ValueError(
                f"parameter shape {theta.shape} does not match param_dim {self.param_dim}")
        return theta

    def eval(self, x, theta) -> np.ndarray:
        return self._eval(self._check_state(x), self._check_params(theta))

    def vjp_state(self, x, theta, v) -> np.ndarray:
        x = self._check_state(x)
        v = np.asarray(v, dtype=float)
        if v.shape != x.shape:
            raise ValueError("cotangent shape must match state shape")
        return self._vjp_state(x, self._check_params(theta), v)

    def vjp_params(self, x, theta, v) -> np.ndarray:
        x = self._check_state(x)
        v = np.asarray(v, dtype=float)
        if v.shape != x.shape:
            raise ValueError("cotangent shape must match state shape")
        return self._vjp_params(x, self._check_params(theta), v)

    def jac_state(self, x, theta) -> np.ndarray:
        x = self._check_state(x)
        if x.ndim != 1:
            raise ValueError("jac_state takes a single (d,) state")
        return self._jac_state(x, self._check_params(theta))

    def __repr__(self):
        return (f"ResidualFamily({self.name!r}, state_dim={self.state_dim}, "
                f"param_dim={self.param_dim})")


class WeightSchedule:
    """Depth-indexed parameters theta_0..theta_{N-1}, one flat row each."""

    def __init__(self, params):
        arr = require_finite(params, "schedule parameters")
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("schedule must be a non-empty (N, param_dim) array")
        self.params = arr.copy()
        self.params.setflags(write=False)

    @property
    def depth(self) -> int:
        return self.params.shape[0]

    @property
    def param_dim(self) -> int:
        return self.params.shape[1]

    def __getitem__(self, n: int) -> np.ndarray:
        return self.params[n]

    def __len__(self) -> int:
        return self.depth

    def padded_row(self, n: int) -> np.ndarray:
        """Row n, with n == depth mapped to the last row.

        The final half-step of a two-stage chain (and the last
        interpolation interval) reference theta_N, which the schedule
        does not carry; the padding rule reuses theta_{N-1}.
        """
        if 0 <= n < self.depth:
            return self.params[n]
        if n == self.depth:
            return self.params[self.depth - 1]
        raise IndexError(f"layer index {n} out of range for depth {self.depth}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer"] + [f"p{j}" for j in range(self.param_dim)])
            for n in range(self.depth):
                writer.writerow([n] + [f"{v:.17g}" for v in self.params[n]])

    @classmethod
    def from_csv(cls, path) -> "WeightSchedule":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or not rows[0] or rows[0][0] != "layer":
            raise ValueError(f"{path} is not a schedule file")
        data = [[float(v) for v in row[1:]] for row in rows[1:]]
        return cls(np.array(data))


def make_linear_family(d: int) -> ResidualFamily:
    """f(x, theta) = theta x with theta a flattened row-major d x d matrix."""
    if d < 1:
        raise ValueError("state dimension must be >= 1")

    def as_matrix(theta):
        return theta.reshape(d, d)

    def eval_fn(x, theta):
        return as_matrix(theta) @ x

    def vjp_state(x, theta, v):
        return as_matrix(theta).T @ v

    def vjp_params(x, theta, v):
        if x.ndim == 1:
            return np.outer(v, x).ravel()
        return np.einsum("ib,jb->ij", v, x).ravel()

    def jac_state(x, theta):
        return as_matrix(theta).copy()

    return ResidualFamily("linear", d, d * d, eval_fn, vjp_state, vjp_params, jac_state)


def make_mlp_family(d: int, hidden: int) -> ResidualFamily:
    """Two-layer residual f(x, (W1, W2)) = W2 tanh(W1 x).

    tanh keeps every derivative of f bounded, which the smoothness
    estimates below rely on.  Parameters are concatenated row-major:
    W1 is (hidden, d), W2 is (d, hidden).
    """
    if d < 1 or hidden < 1:
        raise ValueError("dimensions must be >= 1")
    n1 = hidden * d

    def unpack(theta):
        return theta[:n1].reshape(hidden, d), theta[n1:].reshape(d, hidden)

    def eval_fn(x, theta):
        w1, w2 = unpack(theta)
        return w2 @ np.tanh(w1 @ x)

    def vjp_state(x, theta, v):
        w1, w2 = unpack(theta)
        a = np.tanh(w1 @ x)
        return w1.T @ ((1.0 - a**2) * (w2.T @ v))

    def vjp_params(x, theta, v):
        w1, w2 = unpack(theta)
        z = w1 @ x
        a = np.tanh(z)
        u = (1.0 - a**2) * (w2.T @ v)  # backprop through tanh pre-activation
        if x.ndim == 1:
            g1 = np.outer(u, x)
            g2 = np.outer(v, a)
        else:
            g1 = np.einsum("hb,db->hd", u, x)
            g2 = np.einsum("db,hb->dh", v, a)
        return np.concatenate([g1.ravel(), g2.ravel()])

    def jac_state(x, theta):
        w1, w2 = unpack(theta)
        a = np.tanh(w1 @ x)
        return w2 @ ((1.0 - a**2)[:, None] * w1)

    return ResidualFamily("mlp", d, 2 * d * hidden, eval_fn, vjp_state, vjp_params, jac_state)


def make_square_family() -> ResidualFamily:
    """Scalar, state-independent f(x, theta) = theta^2."""

    def eval_fn(x, theta):
        return np.full_like(x, theta[0] ** 2)

    def vjp_state(x, theta, v):
        return np.zeros_like(v)

    def vjp_params(x, theta, v):
        return np.array([2.0 * theta[0] * float(np.sum(v))])

    def jac_state(x, theta):
        return np.zeros((1, 1))

    return ResidualFamily("square", 1, 1, eval_fn, vjp_state, vjp_params, jac_state)


def make_identity_family() -> ResidualFamily:
    """Scalar, state-independent f(x, theta) = theta."""

    def eval_fn(x, theta):
        return np.full_like(x, theta[0])

    def vjp_state(x, theta, v):
        return np.zeros_like(v)

    def vjp_params(x, theta, v):
        return np.array([float(np.sum(v))])

    def jac_state(x, theta):
        return np.zeros((1, 1))

    return ResidualFamily("identity", 1, 1, eval_fn, vjp_state, vjp_params, jac_state)


def make_index_schedule(N: int) -> WeightSchedule:
    """theta_n = n for the identity family: the canonical depth-growing schedule."""
    if N < 1:
        raise ValueError("depth must be >= 1")
    return WeightSchedule(np.arange(N, dtype=float).reshape(N, 1))


@dataclass(frozen=True)
class SmoothnessConstants:
    """Sampled suprema over a state ball and the schedule's parameters.

    Sampling only ever sees finitely many points, so every field is a
    lower bound on the true supremum.
    """

    c_f: float            # sup ||f||
    l_f: float            # sup ||d_x f||            (state-Lipschitz)
    l_df: float           # Lipschitz of d_x f in x
    omega: float          # sup ||d_theta f||
    delta_param: float    # Lipschitz of d_theta f in x
    l_theta: float        # Lipschitz of f in theta
    l_theta_prime: float  # Lipschitz of d_x f in theta
    region_radius: float


def _param_jacobian(family: ResidualFamily, x, theta) -> np.ndarray:
    """Assemble d_theta f as a (d, param_dim) matrix from VJP rows."""
    rows = []
    for i in range(family.state_dim):
        e = np.zeros(family.state_dim)
        e[i] = 1.0
        rows.append(family.vjp_params(x, theta, e))
    return np.array(rows)


def estimate_constants(family: ResidualFamily, schedule: WeightSchedule,
                       region_radius: float, samples: int,
                       seed: int = 0) -> SmoothnessConstants:
    """Monte-Carlo estimates of the boundedness/Lipschitz constants.

    Draws are consumed in a fixed order from a seeded generator, so the
    sampled set for ``samples = k`` is a prefix of the set for any
    larger count: estimates are deterministic and never decrease as
    ``samples`` grows.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if region_radius <= 0.0:
        raise ValueError("region_radius must be positive")

    rng = np.random.default_rng(seed)
    d = family.state_dim
    thetas = [schedule[n] for n in range(schedule.depth)]
    theta_pairs = [(schedule[n], schedule[n + 1]) for n in range(schedule.depth - 1)]

    c_f = l_f = l_df = omega = delta_param = l_theta = l_theta_prime = 0.0
    for k in range(samples):
        direction = rng.standard_normal(d)
        direction /= max(np.linalg.norm(direction), 1e-300)
        # Alternate interior and boundary samples; suprema of the
        # norm-like quantities here are typically attained at the rim.
        radius = region_radius if k % 2 else region_radius * rng.random() ** (1.0 / d)
        x = radius * direction
        x_alt = region_radius * rng.random() ** (1.0 / d) * _unit(rng, d)
        gap = np.linalg.norm(x - x_alt)

        for theta in thetas:
            c_f = max(c_f, float(np.linalg.norm(family.eval(x, theta))))
            jac = family.jac_state(x, theta)
            l_f = max(l_f, spectral_norm(jac))
            pjac = _param_jacobian(family, x, theta)
            omega = max(omega, spectral_norm(pjac))
            if gap > 1e-9:
                jac_alt = family.jac_state(x_alt, theta)
                l_df = max(l_df, spectral_norm(jac - jac_alt) / gap)
                pjac_alt = _param_jacobian(family, x_alt, theta)
                delta_param = max(delta_param, spectral_norm(pjac - pjac_alt) / gap)
        for ta, tb in theta_pairs:
            tgap = np.linalg.norm(ta - tb)
            if tgap <= 1e-12:
                continue
            df = np.linalg.norm(family.eval(x, ta) - family.eval(x, tb))
            l_theta = max(l_theta, df / tgap)
            dj = spectral_norm(family.jac_state(x, ta) - family.jac_state(x, tb))
            l_theta_prime = max(l_theta_prime, dj / tgap)

    return SmoothnessConstants(c_f, l_f, l_df, omega, delta_param,
                               l_theta, l_theta_prime, region_radius)


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / max(np.linalg.norm(v), 1e-300)


def weight_smoothness(schedule: WeightSchedule) -> float:
    """max_n ||theta_{n+1} - theta_n||^2 over consecutive layers."""
    if schedule.depth < 2:
        raise ValueError("smoothness statistic undefined for a depth-1 schedule")
    diffs = np.diff(schedule.params, axis=0)
    return float(np.max(np.sum(diffs**2, axis=1)))
