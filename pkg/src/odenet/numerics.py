"""Dense linear algebra, finite-difference oracles, and slope fitting.

All data is plain float64 numpy: vectors are 1-D arrays, matrices 2-D
arrays in row-major semantic order.  Every routine here is a pure
function of its inputs, so the module doubles as the oracle layer for
the rest of the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "SlopeFit",
    "spectral_norm",
    "fit_loglog_slope",
    "finite_difference_gradient",
    "above_noise_floor",
    "require_finite",
]

# Points closer to the rounding floor than this multiple of machine
# epsilon (relative to the trajectory scale) carry no rate information.
NOISE_FLOOR_FACTOR = 100.0

_MAX_POWER_ITERS = 10_000
_POWER_REL_TOL = 1e-12


def require_finite(arr, label: str = "array") -> np.ndarray:
    """Return ``arr`` as a float64 ndarray, rejecting NaN/Inf entries."""
    a = np.asarray(arr, dtype=float)
    if a.size and not np.all(np.isfinite(a)):
        raise ValueError(f"{label} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SlopeFit:
    """Ordinary least squares of log(error) against log(N)."""

    slope: float
    intercept: float
    r_squared: float
    points_used: int

    def __post_init__(self):
        if not (0.0 <= self.r_squared <= 1.0):
            raise ValueError(f"r_squared outside [0, 1]: {self.r_squared}")
        if self.points_used < 2:
            raise ValueError("a slope fit needs at least two points")


def spectral_norm(m) -> float:
    """Largest singular value of a dense matrix.

    Power iteration on the Gram matrix with a deterministic start
    vector (normalized all-ones), so repeated calls on the same input
    return the same value.  Relative tolerance on the Rayleigh quotient
    is 1e-12, giving the singular value to ~1e-10 relative accuracy.
    """
    a = require_finite(m, "matrix")
    if a.ndim != 2 or a.size == 0:
        raise ValueError("spectral_norm expects a non-empty 2-D matrix")
    # Iterate on the smaller Gram matrix.
    g = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    v = np.ones(g.shape[0]) / np.sqrt(g.shape[0])
    lam = 0.0
    for _ in range(_MAX_POWER_ITERS):
        w = g @ v
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        new_lam = float(v @ (g @ v))
        if abs(new_lam - lam) <= _POWER_REL_TOL * max(abs(new_lam), abs(lam)):
            lam = new_lam
            break
        lam = new_lam
    return float(np.sqrt(max(lam, 0.0)))


def fit_loglog_slope(points: Sequence[tuple[float, float]]) -> SlopeFit:
    """Fit log(error) = slope*log(N) + intercept by least squares.

    ``points`` is a sequence of (N, error) pairs with N >= 1 strictly
    increasing and error > 0.  Callers must drop numerical-floor points
    first (see :func:`above_noise_floor`).
    """
    pts = list(points)
    if len(pts) < 2:
        raise ValueError("need at least two points to fit a slope")
    ns = np.array([float(p[0]) for p in pts])
    errs = np.array([float(p[1]) for p in pts])
    if np.any(errs <= 0.0):
        raise ValueError("all errors must be positive; filter floor points first")
    if np.any(ns < 1.0):
        raise ValueError("all N must be >= 1")
    if np.any(np.diff(ns) <= 0.0):
        raise ValueError("N values must be strictly increasing")

    x = np.log(ns)
    y = np.log(errs)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    r2 = min(max(r2, 0.0), 1.0)
    return SlopeFit(float(slope), float(intercept), r2, len(pts))


def finite_difference_gradient(
    loss: Callable[[np.ndarray], float], params, eps: float
) -> np.ndarray:
    """Central-difference gradient (loss(p + eps*e_i) - loss(p - eps*e_i)) / (2 eps)."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    p = require_finite(params, "params").copy()
    grad = np.empty_like(p)
    for i in range(p.size):
        saved = p[i]
        p[i] = saved + eps
        hi = float(loss(p))
        p[i] = saved - eps
        lo = float(loss(p))
        p[i] = saved
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"loss returned a non-finite value near coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


def above_noise_floor(errors, scale: float) -> np.ndarray:
    """Mask of error values that sit above the rounding floor.

    The floor is NOISE_FLOOR_FACTOR * machine epsilon relative to the
    magnitude ``scale`` of the quantity the errors were measured on.
    """
    errs = np.asarray(errors, dtype=float)
    floor = NOISE_FLOOR_FACTOR * np.finfo(float).eps * max(abs(scale), np.finfo(float).tiny)
    return errs >= floor
