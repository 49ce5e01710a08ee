"""Experiment runner behind the command-line interface.

Four entry points: depth-scaling studies of the reconstruction and
gradient errors, the three analytic tightness cases, the linear-flow
diagnostics, and desk-scale training of a toy chain with exact or
memory-free gradients.  Every run is driven by an ExperimentConfig and
a single integer seed; outputs are plain CSV files written with %.17g
formatting so that identical configurations reproduce byte-identical
artifacts.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .adjoint import (
    backprop_adjoint_euler,
    backprop_adjoint_heun,
    backprop_exact,
    backprop_exact_heun,
    compare_gradients,
    reconstruct_backward_euler,
    reconstruct_backward_heun,
)
from .dynamics import (
    DivergenceError,
    approximation_error,
    forward_euler_chain,
    forward_heun_chain,
    interpolate,
    solve_ode_oracle,
)
from .linear_flow import (
    FlowState,
    build_problem,
    check_small_loss_regime,
    depth_double_compare,
    extract_limit_map,
    flow_trace_to_csv,
    integrate_flow,
    limit_map_to_csv,
    max_step_size,
    monitor_invariants,
    product_vs_ode,
    small_loss_target,
    state_from_profile,
)
from .numerics import above_noise_floor, fit_loglog_slope, spectral_norm
from .residual_models import (
    WeightSchedule,
    make_identity_family,
    make_linear_family,
    make_mlp_family,
    make_square_family,
)

__all__ = [
    "ConfigError",
    "AllDepthsDiverged",
    "RegimeAbort",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "StudyRecord",
    "StudyResult",
    "run_scaling_study",
    "TightnessRecord",
    "run_tightness_suite",
    "LinearFlowResult",
    "run_linear_flow_experiment",
    "ToyRun",
    "ToyTrainResult",
    "run_toy_training",
]

EXPERIMENTS = ("approx_error", "euler_adjoint", "heun_adjoint", "linear_flow",
               "limit_map", "toy_train", "tightness_suite")
SCALING_EXPERIMENTS = ("approx_error", "euler_adjoint", "heun_adjoint")
FLOW_EXPERIMENTS = ("linear_flow", "limit_map")
PROFILES = ("constant", "lipschitz_profile", "alternating", "index")
FAMILIES = ("mlp", "linear", "square", "identity")
GRADIENT_MODES = ("exact", "adjoint_euler", "adjoint_heun")
TARGETS = ("square_half", "neg_square_half")

_DIVERGE = 1e12


class ConfigError(ValueError):
    """Malformed configuration file or option."""


class AllDepthsDiverged(RuntimeError):
    """Every depth in a study failed; there is nothing to fit."""


class RegimeAbort(RuntimeError):
    """Initial state violates the small-loss entry condition."""

    def __init__(self, depth: int, report):
        super().__init__(
            f"depth {depth} init outside the small-loss regime "
            f"(loss_margin={report.loss_margin:.6g}, "
            f"norm_margin={report.norm_margin:.6g})")
        self.depth = depth
        self.report = report


def _default_depths(experiment: str) -> tuple:
    if experiment in SCALING_EXPERIMENTS:
        return (16, 32, 64, 128, 256, 512, 1024)
    if experiment in FLOW_EXPERIMENTS:
        return (16, 32, 64, 128, 256)
    if experiment == "toy_train":
        return (64, 300)
    return (10, 100, 1000)


@dataclass
class ExperimentConfig:
    experiment: str
    depths: Optional[tuple] = None
    family: str = "mlp"
    state_dim: int = 4
    hidden_dim: int = 8
    schedule_profile: str = "lipschitz_profile"
    profile_scale: Optional[float] = None
    seed: int = 0
    output_dir: str = "."
    # linear-flow knobs
    t_end: float = 20.0
    dt: Optional[float] = None
    sigma_dim: int = 4
    loss_fraction: float = 0.125
    grid_points: int = 256
    probes: int = 20
    snapshot_count: int = 11
    # toy-training knobs
    target: str = "square_half"
    input_count: int = 64
    input_low: float = 0.0
    input_high: float = 1.0
    learning_rate: float = 0.05
    iterations: int = 600
    gradient_mode: str = "exact"
    # reporting knobs
    slope_r2_min: float = 0.9

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.depths is None:
            self.depths = _default_depths(self.experiment)
        self.depths = tuple(int(n) for n in self.depths)
        if not self.depths or any(n < 1 for n in self.depths):
            raise ConfigError("depths must be positive")
        if any(b <= a for a, b in zip(self.depths, self.depths[1:])):
            raise ConfigError("depths must be strictly increasing")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.schedule_profile not in PROFILES:
            raise ConfigError(f"unknown schedule_profile {self.schedule_profile!r}")
        if self.profile_scale is None:
            self.profile_scale = 0.1 if self.experiment in FLOW_EXPERIMENTS else 0.25
        if self.profile_scale <= 0:
            raise ConfigError("profile_scale must be positive")
        if self.state_dim < 1 or self.hidden_dim < 1 or self.sigma_dim < 1:
            raise ConfigError("dimensions must be >= 1")
        if self.t_end < 0 or (self.dt is not None and self.dt <= 0):
            raise ConfigError("t_end must be >= 0 and dt positive")
        if not 0.0 < self.loss_fraction < 1.0:
            raise ConfigError("loss_fraction must lie in (0, 1)")
        if self.grid_points < 1 or self.probes < 1 or self.snapshot_count < 2:
            raise ConfigError("grid_points, probes >= 1 and snapshot_count >= 2")
        if self.target not in TARGETS:
            raise ConfigError(f"unknown target {self.target!r}")
        if self.input_count < 2 or self.input_low >= self.input_high:
            raise ConfigError("need >= 2 inputs with input_low < input_high")
        if self.learning_rate <= 0 or self.iterations < 1:
            raise ConfigError("learning_rate must be > 0 and iterations >= 1")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(f"unknown gradient_mode {self.gradient_mode!r}")
        if not 0.0 < self.slope_r2_min <= 1.0:
            raise ConfigError("slope_r2_min must lie in (0, 1]")


_INT_KEYS = {"state_dim", "hidden_dim", "seed", "sigma_dim", "grid_points",
             "probes", "snapshot_count", "input_count", "iterations"}
_FLOAT_KEYS = {"profile_scale", "t_end", "dt", "loss_fraction", "input_low",
               "input_high", "learning_rate", "slope_r2_min"}
_STR_KEYS = {"experiment", "family", "schedule_profile", "output_dir",
             "target", "gradient_mode"}


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat `key = value` lines; unknown keys are hard errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key == "depths":
                values[key] = tuple(int(p) for p in val.split(","))
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            elif key in _STR_KEYS:
                values[key] = val
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    if "experiment" not in values:
        raise ConfigError("config must set `experiment`")
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _child_rngs(seed: int, count: int):
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(s) for s in seqs]


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# schedule profiles

@dataclass
class _Profile:
    """Frozen randomness of one schedule profile, reusable across depths."""

    kind: str
    base: Optional[np.ndarray] = None    # constant, or even rows of alternating
    other: Optional[np.ndarray] = None   # odd rows of alternating
    coeffs: Optional[np.ndarray] = None  # cubic coefficients, (4, param_dim)

    def rows(self, depth: int, param_dim: int) -> np.ndarray:
        if self.kind == "index":
            if param_dim != 1:
                raise ConfigError("index profile needs a one-parameter family")
            return np.arange(depth, dtype=float).reshape(depth, 1)
        if self.kind == "constant":
            return np.tile(self.base, (depth, 1))
        if self.kind == "alternating":
            # Two independent draws so consecutive layers stay Theta(1)
            # apart for every family; sign flips alone can be family
            # symmetries (a tanh net is even under joint negation).
            out = np.tile(self.base, (depth, 1))
            out[1::2] = self.other
            return out
        # Left sampling g(n/N): consecutive rows differ by O(1/N).
        s = np.arange(depth) / depth
        return _poly_eval(self.coeffs, s)


def _poly_eval(coeffs: np.ndarray, s: np.ndarray) -> np.ndarray:
    out = np.zeros((s.size, coeffs.shape[1]))
    for c in coeffs[::-1]:
        out = out * s[:, None] + c[None, :]
    return out


def _make_profile(config: ExperimentConfig, param_dim: int, rng) -> _Profile:
    scale = config.profile_scale
    kind = config.schedule_profile
    if kind == "index":
        return _Profile("index")
    if kind == "constant":
        base = rng.standard_normal(param_dim)
        base *= scale / np.max(np.abs(base))
        return _Profile(kind, base=base)
    if kind == "alternating":
        base = rng.standard_normal(param_dim)
        base *= scale / np.max(np.abs(base))
        other = rng.standard_normal(param_dim)
        other *= scale / np.max(np.abs(other))
        return _Profile(kind, base=base, other=other)
    coeffs = rng.standard_normal((4, param_dim))
    # Rescale the whole cubic so its sup-norm over [0, 1] hits `scale`;
    # consecutive layers then differ by O(1/N).
    probe = _poly_eval(coeffs, np.linspace(0.0, 1.0, 513))
    coeffs *= scale / np.max(np.abs(probe))
    return _Profile(kind, coeffs=coeffs)


def _make_family(config: ExperimentConfig):
    if config.family == "mlp":
        return make_mlp_family(config.state_dim, config.hidden_dim)
    if config.family == "linear":
        return make_linear_family(config.state_dim)
    if config.family == "square":
        return make_square_family()
    return make_identity_family()


# ---------------------------------------------------------------------------
# scaling studies

@dataclass
class StudyRecord:
    depth: int
    metric: str
    value: float
    flag: str = ""


@dataclass
class StudyResult:
    records: list
    fits: dict          # metric -> SlopeFit for metrics with >= 2 clean points
    fit_flags: dict     # metric -> "ok" | "low_confidence" | "insufficient"
    study_path: str
    slopes_path: str

    def values(self, metric: str) -> dict:
        return {r.depth: r.value for r in self.records
                if r.metric == metric and r.flag == ""}


def _euler_depth_metrics(family, schedule, x0, target):
    traj = forward_euler_chain(family, schedule, x0)
    out = traj.nodes[-1]
    out_grad = out - target
    exact = backprop_exact(family, schedule, traj, out_grad)
    recon = reconstruct_backward_euler(family, schedule, out, traj)
    approx = backprop_adjoint_euler(family, schedule, out, out_grad)
    comp = compare_gradients(exact, approx)
    state_scale = float(np.max(np.linalg.norm(traj.nodes, axis=1)))
    grad_scale = float(np.max(np.linalg.norm(exact.param_grads, axis=1)))
    return {
        "recon_max_error": (recon.max_error, state_scale),
        "grad_max_abs_error": (comp.max_abs, grad_scale),
        "grad_max_rel_error": (comp.max_rel, 1.0),
    }


def _heun_depth_metrics(family, schedule, x0, target):
    traj = forward_heun_chain(family, schedule, x0)
    out = traj.nodes[-1]
    out_grad = out - target
    exact = backprop_exact_heun(family, schedule, traj, out_grad)
    recon = reconstruct_backward_heun(family, schedule, out, traj)
    approx = backprop_adjoint_heun(family, schedule, out, out_grad)
    comp = compare_gradients(exact, approx)
    state_scale = float(np.max(np.linalg.norm(traj.nodes, axis=1)))
    grad_scale = float(np.max(np.linalg.norm(exact.param_grads, axis=1)))
    return {
        "recon_max_error": (recon.max_error, state_scale),
        "grad_max_abs_error": (comp.max_abs, grad_scale),
        "grad_max_rel_error": (comp.max_rel, 1.0),
    }


def _approx_depth_metrics(family, schedule, x0, target):
    traj = forward_euler_chain(family, schedule, x0)
    ode_field = interpolate(family, schedule, "residual_interp")
    sol = solve_ode_oracle(ode_field, x0, 64 * schedule.depth)
    _, max_gap = approximation_error(traj, sol)
    state_scale = float(np.max(np.linalg.norm(traj.nodes, axis=1)))
    return {"approx_max_error": (max_gap, state_scale)}


_STUDY_METRICS = {
    "approx_error": ("approx_max_error",),
    "euler_adjoint": ("recon_max_error", "grad_max_abs_error", "grad_max_rel_error"),
    "heun_adjoint": ("recon_max_error", "grad_max_abs_error", "grad_max_rel_error"),
}


def run_scaling_study(config: ExperimentConfig) -> StudyResult:
    """Sweep depths, record error metrics, fit log-log slopes, emit CSVs."""
    if config.experiment not in SCALING_EXPERIMENTS:
        raise ConfigError(f"not a scaling experiment: {config.experiment!r}")
    profile_rng, data_rng = _child_rngs(config.seed, 2)
    family = _make_family(config)
    profile = _make_profile(config, family.param_dim, profile_rng)
    x0 = data_rng.standard_normal(family.state_dim) / math.sqrt(family.state_dim)
    target = data_rng.standard_normal(family.state_dim)
    runner = {"approx_error": _approx_depth_metrics,
              "euler_adjoint": _euler_depth_metrics,
              "heun_adjoint": _heun_depth_metrics}[config.experiment]
    metric_names = _STUDY_METRICS[config.experiment]

    records = []
    clean = {name: [] for name in metric_names}
    for depth in config.depths:
        schedule = WeightSchedule(profile.rows(depth, family.param_dim))
        try:
            metrics = runner(family, schedule, x0, target)
        except DivergenceError:
            for name in metric_names:
                records.append(StudyRecord(depth, name, math.nan, "diverged"))
            continue
        for name in metric_names:
            value, scale = metrics[name]
            if above_noise_floor([value], scale)[0]:
                records.append(StudyRecord(depth, name, value))
                clean[name].append((depth, value))
            else:
                records.append(StudyRecord(depth, name, value, "floor"))
    if all(r.flag == "diverged" for r in records):
        raise AllDepthsDiverged(f"all depths diverged in {config.experiment}")

    fits, fit_flags = {}, {}
    for name in metric_names:
        if len(clean[name]) < 2:
            fit_flags[name] = "insufficient"
            continue
        fit = fit_loglog_slope(clean[name])
        fits[name] = fit
        fit_flags[name] = ("ok" if fit.r_squared >= config.slope_r2_min
                           else "low_confidence")

    os.makedirs(config.output_dir, exist_ok=True)
    study_path = os.path.join(config.output_dir, "study.csv")
    slopes_path = os.path.join(config.output_dir, "slopes.csv")
    _write_rows(study_path, ["N", "metric", "value"],
                [[r.depth, r.metric, _fmt(r.value)] for r in records])
    slope_rows = []
    for name in metric_names:
        if name in fits:
            f = fits[name]
            slope_rows.append([name, _fmt(f.slope), _fmt(f.intercept),
                               _fmt(f.r_squared), fit_flags[name]])
        else:
            slope_rows.append([name, "nan", "nan", "nan", fit_flags[name]])
    _write_rows(slopes_path, ["metric", "slope", "intercept", "r2", "flag"],
                slope_rows)
    return StudyResult(records, fits, fit_flags, study_path, slopes_path)


# ---------------------------------------------------------------------------
# tightness suite

@dataclass
class TightnessRecord:
    case: str
    depth: int
    measured: float
    analytic: float


def _tightness_case(case: str, depth: int) -> TightnessRecord:
    if case == "linear_drift":
        family = make_identity_family()
        rows = (np.arange(depth, dtype=float) / depth).reshape(depth, 1)
        schedule = WeightSchedule(rows)
        theta_end = np.array([1.0])
        kind = "residual_interp"
        x0 = np.zeros(1)
        analytic = 1.0 / (2.0 * depth)
    elif case == "index_residual":
        family = make_identity_family()
        rows = np.arange(depth, dtype=float).reshape(depth, 1)
        schedule = WeightSchedule(rows)
        theta_end = np.array([float(depth)])
        kind = "residual_interp"
        x0 = np.zeros(1)
        analytic = 0.5
    elif case == "alternating_square":
        family = make_square_family()
        rows = np.where(np.arange(depth) % 2 == 0, 1.0, -1.0).reshape(depth, 1)
        schedule = WeightSchedule(rows)
        theta_end = np.array([1.0 if depth % 2 == 0 else -1.0])
        kind = "weight_interp"
        x0 = np.zeros(1)
        analytic = 2.0 / 3.0
    else:
        raise ValueError(f"unknown tightness case {case!r}")
    traj = forward_euler_chain(family, schedule, x0)
    ode_field = interpolate(family, schedule, kind, theta_end=theta_end)
    sol = solve_ode_oracle(ode_field, x0, 64 * depth)
    measured = float(np.linalg.norm(traj.nodes[-1] - sol.states[-1]))
    return TightnessRecord(case, depth, measured, analytic)


TIGHTNESS_CASES = ("linear_drift", "index_residual", "alternating_square")


def run_tightness_suite(config: ExperimentConfig) -> list:
    """Measured chain-vs-flow gaps against their closed-form values."""
    records = [_tightness_case(case, depth)
               for case in TIGHTNESS_CASES for depth in config.depths]
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, "tightness.csv")
    _write_rows(path, ["case", "N", "measured", "analytic"],
                [[r.case, r.depth, _fmt(r.measured), _fmt(r.analytic)]
                 for r in records])
    return records


# ---------------------------------------------------------------------------
# linear flow

@dataclass
class LinearFlowResult:
    problem: object
    depths: tuple
    regime_reports: dict      # depth -> RegimeReport
    traces: dict              # depth -> FlowTrace
    monitor_reports: dict     # depth -> MonitorReport
    doubling: dict            # depth N -> sup distance to the 2N run
    limit_report: object      # LimitMapReport or None
    product_gaps: dict        # depth -> product-vs-flow discrepancy
    paths: list


def _matrix_profile(config: ExperimentConfig, rng) -> Callable[[float], np.ndarray]:
    d = config.sigma_dim
    terms = rng.standard_normal((3, d, d))
    grid = np.linspace(0.0, 1.0, 101)
    worst = max(
        spectral_norm(terms[0] + s * terms[1] + s * s * terms[2]) for s in grid)
    terms *= config.profile_scale / worst

    def profile(s: float) -> np.ndarray:
        return terms[0] + s * terms[1] + s * s * terms[2]

    return profile


def run_linear_flow_experiment(config: ExperimentConfig) -> LinearFlowResult:
    """Integrate the rescaled flow at every depth and run the diagnostics.

    One covariance, one target, and one initialization profile are
    shared across depths so that depth-doubling and limit-profile
    comparisons are meaningful.  The target is built from the deepest
    run's initial product, keeping every depth inside the small-loss
    regime; a violation aborts before any integration starts.
    """
    if config.experiment not in FLOW_EXPERIMENTS:
        raise ConfigError(f"not a linear-flow experiment: {config.experiment!r}")
    profile_rng, target_rng = _child_rngs(config.seed, 2)
    sigma = np.eye(config.sigma_dim)
    profile = _matrix_profile(config, profile_rng)
    states0 = {n: state_from_profile(profile, n) for n in config.depths}
    ref_depth = config.depths[-1]
    b_target = small_loss_target(
        sigma, states0[ref_depth],
        seed=int(target_rng.integers(2 ** 31)),
        loss_fraction=config.loss_fraction)
    problem = build_problem(sigma, b_target)

    regime_reports = {}
    for depth in config.depths:
        report = check_small_loss_regime(states0[depth], problem)
        regime_reports[depth] = report
        if not report.passes:
            raise RegimeAbort(depth, report)

    dt = config.dt if config.dt is not None else max_step_size(problem)
    snapshots = np.linspace(0.0, config.t_end, config.snapshot_count)
    os.makedirs(config.output_dir, exist_ok=True)
    paths = []
    traces, monitor_reports, product_gaps = {}, {}, {}
    for depth in config.depths:
        trace = integrate_flow(states0[depth], problem, config.t_end, dt, snapshots)
        traces[depth] = trace
        monitor_reports[depth] = monitor_invariants(trace, problem)
        path = os.path.join(config.output_dir, f"trace_N{depth}.csv")
        flow_trace_to_csv(trace, path)
        paths.append(path)
        last = trace.samples[-1]
        product_gaps[depth] = product_vs_ode(FlowState(last.schedule, last.t),
                                             problem, probes=config.probes)

    doubling = {}
    for depth in config.depths:
        if 2 * depth in traces:
            doubling[depth] = depth_double_compare(traces[depth], traces[2 * depth])
    if doubling:
        dbl_path = os.path.join(config.output_dir, "doubling.csv")
        _write_rows(dbl_path, ["N", "sup_distance"],
                    [[n, _fmt(doubling[n])] for n in sorted(doubling)])
        paths.append(dbl_path)

    limit_report = None
    if len(config.depths) >= 3:
        limit_report = extract_limit_map([traces[n] for n in config.depths],
                                         grid_points=config.grid_points)
        lm_path = os.path.join(config.output_dir, "limitmap.csv")
        limit_map_to_csv(limit_report, lm_path)
        paths.append(lm_path)

    prod_path = os.path.join(config.output_dir, "productode.csv")
    _write_rows(prod_path, ["N", "discrepancy"],
                [[n, _fmt(product_gaps[n])] for n in config.depths])
    paths.append(prod_path)
    return LinearFlowResult(problem, config.depths, regime_reports, traces,
                            monitor_reports, doubling, limit_report,
                            product_gaps, paths)


# ---------------------------------------------------------------------------
# toy training

@dataclass
class ToyRun:
    depth: int
    losses: np.ndarray     # per-iteration mean squared error, length iters+1
    final_loss: float
    losses_path: str
    trajectories_path: str


@dataclass
class ToyTrainResult:
    gradient_mode: str
    runs: dict             # depth -> ToyRun


def _toy_target(tag: str) -> Callable[[np.ndarray], np.ndarray]:
    if tag == "square_half":
        return lambda x: 0.5 * x * x
    return lambda x: -0.5 * x * x


def _forward_output(family, schedule, x0, scheme: str) -> np.ndarray:
    """Final chain state without storing the trajectory.

    The memory-free training modes use this so that no stored forward
    activations exist for the backward sweep to (accidentally) read.
    """
    x = x0
    depth = schedule.depth
    for n in range(depth):
        if scheme == "euler":
            x = x + family.eval(x, schedule[n]) / depth
        else:
            f_here = family.eval(x, schedule[n])
            y = x + f_here / depth
            x = x + (f_here + family.eval(y, schedule.padded_row(n + 1))) / (2.0 * depth)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > _DIVERGE:
            raise DivergenceError(f"training forward pass diverged at layer {n}", n)
    return x


def run_toy_training(config: ExperimentConfig) -> ToyTrainResult:
    """Full-batch gradient descent on a scalar chain, one run per depth.

    Updates use the depth-rescaled step theta <- theta - lr * N * grad,
    which keeps the effective output-space step size comparable across
    depths (the same rescaling the linear flow uses).
    """
    if config.experiment != "toy_train":
        raise ConfigError(f"not a toy-training experiment: {config.experiment!r}")
    profile_rng, = _child_rngs(config.seed, 1)
    family = make_mlp_family(1, config.hidden_dim)
    profile = _make_profile(config, family.param_dim, profile_rng)
    inputs = np.linspace(config.input_low, config.input_high,
                         config.input_count).reshape(1, -1)
    targets = _toy_target(config.target)(inputs)
    scheme = "heun" if config.gradient_mode == "adjoint_heun" else "euler"

    os.makedirs(config.output_dir, exist_ok=True)
    runs = {}
    for depth in config.depths:
        params = profile.rows(depth, family.param_dim)
        losses = np.empty(config.iterations + 1)
        for it in range(config.iterations):
            schedule = WeightSchedule(params)
            if config.gradient_mode == "exact":
                traj = forward_euler_chain(family, schedule, inputs)
                out = traj.nodes[-1]
                out_grad = 2.0 * (out - targets) / config.input_count
                grads = backprop_exact(family, schedule, traj, out_grad)
            elif config.gradient_mode == "adjoint_euler":
                out = _forward_output(family, schedule, inputs, "euler")
                out_grad = 2.0 * (out - targets) / config.input_count
                grads = backprop_adjoint_euler(family, schedule, out, out_grad)
            else:
                out = _forward_output(family, schedule, inputs, "heun")
                out_grad = 2.0 * (out - targets) / config.input_count
                grads = backprop_adjoint_heun(family, schedule, out, out_grad)
            losses[it] = float(np.mean((out - targets) ** 2))
            params = params - config.learning_rate * depth * grads.param_grads
        final_schedule = WeightSchedule(params)
        final_traj = (forward_heun_chain if scheme == "heun"
                      else forward_euler_chain)(family, final_schedule, inputs)
        out = final_traj.nodes[-1]
        losses[config.iterations] = float(np.mean((out - targets) ** 2))

        losses_path = os.path.join(config.output_dir, f"losses_N{depth}.csv")
        _write_rows(losses_path, ["iteration", "loss"],
                    [[k, _fmt(losses[k])] for k in range(losses.size)])
        traj_path = os.path.join(config.output_dir, f"trajectories_N{depth}.csv")
        rows = []
        s_values = np.arange(depth + 1) / depth
        for b in range(config.input_count):
            for node in range(depth + 1):
                rows.append([b, node, _fmt(s_values[node]),
                             _fmt(final_traj.nodes[node, 0, b])])
        _write_rows(traj_path, ["input_index", "node_index", "s", "x_0"], rows)
        runs[depth] = ToyRun(depth, losses, float(losses[-1]),
                             losses_path, traj_path)
    return ToyTrainResult(config.gradient_mode, runs)
