"""End-to-end acceptance checks, one test per headline guarantee.

Each test pins the quantitative window and the runtime budget for one
advertised behavior, driving the public API the way the experiment
scripts do.  Shared sweeps are computed once in module fixtures and
timed, so every consumer can hold the wall clock against its own
budget.
"""

import gc
import time
import tracemalloc

import numpy as np
import pytest

from odenet.adjoint import (
    adjoint_sweep_euler,
    adjoint_sweep_heun,
    backprop_exact,
    backprop_exact_heun,
)
from odenet.dynamics import (
    forward_euler_chain,
    forward_heun_chain,
    interpolate,
    solve_ode_oracle,
)
from odenet.harness import (
    ExperimentConfig,
    run_linear_flow_experiment,
    run_scaling_study,
)
from odenet.numerics import finite_difference_gradient
from odenet.residual_models import (
    WeightSchedule,
    make_identity_family,
    make_linear_family,
    make_mlp_family,
    make_square_family,
)


def _timed_study(experiment: str, profile: str, out) -> tuple:
    config = ExperimentConfig(experiment=experiment, schedule_profile=profile,
                              seed=0, output_dir=str(out))
    start = time.perf_counter()
    result = run_scaling_study(config)
    return result, time.perf_counter() - start


@pytest.fixture(scope="module")
def euler_study(tmp_path_factory):
    return _timed_study("euler_adjoint", "lipschitz_profile",
                        tmp_path_factory.mktemp("euler_study"))


@pytest.fixture(scope="module")
def heun_study(tmp_path_factory):
    return _timed_study("heun_adjoint", "lipschitz_profile",
                        tmp_path_factory.mktemp("heun_study"))


@pytest.fixture(scope="module")
def heun_alternating_study(tmp_path_factory):
    return _timed_study("heun_adjoint", "alternating",
                        tmp_path_factory.mktemp("heun_alt_study"))


@pytest.fixture(scope="module")
def flow_experiment(tmp_path_factory):
    config = ExperimentConfig(experiment="limit_map", seed=0,
                              output_dir=str(tmp_path_factory.mktemp("flow")))
    start = time.perf_counter()
    result = run_linear_flow_experiment(config)
    return result, time.perf_counter() - start


def _scalar_gap(family, rows, theta_end, kind) -> float:
    """|x_N - x(1)| for a scalar chain against its interpolating flow."""
    schedule = WeightSchedule(rows)
    x0 = np.zeros(1)
    traj = forward_euler_chain(family, schedule, x0)
    field = interpolate(family, schedule, kind, theta_end=theta_end)
    sol = solve_ode_oracle(field, x0, 4 * schedule.depth)
    return float(np.abs(traj.nodes[-1][0] - sol.states[-1][0]))


def test_smooth_linear_profile_gap_is_half_inverse_depth():
    family = make_identity_family()
    start = time.perf_counter()
    for depth in (10, 100, 1000):
        rows = (np.arange(depth, dtype=float) / depth).reshape(depth, 1)
        gap = _scalar_gap(family, rows, np.array([1.0]), "residual_interp")
        assert abs(gap - 1.0 / (2.0 * depth)) <= 1e-9
    assert time.perf_counter() - start < 1.0


def test_rough_schedule_gaps_reach_their_limits():
    depth = 1000
    start = time.perf_counter()
    index_rows = np.arange(depth, dtype=float).reshape(depth, 1)
    gap = _scalar_gap(make_identity_family(), index_rows,
                      np.array([float(depth)]), "residual_interp")
    assert abs(gap - 0.5) <= 1e-2
    alt_rows = np.where(np.arange(depth) % 2 == 0, 1.0, -1.0).reshape(depth, 1)
    gap = _scalar_gap(make_square_family(), alt_rows,
                      np.array([1.0]), "weight_interp")
    assert abs(gap - 2.0 / 3.0) <= 1e-2
    assert time.perf_counter() - start < 5.0


def test_euler_reconstruction_error_decays_at_first_order(euler_study):
    result, elapsed = euler_study
    fit = result.fits["recon_max_error"]
    assert -1.25 <= fit.slope <= -0.8
    assert fit.r_squared >= 0.95
    assert elapsed < 60.0


def test_euler_gradient_error_decays_at_second_order(euler_study):
    result, elapsed = euler_study
    fit = result.fits["grad_max_abs_error"]
    assert -2.3 <= fit.slope <= -1.7
    assert fit.r_squared >= 0.95
    assert elapsed < 90.0


def test_heun_gradient_error_rates(heun_study, heun_alternating_study):
    smooth, t_smooth = heun_study
    rough, t_rough = heun_alternating_study
    fit = smooth.fits["grad_max_abs_error"]
    assert fit.slope <= -2.5
    assert fit.r_squared >= 0.95
    # smooth reconstruction also beats second order (see the window
    # check below for the advertised range)
    assert smooth.fits["recon_max_error"].slope <= -2.5
    alt_fit = rough.fits["grad_max_abs_error"]
    assert -2.3 <= alt_fit.slope <= -1.7
    assert alt_fit.r_squared >= 0.95
    assert t_smooth + t_rough < 180.0


@pytest.mark.xfail(
    strict=True,
    reason="the two-stage reverse pass cancels the constant-parameter "
           "inversion defect, so smooth-schedule reconstruction decays a "
           "full order faster than this window allows (slope near -2.9)")
def test_heun_reconstruction_error_within_second_order_window(heun_study):
    result, _ = heun_study
    fit = result.fits["recon_max_error"]
    assert -2.35 <= fit.slope <= -1.7


def test_heun_relative_gradient_error_dominated_by_euler(euler_study, heun_study):
    euler_result, t_euler = euler_study
    heun_result, t_heun = heun_study
    euler_rel = euler_result.values("grad_max_rel_error")
    heun_rel = heun_result.values("grad_max_rel_error")
    checked = [n for n in sorted(euler_rel) if n >= 64]
    assert checked == [64, 128, 256, 512, 1024]
    for n in checked:
        assert heun_rel[n] <= euler_rel[n]
    assert t_euler + t_heun < 60.0


def test_exact_gradients_match_finite_differences_for_all_families():
    families = [make_mlp_family(2, 3), make_linear_family(2),
                make_square_family(), make_identity_family()]
    start = time.perf_counter()
    worst = 0.0
    for family in families:
        for scheme in ("euler", "heun"):
            chain = forward_euler_chain if scheme == "euler" else forward_heun_chain
            backprop = backprop_exact if scheme == "euler" else backprop_exact_heun
            for depth in (1, 2, 8):
                for seed in range(20):
                    rng = np.random.default_rng(1000 * depth + seed)
                    rows = 0.3 * rng.standard_normal((depth, family.param_dim))
                    x0 = 0.5 * rng.standard_normal(family.state_dim)
                    target = rng.standard_normal(family.state_dim)
                    schedule = WeightSchedule(rows)
                    traj = chain(family, schedule, x0)
                    grads = backprop(family, schedule, traj,
                                     traj.nodes[-1] - target)

                    def loss_of(flat):
                        sched = WeightSchedule(
                            flat.reshape(depth, family.param_dim))
                        end = chain(family, sched, x0).nodes[-1]
                        return 0.5 * float(np.sum((end - target) ** 2))

                    fd = finite_difference_gradient(loss_of, rows.ravel(),
                                                    eps=1e-6)
                    rel = (np.linalg.norm(fd - grads.param_grads.ravel())
                           / np.linalg.norm(fd))
                    worst = max(worst, rel)
    assert worst <= 1e-5
    assert time.perf_counter() - start < 30.0


def test_flow_monitors_hold_across_depths(flow_experiment):
    result, elapsed = flow_experiment
    stats, initial_stats = [], []
    for depth in (16, 32, 64, 128):
        mon = result.monitor_reports[depth]
        assert mon.theta_bound_ok and mon.max_theta_norm < 0.5
        assert mon.decay_ok and mon.max_decay_ratio <= 1.0 + 1e-3
        stats.append(mon.max_smoothness_stat)
        initial_stats.append(result.traces[depth].samples[0].smoothness_stat)
    # one depth-independent constant bounds the smoothness statistic
    shared_bound = 2.0 * max(initial_stats)
    assert all(stat <= shared_bound for stat in stats)
    assert elapsed < 120.0


def test_depth_doubling_distances_halve(flow_experiment):
    result, elapsed = flow_experiment
    for n in (16, 32, 64):
        ratio = result.doubling[2 * n] / result.doubling[n]
        assert 0.35 <= ratio <= 0.7
    assert elapsed < 120.0


def test_limit_profile_rate_and_product_discrepancy(flow_experiment):
    result, elapsed = flow_experiment
    report = result.limit_report
    assert report.ref_depth == 256
    for fit in report.per_time_fits:
        assert fit is not None
        assert -1.3 <= fit.slope <= -0.7
    gaps = result.product_gaps
    c = 64.0 * gaps[64]
    for n, gap in gaps.items():
        assert gap <= 1.1 * c / n
    assert elapsed < 180.0


def _sweep_peak_bytes(forward, sweep, depth: int) -> int:
    """Traced allocation peak of one memory-free backward sweep."""
    family = make_mlp_family(4, 8)
    rng = np.random.default_rng(5)
    schedule = WeightSchedule(0.25 * rng.standard_normal((depth, family.param_dim)))
    out = forward(family, schedule, np.full(4, 0.3)).nodes[-1]
    g = np.ones(4)

    def consume() -> float:
        total = 0.0
        for _, theta_grad, state_grad in sweep(family, schedule, out, g):
            total += float(theta_grad[0]) + float(state_grad[0])
        return total

    consume()  # warm numpy internals so they do not count as live state
    gc.collect()
    tracemalloc.start()
    tracemalloc.reset_peak()
    consume()
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    return peak


def test_adjoint_sweeps_use_depth_independent_memory():
    pairs = [(forward_euler_chain, adjoint_sweep_euler),
             (forward_heun_chain, adjoint_sweep_heun)]
    for forward, sweep in pairs:
        shallow = _sweep_peak_bytes(forward, sweep, 64)
        deep = _sweep_peak_bytes(forward, sweep, 1024)
        assert deep <= 1.1 * shallow


def test_identical_seeds_reproduce_identical_study_outputs(tmp_path):
    blobs = []
    for sub in ("first", "second"):
        config = ExperimentConfig(experiment="euler_adjoint", depths=(16, 64),
                                  seed=0, output_dir=str(tmp_path / sub))
        run_scaling_study(config)
        blobs.append((tmp_path / sub / "study.csv").read_bytes()
                     + (tmp_path / sub / "slopes.csv").read_bytes())
    assert blobs[0] == blobs[1]
