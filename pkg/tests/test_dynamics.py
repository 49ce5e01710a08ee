import numpy as np
import pytest

from odenet.dynamics import (
    DivergenceError,
    Trajectory,
    VectorField,
    approximation_bound,
    approximation_error,
    estimate_c_n,
    forward_euler_chain,
    forward_heun_chain,
    interpolate,
    solve_ode_oracle,
    trajectory_to_csv,
)
from odenet.numerics import fit_loglog_slope
from odenet.residual_models import (
    WeightSchedule,
    make_identity_family,
    make_index_schedule,
    make_linear_family,
    make_mlp_family,
    make_square_family,
)


def constant_schedule(theta, depth):
    return WeightSchedule(np.tile(np.asarray(theta, dtype=float), (depth, 1)))


def alternating_unit_schedule(depth):
    return WeightSchedule(np.where(np.arange(depth) % 2 == 0, 1.0, -1.0).reshape(depth, 1))


class TestForwardEulerChain:
    def test_zero_family_keeps_state(self):
        fam = make_mlp_family(3, 4)
        sched = WeightSchedule(np.zeros((5, fam.param_dim)))
        traj = forward_euler_chain(fam, sched, np.array([1.0, -2.0, 0.5]))
        assert np.all(traj.nodes == traj.nodes[0])
        assert traj.scheme == "euler" and traj.midpoints is None

    def test_scalar_linear_hand_values(self):
        # x_{n+1} = x_n (1 + 1/2): nodes 1, 1.5, 2.25
        fam = make_linear_family(1)
        traj = forward_euler_chain(fam, constant_schedule([1.0], 2), np.array([1.0]))
        assert traj.nodes[:, 0] == pytest.approx([1.0, 1.5, 2.25])

    def test_index_schedule_halfway_point(self):
        # f = n: x_N = x_0 + (0 + 1 + ... + N-1)/N = (N-1)/2
        traj = forward_euler_chain(make_identity_family(), make_index_schedule(2),
                                   np.zeros(1))
        assert traj.nodes[-1, 0] == pytest.approx(0.5)

    def test_batched_matches_columns(self):
        fam = make_mlp_family(2, 3)
        rng = np.random.default_rng(1)
        sched = WeightSchedule(rng.standard_normal((4, fam.param_dim)) * 0.3)
        x0 = rng.standard_normal((2, 5))
        batched = forward_euler_chain(fam, sched, x0)
        assert batched.nodes.shape == (5, 2, 5)
        for b in range(5):
            single = forward_euler_chain(fam, sched, x0[:, b])
            assert np.allclose(batched.nodes[:, :, b], single.nodes, atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward_euler_chain(make_linear_family(2), constant_schedule(np.zeros(4), 2),
                                np.zeros(3))

    def test_divergence_names_layer(self):
        fam = make_linear_family(1)
        with pytest.raises(DivergenceError) as exc:
            forward_euler_chain(fam, constant_schedule([400.0], 8), np.ones(1))
        assert exc.value.layer == 7


class TestForwardHeunChain:
    def test_state_independent_residual_matches_euler(self):
        sq = make_square_family()
        sched = alternating_unit_schedule(6)
        x0 = np.array([0.25])
        heun = forward_heun_chain(sq, sched, x0)
        euler = forward_euler_chain(sq, sched, x0)
        assert np.allclose(heun.nodes, euler.nodes, atol=0)

    def test_scalar_linear_hand_values(self):
        """Per-step factor 1 + 1/2 + 1/8 = 1.625 for theta = 1, N = 2."""
        fam = make_linear_family(1)
        traj = forward_heun_chain(fam, constant_schedule([1.0], 2), np.array([1.0]))
        assert traj.nodes[:, 0] == pytest.approx([1.0, 1.625, 2.640625])
        assert traj.midpoints[:, 0] == pytest.approx([1.5, 2.4375])

    def test_single_step_uses_padded_parameter(self):
        # N=1 reads theta_1 which pads to theta_0: x_1 = 1 + t + t^2/2
        fam = make_linear_family(1)
        t = 0.3
        traj = forward_heun_chain(fam, constant_schedule([t], 1), np.array([1.0]))
        assert traj.nodes[-1, 0] == pytest.approx(1.0 + t + 0.5 * t * t, rel=1e-15)

    def test_exponential_limit(self):
        fam = make_linear_family(1)
        traj = forward_heun_chain(fam, constant_schedule([1.0], 1000), np.array([1.0]))
        assert abs(traj.nodes[-1, 0] - np.e) <= 1e-5


class TestTrajectoryType:
    def test_validation(self):
        with pytest.raises(ValueError):
            Trajectory(2, np.zeros((3, 1)), "rk4")
        with pytest.raises(ValueError):
            Trajectory(2, np.zeros((2, 1)), "euler")
        with pytest.raises(ValueError):
            Trajectory(2, np.zeros((3, 1)), "heun")  # midpoints missing
        with pytest.raises(ValueError):
            Trajectory(2, np.zeros((3, 1)), "euler", midpoints=np.zeros((2, 1)))


class TestInterpolate:
    @pytest.mark.parametrize("kind", ["residual_interp", "weight_interp"])
    def test_grid_consistency(self, kind):
        """Field values at s = n/N equal the layer residuals exactly."""
        fam = make_mlp_family(2, 3)
        rng = np.random.default_rng(9)
        sched = WeightSchedule(rng.standard_normal((8, fam.param_dim)) * 0.4)
        field = interpolate(fam, sched, kind)
        for n in range(sched.depth):
            for _ in range(50):
                x = rng.standard_normal(2)
                gap = field.eval(x, n / 8) - fam.eval(x, sched[n])
                assert np.max(np.abs(gap)) == 0.0

    def test_constant_schedule_time_independent(self):
        fam = make_mlp_family(2, 2)
        theta = np.random.default_rng(2).standard_normal(fam.param_dim)
        sched = constant_schedule(theta, 5)
        x = np.array([0.3, -0.7])
        expected = fam.eval(x, theta)
        for kind in ("residual_interp", "weight_interp"):
            field = interpolate(fam, sched, kind)
            for s in (0.0, 0.123, 0.5, 0.999, 1.0):
                assert np.allclose(field.eval(x, s), expected, atol=0)

    def test_alternating_square_weight_interp_closed_form(self):
        # theta linear between +-1 gives phi(s) = (2Ns - (2n+1))^2
        depth = 4
        field = interpolate(make_square_family(), alternating_unit_schedule(depth),
                            "weight_interp", theta_end=np.array([1.0]))
        x = np.zeros(1)
        for s in np.linspace(0.0, 1.0, 33):
            n = min(int(np.ceil(s * depth)) - 1, depth - 1) if s > 0 else 0
            expected = (2 * depth * s - (2 * n + 1)) ** 2
            assert field.eval(x, s)[0] == pytest.approx(expected, abs=1e-12)

    def test_alternating_square_residual_interp_is_constant_one(self):
        field = interpolate(make_square_family(), alternating_unit_schedule(5),
                            "residual_interp")
        x = np.zeros(1)
        for s in np.linspace(0.0, 1.0, 17):
            assert field.eval(x, s)[0] == pytest.approx(1.0, abs=0)

    def test_last_interval_padding_and_override(self):
        fam = make_identity_family()
        sched = make_index_schedule(3)  # rows 0, 1, 2
        padded = interpolate(fam, sched, "residual_interp")
        # default padding repeats the last row, so the field is flat there
        assert padded.eval(np.zeros(1), 1.0)[0] == pytest.approx(2.0)
        extended = interpolate(fam, sched, "residual_interp",
                               theta_end=np.array([3.0]))
        assert extended.eval(np.zeros(1), 1.0)[0] == pytest.approx(3.0)
        assert extended.eval(np.zeros(1), 5.0 / 6.0)[0] == pytest.approx(2.5)

    def test_domain_and_kind_errors(self):
        fam = make_identity_family()
        sched = make_index_schedule(2)
        field = interpolate(fam, sched, "residual_interp")
        with pytest.raises(ValueError):
            field.eval(np.zeros(1), -0.1)
        with pytest.raises(ValueError):
            field.eval(np.zeros(1), 1.1)
        with pytest.raises(ValueError):
            interpolate(fam, sched, "spline")
        with pytest.raises(ValueError):
            interpolate(fam, sched, "residual_interp", theta_end=np.zeros(2))


class TestSolveOdeOracle:
    def test_exponential(self):
        field = interpolate(make_linear_family(1), constant_schedule([1.0], 1),
                            "residual_interp")
        sol = solve_ode_oracle(field, np.ones(1), 1024)
        assert abs(sol.states[-1, 0] - np.e) <= 1e-8

    def test_linear_drift_quadrature(self):
        field = VectorField(lambda x, s: np.full_like(x, s), "direct",
                            depth=1, state_dim=1)
        sol = solve_ode_oracle(field, np.zeros(1), 16)
        # RK4 integrates the line s exactly: x(1) = 1/2
        assert sol.states[-1, 0] == pytest.approx(0.5, abs=1e-15)
        assert sol.grid[0] == 0.0 and sol.grid[-1] == 1.0

    def test_alternating_square_third(self):
        depth = 16
        field = interpolate(make_square_family(), alternating_unit_schedule(depth),
                            "weight_interp",
                            theta_end=np.array([1.0 if depth % 2 == 0 else -1.0]))
        sol = solve_ode_oracle(field, np.zeros(1), 64 * depth)
        assert sol.states[-1, 0] == pytest.approx(1.0 / 3.0, abs=1e-6)

    def test_step_count_validation(self):
        field = interpolate(make_identity_family(), make_index_schedule(3),
                            "residual_interp")
        with pytest.raises(ValueError):
            solve_ode_oracle(field, np.zeros(1), 64)   # not a multiple of 3
        with pytest.raises(ValueError):
            solve_ode_oracle(field, np.zeros(1), 6)    # below 4x depth

    def test_self_convergence_order(self):
        """Halving the step on a smooth field gains a factor >= 2^3.5."""
        field = VectorField(lambda x, s: x * (1.0 - x), "direct",
                            depth=1, state_dim=1)
        x0 = np.array([0.2])
        ref = solve_ode_oracle(field, x0, 512).states[-1, 0]
        err_coarse = abs(solve_ode_oracle(field, x0, 16).states[-1, 0] - ref)
        err_fine = abs(solve_ode_oracle(field, x0, 32).states[-1, 0] - ref)
        assert np.log2(err_coarse / err_fine) >= 3.5

    def test_batched_states(self):
        field = VectorField(lambda x, s: -x, "direct", depth=1, state_dim=2)
        x0 = np.array([[1.0, 2.0], [0.0, -1.0]])
        sol = solve_ode_oracle(field, x0, 32)
        assert sol.states.shape == (33, 2, 2)
        assert np.allclose(sol.states[-1], x0 * np.exp(-1.0), atol=1e-9)

    def test_divergence(self):
        field = VectorField(lambda x, s: x * x, "direct", depth=1, state_dim=1)
        with pytest.raises(DivergenceError):
            solve_ode_oracle(field, np.array([2.0]), 64)


class TestApproximationError:
    def test_zero_field(self):
        fam = make_mlp_family(2, 2)
        sched = WeightSchedule(np.zeros((4, fam.param_dim)))
        x0 = np.array([1.0, -1.0])
        traj = forward_euler_chain(fam, sched, x0)
        sol = solve_ode_oracle(interpolate(fam, sched, "residual_interp"), x0, 16)
        gaps, worst = approximation_error(traj, sol)
        assert worst == 0.0 and np.all(gaps == 0.0)

    @pytest.mark.parametrize("depth", [8, 64])
    def test_linear_drift_gap_is_half_step(self, depth):
        """Chain vs flow on phi = s: gap 1/(2N), the generic tight case."""
        fam = make_identity_family()
        sched = WeightSchedule((np.arange(depth) / depth).reshape(depth, 1))
        traj = forward_euler_chain(fam, sched, np.zeros(1))
        field = interpolate(fam, sched, "residual_interp", theta_end=np.array([1.0]))
        sol = solve_ode_oracle(field, np.zeros(1), 64 * depth)
        _, worst = approximation_error(traj, sol)
        assert worst == pytest.approx(1.0 / (2 * depth), abs=1e-12)

    def test_index_schedule_constant_gap(self):
        fam = make_identity_family()
        for depth in (64, 256):
            sched = make_index_schedule(depth)
            traj = forward_euler_chain(fam, sched, np.zeros(1))
            field = interpolate(fam, sched, "residual_interp",
                                theta_end=np.array([float(depth)]))
            sol = solve_ode_oracle(field, np.zeros(1), 16 * depth)
            gaps, _ = approximation_error(traj, sol)
            # the end-state gap does not vanish with depth
            assert gaps[-1] == pytest.approx(0.5, abs=1e-9)

    def test_grid_mismatch(self):
        fam = make_identity_family()
        traj = forward_euler_chain(fam, make_index_schedule(3), np.zeros(1))
        field = interpolate(fam, make_index_schedule(4), "residual_interp")
        sol = solve_ode_oracle(field, np.zeros(1), 16)  # 16 % 3 != 0
        with pytest.raises(ValueError):
            approximation_error(traj, sol)

    def test_euler_chain_equals_left_endpoint_euler_on_field(self):
        """The chain is the explicit-Euler discretization of its own field."""
        fam = make_mlp_family(2, 3)
        rng = np.random.default_rng(21)
        depth = 6
        sched = WeightSchedule(rng.standard_normal((depth, fam.param_dim)) * 0.4)
        field = interpolate(fam, sched, "residual_interp")
        x0 = rng.standard_normal(2)
        traj = forward_euler_chain(fam, sched, x0)
        x = x0.copy()
        for n in range(depth):
            x = x + field.eval(x, n / depth) / depth
            assert np.array_equal(x, traj.nodes[n + 1])


class TestApproximationBound:
    def test_zero_lipschitz_branch(self):
        assert approximation_bound(0.0, 1.0, 10) == pytest.approx(0.05)

    def test_continuity_at_zero(self):
        assert approximation_bound(1e-12, 1.0, 10) == pytest.approx(0.05, abs=1e-10)

    def test_generic_value(self):
        assert approximation_bound(1.0, 2.0, 100) == pytest.approx((np.e - 1) / 100)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            approximation_bound(-1.0, 1.0, 10)
        with pytest.raises(ValueError):
            approximation_bound(1.0, -1.0, 10)
        with pytest.raises(ValueError):
            approximation_bound(1.0, 1.0, 0)

    def test_bounds_measured_error_with_sampled_constants(self):
        """Measured chain-vs-flow gap obeys the bound with inflated constants."""
        from odenet.residual_models import estimate_constants
        fam = make_mlp_family(2, 3)
        rng = np.random.default_rng(4)
        coeffs = rng.standard_normal((2, fam.param_dim)) * 0.3
        for depth in (8, 32):
            s_grid = np.arange(depth) / depth
            sched = WeightSchedule(coeffs[0] + np.outer(s_grid, coeffs[1]))
            x0 = rng.standard_normal(2) * 0.5
            traj = forward_euler_chain(fam, sched, x0)
            field = interpolate(fam, sched, "residual_interp")
            sol = solve_ode_oracle(field, x0, 64 * depth)
            _, worst = approximation_error(traj, sol)
            radius = float(np.max(np.linalg.norm(sol.states, axis=1))) + 1.0
            consts = estimate_constants(fam, sched, radius, samples=60)
            c_n = estimate_c_n(field, radius, samples=200)
            bound = approximation_bound(1.2 * consts.l_f, 1.2 * c_n, depth)
            assert worst <= bound * 1.1

    def test_heun_convergence_order(self):
        """Two-stage chain reaches the flow at empirical order >= 1.8."""
        fam = make_mlp_family(2, 3)
        theta = np.random.default_rng(6).standard_normal(fam.param_dim) * 0.5
        x0 = np.array([0.4, -0.2])
        points = []
        for depth in (4, 8, 16, 32, 64):
            sched = constant_schedule(theta, depth)
            traj = forward_heun_chain(fam, sched, x0)
            field = interpolate(fam, sched, "residual_interp")
            sol = solve_ode_oracle(field, x0, 64 * depth)
            _, worst = approximation_error(traj, sol)
            points.append((depth, worst))
        fit = fit_loglog_slope(points)
        assert fit.slope <= -1.8


class TestEstimateCn:
    def test_linear_drift_rate(self):
        a = 1.7
        field = VectorField(lambda x, s: np.full_like(x, a * s), "direct",
                            depth=4, state_dim=1)
        est = estimate_c_n(field, 1.0, samples=100)
        assert est == pytest.approx(a, rel=0.05)

    def test_constant_field_is_zero(self):
        field = VectorField(lambda x, s: np.full_like(x, 2.0), "direct",
                            depth=1, state_dim=1)
        assert estimate_c_n(field, 1.0, samples=50) == pytest.approx(0.0, abs=1e-6)

    def test_index_schedule_obstruction_grows_linearly(self):
        fam = make_identity_family()
        estimates = {}
        for depth in (8, 16):
            field = interpolate(fam, make_index_schedule(depth), "residual_interp",
                                theta_end=np.array([float(depth)]))
            estimates[depth] = estimate_c_n(field, 1.0, samples=200)
        assert estimates[8] == pytest.approx(8.0, rel=0.05)
        assert estimates[16] / estimates[8] == pytest.approx(2.0, rel=0.1)

    def test_validation(self):
        field = VectorField(lambda x, s: x, "direct", depth=1, state_dim=1)
        with pytest.raises(ValueError):
            estimate_c_n(field, 0.0, samples=10)
        with pytest.raises(ValueError):
            estimate_c_n(field, 1.0, samples=0)


def test_trajectory_csv_format(tmp_path):
    fam = make_linear_family(1)
    traj = forward_euler_chain(fam, constant_schedule([1.0], 2), np.array([1.0]))
    path = tmp_path / "traj.csv"
    trajectory_to_csv(traj, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "node_index,s,x_0"
    assert lines[1] == "0,0,1"
    assert lines[-1] == "2,1,2.25"
    batched = forward_euler_chain(fam, constant_schedule([1.0], 2), np.ones((1, 3)))
    with pytest.raises(ValueError):
        trajectory_to_csv(batched, tmp_path / "b.csv")
