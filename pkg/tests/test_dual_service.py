import math

import numpy as np
import pytest

from homofilter.exceptions import ConfigError, DualCostError, DualStabilityError
from homofilter.models.experiment import ClosedFormHomogenization
from homofilter.services.averaging_service import ClosedFormHomogenized, ExactHomogenized
from homofilter.services.dual_service import (
    DualGridConfig,
    boundary_influence,
    duality_drift,
    first_derivative,
    initial_law_value,
    second_derivative,
    solve_averaged_dual,
    solve_full_dual,
    write_dual_snapshots,
)
from homofilter.services.filter_service import run_full_filter, run_reduced_filter
from homofilter.services.function_family import (
    constant_function,
    gaussian_function,
    metric_member,
)
from homofilter.services.random_streams import RngStream
from homofilter.services.simulation_service import TimeGrid, simulate_joint


def closed_form(bbar, abar, sigbar, hbar):
    spec = ClosedFormHomogenization(bbar=[bbar], abar=[[abar]], sigbar=[[sigbar]], hbar=[hbar])
    return ClosedFormHomogenized(spec, m=1, w=1, d=1)


class TestFiniteDifferences:
    def test_quadratic_is_differentiated_exactly_inside(self):
        x = np.linspace(-1.0, 1.0, 21)

        d1 = first_derivative(x ** 2, 0.1)
        d2 = second_derivative(x ** 2, 0.1)

        np.testing.assert_allclose(d1[1:-1], 2.0 * x[1:-1], atol=1e-12)
        np.testing.assert_allclose(d2[1:-1], 2.0, atol=1e-9)
        assert d2[0] == 0.0 and d2[-1] == 0.0

    def test_widened_grid_keeps_pitch(self):
        grid = DualGridConfig(x_bounds=(-2.0, 2.0), x_nodes=41, z_bounds=(-1.0, 1.0), z_nodes=5)

        wide = grid.widened(2)

        assert wide.x_bounds == (-4.0, 4.0)
        assert wide.x_axis[1] - wide.x_axis[0] == pytest.approx(grid.x_axis[1] - grid.x_axis[0])

    def test_grid_needs_five_nodes(self):
        with pytest.raises(ConfigError):
            DualGridConfig(x_nodes=3)


class TestSolveAveragedDual:
    @pytest.fixture
    def grid(self):
        return TimeGrid.from_step(1.0, 0.01)

    @pytest.fixture
    def dual_grid(self):
        return DualGridConfig(x_bounds=(-6.0, 6.0), x_nodes=241)

    def test_heat_equation_against_gaussian_kernel(self, grid, dual_grid):
        """b = 0, a = 1, h = 0: v(0, x) = exp(-x^2 / (1 + 2T)) / sqrt(1 + 2T)."""
        # Arrange
        homog = closed_form(0.0, 1.0, 0.0, 0.0)
        dY = np.zeros((grid.n_steps, 1))

        # Act
        result = solve_averaged_dual(homog, np.zeros((1, 1)), gaussian_function(), dY, grid, dual_grid)

        # Assert
        x = np.linspace(-3.0, 3.0, 13)
        exact = np.exp(-x ** 2 / 3.0) / math.sqrt(3.0)
        np.testing.assert_allclose(result.evaluate(0, x), exact, atol=2e-3)
        np.testing.assert_array_equal(result.values[-1], gaussian_function().value(dual_grid.x_axis.reshape(-1, 1)))

    def test_initial_law_integral_of_heat_solution(self, grid, dual_grid, zfree_model):
        """With X0 ~ N(0, 0.25) the integral is 1 / sqrt(1 + 2 (T + 0.25))."""
        homog = closed_form(0.0, 1.0, 0.0, 0.0)
        result = solve_averaged_dual(
            homog, np.zeros((1, 1)), gaussian_function(), np.zeros((grid.n_steps, 1)), grid, dual_grid
        )

        value = initial_law_value(result, zfree_model.initial_law)

        assert value == pytest.approx(1.0 / math.sqrt(3.5), abs=2e-3)

    def test_constant_terminal_stays_constant_without_observation_drift(self, grid, dual_grid):
        # Arrange
        homog = closed_form("-x1", 1.0, 0.5, 0.0)
        dY = 0.1 * np.random.default_rng(0).standard_normal((grid.n_steps, 1))

        # Act
        result = solve_averaged_dual(homog, np.array([[0.5]]), constant_function(), dY, grid, dual_grid)

        # Assert
        np.testing.assert_array_equal(result.values, np.ones_like(result.values))

    def test_solution_is_linear_in_terminal(self, ou_model, grid, dual_grid):
        # Arrange
        homog = closed_form("-x1", 1.0, 1.0, "tanh(x1)")
        dY = simulate_joint(ou_model, grid, RngStream(seed=3)).dY

        # Act
        one = solve_averaged_dual(homog, ou_model.alpha, constant_function(1.0), dY, grid, dual_grid)
        two = solve_averaged_dual(homog, ou_model.alpha, constant_function(2.0), dY, grid, dual_grid)

        # Assert
        np.testing.assert_allclose(two.values, 2.0 * one.values, rtol=1e-14)

    def test_fixed_substeps_too_coarse_are_refused(self, grid):
        homog = closed_form(0.0, 1.0, 0.0, 0.0)
        fine = DualGridConfig(x_bounds=(-6.0, 6.0), x_nodes=241, substeps=1)

        with pytest.raises(DualStabilityError) as exc_info:
            solve_averaged_dual(homog, np.zeros((1, 1)), gaussian_function(), np.zeros((100, 1)), grid, fine)

        assert 0.0 < exc_info.value.suggested_dt < grid.dt

    def test_boundary_influence_is_small_for_localized_terminal(self, grid):
        homog = closed_form(0.0, 1.0, 0.0, 0.0)
        dY = np.zeros((grid.n_steps, 1))

        def solve(dual_grid):
            return solve_averaged_dual(homog, np.zeros((1, 1)), gaussian_function(), dY, grid, dual_grid)

        change = boundary_influence(solve, DualGridConfig(x_bounds=(-6.0, 6.0), x_nodes=121), [-1.0, 0.0, 1.0])

        assert change < 1e-6

    def test_snapshot_csv(self, grid, dual_grid, tmp_path):
        homog = closed_form(0.0, 1.0, 0.0, 0.0)
        result = solve_averaged_dual(
            homog, np.zeros((1, 1)), gaussian_function(), np.zeros((grid.n_steps, 1)), grid, dual_grid
        )

        path = write_dual_snapshots(result, tmp_path / "dual.csv")

        lines = path.read_text().splitlines()
        assert lines[0] == "t,x,v"
        assert len(lines) == 1 + 2 * dual_grid.x_nodes


class TestSolveFullDual:
    @pytest.fixture
    def grid(self):
        return TimeGrid.from_step(0.5, 0.01)

    @pytest.fixture
    def dual_grid(self):
        return DualGridConfig(x_bounds=(-6.0, 6.0), x_nodes=61, z_bounds=(-4.0, 4.0), z_nodes=9, substeps=2)

    def test_z_free_full_dual_equals_averaged_dual(self, zfree_model, grid, dual_grid):
        # Arrange
        model = zfree_model.with_epsilon(0.5)
        dY = simulate_joint(model, grid, RngStream(seed=4)).dY
        phi = metric_member(2)

        # Act
        full = solve_full_dual(model, phi, dY, grid, dual_grid)
        averaged = solve_averaged_dual(ExactHomogenized(model), model.alpha, phi, dY, grid, dual_grid)

        # Assert
        for j in range(dual_grid.z_nodes):
            np.testing.assert_allclose(full.values[:, :, j], averaged.values, atol=1e-12)

    def test_cost_budget_is_enforced(self, ou_model, grid, dual_grid):
        dY = np.zeros((grid.n_steps, 1))

        with pytest.raises(DualCostError):
            solve_full_dual(ou_model, metric_member(1), dY, grid, dual_grid, budget=1.0)


class TestDualityDrift:
    @pytest.mark.slow
    def test_averaged_pair_is_conserved(self, zfree_model):
        """rho_hat_t(v_t) / rho_hat_0(v_0) stays within 2% of 1 on the grid."""
        # Arrange
        grid = TimeGrid.from_step(1.0, 0.01)
        bundle = simulate_joint(zfree_model, grid, RngStream(seed=12))
        homog = ExactHomogenized(zfree_model)
        phi = metric_member(2)
        steps = [0, 25, 50, 75, 100]
        result = solve_averaged_dual(
            homog, zfree_model.alpha, phi, bundle.dY, grid, DualGridConfig(x_bounds=(-6.0, 6.0), x_nodes=241)
        )
        run = run_reduced_filter(
            homog, zfree_model.alpha, bundle.dY, grid, 20_000, RngStream(seed=13),
            zfree_model.initial_law, [phi], checkpoints=steps, record_clouds=steps,
        )

        # Act
        check = duality_drift(result, run, steps, zfree_model.initial_law, tolerance=0.02)

        # Assert
        assert check.passed
        assert check.relative_drift[0] == 0.0
        assert check.initial_law_gap < 0.02

    @pytest.mark.slow
    def test_full_pair_is_conserved(self, ou_model):
        """The full filter paired with v^eps on the same observation record."""
        # Arrange
        grid = TimeGrid.from_step(1.0, 0.01)
        bundle = simulate_joint(ou_model, grid, RngStream(seed=14))
        phi = metric_member(2)
        steps = [0, 25, 50, 75, 100]
        result = solve_full_dual(ou_model, phi, bundle.dY, grid, DualGridConfig())
        run = run_full_filter(
            ou_model, bundle.dY, grid, 20_000, RngStream(seed=15), [phi],
            checkpoints=steps, record_clouds=steps,
        )

        # Act
        check = duality_drift(result, run, steps, ou_model.initial_law, tolerance=0.02)

        # Assert
        assert check.label == result.label
        assert check.relative_drift[0] == 0.0
        assert check.max_abs_drift <= 0.02
        assert check.initial_law_gap < 0.02
