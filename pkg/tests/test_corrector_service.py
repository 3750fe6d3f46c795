from dataclasses import replace
from unittest.mock import Mock

import numpy as np
import pytest

from homofilter.config import settings
from homofilter.exceptions import ConfigError, CorrectorError
from homofilter.models.experiment import (
    CorrectorConfig,
    InvariantSamplerConfig,
    LatticeConfig,
)
from homofilter.models.model_file import Dimensions
from homofilter.services.averaging_service import ExactHomogenized, homogenize
from homofilter.services.corrector_service import (
    CorrectorTrace,
    _lag_matrix,
    certify_centering,
    corrector_from_profile,
    corrector_scaling,
    estimate_corrector,
    expansion_residual,
    fast_lag_profile,
    write_corrector_trace,
)
from homofilter.services.dual_service import DualGridConfig, solve_averaged_dual
from homofilter.services.function_family import metric_member, tanh_function
from homofilter.services.random_streams import RngStream
from homofilter.services.simulation_service import TimeGrid, simulate_joint


class TestLagMatrix:
    def test_upper_triangular_toeplitz(self):
        # Act
        matrix = _lag_matrix(np.array([3.0, 2.0, 1.0]), 4)

        # Assert
        expected = np.array([
            [3.0, 2.0, 1.0, 0.0],
            [0.0, 3.0, 2.0, 1.0],
            [0.0, 0.0, 3.0, 2.0],
            [0.0, 0.0, 0.0, 3.0],
        ])
        np.testing.assert_array_equal(matrix, expected)

    def test_profile_longer_than_grid_is_cut(self):
        matrix = _lag_matrix(np.arange(1.0, 7.0), 3)

        np.testing.assert_array_equal(matrix[0], [1.0, 2.0, 3.0])


class TestCorrector:
    @pytest.fixture
    def grid(self):
        return TimeGrid.from_step(0.5, 0.01)

    @pytest.fixture
    def dual_grid(self):
        return DualGridConfig(x_bounds=(-6.0, 6.0), x_nodes=121)

    @pytest.fixture
    def cfg(self):
        return CorrectorConfig(samples=200, groups=20, fast_horizon=5.0)

    def test_z_free_model_has_zero_corrector(self, zfree_model, grid, dual_grid, cfg):
        # Arrange
        homog = ExactHomogenized(zfree_model)
        dY = simulate_joint(zfree_model, grid, RngStream(seed=1)).dY
        v0 = solve_averaged_dual(homog, zfree_model.alpha, metric_member(2), dY, grid, dual_grid)

        # Act
        trace = estimate_corrector(zfree_model, homog, v0, (0.0, 0.5), dY, grid, cfg, RngStream(seed=2))

        # Assert
        np.testing.assert_array_equal(trace.psi, np.zeros(grid.n_steps + 1))
        np.testing.assert_array_equal(trace.se, np.zeros(grid.n_steps + 1))

    def test_corrector_vanishes_at_final_time(self, ou_model, grid, dual_grid, cfg):
        # Arrange
        sampler = InvariantSamplerConfig(burn_in=200, thinning=2, retained=20_000, dt=0.01, chains=200)
        homog = homogenize(
            ou_model, sampler, RngStream(seed=3), lattice=LatticeConfig(lower=[-3.0], upper=[3.0], nodes=[13])
        )
        dY = simulate_joint(ou_model, grid, RngStream(seed=4)).dY
        v0 = solve_averaged_dual(homog, ou_model.alpha, metric_member(2), dY, grid, dual_grid)

        # Act
        profile = fast_lag_profile(ou_model, homog, (0.0, 1.0), grid, cfg, RngStream(seed=5))
        trace = corrector_from_profile(profile, v0, dY, grid)

        # Assert
        assert profile.groups == 20
        assert trace.psi[-1] == 0.0
        assert np.all(np.isfinite(trace.psi))
        assert trace.se[0] > 0.0
        assert trace.point == (0.0, 1.0)

    def test_lag_count_follows_fast_horizon(self, ou_model, grid, cfg):
        homog = ExactHomogenized(ou_model)

        profile = fast_lag_profile(ou_model, homog, (0.0, 0.0), grid, cfg, RngStream(seed=6))

        # eps = 0.25: one coarse step is 0.16 fast time, 5.0 / 0.16 -> 31 lags
        assert profile.lags == 32
        assert profile.lag_dt == pytest.approx(0.16)

    def test_needs_scalar_slow_variable(self, ou_model, grid, dual_grid, cfg):
        wide = replace(ou_model, dims=Dimensions(m=2, n=1, d=1, w=1, v=1, u=1))

        with pytest.raises(ConfigError):
            estimate_corrector(wide, None, None, (0.0, 0.0), np.zeros((50, 1)), grid, cfg, RngStream(seed=0))

    def test_trace_csv(self, zfree_model, grid, dual_grid, cfg, tmp_path):
        homog = ExactHomogenized(zfree_model)
        dY = simulate_joint(zfree_model, grid, RngStream(seed=1)).dY
        v0 = solve_averaged_dual(homog, zfree_model.alpha, metric_member(1), dY, grid, dual_grid)
        trace = estimate_corrector(zfree_model, homog, v0, (0.0, 0.0), dY, grid, cfg, RngStream(seed=2))

        path = write_corrector_trace(trace, tmp_path / "psi.csv")

        lines = path.read_text().splitlines()
        assert lines[0] == "t,psi_hat,se"
        assert len(lines) == grid.n_steps + 2


class TestExpansionResidual:
    def test_residual_subtracts_averaged_dual_and_corrector(self):
        # Arrange
        vfull, v0 = Mock(), Mock()
        vfull.evaluate.return_value = np.array([1.5])
        v0.evaluate.return_value = np.array([1.0])
        trace = CorrectorTrace(
            times=np.array([0.0, 0.1]), psi=np.array([0.25, 0.0]), se=np.zeros(2), point=(0.5, -0.5), epsilon=0.25
        )

        # Act
        residual = expansion_residual(vfull, v0, [trace, trace])

        # Assert
        np.testing.assert_allclose(residual, [0.25, 0.25])
        args = vfull.evaluate.call_args.args
        assert args[0] == 0
        np.testing.assert_array_equal(args[2], [-0.5])


class TestCertifyCentering:
    @pytest.fixture
    def sampler(self):
        return InvariantSamplerConfig(burn_in=50, thinning=1, retained=2_000, dt=0.01, chains=20)

    def test_exact_averages_are_centered(self, zfree_model, sampler):
        residual = certify_centering(
            zfree_model, ExactHomogenized(zfree_model), np.array([0.3]), sampler, RngStream(seed=1)
        )

        assert residual <= 1e-12

    def test_residual_above_tolerance_is_refused(self, zfree_model, sampler, monkeypatch):
        monkeypatch.setattr(settings, "CENTERING_TOLERANCE", -1.0)

        with pytest.raises(CorrectorError):
            certify_centering(zfree_model, ExactHomogenized(zfree_model), np.array([0.3]), sampler, RngStream(seed=1))


class TestCorrectorScaling:
    def test_z_free_corrector_is_negligible(self, zfree_model):
        # Arrange
        grid = TimeGrid.from_step(0.3, 0.01)
        dual_grid = DualGridConfig(x_bounds=(-6.0, 6.0), x_nodes=121)
        cfg = CorrectorConfig(samples=20, groups=2, fast_horizon=2.0, observation_paths=2)

        # Act
        scaling, traces = corrector_scaling(
            zfree_model, ExactHomogenized(zfree_model), tanh_function(), grid, dual_grid, cfg, RngStream(seed=8)
        )

        # Assert
        assert scaling.epsilon == zfree_model.epsilon
        assert scaling.mean_abs_psi <= 1e-12
        assert scaling.mean_abs_psi_half <= 1e-12
        assert scaling.band == (1.4, 2.8)
        assert len(traces) == 2 * len(cfg.probe_points)
        assert scaling.mean_abs_residual is None

    @pytest.mark.slow
    def test_halving_epsilon_halves_the_corrector(self, ou_model):
        # Arrange
        grid = TimeGrid.from_step(1.0, 0.01)
        sampler = InvariantSamplerConfig(burn_in=2000, thinning=5, retained=20_000, dt=0.01, chains=10)
        homog = homogenize(
            ou_model, sampler, RngStream(seed=20), lattice=LatticeConfig(lower=[-4.0], upper=[4.0], nodes=[33])
        )
        cfg = CorrectorConfig(samples=1000, groups=20)

        # Act
        scaling, traces = corrector_scaling(
            ou_model, homog, metric_member(2), grid, DualGridConfig(), cfg, RngStream(seed=21)
        )

        # Assert
        assert scaling.mean_abs_psi > scaling.mean_abs_psi_half > 0.0
        assert 1.4 <= scaling.ratio <= 2.8
        assert scaling.passed
        assert {t.epsilon for t in traces} == {0.25, 0.125}
