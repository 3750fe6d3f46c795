import logging
import math

import numpy as np
import pytest

from homofilter.exceptions import FilterError
from homofilter.services.averaging_service import ExactHomogenized
from homofilter.services.filter_service import (
    ParticleCloud,
    bootstrap_se,
    effective_sample_size,
    log_mean_exp,
    resample_systematic,
    run_full_filter,
    run_reduced_filter,
    write_filter_trace,
)
from homofilter.services.function_family import constant_function, metric_family
from homofilter.services.kalman_service import LinearGaussianSpec, kalman_bucy_oracle
from homofilter.services.random_streams import RngStream
from homofilter.services.simulation_service import TimeGrid, simulate_joint
from tests.conftest import LINEAR, make_model


class TestWeights:
    def test_log_mean_exp_matches_direct_formula(self):
        values = np.array([-0.3, 0.1, 0.7, 1.2])

        assert log_mean_exp(values) == pytest.approx(math.log(np.mean(np.exp(values))), rel=1e-14)

    def test_log_mean_exp_survives_large_values(self):
        assert log_mean_exp(np.array([1000.0, 1000.0])) == 1000.0

    def test_ess_bounds(self):
        # Arrange
        uniform = np.zeros(500)
        dominated = np.full(500, -800.0)
        dominated[7] = 0.0

        # Act / Assert
        assert effective_sample_size(uniform) == pytest.approx(500.0)
        assert effective_sample_size(dominated) == pytest.approx(1.0)

    def test_constant_function_estimates_exactly_one(self):
        rng = np.random.default_rng(2)
        cloud = ParticleCloud(x=rng.normal(size=(1000, 1)), log_weights=rng.normal(scale=3.0, size=1000))

        pi, rho = cloud.estimate(np.ones((1, 1000)))

        assert pi[0] == 1.0
        assert rho[0] == pytest.approx(math.exp(cloud.log_rho1))

    def test_estimate_past_bound_is_logged_not_clipped(self, caplog):
        # Arrange
        rng = np.random.default_rng(4)
        cloud = ParticleCloud(x=rng.normal(size=(200, 1)), log_weights=rng.normal(size=200))
        values = np.vstack([np.full(200, 2.0), np.full(200, 0.5)])

        # Act
        with caplog.at_level(logging.WARNING, logger="homofilter.services.filter_service"):
            pi, _ = cloud.estimate(values, bounds=[1.0, 1.0])

        # Assert
        assert pi[0] == pytest.approx(2.0, rel=1e-14)
        assert pi[1] == pytest.approx(0.5, rel=1e-14)
        assert "exceeds function bound for rows [0]" in caplog.text

    def test_estimate_within_bound_logs_nothing(self, caplog):
        cloud = ParticleCloud(x=np.zeros((50, 1)), log_weights=np.zeros(50))

        with caplog.at_level(logging.WARNING, logger="homofilter.services.filter_service"):
            cloud.estimate(np.full((1, 50), 0.9), bounds=[1.0])

        assert "exceeds function bound" not in caplog.text


class TestResampleSystematic:
    @pytest.fixture
    def cloud(self):
        rng = np.random.default_rng(17)
        return ParticleCloud(
            x=rng.normal(size=(400, 1)),
            log_weights=rng.normal(scale=2.0, size=400),
            log_norm=0.3,
        )

    def test_resampling_preserves_total_mass(self, cloud):
        # Act
        resampled, idx = resample_systematic(cloud, 1.0, np.random.default_rng(0))

        # Assert
        assert idx is not None
        assert resampled.log_rho1 == cloud.log_rho1
        np.testing.assert_array_equal(resampled.log_weights, np.zeros(400))
        np.testing.assert_array_equal(resampled.x, cloud.x[idx])

    def test_offspring_counts_are_systematic(self, cloud):
        """Each particle gets floor(N w_i) or ceil(N w_i) copies."""
        _, idx = resample_systematic(cloud, 1.0, np.random.default_rng(1))

        counts = np.bincount(idx, minlength=cloud.size)
        expected = cloud.size * cloud.normalized_weights()
        assert np.all(counts >= np.floor(expected) - 1e-9)
        assert np.all(counts <= np.ceil(expected) + 1e-9)

    def test_no_resampling_above_threshold(self):
        cloud = ParticleCloud(x=np.zeros((10, 1)), log_weights=np.zeros(10))

        same, idx = resample_systematic(cloud, 0.5, np.random.default_rng(0))

        assert idx is None
        assert same is cloud

    def test_threshold_must_be_a_fraction(self, cloud):
        with pytest.raises(ValueError):
            resample_systematic(cloud, 1.5, np.random.default_rng(0))


class TestParticleFilters:
    @pytest.fixture
    def grid(self):
        return TimeGrid(1.0, 100, fast_factor=0.1)

    def test_constant_function_is_one_at_every_checkpoint(self, zfree_model, grid):
        # Arrange
        bundle = simulate_joint(zfree_model, grid, RngStream(seed=1))
        homog = ExactHomogenized(zfree_model)

        # Act
        run = run_reduced_filter(
            homog, zfree_model.alpha, bundle.dY, grid, 500, RngStream(seed=2),
            zfree_model.initial_law, [constant_function()], checkpoints=range(0, 101, 10),
        )

        # Assert
        assert len(run.estimates) == 11
        assert all(est.pi[0] == 1.0 for est in run.estimates)
        assert run.max_abs_log_weight <= run.weight_bound

    def test_z_free_filters_agree(self, zfree_model, grid):
        """Without z in b, sigma and h the full and reduced filters target the same law."""
        # Arrange
        bundle = simulate_joint(zfree_model, grid, RngStream(seed=3))
        family = metric_family(4)
        homog = ExactHomogenized(zfree_model)

        # Act
        full = run_full_filter(zfree_model, bundle.dY, grid, 5000, RngStream(seed=4), family)
        reduced = run_reduced_filter(
            homog, zfree_model.alpha, bundle.dY, grid, 5000, RngStream(seed=5),
            zfree_model.initial_law, family,
        )

        # Assert
        np.testing.assert_allclose(full.final.pi, reduced.final.pi, atol=0.05)
        assert full.final.log_rho1 == pytest.approx(reduced.final.log_rho1, abs=0.1)

    def test_same_stream_is_reproducible(self, ou_model, grid):
        bundle = simulate_joint(ou_model, grid, RngStream(seed=6))
        family = metric_family(2)

        a = run_full_filter(ou_model, bundle.dY, grid, 200, RngStream(seed=7), family)
        b = run_full_filter(ou_model, bundle.dY, grid, 200, RngStream(seed=7), family)

        np.testing.assert_array_equal(a.final.pi, b.final.pi)
        assert a.resample_count == b.resample_count

    def test_non_finite_observation_raises(self, zfree_model, grid):
        # Arrange
        bundle = simulate_joint(zfree_model, grid, RngStream(seed=1))
        dY = bundle.dY.copy()
        dY[3] = np.nan

        # Act
        with pytest.raises(FilterError) as exc_info:
            run_full_filter(zfree_model, dY, grid, 50, RngStream(seed=2), metric_family(1))

        # Assert
        assert exc_info.value.step == 3
        assert exc_info.value.exit_code == 3

    def test_ess_trace_and_recorded_clouds(self, ou_model, grid):
        bundle = simulate_joint(ou_model, grid, RngStream(seed=8))

        run = run_full_filter(
            ou_model, bundle.dY, grid, 300, RngStream(seed=9), metric_family(1), record_clouds=[0, 50],
        )

        assert run.ess_trace.shape == (101,)
        assert np.all((run.ess_trace >= 1.0) & (run.ess_trace <= 300.0))
        assert set(run.clouds) == {0, 50}
        assert run.inverse_rho1 == pytest.approx(math.exp(-run.final.log_rho1))

    def test_trace_csv_header(self, zfree_model, grid, tmp_path):
        bundle = simulate_joint(zfree_model, grid, RngStream(seed=1))
        run = run_full_filter(
            zfree_model, bundle.dY, grid, 50, RngStream(seed=2), metric_family(2), checkpoints=[0, 100],
        )

        path = write_filter_trace(run, tmp_path / "trace.csv")

        lines = path.read_text().splitlines()
        assert lines[0] == "t,ess,rho1,pi_phi_1,pi_phi_2"
        assert len(lines) == 3


class TestKalmanEquivalence:
    @pytest.mark.slow
    @pytest.mark.parametrize("alpha", [0.0, 0.5])
    def test_full_filter_mean_matches_oracle(self, alpha):
        """Correlated linear-Gaussian model: particle mean within 3 bootstrap SE of Kalman-Bucy."""
        # Arrange
        gamma = math.sqrt(1.0 - alpha ** 2)
        model = make_model(LINEAR, alpha=[[alpha]], gamma=[[gamma]])
        grid = TimeGrid.from_step(1.0, 0.005, fast_factor=0.1)
        bundle = simulate_joint(model, grid, RngStream(seed=31))
        checkpoints = [int(s) for s in np.linspace(20, grid.n_steps, 10)]

        # Act
        run = run_full_filter(
            model, bundle.dY, grid, 10_000, RngStream(seed=32), metric_family(1),
            checkpoints=checkpoints, record_clouds=checkpoints,
        )
        states = kalman_bucy_oracle(LinearGaussianSpec.from_model(model), bundle.dY, grid)

        # Assert
        for step in checkpoints:
            cloud = run.clouds[step]
            mean = float(cloud.normalized_weights() @ cloud.x[:, 0])
            se = bootstrap_se(cloud, cloud.x[:, 0], stream=RngStream(seed=step))
            assert abs(mean - states[step].mean[0]) <= 3.0 * se + grid.dt
