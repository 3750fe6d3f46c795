import numpy as np
import pytest

from homofilter.exceptions import ConfigError
from homofilter.models.experiment import (
    ClosedFormHomogenization,
    InvariantSamplerConfig,
    LatticeConfig,
)
from homofilter.services.averaging_service import (
    LatticeHomogenized,
    batch_means_se,
    build_lattice_tables,
    cache_key,
    centering_check,
    estimate_invariant_measure,
    homogenize,
)
from homofilter.services.random_streams import RngStream
from homofilter.utils.linalg import min_eigenvalue
from tests.conftest import OU_BENCHMARK, make_model


class TestInvariantMeasure:
    @pytest.fixture
    def sampler(self):
        return InvariantSamplerConfig(
            burn_in=500, thinning=2, retained=200_000, dt=0.01, chains=1000, batches=1000
        )

    def test_batch_means_on_independent_draws(self):
        # Arrange
        rng = np.random.default_rng(0)
        values = rng.normal(size=(10, 10_000))

        # Act
        se = batch_means_se(values, batches=100)

        # Assert
        assert se == pytest.approx(1.0 / np.sqrt(values.size), rel=0.25)

    def test_ou_samples_center_on_zero(self, ou_model, sampler):
        sample = estimate_invariant_measure(ou_model, np.array([0.7]), sampler, RngStream(seed=4))

        assert sample.samples.shape == (200_000, 1)
        assert sample.probe_se > 0.0
        assert abs(sample.probe_mean) <= 4.0 * sample.probe_se

    def test_centering_check_of_averaged_observation(self, sampler):
        """For h = x + z the centering residual is |mean z|."""
        # Arrange
        model = make_model(OU_BENCHMARK, h=["x1 + z1"])
        sample = estimate_invariant_measure(model, np.array([0.4]), sampler, RngStream(seed=8))

        # Act
        residual = centering_check(model.h, np.array([0.4]), sample)

        # Assert
        assert residual == pytest.approx(abs(sample.probe_mean), abs=1e-12)
        assert residual <= 4.0 * sample.probe_se

    def test_four_times_the_samples_halves_the_standard_error(self, ou_model):
        # Arrange
        base = InvariantSamplerConfig(burn_in=500, thinning=2, retained=40_000, dt=0.01, chains=200, batches=200)
        larger = base.model_copy(update={"retained": 4 * base.retained})
        x = np.array([0.2])

        # Act
        small = estimate_invariant_measure(ou_model, x, base, RngStream(seed=30))
        big = estimate_invariant_measure(ou_model, x, larger, RngStream(seed=31))

        # Assert
        assert big.chains == small.chains
        assert 1.5 <= small.probe_se / big.probe_se <= 2.7


class TestHomogenize:
    def test_linear_observation_averages_to_x(self):
        """h = x + z with an OU fast process gives h_bar(x) = x within 3 standard errors."""
        # Arrange
        model = make_model(OU_BENCHMARK, h=["x1 + z1"])
        sampler = InvariantSamplerConfig(
            burn_in=500, thinning=2, retained=1_000_000, dt=0.01, chains=2000, batches=2000
        )
        lattice = LatticeConfig(lower=[-2.0], upper=[2.0], nodes=[5])

        # Act
        tables = build_lattice_tables(model, sampler, lattice, RngStream(seed=21))

        # Assert
        nodes = tables.axes[0]
        gap = np.abs(tables.hbar[:, 0] - nodes)
        assert np.all(gap <= 3.0 * tables.hbar_se[:, 0])
        for i in range(nodes.size):
            lowest = min_eigenvalue(tables.abar[i] - tables.sigbar[i] @ tables.sigbar[i].T)
            assert lowest >= -1e-8

    def test_lattice_realization_for_z_dependent_model(self, ou_model):
        # Arrange
        sampler = InvariantSamplerConfig(
            burn_in=200, thinning=2, retained=200_000, dt=0.01, chains=2000, batches=2000
        )
        lattice = LatticeConfig(lower=[-2.0], upper=[2.0], nodes=[9])

        # Act
        homog = homogenize(ou_model, sampler, RngStream(seed=2), lattice=lattice)

        # Assert
        x = np.linspace(-1.5, 1.5, 7).reshape(-1, 1)
        assert homog.kind == "lattice"
        np.testing.assert_allclose(homog.bbar(x)[:, 0], -x[:, 0], atol=0.06)
        np.testing.assert_allclose(homog.hbar(x)[:, 0], np.tanh(x[:, 0]), atol=0.08)
        np.testing.assert_array_equal(homog.diffusion_factor(x), np.zeros((7, 1, 1)))

    def test_evaluation_outside_lattice_is_clamped(self, ou_model):
        sampler = InvariantSamplerConfig(burn_in=50, thinning=1, retained=1_000, dt=0.01, chains=10)
        homog = homogenize(
            ou_model, sampler, RngStream(seed=5), lattice=LatticeConfig(lower=[-1.0], upper=[1.0], nodes=[3])
        )

        far = homog.hbar(np.array([[10.0]]))
        edge = homog.hbar(np.array([[1.0]]))

        np.testing.assert_array_equal(far, edge)

    def test_z_free_model_is_exact(self, zfree_model):
        homog = homogenize(zfree_model, InvariantSamplerConfig(), RngStream(seed=0))

        x = np.array([[0.5], [-1.0]])
        assert homog.kind == "exact"
        np.testing.assert_array_equal(homog.bbar(x), -x)
        np.testing.assert_array_equal(homog.diffusion_factor(x), np.zeros((2, 1, 1)))

    def test_z_dependent_model_needs_lattice(self, ou_model):
        with pytest.raises(ConfigError):
            homogenize(ou_model, InvariantSamplerConfig(), RngStream(seed=0))

    def test_closed_form_override(self, ou_model):
        # Arrange
        closed = ClosedFormHomogenization(
            bbar=["-x1"], abar=[[1.0]], sigbar=[[1.0]], hbar=["tanh(x1)"]
        )

        # Act
        homog = homogenize(ou_model, InvariantSamplerConfig(), RngStream(seed=0), closed_form=closed)

        # Assert
        x = np.array([[0.3]])
        assert homog.kind == "closed_form"
        assert homog.hbar(x)[0, 0] == pytest.approx(np.tanh(0.3))
        np.testing.assert_allclose(homog.diffusion_factor(x), np.zeros((1, 1, 1)), atol=1e-12)

    def test_closed_form_shape_mismatch(self, ou_model):
        closed = ClosedFormHomogenization(
            bbar=["-x1", "0"], abar=[[1.0]], sigbar=[[1.0]], hbar=["tanh(x1)"]
        )

        with pytest.raises(ConfigError):
            homogenize(ou_model, InvariantSamplerConfig(), RngStream(seed=0), closed_form=closed)

    def test_cache_round_trip(self, ou_model, tmp_path):
        # Arrange
        sampler = InvariantSamplerConfig(burn_in=100, thinning=1, retained=2_000, dt=0.01, chains=20)
        lattice = LatticeConfig(lower=[-1.0], upper=[1.0], nodes=[5])
        homog = homogenize(ou_model, sampler, RngStream(seed=6), lattice=lattice)

        # Act
        homog.save_cache(tmp_path)
        loaded = LatticeHomogenized.load_cache(ou_model, tmp_path)

        # Assert
        x = np.linspace(-1.0, 1.0, 11).reshape(-1, 1)
        assert (tmp_path / "homogenized.csv").exists()
        np.testing.assert_array_equal(loaded.hbar(x), homog.hbar(x))
        np.testing.assert_array_equal(loaded.bbar(x), homog.bbar(x))

    @pytest.fixture
    def saved_cache(self, ou_model, tmp_path):
        sampler = InvariantSamplerConfig(burn_in=100, thinning=1, retained=2_000, dt=0.01, chains=20)
        lattice = LatticeConfig(lower=[-1.0], upper=[1.0], nodes=[5])
        homogenize(ou_model, sampler, RngStream(seed=6), lattice=lattice).save_cache(tmp_path)
        return sampler, lattice

    def test_cache_from_another_observation_function_is_refused(self, saved_cache, tmp_path):
        # Arrange
        edited = make_model(OU_BENCHMARK, h=["3 * tanh(x1) + 2 * tanh(z1)"])

        # Act / Assert
        with pytest.raises(ConfigError) as exc_info:
            LatticeHomogenized.load_cache(edited, tmp_path)
        assert "model" in exc_info.value.message
        assert exc_info.value.exit_code == 2

    def test_cache_ignores_epsilon_of_the_model(self, ou_model, saved_cache, tmp_path):
        loaded = LatticeHomogenized.load_cache(ou_model.with_epsilon(0.125), tmp_path)

        assert loaded.kind == "lattice"

    def test_cache_from_other_sampler_or_seed_is_refused(self, ou_model, saved_cache, tmp_path):
        # Arrange
        sampler, lattice = saved_cache
        longer = sampler.model_copy(update={"retained": 4_000})

        # Act / Assert
        LatticeHomogenized.load_cache(ou_model, tmp_path, cache_key(ou_model, sampler, lattice, 6))
        with pytest.raises(ConfigError, match="sampler"):
            LatticeHomogenized.load_cache(ou_model, tmp_path, cache_key(ou_model, longer, lattice, 6))
        with pytest.raises(ConfigError, match="seed"):
            LatticeHomogenized.load_cache(ou_model, tmp_path, cache_key(ou_model, sampler, lattice, 7))

    def test_missing_cache_is_a_config_error(self, ou_model, tmp_path):
        with pytest.raises(ConfigError):
            LatticeHomogenized.load_cache(ou_model, tmp_path / "nowhere")

    def test_node_streams_do_not_depend_on_workers(self, ou_model):
        sampler = InvariantSamplerConfig(burn_in=50, thinning=1, retained=1_000, dt=0.01, chains=10)
        lattice = LatticeConfig(lower=[-1.0], upper=[1.0], nodes=[4])

        serial = build_lattice_tables(ou_model, sampler, lattice, RngStream(seed=3), workers=1)
        threaded = build_lattice_tables(ou_model, sampler, lattice, RngStream(seed=3), workers=3)

        np.testing.assert_array_equal(serial.hbar, threaded.hbar)
