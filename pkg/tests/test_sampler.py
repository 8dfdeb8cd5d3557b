import numpy as np
import pytest

from mplnmix.data_io import unit_factors
from mplnmix.mpln_core import ComponentParams
from mplnmix.sampler import (
    ChainSet,
    SamplerConfig,
    SamplingError,
    grow_schedule,
    hmc_latent_draws,
    posterior_mean,
    posterior_scatter,
    sample_latent,
)
from mplnmix.diagnostics import effective_sample_size


class TestSamplerConfig:
    def test_defaults(self):
        cfg = SamplerConfig()
        assert cfg.chains == 3
        assert cfg.total_iters == 1000
        assert cfg.warmup_fraction == 0.5
        assert cfg.leapfrog_steps == 10
        assert cfg.target_accept == 0.8

    def test_warmup_is_half(self):
        assert SamplerConfig().warmup_len() == 500
        assert SamplerConfig().warmup_len(1300) == 650

    def test_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(total_iters=50)
        with pytest.raises(ValueError):
            SamplerConfig(warmup_fraction=1.0)
        with pytest.raises(ValueError):
            SamplerConfig(chains=1)


class TestChainSet:
    def test_shape_validation(self, rng):
        with pytest.raises(ValueError, match="2 chains"):
            ChainSet(draws=rng.standard_normal((1, 10, 2)), warmup_len=5,
                     step_size=np.ones(1), seed_info=(0,))

    def test_rejects_nonfinite(self, rng):
        draws = rng.standard_normal((2, 10, 2))
        draws[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            ChainSet(draws=draws, warmup_len=5, step_size=np.ones(2), seed_info=(0,))


class TestSampleLatent:
    def test_deterministic(self, unit_component, ones_factors, small_sampler_cfg):
        y = np.array([3.0, 8.0])
        a = sample_latent(y, ones_factors, unit_component, small_sampler_cfg, seed=5)
        b = sample_latent(y, ones_factors, unit_component, small_sampler_cfg, seed=5)
        assert np.array_equal(a.draws, b.draws)
        assert np.array_equal(a.step_size, b.step_size)

    def test_different_seeds_differ(self, unit_component, ones_factors, small_sampler_cfg):
        y = np.array([3.0, 8.0])
        a = sample_latent(y, ones_factors, unit_component, small_sampler_cfg, seed=5)
        b = sample_latent(y, ones_factors, unit_component, small_sampler_cfg, seed=6)
        assert not np.array_equal(a.draws, b.draws)

    def test_warmup_discarded(self, unit_component, ones_factors):
        cfg = SamplerConfig(chains=3, total_iters=200)
        cs = sample_latent(np.array([2.0, 2.0]), ones_factors, unit_component, cfg, seed=1)
        assert cs.warmup_len == 100
        assert cs.draws.shape == (3, 100, 2)

    def test_prior_only_moment_recovery(self):
        # exact Gaussian target: chains must reproduce mu and sigma
        mu = np.array([1.2, -0.7])
        sigma = np.array([[1.0, 0.6], [0.6, 1.5]])
        cp = ComponentParams(mu=mu, sigma=sigma)
        cfg = SamplerConfig(chains=3, total_iters=3334)
        cs = sample_latent(np.zeros(2), unit_factors(2), cp, cfg, seed=99, prior_only=True)
        assert cs.draws.shape[0] * cs.draws.shape[1] >= 5000
        n_eff = effective_sample_size(cs)
        mean = posterior_mean(cs)
        sd = cs.draws.reshape(-1, 2).std(axis=0, ddof=1)
        assert np.all(np.abs(mean - mu) < 4 * sd / np.sqrt(n_eff))
        scatter = posterior_scatter(cs, mu)
        rel = np.linalg.norm(scatter - sigma) / np.linalg.norm(sigma)
        assert rel < 0.10

    def test_diffuse_prior_posterior_mode(self):
        cp = ComponentParams(mu=np.zeros(1), sigma=np.array([[1e6]]))
        cfg = SamplerConfig(chains=3, total_iters=1000)
        cs = sample_latent(np.array([10.0]), unit_factors(1), cp, cfg, seed=3)
        assert posterior_mean(cs)[0] == pytest.approx(np.log(10.0), abs=0.35)

    def test_nonfinite_posterior_raises(self):
        cfg = SamplerConfig(chains=2, total_iters=100)
        corrupt = ComponentParams(mu=np.array([1e200, 0.0]), sigma=np.eye(2))
        with pytest.raises(SamplingError):
            sample_latent(np.array([1.0, 1.0]), unit_factors(2), corrupt, cfg, seed=0)

    def test_energy_errors_small_on_prior_target(self, unit_component, ones_factors):
        cfg = SamplerConfig()
        batch = hmc_latent_draws(
            np.zeros((1, 2)), ones_factors.log_s, unit_component, cfg,
            [(11,)], prior_only=True,
        )
        assert float(batch.mean_abs_dh.mean()) < 0.2

    def test_batch_matches_single_observation(self, unit_component, ones_factors):
        # a row's chains must not depend on which other rows share the batch
        cfg = SamplerConfig(chains=2, total_iters=200)
        Y = np.array([[3.0, 9.0], [50.0, 2.0], [7.0, 7.0]])
        ents = [(42, i) for i in range(3)]
        batch = hmc_latent_draws(Y, ones_factors.log_s, unit_component, cfg, ents)
        for i in range(3):
            single = hmc_latent_draws(Y[i : i + 1], ones_factors.log_s, unit_component,
                                      cfg, [ents[i]])
            assert np.array_equal(batch.draws[:, :, i, :], single.draws[:, :, 0, :])


class TestPosteriorSummaries:
    def _chainset(self, draws):
        return ChainSet(draws=draws, warmup_len=0,
                        step_size=np.ones(draws.shape[0]), seed_info=(0,))

    def test_mean_constant_chain(self):
        draws = np.full((2, 5, 3), 1.75)
        assert np.allclose(posterior_mean(self._chainset(draws)), 1.75)

    def test_mean_two_chains(self):
        a, b = 1.0, 3.0
        draws = np.stack([np.full((10, 2), a), np.full((10, 2), b)])
        assert np.allclose(posterior_mean(self._chainset(draws)), (a + b) / 2)

    def test_mean_matches_flat_average(self, rng):
        draws = rng.standard_normal((3, 40, 4))
        expected = draws.reshape(-1, 4).mean(axis=0)
        assert np.allclose(posterior_mean(self._chainset(draws)), expected, rtol=1e-12)

    def test_scatter_zero_at_center(self):
        draws = np.full((2, 6, 2), 0.3)
        sc = posterior_scatter(self._chainset(draws), np.full(2, 0.3))
        assert np.allclose(sc, 0.0)

    def test_scatter_gaussian_oracle(self, rng):
        sigma = np.array([[1.0, -0.4], [-0.4, 0.8]])
        center = np.array([2.0, -1.0])
        draws = rng.multivariate_normal(center, sigma, size=10**5).reshape(2, 50000, 2)
        sc = posterior_scatter(self._chainset(draws), center)
        assert np.linalg.norm(sc - sigma) / np.linalg.norm(sigma) < 0.05

    def test_scatter_symmetric_psd(self, rng):
        draws = rng.standard_normal((2, 30, 3))
        sc = posterior_scatter(self._chainset(draws), rng.standard_normal(3))
        assert np.allclose(sc, sc.T)
        assert np.all(np.linalg.eigvalsh(sc) > -1e-12)


class TestGrowSchedule:
    def test_first_iteration_is_base(self):
        assert grow_schedule(1, 1000, 0) == 1000

    def test_failures_add_hundred(self):
        assert grow_schedule(1, 1000, 2) == 1200

    def test_em_ramp_adds_ten(self):
        assert grow_schedule(11, 1000, 0) == 1100

    def test_rejects_bad_iteration(self):
        with pytest.raises(ValueError):
            grow_schedule(0, 1000, 0)
