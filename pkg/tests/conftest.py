import numpy as np
import pytest

from mplnmix.data_io import CountMatrix, unit_factors
from mplnmix.mpln_core import ComponentParams, MixtureParams
from mplnmix.sampler import SamplerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)


@pytest.fixture
def small_sampler_cfg():
    """Cheap sampler settings for unit tests; acceptance uses the defaults."""
    return SamplerConfig(chains=3, total_iters=300)


@pytest.fixture
def unit_component():
    return ComponentParams(mu=np.zeros(2), sigma=np.eye(2))


def make_counts(values):
    values = np.asarray(values)
    return CountMatrix(
        values=values,
        row_ids=tuple(f"g{i}" for i in range(values.shape[0])),
        col_ids=tuple(f"s{j}" for j in range(values.shape[1])),
    )


@pytest.fixture
def tiny_counts():
    return make_counts([[0, 1], [2, 3], [4, 5]])


def random_component(rng, d, mu_scale=1.0):
    from mplnmix.sim_gen import random_pd_covariance

    mu = mu_scale * rng.standard_normal(d)
    sigma = random_pd_covariance(d, 0.5, 1.5, int(rng.integers(2**31)))
    return ComponentParams(mu=mu, sigma=sigma)


def random_mixture(rng, g, d):
    w = rng.dirichlet(np.full(g, 5.0))
    comps = tuple(random_component(rng, d) for _ in range(g))
    return MixtureParams(weights=w, components=comps)


@pytest.fixture
def ones_factors():
    return unit_factors(2)
