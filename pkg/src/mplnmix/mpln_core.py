"""Densities, gradients, and moments for the Poisson-log normal hierarchy.

All density arithmetic is in log space. Covariances are carried together
with their Cholesky factor and precision matrix; a failed factorization is
repaired with an escalating diagonal jitter.

The row-batched helpers (`*_rows`) evaluate many latent vectors at once and
deliberately use only elementwise operations and fixed-length reductions
over the dimension axis, so a row's result never depends on which other
rows share the batch.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky as _cholesky
from scipy.special import gammaln

LOG_2PI = float(np.log(2.0 * np.pi))

# jitter ladder for near-singular covariances, relative to mean diagonal
_JITTER_START = 1e-8
_JITTER_STOP = 1e-2


class DegenerateCovarianceError(RuntimeError):
    """Covariance could not be repaired to positive definite."""


def repair_pd(sigma):
    """Symmetrize sigma and return (sigma, lower Cholesky factor).

    If factorization fails, add diagonal jitter starting at 1e-8 times the
    mean diagonal, escalating tenfold up to 1e-2, then give up.
    """
    sigma = np.asarray(sigma, dtype=float)
    sigma = 0.5 * (sigma + sigma.T)
    scale = float(np.mean(np.diag(sigma)))
    if not np.isfinite(scale):
        raise DegenerateCovarianceError("covariance has non-finite diagonal")
    try:
        return sigma, _cholesky(sigma, lower=True)
    except np.linalg.LinAlgError:
        pass
    if scale <= 0:
        scale = 1.0
    jitter = _JITTER_START
    while jitter <= _JITTER_STOP * (1 + 1e-12):
        bumped = sigma + jitter * scale * np.eye(sigma.shape[0])
        try:
            return bumped, _cholesky(bumped, lower=True)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise DegenerateCovarianceError("covariance not repairable: jitter ladder exhausted")


@dataclass(frozen=True)
class ComponentParams:
    """Latent Gaussian layer of one mixture component: mean and covariance.

    The lower Cholesky factor, log-determinant, and precision matrix are
    computed once at construction and shared read-only.
    """

    mu: np.ndarray
    sigma: np.ndarray
    sigma_chol: np.ndarray = field(default=None, repr=False)
    log_det: float = field(default=None, repr=False)
    precision: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (mu.size, mu.size):
            raise ValueError("sigma shape does not match mu")
        if np.max(np.abs(sigma - sigma.T), initial=0.0) > 1e-10:
            raise ValueError("sigma is not symmetric")
        sigma, chol = repair_pd(sigma)
        if np.max(np.abs(chol @ chol.T - sigma)) > 1e-8 * max(1.0, np.max(np.abs(sigma))):
            raise DegenerateCovarianceError("Cholesky round-trip failed")
        inv_chol = np.linalg.solve(chol, np.eye(mu.size))
        precision = inv_chol.T @ inv_chol
        precision = 0.5 * (precision + precision.T)
        for name, val in (
            ("mu", mu),
            ("sigma", sigma),
            ("sigma_chol", chol),
            ("log_det", 2.0 * float(np.sum(np.log(np.diag(chol))))),
            ("precision", precision),
        ):
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def d(self):
        return self.mu.size


@dataclass(frozen=True)
class MixtureParams:
    """Mixing weights plus per-component Gaussian parameters."""

    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        comps = tuple(self.components)
        if len(comps) != w.size:
            raise ValueError("weights and components disagree on G")
        if np.any(w <= 0):
            raise ValueError("mixing weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("mixing weights must sum to 1")
        dims = {c.d for c in comps}
        if len(dims) != 1:
            raise ValueError("components must share one dimension")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def g(self):
        return len(self.components)

    @property
    def d(self):
        return self.components[0].d


def _dev_times_precision(dev, precision):
    # dev @ precision accumulated one column at a time: keeps every row's
    # arithmetic independent of the batch it is evaluated in
    out = np.zeros_like(dev)
    for k in range(precision.shape[0]):
        out += dev[:, k : k + 1] * precision[k]
    return out


def mvn_log_density_rows(theta, params):
    """Gaussian log density of each row of theta under params."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    dev = theta - params.mu
    quad = np.sum(_dev_times_precision(dev, params.precision) * dev, axis=1)
    return -0.5 * (params.d * LOG_2PI + params.log_det + quad)


def poisson_sum_rows(y, theta, log_s):
    """Per-row sum_j [ y_j (theta_j + log s_j) - exp(theta_j + log s_j) ]."""
    eta = theta + log_s
    return np.sum(y * eta - np.exp(eta), axis=1)


def latent_log_posterior_rows(theta, y, log_s, params):
    return poisson_sum_rows(y, theta, log_s) + mvn_log_density_rows(theta, params)


def latent_log_posterior_grad_rows(theta, y, log_s, params):
    dev = theta - params.mu
    return y - np.exp(theta + log_s) - _dev_times_precision(dev, params.precision)


def poisson_log_pmf(y, log_rate):
    """Poisson log pmf parameterized by the log rate: y*log_rate - exp(log_rate) - log(y!)."""
    y = np.asarray(y, dtype=float)
    log_rate = np.asarray(log_rate, dtype=float)
    out = y * log_rate - np.exp(log_rate) - gammaln(y + 1.0)
    return float(out) if out.ndim == 0 else out


def mvn_log_density(x, params):
    """Multivariate normal log density at a single point."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != params.d:
        raise ValueError("dimension mismatch")
    return float(mvn_log_density_rows(x[None, :], params)[0])


def _log_s_of(s):
    if isinstance(s, np.ndarray):
        return np.log(np.asarray(s, dtype=float))
    return s.log_s


def latent_log_posterior(theta, y, s, params):
    """Unnormalized log posterior of the latent vector given one count row.

    Omits the theta-free term -sum_j log y_j!.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    log_s = _log_s_of(s)
    if not (theta.size == y.size == log_s.size == params.d):
        raise ValueError("dimension mismatch")
    return float(latent_log_posterior_rows(theta[None, :], y[None, :], log_s, params)[0])


def latent_log_posterior_grad(theta, y, s, params):
    """Gradient of latent_log_posterior with respect to theta."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    log_s = _log_s_of(s)
    if not (theta.size == y.size == log_s.size == params.d):
        raise ValueError("dimension mismatch")
    return latent_log_posterior_grad_rows(theta[None, :], y[None, :], log_s, params)[0]


def component_joint_log_density(y, theta, s, params):
    """log f(y | theta, s) + log f(theta | mu, sigma), the weight-free mixture factor."""
    y = np.asarray(y, dtype=float).reshape(-1)
    value = latent_log_posterior(theta, y, s, params)
    return value - float(np.sum(gammaln(y + 1.0)))


def component_joint_log_density_rows(y, theta, log_s, params, log_fact):
    """Row-batched joint density; log_fact is the precomputed per-row sum of log y!."""
    return latent_log_posterior_rows(theta, y, log_s, params) - log_fact


def mpln_marginal_moments(params, s):
    """Marginal mean and variance of the counts for one component.

    mean_j = s_j exp(mu_j + sigma_jj / 2);
    var_j = mean_j + mean_j^2 (exp(sigma_jj) - 1), which always exceeds the
    mean for sigma_jj > 0 (overdispersion).
    """
    s_vec = s.s if hasattr(s, "s") else np.asarray(s, dtype=float)
    diag = np.diag(params.sigma)
    mean = s_vec * np.exp(params.mu + 0.5 * diag)
    var = mean + mean**2 * (np.exp(diag) - 1.0)
    return mean, var
