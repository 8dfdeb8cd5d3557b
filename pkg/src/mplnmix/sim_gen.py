"""Synthetic mixture datasets with known ground truth.

Draw a component, a latent Gaussian vector, then Poisson counts at the
exponentiated rates; covariances come from a uniform-eigenvalue rotation
construction. Two built-in benchmark scenarios (one two-group, one
three-group, both d = 6) exercise well-separated high/low expression
components with mixed-sign correlations.
"""

import json
from dataclasses import dataclass

import numpy as np

from .data_io import CountMatrix, NormalizationFactors, unit_factors
from .mpln_core import ComponentParams, MixtureParams

_RATE_OVERFLOW = 1e15
_MAX_REJECTS = 1000


@dataclass(frozen=True)
class SimSpec:
    """Everything needed to regenerate one dataset."""

    n: int
    d: int
    weights: np.ndarray
    mus: np.ndarray  # (G, d)
    sigmas: np.ndarray  # (G, d, d)
    s: NormalizationFactors
    seed: int

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        mus = np.asarray(self.mus, dtype=float)
        sigmas = np.asarray(self.sigmas, dtype=float)
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be >= 1")
        if abs(weights.sum() - 1.0) > 1e-10 or np.any(weights <= 0):
            raise ValueError("weights must be a strictly positive simplex")
        g = weights.size
        if mus.shape != (g, self.d) or sigmas.shape != (g, self.d, self.d):
            raise ValueError("parameter shapes inconsistent with n, d, G")
        for sig in sigmas:
            np.linalg.cholesky(sig)  # must be PD as given
        if self.s.s.size != self.d:
            raise ValueError("normalization factors dimension mismatch")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "mus", mus)
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def g(self):
        return self.weights.size

    def mixture_params(self):
        comps = tuple(ComponentParams(mu=m, sigma=s) for m, s in zip(self.mus, self.sigmas))
        return MixtureParams(weights=self.weights, components=comps)

    def to_dict(self):
        return {
            "n": int(self.n),
            "d": int(self.d),
            "weights": self.weights.tolist(),
            "mus": self.mus.tolist(),
            "sigmas": self.sigmas.tolist(),
            "s": self.s.s.tolist(),
            "s_method": self.s.method,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            n=int(payload["n"]),
            d=int(payload["d"]),
            weights=np.asarray(payload["weights"], dtype=float),
            mus=np.asarray(payload["mus"], dtype=float),
            sigmas=np.asarray(payload["sigmas"], dtype=float),
            s=NormalizationFactors(
                s=np.asarray(payload["s"], dtype=float),
                method=payload.get("s_method", "none"),
            ),
            seed=int(payload["seed"]),
        )

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, source):
        try:
            payload = json.loads(source)
        except (json.JSONDecodeError, TypeError):
            with open(source, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        return cls.from_dict(payload)


def random_pd_covariance(d, eig_low, eig_high, seed):
    """Random PD matrix Q diag(lambda) Q' with uniform eigenvalues and Haar-random Q."""
    if not (0 < eig_low <= eig_high):
        raise ValueError("need 0 < eig_low <= eig_high")
    if eig_low == eig_high:
        return eig_low * np.eye(d)
    rng = np.random.default_rng(seed)
    lam = rng.uniform(eig_low, eig_high, size=d)
    gauss = rng.standard_normal((d, d))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))  # sign correction makes Q Haar-distributed
    sigma = (q * lam) @ q.T
    return 0.5 * (sigma + sigma.T)


def simulate(spec, return_latent=False):
    """Draw (counts, true_labels) from a mixture specification.

    Latent vectors whose Poisson rate would overflow are rejected and
    redrawn; 1000 consecutive rejections abort (pathological spec).
    """
    rng = np.random.default_rng(spec.seed)
    chols = [np.linalg.cholesky(sig) for sig in spec.sigmas]
    log_s = np.log(spec.s.s)
    labels = np.empty(spec.n, dtype=np.int64)
    counts = np.empty((spec.n, spec.d), dtype=np.int64)
    theta_out = np.empty((spec.n, spec.d)) if return_latent else None
    for i in range(spec.n):
        z = int(rng.choice(spec.g, p=spec.weights))
        labels[i] = z
        rejects = 0
        while True:
            theta = spec.mus[z] + chols[z] @ rng.standard_normal(spec.d)
            with np.errstate(over="ignore"):
                rate = np.exp(theta + log_s)
            if np.all(rate <= _RATE_OVERFLOW):
                break
            rejects += 1
            if rejects >= _MAX_REJECTS:
                raise RuntimeError(
                    f"observation {i}: {rejects} consecutive rate overflows; spec is pathological"
                )
        counts[i] = rng.poisson(rate)
        if return_latent:
            theta_out[i] = theta
    cm = CountMatrix(
        values=counts,
        row_ids=tuple(f"gene_{i}" for i in range(spec.n)),
        col_ids=tuple(f"sample_{j}" for j in range(spec.d)),
    )
    if return_latent:
        return cm, labels, theta_out
    return cm, labels


# Built-in benchmark scenarios (d = 6). The first has a dominant
# high-expression group against a sparse low-expression group; the second
# adds an intermediate group. Covariance structures mix signs and scales.

_TWO_GROUP_MU = np.array([
    [6.5, 6.0, 6.0, 6.0, 6.0, 6.0],
    [2.0, 2.5, 2.0, 2.0, 2.0, 2.0],
])
_TWO_GROUP_SIGMA = np.array([
    [
        [1.24, -0.36, -0.51, -0.04, -0.54, -0.39],
        [-0.36, 1.30, 0.11, 0.23, 0.90, -0.77],
        [-0.51, 0.11, 1.25, -0.44, -0.01, 0.04],
        [-0.04, 0.23, -0.44, 1.09, 0.84, 0.38],
        [-0.54, 0.90, -0.01, 0.84, 1.41, 0.21],
        [-0.39, -0.77, 0.04, 0.38, 0.21, 1.33],
    ],
    [
        [0.70, 0.26, -0.45, -0.30, -0.04, -0.14],
        [0.26, 0.70, 0.19, 0.27, -0.07, -0.05],
        [-0.45, 0.19, 0.70, 0.29, 0.09, 0.13],
        [-0.30, 0.27, 0.29, 0.70, 0.25, -0.04],
        [-0.04, -0.07, 0.09, 0.25, 0.70, 0.02],
        [-0.14, -0.05, 0.13, -0.04, 0.02, 0.70],
    ],
])
_TWO_GROUP_WEIGHTS = np.array([0.79, 0.21])

_THREE_GROUP_MU = np.array([
    [3.0, 3.0, 3.0, 3.0, 3.0, 3.0],
    [6.5, 6.5, 6.5, 6.5, 6.0, 6.5],
    [1.0, -1.0, 1.0, 1.0, -1.0, 1.0],
])
_THREE_GROUP_SIGMA = np.array([
    [
        [1.00, -0.29, -0.41, -0.04, -0.41, -0.31],
        [-0.29, 1.00, 0.08, 0.19, 0.66, -0.59],
        [-0.41, 0.08, 1.00, -0.38, -0.01, 0.03],
        [-0.04, 0.19, -0.38, 1.00, 0.67, 0.31],
        [-0.41, 0.66, -0.01, 0.67, 1.00, 0.15],
        [-0.31, -0.59, 0.03, 0.31, 0.15, 1.00],
    ],
    [
        [1.50, -0.03, 0.67, 0.66, -0.65, -1.06],
        [-0.03, 1.50, -0.01, 0.52, 0.14, -0.58],
        [0.67, -0.01, 1.50, 0.64, 0.28, -0.44],
        [0.66, 0.52, 0.64, 1.50, 0.56, -0.96],
        [-0.65, 0.14, 0.28, 0.56, 1.50, 0.41],
        [-1.06, -0.58, -0.44, -0.96, 0.41, 1.50],
    ],
    [
        [0.50, 0.30, -0.09, -0.06, 0.04, -0.04],
        [0.30, 0.50, -0.02, -0.02, -0.07, -0.17],
        [-0.09, -0.02, 0.50, 0.09, 0.26, 0.13],
        [-0.06, -0.02, 0.09, 0.50, -0.01, 0.19],
        [0.04, -0.07, 0.26, -0.01, 0.50, -0.10],
        [-0.04, -0.17, 0.13, 0.19, -0.10, 0.50],
    ],
])
_THREE_GROUP_WEIGHTS = np.array([0.3, 0.5, 0.2])


def two_group_benchmark(n=1000, seed=0, s=None):
    """Two-component benchmark: dominant high-expression group, pi = (0.79, 0.21)."""
    return SimSpec(
        n=n, d=6,
        weights=_TWO_GROUP_WEIGHTS.copy(),
        mus=_TWO_GROUP_MU.copy(),
        sigmas=_TWO_GROUP_SIGMA.copy(),
        s=s if s is not None else unit_factors(6),
        seed=seed,
    )


def three_group_benchmark(n=1000, seed=0, s=None):
    """Three-component benchmark with an intermediate group, pi = (0.3, 0.5, 0.2)."""
    return SimSpec(
        n=n, d=6,
        weights=_THREE_GROUP_WEIGHTS.copy(),
        mus=_THREE_GROUP_MU.copy(),
        sigmas=_THREE_GROUP_SIGMA.copy(),
        s=s if s is not None else unit_factors(6),
        seed=seed,
    )
