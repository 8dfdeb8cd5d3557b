"""The MCMC-EM loop: initialization, latent expectations, closed-form M-step,
log-likelihood tracking, and stationarity-based stopping.

Monte Carlo EM lacks the ascent property, so the loop stops when the
Heidelberger-Welch test accepts stationarity of the log-likelihood trace
rather than on a likelihood increase threshold.

Reductions over observations are always performed in a canonical order
keyed by per-observation identities, and each (observation, component)
sampling cell owns a private random stream, so fitted results are
invariant to row order and to how work is scheduled.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .diagnostics import gate_arrays, heidelberger_welch
from .mpln_core import (
    ComponentParams,
    DegenerateCovarianceError,
    MixtureParams,
    latent_log_posterior_rows,
)
from .sampler import SamplerConfig, SamplingError, grow_schedule, hmc_latent_draws
from .selection_eval import count_free_params

_EMPTY_WEIGHT_CUTOFF = 1e-8
_WEIGHT_FLOOR = 1e-12
# phase tags keep init-run streams disjoint from main-loop streams
_PHASE_MAIN = 0
_PHASE_KMEANS = 900
_PHASE_RANDOM = 901


@dataclass(frozen=True)
class Responsibilities:
    """Posterior membership probabilities and their MAP labels."""

    z: np.ndarray  # (n, G), rows sum to 1
    map_labels: np.ndarray  # (n,), argmax per row, ties to the lowest index

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim != 2:
            raise ValueError("z must be 2-D")
        if np.any(z < 0):
            raise ValueError("responsibilities must be nonnegative")
        if np.max(np.abs(z.sum(axis=1) - 1.0)) > 1e-10:
            raise ValueError("responsibility rows must sum to 1")
        labels = np.asarray(self.map_labels)
        if not np.array_equal(labels, z.argmax(axis=1)):
            raise ValueError("map_labels must be the per-row argmax of z")
        z.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "map_labels", labels)

    @classmethod
    def from_z(cls, z):
        z = np.asarray(z, dtype=float)
        z = z / z.sum(axis=1, keepdims=True)
        return cls(z=z, map_labels=z.argmax(axis=1))

    @property
    def n(self):
        return self.z.shape[0]

    @property
    def g(self):
        return self.z.shape[1]


@dataclass
class LatentStats:
    """Per-cell posterior summaries from one E-step."""

    theta_mean: np.ndarray  # (n, G, d)
    scatter: np.ndarray  # (n, G, d, d), about mu_ref[g]
    mu_ref: np.ndarray  # (G, d), component means the scatter is centered on
    rhat_max: np.ndarray  # (n, G)
    neff_min: np.ndarray  # (n, G)
    gate_retries: np.ndarray  # (n, G)
    gate_failed: np.ndarray  # (n, G) bool, still failing after max retries


@dataclass(frozen=True)
class FitConfig:
    g: int
    init_method: str = "kmeans"
    init_runs: int = 3
    init_iters: int = 10
    max_em_iters: int = 200
    min_em_iters: int = 10
    hw_alpha: float = 0.05
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    # chain length base for the short initialization runs
    init_sampler_iters: int = 500
    # per-observation identities for RNG streams and reduction order;
    # defaults to row position (hook for order-invariance checks)
    obs_keys: tuple = None

    def __post_init__(self):
        if self.g < 1:
            raise ValueError("g must be >= 1")
        if self.init_method not in ("kmeans", "random"):
            raise ValueError("init_method must be 'kmeans' or 'random'")
        if self.init_runs < 1:
            raise ValueError("init_runs must be >= 1")
        if self.min_em_iters < 1 or self.max_em_iters < self.min_em_iters:
            raise ValueError("need 1 <= min_em_iters <= max_em_iters")


@dataclass
class FitResult:
    params: MixtureParams
    resp: Responsibilities
    loglik_trace: list
    converged: bool
    em_iters_used: int
    criteria: object = None  # CriteriaSet, filled by selection_eval
    k_free: int = 0
    diagnostics_log: list = field(default_factory=list)
    effective_map_clusters: int = 0
    flags: tuple = ()
    init_run: int = 0


def _obs_keys(counts, cfg):
    if cfg.obs_keys is None:
        return np.arange(counts.n)
    keys = np.asarray(cfg.obs_keys)
    if keys.size != counts.n or np.unique(keys).size != counts.n:
        raise ValueError("obs_keys must be a permutation-stable unique key per row")
    return keys


def _ordered_sum(arr, order):
    """Reduce over observations in canonical key order (bit-stable under row permutation)."""
    return np.sum(np.asarray(arr)[order], axis=0)


def transformed_counts(counts, s):
    """Feature space for initialization: log((y + 1) / s)."""
    return np.log((counts.values + 1.0) / s.s)


def kmeans(points, k, iters=10, seed=0):
    """Lloyd's algorithm with k-means++ seeding and farthest-point reseeding.

    Points are processed in a canonical (lexicographically sorted) order,
    so the labeling is a pure function of the point multiset.
    """
    X = np.asarray(points, dtype=float)
    n = X.shape[0]
    if k > n:
        raise ValueError("k must not exceed the number of points")
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.lexsort(X.T[::-1])
    Xs = X[order]
    rng = np.random.default_rng(np.random.SeedSequence(
        tuple(int(v) for v in (seed if isinstance(seed, (tuple, list)) else (seed,)))))

    centers = np.empty((k, X.shape[1]))
    centers[0] = Xs[int(rng.integers(n))]
    d2 = np.sum((Xs - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = Xs[int(rng.integers(n))]
        else:
            centers[c] = Xs[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((Xs - centers[c]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max(iters, 1)):
        dist = np.sum((Xs[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = dist.argmin(axis=1)
        # re-seed empty clusters from the point farthest from its center
        for c in range(k):
            if not np.any(new_labels == c):
                far = int(np.argmax(dist[np.arange(n), new_labels]))
                centers[c] = Xs[far]
                dist[:, c] = np.sum((Xs - centers[c]) ** 2, axis=1)
                new_labels = dist.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        for c in range(k):
            members = Xs[labels == c]
            if members.shape[0] > 0:
                centers[c] = members.mean(axis=0)
    out = np.empty(n, dtype=np.int64)
    out[order] = labels
    return out


def _fill_empty_components(labels, g, obs_keys):
    """Move one member of the largest group into each empty component.

    Donors are chosen by lowest observation key, so the repair is
    deterministic and independent of row order.
    """
    labels = labels.copy()
    key_order = np.argsort(obs_keys, kind="stable")
    for comp in range(g):
        if np.any(labels == comp):
            continue
        sizes = np.bincount(labels, minlength=g)
        sizes[sizes <= 1] = 0  # never empty a singleton group
        donor = int(np.argmax(sizes))
        for pos in key_order:
            if labels[pos] == donor:
                labels[pos] = comp
                break
    return labels


def _random_hard_labels(g, obs_keys, seed_tuple):
    """Uniform random assignment keyed by observation identity, no component empty."""
    labels = np.empty(obs_keys.size, dtype=np.int64)
    for pos, key in enumerate(obs_keys):
        rng = np.random.default_rng(np.random.SeedSequence((*seed_tuple, int(key))))
        labels[pos] = int(rng.integers(g))
    return _fill_empty_components(labels, g, obs_keys)


def _partition_params(X, labels, g, order):
    """Mixture parameters from a hard partition of the transformed matrix."""
    n, d = X.shape
    weights = np.empty(g)
    comps = []
    for comp in range(g):
        members = X[order][labels[order] == comp]
        count = members.shape[0]
        if count == 0:
            raise ValueError(f"component {comp} received no observations")
        weights[comp] = count / n
        mu = members.mean(axis=0)
        if count >= 2:
            dev = members - mu
            cov = dev.T @ dev / (count - 1)
        else:
            cov = np.zeros((d, d))
        if count < d + 1:
            cov = cov + 0.1 * np.eye(d)  # undersized group: weak default scale
        comps.append(ComponentParams(mu=mu, sigma=cov))
    return MixtureParams(weights=weights, components=tuple(comps))


def e_step(counts, s, params, cfg, em_iter, phase=_PHASE_MAIN, base_iters=None):
    """Latent posterior summaries and responsibilities for every (i, g) cell.

    Cells whose chains fail the mixing gate are resampled with chains grown
    by 100 iterations per failure, up to the sampler's retry budget, then
    kept with a warning flag.
    """
    Y = counts.values.astype(float)
    n, d = Y.shape
    g = params.g
    log_s = s.log_s
    base = cfg.sampler.total_iters if base_iters is None else base_iters
    obs_keys = _obs_keys(counts, cfg)

    theta_mean = np.empty((n, g, d))
    scatter = np.empty((n, g, d, d))
    rhat_max = np.empty((n, g))
    neff_min = np.empty((n, g))
    gate_retries = np.zeros((n, g), dtype=np.int64)
    gate_failed = np.zeros((n, g), dtype=bool)

    for comp_idx in range(g):
        comp = params.components[comp_idx]
        pending = np.arange(n)
        failures = 0
        while True:
            iters = grow_schedule(em_iter, base, failures)
            ents = [
                (cfg.seed, phase, em_iter, int(obs_keys[i]), comp_idx, failures)
                for i in pending
            ]
            batch = hmc_latent_draws(
                Y[pending], log_s, comp, cfg.sampler, ents, total_iters=iters
            )
            draws = batch.draws  # (m, kept, len(pending), d)
            theta_mean[pending, comp_idx] = draws.mean(axis=(0, 1))
            dev = draws - comp.mu
            m_kept = draws.shape[0] * draws.shape[1]
            scatter[pending, comp_idx] = (
                np.einsum("abid,abie->ide", dev, dev, optimize=False) / m_kept
            )
            r_max, e_min, ok = gate_arrays(draws)
            rhat_max[pending, comp_idx] = r_max
            neff_min[pending, comp_idx] = e_min
            gate_retries[pending, comp_idx] = failures
            failed = pending[~ok]
            if failed.size == 0:
                break
            if failures >= cfg.sampler.max_retries:
                gate_failed[failed, comp_idx] = True
                break
            failures += 1
            pending = failed

    log_fact = np.sum(gammaln(Y + 1.0), axis=1)
    log_num = np.empty((n, g))
    for comp_idx in range(g):
        log_num[:, comp_idx] = (
            np.log(params.weights[comp_idx])
            + latent_log_posterior_rows(theta_mean[:, comp_idx], Y, log_s, params.components[comp_idx])
            - log_fact
        )
    if not np.all(np.isfinite(log_num)):
        raise SamplingError("non-finite joint density in E-step")
    lse = np.max(log_num, axis=1, keepdims=True)
    z = np.exp(log_num - lse - np.log(np.sum(np.exp(log_num - lse), axis=1, keepdims=True)))
    resp = Responsibilities.from_z(z)
    mu_ref = np.stack([c.mu for c in params.components])
    stats = LatentStats(
        theta_mean=theta_mean,
        scatter=scatter,
        mu_ref=mu_ref,
        rhat_max=rhat_max,
        neff_min=neff_min,
        gate_retries=gate_retries,
        gate_failed=gate_failed,
    )
    return resp, stats


def m_step(resp, stats, counts, prev_params=None, obs_order=None):
    """Closed-form parameter updates from responsibilities and latent summaries.

    The covariance update is centered on the new component mean via the
    parallel-axis identity, using only the stored first and second moments.
    Components whose responsibility mass vanishes keep their previous
    parameters and are flagged.
    """
    n, g = resp.z.shape
    d = stats.theta_mean.shape[2]
    order = np.arange(n) if obs_order is None else obs_order
    flags = []
    weights = np.empty(g)
    comps = []
    for comp_idx in range(g):
        w = resp.z[:, comp_idx]
        w_sum = float(_ordered_sum(w, order))
        weights[comp_idx] = w_sum / n
        if w_sum < _EMPTY_WEIGHT_CUTOFF:
            if prev_params is None:
                raise ValueError(f"component {comp_idx} is empty and no previous parameters exist")
            flags.append(f"empty_component_{comp_idx}")
            comps.append(prev_params.components[comp_idx])
            continue
        theta_g = stats.theta_mean[:, comp_idx]  # (n, d)
        mu_new = _ordered_sum(w[:, None] * theta_g, order) / w_sum
        dev_old = theta_g - stats.mu_ref[comp_idx]
        dev_new = theta_g - mu_new
        cell = (
            stats.scatter[:, comp_idx]
            - dev_old[:, :, None] * dev_old[:, None, :]
            + dev_new[:, :, None] * dev_new[:, None, :]
        )
        sigma_new = _ordered_sum(w[:, None, None] * cell, order) / w_sum
        sigma_new = 0.5 * (sigma_new + sigma_new.T)
        comps.append(ComponentParams(mu=mu_new, sigma=sigma_new))
    floored = np.maximum(weights, _WEIGHT_FLOOR)
    params = MixtureParams(weights=floored / floored.sum(), components=tuple(comps))
    return params, tuple(flags)


def observed_log_likelihood(counts, s, params, stats, obs_order=None):
    """Plug-in mixture log likelihood at the posterior-mean latent vectors."""
    Y = counts.values.astype(float)
    log_s = s.log_s
    log_fact = np.sum(gammaln(Y + 1.0), axis=1)
    g = params.g
    log_num = np.empty((Y.shape[0], g))
    for comp_idx in range(g):
        log_num[:, comp_idx] = (
            np.log(params.weights[comp_idx])
            + latent_log_posterior_rows(stats.theta_mean[:, comp_idx], Y, log_s, params.components[comp_idx])
            - log_fact
        )
    m = np.max(log_num, axis=1)
    lse = m + np.log(np.sum(np.exp(log_num - m[:, None]), axis=1))
    order = np.arange(Y.shape[0]) if obs_order is None else obs_order
    return float(_ordered_sum(lse, order))


def _run_em(counts, s, params, cfg, max_iters, phase, base_iters, hw_stop):
    """Shared EM loop used by both initialization short runs and the main fit."""
    obs_keys = _obs_keys(counts, cfg)
    order = np.argsort(obs_keys, kind="stable")
    trace = []
    diag_log = []
    flags = set()
    converged = False
    resp = None
    for t in range(1, max_iters + 1):
        resp, stats = e_step(counts, s, params, cfg, em_iter=t, phase=phase, base_iters=base_iters)
        params, m_flags = m_step(resp, stats, counts, prev_params=params, obs_order=order)
        flags.update(m_flags)
        if np.any(stats.gate_failed):
            flags.add("chain_gate_exhausted")
        ll = observed_log_likelihood(counts, s, params, stats, obs_order=order)
        if not np.isfinite(ll):
            raise SamplingError("non-finite log likelihood")
        trace.append(ll)
        entry = {
            "iter": t,
            "loglik": ll,
            "rhat_max": float(stats.rhat_max.max()),
            "neff_min": float(stats.neff_min.min()),
            "gate_failed_cells": int(stats.gate_failed.sum()),
            "hw_tested": False,
            "hw_pass": None,
        }
        if hw_stop and t >= cfg.min_em_iters:
            stationary, kept_from = heidelberger_welch(trace, cfg.hw_alpha)
            entry["hw_tested"] = True
            entry["hw_pass"] = bool(stationary)
            entry["hw_kept_from"] = int(kept_from)
            if stationary:
                converged = True
                diag_log.append(entry)
                break
        diag_log.append(entry)
    return params, resp, trace, diag_log, converged, flags


def initialize(counts, s, cfg):
    """Best-of-runs starting point: hard partition, moment parameters, 10 short EM iterations.

    Each run partitions the transformed matrix (k-means or uniform random),
    derives moment-matched mixture parameters, and runs a fixed number of
    MCMC-EM iterations on shorter chains; the run with the highest final
    log likelihood wins.
    """
    if cfg.g > counts.n:
        raise ValueError("more components than observations")
    X = transformed_counts(counts, s)
    obs_keys = _obs_keys(counts, cfg)
    order = np.argsort(obs_keys, kind="stable")
    best = None
    for run in range(cfg.init_runs):
        if cfg.init_method == "kmeans":
            labels = kmeans(X, cfg.g, iters=10, seed=(cfg.seed, _PHASEKMEANS_ := _PHASE_KMEANS, run))
            labels = _fill_empty_components(labels, cfg.g, obs_keys)
        else:
            labels = _random_hard_labels(cfg.g, obs_keys, (cfg.seed, _PHASE_RANDOM, run))
        params0 = _partition_params(X, labels, cfg.g, order)
        params, resp, trace, _, _, flags = _run_em(
            counts, s, params0, cfg,
            max_iters=cfg.init_iters, phase=run + 1,
            base_iters=cfg.init_sampler_iters, hw_stop=False,
        )
        if best is None or trace[-1] > best[0]:
            best = (trace[-1], run, resp, params, flags)
    _, run, resp, params, flags = best
    return resp, params, run, tuple(sorted(flags))


def _fallback_params(counts, s, g):
    X = transformed_counts(counts, s)
    mu = X.mean(axis=0)
    var = np.maximum(X.var(axis=0), 1e-3)
    comps = tuple(ComponentParams(mu=mu, sigma=np.diag(var)) for _ in range(g))
    return MixtureParams(weights=np.full(g, 1.0 / g), components=comps)


def fit_single_g(counts, s, cfg):
    """Fit one mixture size end to end; degenerate data yields a flagged result, not a crash."""
    if cfg.g > counts.n:
        raise ValueError("more components than observations")
    flags = set()
    params = None
    resp = None
    trace = []
    diag_log = []
    converged = False
    init_run = 0
    try:
        resp, params, init_run, init_flags = initialize(counts, s, cfg)
        flags.update(init_flags)
        params, resp, trace, diag_log, converged, run_flags = _run_em(
            counts, s, params, cfg,
            max_iters=cfg.max_em_iters, phase=_PHASE_MAIN,
            base_iters=cfg.sampler.total_iters, hw_stop=True,
        )
        flags.update(run_flags)
    except (DegenerateCovarianceError, SamplingError, np.linalg.LinAlgError) as exc:
        flags.add(f"failed:{type(exc).__name__}:{exc}")
        converged = False
        if params is None:
            params = _fallback_params(counts, s, cfg.g)
        if resp is None:
            resp = Responsibilities.from_z(np.full((counts.n, cfg.g), 1.0 / cfg.g))
    effective = int(np.unique(resp.map_labels).size)
    if effective != cfg.g:
        flags.add("map_clusters_mismatch")
    return FitResult(
        params=params,
        resp=resp,
        loglik_trace=list(trace),
        converged=converged,
        em_iters_used=len(trace),
        criteria=None,
        k_free=count_free_params(cfg.g, counts.d),
        diagnostics_log=diag_log,
        effective_map_clusters=effective,
        flags=tuple(sorted(flags)),
        init_run=init_run,
    )
