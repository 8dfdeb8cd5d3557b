"""Hamiltonian Monte Carlo for the latent posterior f(theta | y, params).

Plain HMC with a fixed leapfrog count and dual-averaging step-size
adaptation during warmup, identity mass matrix. The posterior is
log-concave (concave Poisson log likelihood plus Gaussian prior), so a
fixed-path integrator with an adapted step size mixes well without
trajectory adaptation.

Chains for many observations sharing one set of component parameters run
through a single compiled kernel, one independent row per observation.
Every row consumes its own pre-generated random stream, so results are
bit-identical whether a row is sampled alone or inside a batch, and
independent of scheduling order.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from .mpln_core import latent_log_posterior_rows, mvn_log_density_rows

# dual-averaging constants (standard choices)
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75
_EPS0 = 0.1
# Hamiltonian error beyond which a transition counts as divergent
_DIVERGENCE_DH = 1000.0


class SamplingError(RuntimeError):
    """Raised when sampling cannot start (non-finite posterior at init)."""


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 3
    total_iters: int = 1000
    warmup_fraction: float = 0.5
    leapfrog_steps: int = 10
    target_accept: float = 0.8
    max_retries: int = 5

    def __post_init__(self):
        if self.chains < 2:
            raise ValueError("at least 2 chains are required for diagnostics")
        if self.total_iters < 100:
            raise ValueError("total_iters must be >= 100")
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")
        if not (0.0 < self.target_accept < 1.0):
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def warmup_len(self, total_iters=None):
        total = self.total_iters if total_iters is None else total_iters
        return int(total * self.warmup_fraction)


@dataclass(frozen=True)
class ChainSet:
    """Post-warmup draws of the latent vector for one (observation, component) pair."""

    draws: np.ndarray  # (chains, kept, d)
    warmup_len: int
    step_size: np.ndarray  # adapted leapfrog step per chain
    seed_info: tuple

    def __post_init__(self):
        draws = np.asarray(self.draws, dtype=float)
        if draws.ndim != 3:
            raise ValueError("draws must have shape (chains, iterations, d)")
        if draws.shape[0] < 2:
            raise ValueError("at least 2 chains required")
        if draws.shape[1] < 2:
            raise ValueError("at least 2 post-warmup draws required")
        if not np.all(np.isfinite(draws)):
            raise ValueError("draws must be finite")
        object.__setattr__(self, "draws", draws)
        object.__setattr__(self, "step_size", np.asarray(self.step_size, dtype=float))

    @property
    def m(self):
        return self.draws.shape[0]

    @property
    def n_kept(self):
        return self.draws.shape[1]

    @property
    def d(self):
        return self.draws.shape[2]


@dataclass
class BatchDraws:
    """Sampler output for a batch of observations against one component."""

    draws: np.ndarray  # (chains, kept, n, d)
    warmup_len: int
    step_size: np.ndarray  # (chains, n)
    divergence_rate: np.ndarray  # (chains, n)
    mean_accept: np.ndarray  # (chains, n)
    mean_abs_dh: np.ndarray  # (chains, n), over accepted post-warmup transitions
    step_retries: np.ndarray  # (chains, n), divergence-driven step halvings


@njit(cache=True)
def _hmc_kernel(Y, log_s, mu, prec, theta0, momenta, unif, eps_jit, eps0,
                warmup, n_leap, target_accept, use_pois,
                draws, eps_out, div_count, acc_sum, dh_sum, dh_count):
    """Adaptive HMC over independent rows; all randomness is pre-generated.

    The realized step size of each transition is the adapted base step
    scaled by a uniform +-20% jitter (eps_jit), which breaks the periodic
    trajectories a fixed leapfrog count can lock into on near-Gaussian
    targets. Writes post-warmup positions into draws (iters-warmup, R, d)
    and per-row summaries into the remaining output arrays.
    """
    iters = momenta.shape[0]
    R = momenta.shape[1]
    d = momenta.shape[2]

    cur = theta0.copy()
    cur_lp = np.empty(R)
    cur_grad = np.empty((R, d))
    log_eps = np.empty(R)
    log_eps_bar = np.zeros(R)
    h_bar = np.zeros(R)
    mu_da = np.empty(R)
    eps_final = np.empty(R)

    th = np.empty(d)
    g = np.empty(d)
    p = np.empty(d)

    for r in range(R):
        lp = 0.0
        if use_pois:
            for j in range(d):
                eta = cur[r, j] + log_s[j]
                lp += Y[r, j] * eta - np.exp(eta)
        quad = 0.0
        for j in range(d):
            acc = 0.0
            for k in range(d):
                acc += (cur[r, k] - mu[k]) * prec[k, j]
            quad += acc * (cur[r, j] - mu[j])
            if use_pois:
                cur_grad[r, j] = Y[r, j] - np.exp(cur[r, j] + log_s[j]) - acc
            else:
                cur_grad[r, j] = -acc
        cur_lp[r] = lp - 0.5 * quad
        log_eps[r] = np.log(eps0[r])
        mu_da[r] = np.log(10.0 * eps0[r])

    for it in range(iters):
        in_warmup = it < warmup
        for r in range(R):
            if in_warmup:
                eps = np.exp(log_eps[r])
            else:
                eps = eps_final[r]
            eps = eps * (0.8 + 0.4 * eps_jit[it, r])
            h0 = -cur_lp[r]
            for j in range(d):
                p[j] = momenta[it, r, j]
                h0 += 0.5 * p[j] * p[j]
                th[j] = cur[r, j]
                g[j] = cur_grad[r, j]
            for j in range(d):
                p[j] += 0.5 * eps * g[j]
            for step in range(n_leap):
                for j in range(d):
                    th[j] += eps * p[j]
                for j in range(d):
                    acc = 0.0
                    for k in range(d):
                        acc += (th[k] - mu[k]) * prec[k, j]
                    if use_pois:
                        g[j] = Y[r, j] - np.exp(th[j] + log_s[j]) - acc
                    else:
                        g[j] = -acc
                if step < n_leap - 1:
                    for j in range(d):
                        p[j] += eps * g[j]
            for j in range(d):
                p[j] += 0.5 * eps * g[j]
            lp = 0.0
            if use_pois:
                for j in range(d):
                    eta = th[j] + log_s[j]
                    lp += Y[r, j] * eta - np.exp(eta)
            quad = 0.0
            for j in range(d):
                acc = 0.0
                for k in range(d):
                    acc += (th[k] - mu[k]) * prec[k, j]
                quad += acc * (th[j] - mu[j])
            lp -= 0.5 * quad
            h1 = -lp
            for j in range(d):
                h1 += 0.5 * p[j] * p[j]
            dh = h0 - h1
            finite = np.isfinite(h1)
            divergent = (not finite) or (h1 - h0) > _DIVERGENCE_DH
            if finite and dh > 0.0:
                alpha = 1.0
            elif finite:
                alpha = np.exp(dh)
            else:
                alpha = 0.0
            accepted = finite and (np.log(unif[it, r]) < dh)
            if accepted:
                for j in range(d):
                    cur[r, j] = th[j]
                    cur_grad[r, j] = g[j]
                cur_lp[r] = lp
            if in_warmup:
                m = it + 1.0
                w = 1.0 / (m + _DA_T0)
                h_bar[r] = (1.0 - w) * h_bar[r] + w * (target_accept - alpha)
                log_eps[r] = mu_da[r] - np.sqrt(m) / _DA_GAMMA * h_bar[r]
                pw = m ** (-_DA_KAPPA)
                log_eps_bar[r] = pw * log_eps[r] + (1.0 - pw) * log_eps_bar[r]
                if it == warmup - 1:
                    # freeze slightly below the averaged step: keeps the
                    # post-warmup energy error comfortably small
                    eps_final[r] = 0.9 * np.exp(log_eps_bar[r])
            else:
                for j in range(d):
                    draws[it - warmup, r, j] = cur[r, j]
                acc_sum[r] += alpha
                if divergent:
                    div_count[r] += 1
                if accepted:
                    if dh < 0.0:
                        dh_sum[r] += -dh
                    else:
                        dh_sum[r] += dh
                    dh_count[r] += 1
    for r in range(R):
        eps_out[r] = eps_final[r]


def _row_streams(entropy_tuples, total_iters, d):
    """Pre-generate init jitter, momenta, uniforms, and step jitter per private row stream."""
    R = len(entropy_tuples)
    jitter = np.empty((R, d))
    momenta = np.empty((total_iters, R, d))
    unif = np.empty((total_iters, R))
    eps_jit = np.empty((total_iters, R))
    for r, ent in enumerate(entropy_tuples):
        rng = np.random.default_rng(np.random.SeedSequence(tuple(int(e) for e in ent)))
        jitter[r] = rng.standard_normal(d)
        momenta[:, r, :] = rng.standard_normal((total_iters, d))
        unif[:, r] = rng.random(total_iters)
        eps_jit[:, r] = rng.random(total_iters)
    return jitter, momenta, unif, eps_jit


def _run_chain_rows(Y, log_s, params, cfg, entropy_tuples, total_iters, prior_only):
    """Run one chain for each row, retrying rows whose divergence rate exceeds 50%."""
    R, d = Y.shape
    warmup = cfg.warmup_len(total_iters)
    kept = total_iters - warmup
    jitter, momenta, unif, eps_jit = _row_streams(entropy_tuples, total_iters, d)
    theta0 = np.log((Y + 0.5) / np.exp(log_s)) + 0.1 * jitter

    lp0 = mvn_log_density_rows(theta0, params) if prior_only \
        else latent_log_posterior_rows(theta0, Y, log_s, params)
    if not np.all(np.isfinite(lp0)):
        raise SamplingError("non-finite log posterior at chain initialization; parameters look corrupt")

    draws = np.empty((kept, R, d))
    eps_out = np.empty(R)
    div_rate = np.zeros(R)
    acc_mean = np.zeros(R)
    dh_mean = np.zeros(R)
    retries = np.zeros(R, dtype=np.int64)

    eps0 = np.full(R, _EPS0)
    active = np.arange(R)
    for attempt in range(cfg.max_retries + 1):
        A = active.size
        first = A == R
        sub_draws = draws if first else np.empty((kept, A, d))
        sub_eps = np.empty(A)
        sub_div = np.zeros(A, dtype=np.int64)
        sub_acc = np.zeros(A)
        sub_dhs = np.zeros(A)
        sub_dhc = np.zeros(A, dtype=np.int64)
        _hmc_kernel(
            Y if first else np.ascontiguousarray(Y[active]),
            log_s, params.mu, params.precision,
            theta0 if first else np.ascontiguousarray(theta0[active]),
            momenta if first else np.ascontiguousarray(momenta[:, active, :]),
            unif if first else np.ascontiguousarray(unif[:, active]),
            eps_jit if first else np.ascontiguousarray(eps_jit[:, active]),
            eps0[active].copy(),
            warmup, cfg.leapfrog_steps, cfg.target_accept, not prior_only,
            sub_draws, sub_eps, sub_div, sub_acc, sub_dhs, sub_dhc,
        )
        if not first:
            draws[:, active, :] = sub_draws
        eps_out[active] = sub_eps
        rate = sub_div / max(kept, 1)
        div_rate[active] = rate
        acc_mean[active] = sub_acc / max(kept, 1)
        dh_mean[active] = np.where(sub_dhc > 0, sub_dhs / np.maximum(sub_dhc, 1), 0.0)
        bad = active[rate > 0.5]
        if bad.size == 0 or attempt == cfg.max_retries:
            break
        eps0[bad] *= 0.5
        retries[bad] += 1
        active = bad
    return draws, eps_out, div_rate, acc_mean, dh_mean, retries


def hmc_latent_draws(Y, log_s, params, cfg, base_entropy_rows, total_iters=None, prior_only=False):
    """Sample all chains for a batch of observations against one component.

    base_entropy_rows holds one entropy tuple per observation; the chain
    index is appended to it, so every (observation, chain) pair owns an
    independent, schedule-free random stream.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, d = Y.shape
    total = cfg.total_iters if total_iters is None else int(total_iters)
    warmup = cfg.warmup_len(total)
    kept = total - warmup
    if kept < 2:
        raise ValueError("fewer than 2 post-warmup iterations")

    draws = np.empty((cfg.chains, kept, n, d))
    step_size = np.empty((cfg.chains, n))
    div_rate = np.empty((cfg.chains, n))
    mean_accept = np.empty((cfg.chains, n))
    mean_abs_dh = np.empty((cfg.chains, n))
    step_retries = np.empty((cfg.chains, n), dtype=np.int64)
    for c in range(cfg.chains):
        ents = [(*ent, c) for ent in base_entropy_rows]
        ch_draws, eps, dr, am, dh, rt = _run_chain_rows(
            Y, log_s, params, cfg, ents, total, prior_only
        )
        draws[c] = ch_draws
        step_size[c] = eps
        div_rate[c] = dr
        mean_accept[c] = am
        mean_abs_dh[c] = dh
        step_retries[c] = rt
    return BatchDraws(
        draws=draws,
        warmup_len=warmup,
        step_size=step_size,
        divergence_rate=div_rate,
        mean_accept=mean_accept,
        mean_abs_dh=mean_abs_dh,
        step_retries=step_retries,
    )


def sample_latent(y, s, params, cfg, seed, prior_only=False, total_iters=None):
    """Draw MCMC chains targeting the latent posterior for one observation.

    seed may be an integer or a tuple of integers; identical inputs
    reproduce identical draws bit for bit. With prior_only=True the Poisson
    term is dropped and the chains target the Gaussian prior exactly (test
    hook).
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    log_s = s.log_s if hasattr(s, "log_s") else np.log(np.asarray(s, dtype=float))
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    batch = hmc_latent_draws(
        y[None, :], log_s, params, cfg, [base], total_iters=total_iters, prior_only=prior_only
    )
    return ChainSet(
        draws=batch.draws[:, :, 0, :],
        warmup_len=batch.warmup_len,
        step_size=batch.step_size[:, 0],
        seed_info=base,
    )


def posterior_mean(chains):
    """Elementwise average over all chains and post-warmup draws."""
    return chains.draws.mean(axis=(0, 1))


def posterior_scatter(chains, center):
    """Average outer product of (draw - center) over every retained draw."""
    center = np.asarray(center, dtype=float).reshape(-1)
    if center.size != chains.d:
        raise ValueError("center dimension mismatch")
    dev = chains.draws.reshape(-1, chains.d) - center
    return scatter_about(dev)


def scatter_about(dev):
    """Mean outer product of already-centered rows, accumulated in fixed order."""
    out = np.einsum("ki,kj->ij", dev, dev, optimize=False)
    return out / dev.shape[0]


def grow_schedule(em_iter, base, failures):
    """Chain length for a given EM iteration: base, +10 per EM step, +100 per redo."""
    if em_iter < 1:
        raise ValueError("em_iter must be >= 1")
    return int(base + 10 * (em_iter - 1) + 100 * failures)
