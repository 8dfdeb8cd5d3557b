"""MCMC convergence diagnostics and the stationarity test that stops the EM loop.

Potential scale reduction uses the split-chain form (each chain halved), so
within-chain drift inflates the statistic. Effective sample size combines
within- and between-chain variance into multi-chain autocorrelation
estimates truncated by Geyer's initial positive sequence rule. The
Heidelberger-Welch test applies the Cramer-von-Mises statistic to the
standardized cumulative-sum bridge of a sequence, discarding a growing
prefix until the stationarity hypothesis survives or half the sequence is
gone.
"""

from dataclasses import dataclass

import numpy as np
import scipy.fft as _fft

# asymptotic critical values of the Cramer-von-Mises statistic
_CVM_CRITICAL = {0.10: 0.3473, 0.05: 0.4614, 0.025: 0.5806, 0.01: 0.7435}

# reporting cap for super-efficient (anticorrelated) chains
_ESS_CAP_FACTOR = 1.05

RHAT_LIMIT = 1.1
NEFF_FLOOR = 100.0


@dataclass(frozen=True)
class ChainDiagnostics:
    rhat: np.ndarray
    n_eff: np.ndarray
    passed: bool


def rhat_array(draws):
    """Split-chain potential scale reduction for draws shaped (m, N, ..., d)."""
    draws = np.asarray(draws, dtype=float)
    m, N = draws.shape[0], draws.shape[1]
    if m < 2:
        raise ValueError("at least 2 chains required")
    if N < 4:
        raise ValueError("at least 4 draws per chain required to split")
    half = N // 2
    seqs = np.concatenate([draws[:, :half], draws[:, N - half:]], axis=0)
    seq_means = seqs.mean(axis=1)
    W = seqs.var(axis=1, ddof=1).mean(axis=0)
    B_over_n = seq_means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * W + B_over_n
    out = np.empty_like(W)
    zero_w = W <= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(var_plus / W)
    # constant sequences carry no mixing evidence: identical chains pass,
    # distinct constants fail hard
    out = np.where(zero_w & (B_over_n <= 0.0), 1.0, out)
    out = np.where(zero_w & (B_over_n > 0.0), np.inf, out)
    return out


def ess_array(draws):
    """Multi-chain effective sample size for draws shaped (m, N, ..., d).

    rho_t = 1 - (W - mean-over-chains autocovariance_t) / var_plus, summed
    over the initial sequence of positive (rho_2t + rho_2t+1) pairs; the
    result is capped at 1.05 m N.
    """
    draws = np.asarray(draws, dtype=float)
    m, N = draws.shape[0], draws.shape[1]
    if N < 4:
        raise ValueError("at least 4 draws per chain required")
    chain_means = draws.mean(axis=1, keepdims=True)
    W = draws.var(axis=1, ddof=1).mean(axis=0)
    B_over_N = draws.mean(axis=1).var(axis=0, ddof=1) if m >= 2 else np.zeros_like(W)
    var_plus = (N - 1) / N * W + B_over_N

    centered = draws - chain_means
    nfft = 1 << int(np.ceil(np.log2(2 * N)))
    # transform along the last (contiguous) axis, then restore draw order
    moved = np.ascontiguousarray(np.moveaxis(centered, 1, -1))
    f = _fft.rfft(moved, n=nfft, axis=-1)
    acov = _fft.irfft(f * np.conj(f), n=nfft, axis=-1)[..., :N] / N
    mean_acov = np.moveaxis(acov.mean(axis=0), -1, 0)  # (N, ...)

    cap = _ESS_CAP_FACTOR * m * N
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = 1.0 - (W[None] - mean_acov) / var_plus[None]
    rho[0] = 1.0
    rho = np.where(np.isfinite(rho), rho, 0.0)

    n_pairs = N // 2
    pairs = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]  # (n_pairs, ...)
    nonpos = pairs <= 0.0
    any_bad = nonpos.any(axis=0)
    first_bad = np.where(any_bad, nonpos.argmax(axis=0), n_pairs)
    # Geyer's initial monotone sequence: pair sums forced non-increasing
    pairs = np.minimum.accumulate(pairs, axis=0)
    csum = np.cumsum(pairs, axis=0)
    padded = np.concatenate([np.zeros((1, *csum.shape[1:])), csum], axis=0)
    total = np.take_along_axis(padded, first_bad[None], axis=0)[0]
    tau = -1.0 + 2.0 * total
    with np.errstate(divide="ignore", invalid="ignore"):
        ess = np.where(tau > 0.0, m * N / np.where(tau > 0.0, tau, 1.0), np.inf)
    ess = np.minimum(ess, cap)
    # degenerate (zero-variance) cells carry no autocorrelation signal
    ess = np.where(var_plus <= 0.0, cap, ess)
    return ess


def potential_scale_reduction(chains):
    """Per-dimension split-chain R-hat of a ChainSet."""
    return rhat_array(chains.draws[:, :, None, :])[0]


def effective_sample_size(chains):
    """Per-dimension effective sample size of a ChainSet."""
    return ess_array(chains.draws[:, :, None, :])[0]


def gate_chains(chains):
    """Combined mixing gate: every R-hat below 1.1 and every ESS above 100."""
    rhat = potential_scale_reduction(chains)
    n_eff = effective_sample_size(chains)
    passed = bool(np.max(rhat) < RHAT_LIMIT and np.min(n_eff) > NEFF_FLOOR)
    return ChainDiagnostics(rhat=rhat, n_eff=n_eff, passed=passed)


def gate_arrays(draws):
    """Batch gate over draws (m, N, n, d): per-cell rhat max, ess min, pass flag."""
    rhat = rhat_array(draws)
    ess = ess_array(draws)
    rhat_max = rhat.max(axis=-1)
    ess_min = ess.min(axis=-1)
    passed = (rhat_max < RHAT_LIMIT) & (ess_min > NEFF_FLOOR)
    return rhat_max, ess_min, passed


def _spectral_density_zero(z):
    """Bartlett lag-window estimate of the spectral density at frequency zero."""
    h = z.size
    zc = z - z.mean()
    gamma0 = float(zc @ zc) / h
    w = int(np.floor(np.sqrt(h)))
    s0 = gamma0
    for t in range(1, min(w, h - 1) + 1):
        gamma_t = float(zc[:-t] @ zc[t:]) / h
        s0 += 2.0 * (1.0 - t / (w + 1.0)) * gamma_t
    if s0 <= 0.0:
        s0 = float(np.var(z, ddof=1)) if h > 1 else 0.0
    return s0


def heidelberger_welch(sequence, alpha=0.05):
    """Stationarity test on a scalar sequence; returns (stationary, kept_from).

    The Cramer-von-Mises statistic of the standardized cumulative-sum
    bridge is compared against the critical value for alpha; on rejection
    the first 10% of the original sequence is discarded and the test is
    rerun, up to 50% discarded. The variance scale is the spectral density
    at zero estimated from the first half of the current sequence.
    Sequences shorter than 10 are never accepted; an exactly constant
    sequence is trivially stationary.
    """
    if alpha not in _CVM_CRITICAL:
        raise ValueError(f"unsupported alpha {alpha!r}; choose from {sorted(_CVM_CRITICAL)}")
    crit = _CVM_CRITICAL[alpha]
    x = np.asarray(sequence, dtype=float).reshape(-1)
    n0 = x.size
    if n0 < 10:
        return False, 0
    if np.ptp(x) == 0.0:
        return True, 0
    last_start = 0
    for frac in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5):
        start = int(np.floor(n0 * frac))
        last_start = start
        y = x[start:]
        n = y.size
        if n < 10:
            break
        if np.ptp(y) == 0.0:
            return True, start
        s0 = _spectral_density_zero(y[: n // 2])
        if s0 <= 0.0:
            return True, start
        csum = np.cumsum(y)
        k = np.arange(1, n + 1)
        bridge = (csum - k * y.mean()) / np.sqrt(n * s0)
        stat = float(np.sum(bridge**2)) / n
        if stat <= crit:
            return True, start
    return False, last_start
