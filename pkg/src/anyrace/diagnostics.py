"""MCMC convergence diagnostics: split rank-normalised R-hat and bulk/tail ESS.

Inputs are arrays of shape (chains, draws) or (chains, draws, params).
"""

from __future__ import annotations

import numpy as np
from scipy.stats import norm, rankdata


def _split(x: np.ndarray) -> np.ndarray:
    """Split each chain in half -> (2 * chains, draws // 2, ...)."""
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    shape = x.shape
    r = rankdata(x.reshape(-1), method="average").reshape(shape)
    return norm.ppf((r - 0.375) / (x.size + 0.25))


def _rhat_basic(x: np.ndarray) -> float:
    m, n = x.shape
    if n < 2:
        return np.nan
    chain_mean = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * chain_mean.var(ddof=1)
    if W <= 0:
        return 1.0 if B <= 0 else np.inf
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance of each row via FFT (biased estimator)."""
    n = x.shape[-1]
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, n=size, axis=-1)
    return np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n] / n


def _ess_basic(x: np.ndarray) -> float:
    m, n = x.shape
    if n < 4:
        return np.nan
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean()
    var_plus = W * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer's initial positive sequence on pair sums, then make it monotone
    pairs = rho[: 2 * ((n - 1) // 2)].reshape(-1, 2).sum(axis=1)
    stop = np.argmax(pairs <= 0) if np.any(pairs <= 0) else len(pairs)
    pairs = np.minimum.accumulate(pairs[:stop])
    tau = -1 + 2 * pairs.sum()
    tau = max(tau, 1 / np.log10(m * n))
    return float(m * n / tau)


def rhat(x: np.ndarray) -> np.ndarray | float:
    """Rank-normalised split R-hat (max of bulk and folded versions)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        return np.array([rhat(x[:, :, k]) for k in range(x.shape[2])])
    if np.ptp(x) == 0:
        return 1.0
    s = _split(x)
    bulk = _rhat_basic(_rank_normalize(s))
    folded = _rhat_basic(_rank_normalize(np.abs(s - np.median(s))))
    return max(bulk, folded)


def ess_bulk(x: np.ndarray) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        return np.array([ess_bulk(x[:, :, k]) for k in range(x.shape[2])])
    if np.ptp(x) == 0:
        return float(x.size)
    return _ess_basic(_rank_normalize(_split(x)))


def ess_tail(x: np.ndarray) -> np.ndarray | float:
    """Minimum ESS of the 5% and 95% quantile indicators."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        return np.array([ess_tail(x[:, :, k]) for k in range(x.shape[2])])
    s = _split(x)
    out = []
    for q in (0.05, 0.95):
        ind = (s <= np.quantile(s, q)).astype(float)
        out.append(float(ind.size) if np.ptp(ind) == 0 else _ess_basic(ind))
    return min(out)
