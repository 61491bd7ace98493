"""Convergence diagnostics: split R-hat and bulk effective sample size.

Inputs are arrays of shape ``(chains, draws)`` or ``(chains, draws, n_params)``;
the parameter axis is handled in one vectorized pass.
"""

from __future__ import annotations

import numpy as np
from scipy import stats


def _as3d(draws) -> tuple[np.ndarray, bool]:
    x = np.asarray(draws, float)
    if x.ndim == 2:
        return x[..., None], True
    if x.ndim != 3:
        raise ValueError("draws must have shape (chains, draws) or (chains, draws, params)")
    return x, False


def _check(x: np.ndarray, min_chains: int = 1) -> None:
    if x.shape[0] < min_chains or x.shape[1] < 4:
        raise ValueError(f"need >= {min_chains} chains and >= 4 draws per chain, got {x.shape[:2]}")


def split_chains(x: np.ndarray) -> np.ndarray:
    """Halve every chain (dropping the middle draw of odd-length chains) and stack the halves."""
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def z_scale(x: np.ndarray) -> np.ndarray:
    """Rank-normalize each parameter over all chains and draws jointly."""
    m, n, d = x.shape
    flat = x.reshape(m * n, d)
    ranks = stats.rankdata(flat, axis=0, method="average")
    return stats.norm.ppf((ranks - 0.375) / (m * n + 0.25)).reshape(x.shape)


def _rhat_core(x: np.ndarray) -> np.ndarray:
    m, n, _ = x.shape
    chain_mean = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * chain_mean.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    return np.where(W > 0, r, np.inf)


def split_rhat(draws, rank_normalized: bool = False):
    """Split-chain potential scale reduction factor.

    With ``rank_normalized`` the result is the larger of the bulk (rank
    normalized) and tail (folded, rank normalized) versions. Series with zero
    within-chain variance give ``inf``.
    """
    x, scalar = _as3d(draws)
    _check(x, min_chains=1)
    xs = split_chains(x)
    if xs.shape[0] < 2:
        raise ValueError("split R-hat needs at least two split chains")
    if rank_normalized:
        degenerate = xs.var(axis=1, ddof=1).mean(axis=0) == 0
        bulk = _rhat_core(z_scale(xs))
        folded = np.abs(xs - np.median(xs.reshape(-1, xs.shape[2]), axis=0))
        tail = _rhat_core(z_scale(folded))
        r = np.where(degenerate, np.inf, np.maximum(bulk, tail))
    else:
        r = _rhat_core(xs)
    return float(r[0]) if scalar else r


def autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance along axis 1 via FFT."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=nfft, axis=1)
    return np.fft.irfft(f * np.conjugate(f), n=nfft, axis=1)[:, :n] / n


def ess(x: np.ndarray) -> np.ndarray:
    """Effective sample size with Geyer's initial monotone sequence; ``x`` is 3-D."""
    m, n, d = x.shape
    acov = autocovariance(x)
    chain_mean = x.mean(axis=1)
    mean_var = acov[:, 0].mean(axis=0) * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus = var_plus + chain_mean.var(axis=0, ddof=1)
    out = np.zeros(d)
    ok = var_plus > 0
    if not ok.any():
        return out
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = 1.0 - (mean_var[None, :] - acov.mean(axis=0)) / var_plus[None, :]   # (n, d)
    npair = n // 2
    pairs = rho[: 2 * npair].reshape(npair, 2, d).sum(axis=1)                    # (npair, d)
    # initial positive sequence: keep pairs before the first negative one
    positive = np.cumprod(pairs >= 0, axis=0).astype(bool)
    # initial monotone sequence
    mono = np.minimum.accumulate(np.where(positive, pairs, np.inf), axis=0)
    mono = np.where(positive, mono, 0.0)
    tau = -1.0 + 2.0 * mono.sum(axis=0)
    N = m * n
    tau = np.maximum(tau, 1.0 / np.log10(N))
    out[ok] = N / tau[ok]
    return out


def ess_bulk(draws):
    """Rank-normalized split-chain bulk ESS. Constant series give 0."""
    x, scalar = _as3d(draws)
    _check(x)
    xs = split_chains(x)
    degenerate = xs.reshape(-1, xs.shape[2]).var(axis=0) == 0
    e = ess(z_scale(xs))
    e = np.where(degenerate, 0.0, e)
    return float(e[0]) if scalar else e
