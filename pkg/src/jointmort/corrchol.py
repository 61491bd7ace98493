"""Unconstrained reals <-> Cholesky factors of correlation matrices.

Batched over leading axes. Each S x S factor is built from K = S(S-1)/2
canonical partial correlations ``z = tanh(y)``, taken row by row from the
strict lower triangle::

    L[i, j] = z_ij * sqrt(1 - sum_{k<j} L[i, k]^2),   L[i, i] = sqrt(1 - sum_{k<i} L[i, k]^2)

so every row has unit norm and ``L @ L.T`` has unit diagonal.
"""

from __future__ import annotations

import numpy as np

_LOG4 = np.log(4.0)


def n_entries(S: int) -> int:
    return S * (S - 1) // 2


def tril_pairs(S: int) -> list[tuple[int, int]]:
    """Strict lower-triangle positions in the order unconstrained entries are stored."""
    return [(i, j) for i in range(1, S) for j in range(i)]


def log1m_tanh_sq(y: np.ndarray) -> np.ndarray:
    """``log(1 - tanh(y)^2)`` without cancellation for large ``|y|``."""
    ay = np.abs(y)
    return _LOG4 - 2.0 * ay - 2.0 * np.log1p(np.exp(-2.0 * ay))


def lkj_row_coefs(S: int, eta: float) -> np.ndarray:
    """Coefficients ``c_i`` of ``log L_ii`` in the LKJ(eta) density of a Cholesky factor."""
    i = np.arange(S)
    c = S - i - 1 + 2.0 * eta - 2.0
    c[0] = 0.0
    return c


def forward(y: np.ndarray, S: int, eta: float | None = None):
    """Map unconstrained ``y[..., K]`` to Cholesky factors ``L[..., S, S]``.

    Returns ``(L, extra_lp, cache)`` where ``extra_lp[...]`` is the log-Jacobian
    of the map plus, when ``eta`` is given, the LKJ(eta) log-density of ``L``
    (normalizing constant dropped).
    """
    y = np.asarray(y, float)
    batch = y.shape[:-1]
    L = np.zeros(batch + (S, S))
    L[..., 0, 0] = 1.0
    z = np.tanh(y)
    lp = log1m_tanh_sq(y).sum(axis=-1) if y.shape[-1] else np.zeros(batch)
    # one_minus[i][j] = 1 - sum_{k<j} L[i,k]^2, for j = 0..i
    one_minus = [[None] * (i + 1) for i in range(S)]
    coefs = lkj_row_coefs(S, eta) if eta is not None else None
    k = 0
    for i in range(1, S):
        om = np.ones(batch)
        for j in range(i):
            one_minus[i][j] = om
            if j > 0:
                lp = lp + 0.5 * np.log(om)
            L[..., i, j] = z[..., k] * np.sqrt(om)
            om = om - L[..., i, j] ** 2
            k += 1
        om = np.maximum(om, 0.0)
        one_minus[i][i] = om
        L[..., i, i] = np.sqrt(om)
        if coefs is not None and coefs[i] != 0.0:
            lp = lp + coefs[i] * 0.5 * np.log(om)
    return L, lp, (z, one_minus, coefs)


def backward(L: np.ndarray, cache, gL: np.ndarray | None) -> np.ndarray:
    """Gradient wrt ``y`` of ``<gL, L> + extra_lp`` from :func:`forward`.

    Only the lower triangle of ``gL`` is read; ``gL=None`` means zero.
    """
    z, one_minus, coefs = cache
    S = L.shape[-1]
    batch = L.shape[:-2]
    gz = np.zeros(z.shape)
    pairs = tril_pairs(S)
    kidx = {p: n for n, p in enumerate(pairs)}
    for i in range(1, S):
        om_i = one_minus[i][i]
        g_s = np.zeros(batch)
        if gL is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                g_s = g_s - 0.5 * gL[..., i, i] / L[..., i, i]
        if coefs is not None and coefs[i] != 0.0:
            g_s = g_s - 0.5 * coefs[i] / om_i
        for j in range(i - 1, -1, -1):
            k = kidx[(i, j)]
            om = one_minus[i][j]
            g_lij = 2.0 * L[..., i, j] * g_s
            if gL is not None:
                g_lij = g_lij + gL[..., i, j]
            root = np.sqrt(om)
            gz[..., k] = g_lij * root
            if j > 0:
                g_s = g_s - 0.5 * g_lij * z[..., k] / root - 0.5 / om
    return gz * (1.0 - z ** 2) - 2.0 * z


def corr_from_chol(L: np.ndarray) -> np.ndarray:
    return L @ np.swapaxes(L, -1, -2)


def inverse(R: np.ndarray) -> np.ndarray:
    """Unconstrained entries of a correlation matrix (inverse of :func:`forward`)."""
    L = np.linalg.cholesky(np.asarray(R, float))
    S = L.shape[-1]
    out = np.zeros(L.shape[:-2] + (n_entries(S),))
    for k, (i, j) in enumerate(tril_pairs(S)):
        om = 1.0 - np.sum(L[..., i, :j] ** 2, axis=-1)
        out[..., k] = np.arctanh(L[..., i, j] / np.sqrt(om))
    return out
