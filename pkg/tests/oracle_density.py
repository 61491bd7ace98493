"""Straight-line reference log posterior, written from the model formulas without the package's code paths.

The density is evaluated on constrained parameters with scipy distributions; the
change of variables uses the log-determinant of a numerically differentiated
map from the flat unconstrained vector to the constrained coordinates.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import stats
from scipy.special import gammaln


def cpc_cholesky(y, S):
    """Cholesky factor from canonical partial correlations, row by row, plain loops."""
    L = np.zeros((S, S))
    L[0, 0] = 1.0
    k = 0
    for i in range(1, S):
        acc = 0.0
        for j in range(i):
            z = math.tanh(y[k])
            k += 1
            L[i, j] = z * math.sqrt(1.0 - acc)
            acc += L[i, j] ** 2
        L[i, i] = math.sqrt(1.0 - acc)
    return L


def _blocks(spec):
    P, A, S, C, T = spec.P, spec.A, spec.S, spec.C, spec.T
    K, Tc = S * (S - 1) // 2, (1 if spec.share_correlations_over_time else T)
    out = [("first", (P, S, C, T)), ("second", (P, S, T)), ("lsb", (P, T)), ("lsm", (P,))]
    if spec.variant == "joint":
        out.append(("yb", (P, Tc, K)))
    out += [("zg", (A, S, C, T)), ("lsa", (A,))]
    if spec.variant == "joint":
        out.append(("yg", (A, Tc, K)))
    return out


def unpack(spec, v):
    parts, k = {}, 0
    for name, shape in _blocks(spec):
        n = int(np.prod(shape))
        parts[name] = np.asarray(v[k:k + n]).reshape(shape)
        k += n
    assert k == len(v)
    return parts


def constrained(spec, v):
    """All constrained quantities as a dict of arrays (loops over every index)."""
    P, A, S, C, T = spec.P, spec.A, spec.S, spec.C, spec.T
    p = unpack(spec, v)
    joint = spec.variant == "joint"
    tc = (lambda t: 0) if spec.share_correlations_over_time else (lambda t: t)
    Lb = {(i, t): cpc_cholesky(p["yb"][i, tc(t)], S) if joint else np.eye(S) for i in range(P) for t in range(T)}
    Lg = {(a, t): cpc_cholesky(p["yg"][a, tc(t)], S) if joint else np.eye(S) for a in range(A) for t in range(T)}
    sb, sm, sa = np.exp(p["lsb"]), np.exp(p["lsm"]), np.exp(p["lsa"])
    beta = np.zeros((P, S, C, T))
    mu = np.zeros((P, S, T))
    for i in range(P):
        for t in range(T):
            L = Lb[(i, t)]
            if spec.beta_param == "centered":
                mu[i, :, t] = p["second"][i, :, t]
                beta[i, :, :, t] = p["first"][i, :, :, t]
            elif spec.beta_param == "noncentered":
                mu[i, :, t] = p["second"][i, :, t]
                for c in range(C):
                    beta[i, :, c, t] = mu[i, :, t] + sb[i, t] * L @ p["first"][i, :, c, t]
            else:
                zbar = p["first"][i, :, :, t].mean(axis=1)
                mu[i, :, t] = p["second"][i, :, t] - sb[i, t] * L @ zbar
                for c in range(C):
                    beta[i, :, c, t] = p["second"][i, :, t] + sb[i, t] * L @ (p["first"][i, :, c, t] - zbar)
    gamma = np.zeros((A, S, C, T))
    for a in range(A):
        for t in range(T):
            for c in range(C):
                gamma[a, :, c, t] = sa[a] * Lg[(a, t)] @ p["zg"][a, :, c, t]
    il = np.tril_indices(S, -1)
    Tc = 1 if spec.share_correlations_over_time else T
    Rb = np.array([[Lb[(i, t)] @ Lb[(i, t)].T for t in range(T)] for i in range(P)])
    Rg = np.array([[Lg[(a, t)] @ Lg[(a, t)].T for t in range(T)] for a in range(A)])
    free = (lambda R: R[:, :Tc][..., il[0], il[1]]) if joint else (lambda R: np.zeros(0))
    return dict(beta=beta, mu=mu, sb=sb, sm=sm, sa=sa, gamma=gamma, Rb=Rb, Rg=Rg,
                rb_free=free(Rb), rg_free=free(Rg),
                zg=p["zg"])


def flat_constrained(spec, v):
    """Coordinates of the constrained space, one per unconstrained coordinate.

    ``gamma`` is represented by its innovations ``z_gamma`` scaled per cell, i.e.
    gamma itself; correlations by their free lower-triangle entries.
    """
    c = constrained(spec, v)
    return np.concatenate([c["beta"].ravel(), c["mu"].ravel(), c["sb"].ravel(), c["sm"].ravel(),
                           np.ravel(c["rb_free"]), c["gamma"].ravel(), c["sa"].ravel(), np.ravel(c["rg_free"])])


def log_jacobian(spec, v, h=1e-4):
    D = len(v)
    J = np.empty((D, D))
    e = np.zeros(D)
    for k in range(D):
        e[k] = h
        J[:, k] = (8 * (flat_constrained(spec, v + e) - flat_constrained(spec, v - e))
                   - (flat_constrained(spec, v + 2 * e) - flat_constrained(spec, v - 2 * e))) / (12 * h)
        e[k] = 0.0
    sign, logdet = np.linalg.slogdet(J)
    assert sign != 0
    return logdet


def log_density_constrained(spec, data, c):
    """Log posterior density of the constrained parameters (LKJ normalizer and log y! dropped)."""
    hy = spec.hyper
    P, A, S, C, T = spec.P, spec.A, spec.S, spec.C, spec.T
    lp = 0.0
    basis = np.asarray(spec.basis)
    obs = data.mask & (data.population > 0)
    for a in range(A):
        for s in range(S):
            for cc in range(C):
                for t in range(T):
                    if not obs[a, s, cc, t]:
                        continue
                    lr = sum(c["beta"][i, s, cc, t] * basis[i, a] for i in range(P)) + c["gamma"][a, s, cc, t]
                    y = data.deaths[a, s, cc, t]
                    lp += stats.poisson.logpmf(y, data.population[a, s, cc, t] * math.exp(lr)) + gammaln(y + 1)
    for i in range(P):
        for t in range(T):
            cov = c["sb"][i, t] ** 2 * c["Rb"][i, t]
            for cc in range(C):
                lp += stats.multivariate_normal.logpdf(c["beta"][i, :, cc, t] - c["mu"][i, :, t], np.zeros(S), cov)
    for a in range(A):
        for t in range(T):
            cov = c["sa"][a] ** 2 * c["Rg"][a, t]
            for cc in range(C):
                lp += stats.multivariate_normal.logpdf(c["gamma"][a, :, cc, t], np.zeros(S), cov)
    for i in range(P):
        for s in range(S):
            m = c["mu"][i, s]
            lp += stats.norm.logpdf(m[0], 0, hy.rw2_init_sd)
            if T > 1:
                lp += stats.norm.logpdf(m[1], 0, hy.rw2_init_sd)
            for t in range(2, T):
                lp += stats.norm.logpdf(m[t], 2 * m[t - 1] - m[t - 2], c["sm"][i])
    lp += stats.halfnorm.logpdf(c["sb"], scale=hy.sigma_beta_scale).sum()
    lp += stats.lognorm.logpdf(c["sm"], s=hy.sigma_mu_sdlog, scale=math.exp(hy.sigma_mu_meanlog)).sum()
    lp += stats.halfnorm.logpdf(c["sa"], scale=hy.sigma_gamma_scale).sum()
    if spec.variant == "joint":
        Tc = 1 if spec.share_correlations_over_time else T
        for R in list(c["Rb"][:, :Tc].reshape(-1, S, S)) + list(c["Rg"][:, :Tc].reshape(-1, S, S)):
            lp += (hy.lkj_eta - 1.0) * np.linalg.slogdet(R)[1]
    return float(lp)


def reference_log_posterior(spec, data, v) -> float:
    return log_density_constrained(spec, data, constrained(spec, v)) + log_jacobian(spec, v)
