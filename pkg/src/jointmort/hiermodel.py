"""Principal-component Poisson model for subpopulation mortality across small areas.

Deaths ``y[a,s,c,t] ~ Poisson(P[a,s,c,t] * lambda[a,s,c,t])`` with

    log lambda[a,s,c,t] = sum_i beta[i,s,c,t] * Y[i,a] + gamma[a,s,c,t]

County coefficients ``beta[i,:,c,t] = mu_beta[i,:,t] + omega[i,:,c,t]`` where
``omega[i,:,c,t] ~ N(0, sigma_beta[i,t]^2 R_beta[i,t])``; ``gamma[a,:,c,t] ~
N(0, sigma_a[a]^2 R_gamma[a,t])``; the subpopulation means follow a
second-order random walk in time with scale ``sigma_mu[i]``.

Sampling happens in an unconstrained space. ``gamma`` is non-centered
(standard-normal innovations scaled by ``sigma_a * L``), scales are
log-transformed and correlation factors use :mod:`jointmort.corrchol`.
``beta`` has three equivalent parameterizations (``ModelSpec.beta_param``):

* ``noncentered``: innovations ``z_omega`` with ``omega = sigma_beta * L @ z``.
* ``anchored`` (default): the same innovations, but the second block holds the
  area average ``nu_beta = mu_beta + sigma_beta * L @ mean_c(z)`` instead of
  ``mu_beta``. The map has unit Jacobian. It removes the stiff trade-off
  between the mean and every innovation when the data pin ``beta`` down.
* ``centered``: ``beta`` itself, with ``mu_beta`` as the second block.

Flat parameter vector layout (float64, C order within each block)::

    z_omega        P x S x C x T   (``beta`` when centered)
    mu_beta        P x S x T       (``nu_beta`` when anchored)
    log_sigma_beta P x T
    log_sigma_mu   P
    chol_beta      P x T' x K      (joint variant only)
    z_gamma        A x S x C x T
    log_sigma_a    A
    chol_gamma     A x T' x K      (joint variant only)

with ``K = S(S-1)/2`` and ``T' = 1`` when correlations are shared over time,
else ``T``. Checkpoints store the vector as little-endian float64.

The log density keeps every normalizing constant except ``log y!`` in the
Poisson term and the LKJ normalizer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Literal

import numpy as np

from . import corrchol
from .mortdata import MortalityDataset
from .pcbasis import PCBasis

SPEC_SCHEMA_VERSION = 1
BETA_PARAMS = ("anchored", "noncentered", "centered")
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
_LOG2 = math.log(2.0)


@dataclass(frozen=True)
class Hyper:
    sigma_beta_scale: float = 1.0
    sigma_mu_meanlog: float = -1.5
    sigma_mu_sdlog: float = 0.5
    sigma_gamma_scale: float = 0.25
    lkj_eta: float = 1.0
    rw2_init_sd: float = 5.0

    def __post_init__(self):
        for f in ("sigma_beta_scale", "sigma_mu_sdlog", "sigma_gamma_scale", "lkj_eta", "rw2_init_sd"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """Model structure: dimensions, age basis (first P rows used), variant and priors."""

    basis: np.ndarray
    S: int
    C: int
    T: int
    P: int | None = None
    variant: Literal["joint", "independent"] = "joint"
    hyper: Hyper = field(default_factory=Hyper)
    share_correlations_over_time: bool = False
    beta_param: Literal["anchored", "noncentered", "centered"] = "anchored"

    def __post_init__(self):
        b = self.basis.components if isinstance(self.basis, PCBasis) else self.basis
        b = np.atleast_2d(np.asarray(b, float))
        P = b.shape[0] if self.P is None else int(self.P)
        if not 1 <= P <= b.shape[0]:
            raise ValueError(f"P = {P} exceeds the {b.shape[0]} basis rows available")
        b = np.array(b[:P])
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)
        object.__setattr__(self, "P", P)
        if self.variant not in ("joint", "independent"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.beta_param not in BETA_PARAMS:
            raise ValueError(f"unknown beta parameterization {self.beta_param!r}")
        if min(self.S, self.C, self.T) < 1:
            raise ValueError("dimensions must be positive")
        if isinstance(self.hyper, dict):
            object.__setattr__(self, "hyper", Hyper(**self.hyper))

    @property
    def A(self) -> int:
        return self.basis.shape[1]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.A, self.S, self.C, self.T

    @property
    def correlated(self) -> bool:
        return self.variant == "joint"

    @property
    def T_corr(self) -> int:
        return 1 if self.share_correlations_over_time else self.T

    @property
    def layout(self) -> "Layout":
        return Layout.for_spec(self)

    def with_variant(self, variant: str) -> "ModelSpec":
        return replace(self, variant=variant)

    def to_dict(self) -> dict:
        return {
            "schema_version": SPEC_SCHEMA_VERSION,
            "P": self.P, "A": self.A, "S": self.S, "C": self.C, "T": self.T,
            "variant": self.variant,
            "share_correlations_over_time": self.share_correlations_over_time,
            "beta_param": self.beta_param,
            "hyper": asdict(self.hyper),
            "basis": self.basis.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        if d.get("schema_version") != SPEC_SCHEMA_VERSION:
            raise ValueError(f"unsupported model spec schema {d.get('schema_version')!r}")
        spec = cls(np.array(d["basis"], float), d["S"], d["C"], d["T"], d["P"], d["variant"],
                   Hyper(**d["hyper"]), d["share_correlations_over_time"], d.get("beta_param", "anchored"))
        if spec.A != d["A"]:
            raise ValueError("basis width does not match A")
        return spec

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def for_data(cls, basis, data: MortalityDataset, P: int | None = None, **kw) -> "ModelSpec":
        A, S, C, T = data.shape
        spec = cls(basis, S, C, T, P, **kw)
        if spec.A != A:
            raise ValueError(f"basis has {spec.A} ages but data has {A}")
        return spec


@dataclass(frozen=True)
class Layout:
    """Names, shapes and offsets of the blocks in the flat parameter vector."""

    blocks: tuple[tuple[str, tuple[int, ...]], ...]

    @classmethod
    def for_spec(cls, spec: ModelSpec) -> "Layout":
        P, A, S, C, T, K, Tc = spec.P, spec.A, spec.S, spec.C, spec.T, corrchol.n_entries(spec.S), spec.T_corr
        centered = spec.beta_param == "centered"
        mean_name = "nu_beta" if spec.beta_param == "anchored" else "mu_beta"
        blocks = [("beta" if centered else "z_omega", (P, S, C, T)), (mean_name, (P, S, T)),
                  ("log_sigma_beta", (P, T)), ("log_sigma_mu", (P,))]
        if spec.correlated:
            blocks.append(("chol_beta", (P, Tc, K)))
        blocks += [("z_gamma", (A, S, C, T)), ("log_sigma_a", (A,))]
        if spec.correlated:
            blocks.append(("chol_gamma", (A, Tc, K)))
        return cls(tuple(blocks))

    @property
    def size(self) -> int:
        return sum(math.prod(shape) for _, shape in self.blocks)

    def slices(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        out, start = {}, 0
        for name, shape in self.blocks:
            n = math.prod(shape)
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    def unpack(self, v: np.ndarray) -> dict[str, np.ndarray]:
        v = np.asarray(v, float)
        if v.shape != (self.size,):
            raise ValueError(f"parameter vector has length {v.shape}, expected {self.size}")
        return {name: v[sl].reshape(shape) for name, (sl, shape) in self.slices().items()}

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        v = np.empty(self.size)
        for name, (sl, shape) in self.slices().items():
            v[sl] = np.broadcast_to(parts.get(name, 0.0), shape).ravel()
        return v

    def names(self) -> list[str]:
        out = []
        for name, shape in self.blocks:
            out += [f"{name}[{','.join(map(str, idx))}]" for idx in np.ndindex(*shape)]
        return out


def to_bytes(v: np.ndarray) -> bytes:
    return np.asarray(v, dtype="<f8").tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    return np.frombuffer(buf, dtype="<f8").astype(float)


@dataclass
class ConstrainedParams:
    beta: np.ndarray          # P x S x C x T
    mu_beta: np.ndarray       # P x S x T
    sigma_beta: np.ndarray    # P x T
    sigma_mu: np.ndarray      # P
    L_beta: np.ndarray        # P x T x S x S
    gamma: np.ndarray         # A x S x C x T
    sigma_a: np.ndarray       # A
    L_gamma: np.ndarray       # A x T x S x S
    log_rates: np.ndarray     # A x S x C x T

    @property
    def R_beta(self) -> np.ndarray:
        return corrchol.corr_from_chol(self.L_beta)

    @property
    def R_gamma(self) -> np.ndarray:
        return corrchol.corr_from_chol(self.L_gamma)


# -- scalar prior pieces on the log scale, including the exp-transform Jacobian --

def half_normal_lp_log(u, scale: float):
    """Half-normal(scale) log density of ``sigma = exp(u)``, expressed in ``u``; returns ``(lp, dlp/du)``."""
    sig2 = np.exp(2.0 * np.asarray(u, float)) / scale ** 2
    lp = _LOG2 - math.log(scale) - _HALF_LOG_2PI - 0.5 * sig2 + u
    return lp, 1.0 - sig2


def lognormal_lp_log(u, meanlog: float, sdlog: float):
    """Log-normal log density of ``sigma = exp(u)``, expressed in ``u``; returns ``(lp, dlp/du)``."""
    r = (np.asarray(u, float) - meanlog) / sdlog
    return -math.log(sdlog) - _HALF_LOG_2PI - 0.5 * r ** 2, -r / sdlog


class HierModel:
    """Log posterior and gradient for one (spec, data) pair.

    Instances are immutable after construction and safe to share across chains.
    """

    def __init__(self, spec: ModelSpec, data: MortalityDataset):
        if data.shape != spec.dims:
            raise ValueError(f"data dimensions {data.shape} do not match spec {spec.dims}")
        self.spec = spec
        self.data = data
        self.layout = spec.layout
        self._slices = self.layout.slices()
        self.dim = self.layout.size
        # internal working order is (., T, S, C) so correlation factors act by matmul
        obs = data.likelihood_mask.transpose(0, 3, 1, 2)
        y = data.deaths.transpose(0, 3, 1, 2).astype(float)
        pop = data.population.transpose(0, 3, 1, 2)
        self._obs_idx = np.flatnonzero(obs)
        self._y_obs = y.ravel()[self._obs_idx]
        self._pop_obs = pop.ravel()[self._obs_idx]
        self._lik_const = float(np.sum(self._y_obs * np.log(self._pop_obs)))
        self._Y = np.asarray(spec.basis)
        self._K = corrchol.n_entries(spec.S)
        self._n_chol_beta = spec.P * spec.T_corr
        self._mean_block = "nu_beta" if spec.beta_param == "anchored" else "mu_beta"

    def _factors(self, parts, with_density: bool):
        """Cholesky factors for both families; ``lp`` holds Jacobian (+ LKJ when ``with_density``)."""
        spec = self.spec
        P, A, S = spec.P, spec.A, spec.S
        if not spec.correlated:
            return (np.broadcast_to(np.eye(S), (P, 1, S, S)), np.broadcast_to(np.eye(S), (A, 1, S, S)),
                    0.0, None)
        nb, ng = self._n_chol_beta, spec.A * spec.T_corr
        y = np.concatenate([parts["chol_beta"].reshape(nb, self._K), parts["chol_gamma"].reshape(ng, self._K)])
        L, lp, cache = corrchol.forward(y, S, spec.hyper.lkj_eta if with_density else None)
        Lb = L[:nb].reshape(P, spec.T_corr, S, S)
        Lg = L[nb:].reshape(A, spec.T_corr, S, S)
        return Lb, Lg, float(lp.sum()), (L, cache)

    def _state(self, parts, Lb, Lg):
        spec = self.spec
        P = spec.P
        sigma_beta = np.exp(parts["log_sigma_beta"])                     # P,T
        sigma_a = np.exp(parts["log_sigma_a"])                           # A
        sb = sigma_beta[:, :, None, None]
        st = dict(sigma_beta=sigma_beta, sigma_a=sigma_a)
        if spec.beta_param == "centered":
            mu_t = parts["mu_beta"].transpose(0, 2, 1)[..., None]        # P,T,S,1
            beta = parts["beta"].transpose(0, 3, 1, 2)                   # P,T,S,C
            st["omega"] = beta - mu_t
        elif spec.beta_param == "anchored":
            # the sampled mean is the area average of beta; mu_beta is recovered from it
            zw = parts["z_omega"].transpose(0, 3, 1, 2)
            zbar = zw.mean(axis=-1, keepdims=True)
            zc = zw - zbar
            Lzc = Lb @ zc
            Lzbar = Lb @ zbar
            nu_t = parts["nu_beta"].transpose(0, 2, 1)[..., None]
            mu_t = nu_t - sb * Lzbar
            beta = nu_t + sb * Lzc
            st.update(zw=zw, zbar=zbar, zc=zc, Lzc=Lzc, Lzbar=Lzbar)
        else:
            zw = parts["z_omega"].transpose(0, 3, 1, 2)
            Lzw = Lb @ zw
            mu_t = parts["mu_beta"].transpose(0, 2, 1)[..., None]
            beta = mu_t + sb * Lzw
            st.update(zw=zw, Lzw=Lzw)
        zg = parts["z_gamma"].transpose(0, 3, 1, 2)                      # A,T,S,C
        Lzg = Lg @ zg
        gamma = sigma_a[:, None, None, None] * Lzg
        lr = (self._Y.T @ beta.reshape(P, -1)).reshape(gamma.shape) + gamma
        st.update(zg=zg, Lzg=Lzg, beta=beta, gamma=gamma, lr=lr, mu=mu_t[..., 0].transpose(0, 2, 1))
        return st

    def constrain(self, v: np.ndarray) -> tuple[ConstrainedParams, float]:
        """Constrained parameters and the log-Jacobian of the unconstrained-to-constrained map."""
        spec = self.spec
        P, A, T = spec.P, spec.A, spec.T
        parts = self.layout.unpack(v)
        Lb, Lg, logjac, _ = self._factors(parts, with_density=False)
        logjac += float(parts["log_sigma_beta"].sum() + parts["log_sigma_mu"].sum() + parts["log_sigma_a"].sum())
        st = self._state(parts, Lb, Lg)
        params = ConstrainedParams(
            beta=st["beta"].transpose(0, 2, 3, 1).copy(),
            mu_beta=st["mu"].copy(),
            sigma_beta=st["sigma_beta"],
            sigma_mu=np.exp(parts["log_sigma_mu"]),
            L_beta=np.broadcast_to(Lb, (P, T) + Lb.shape[2:]).copy(),
            gamma=st["gamma"].transpose(0, 2, 3, 1).copy(),
            sigma_a=st["sigma_a"],
            L_gamma=np.broadcast_to(Lg, (A, T) + Lg.shape[2:]).copy(),
            log_rates=st["lr"].transpose(0, 2, 3, 1).copy(),
        )
        return params, logjac

    def log_density(self, v: np.ndarray) -> float:
        return self.log_density_and_grad(v, need_grad=False)[0]

    def log_density_and_grad(self, v: np.ndarray, need_grad: bool = True):
        """Return ``(lp, grad)``; non-finite points give ``(-inf, zeros)`` rather than raising."""
        with np.errstate(all="ignore"):
            try:
                return self._lp_grad(v, need_grad)
            except np.linalg.LinAlgError:
                return -np.inf, np.zeros(self.dim)

    __call__ = log_density_and_grad

    def _lp_grad(self, v, need_grad):
        spec, hy = self.spec, self.spec.hyper
        parts = self.layout.unpack(v)
        P, A, S, C, T = spec.P, spec.A, spec.S, spec.C, spec.T
        Lb, Lg, lp, chol = self._factors(parts, with_density=True)

        st = self._state(parts, Lb, Lg)
        lr_obs = st["lr"].ravel()[self._obs_idx]
        mu_obs = self._pop_obs * np.exp(lr_obs)
        lp += float(self._y_obs @ lr_obs - mu_obs.sum()) + self._lik_const

        sigma_beta, sigma_a = st["sigma_beta"], st["sigma_a"]
        zg = st["zg"]
        lp += -0.5 * float(np.vdot(zg, zg)) - zg.size * _HALF_LOG_2PI
        centered = spec.beta_param == "centered"
        if centered:
            omega = st["omega"]
            W = np.linalg.solve(np.broadcast_to(Lb, (P, T, S, S)), omega)    # P,T,S,C
            quad = (W * W).sum(axis=(2, 3))                                   # P,T
            log_diag = np.log(np.diagonal(Lb, axis1=-2, axis2=-1)).sum(axis=-1)  # P,T'
            lp += float(np.sum(-0.5 * quad / sigma_beta ** 2 - C * S * parts["log_sigma_beta"])
                        - C * T // spec.T_corr * log_diag.sum()) - omega.size * _HALF_LOG_2PI
        else:
            zw = st["zw"]
            lp += -0.5 * float(np.vdot(zw, zw)) - zw.size * _HALF_LOG_2PI

        lp_sb, d_sb = half_normal_lp_log(parts["log_sigma_beta"], hy.sigma_beta_scale)
        lp_sa, d_sa = half_normal_lp_log(parts["log_sigma_a"], hy.sigma_gamma_scale)
        lp_sm, d_sm = lognormal_lp_log(parts["log_sigma_mu"], hy.sigma_mu_meanlog, hy.sigma_mu_sdlog)
        lp += float(lp_sb.sum() + lp_sa.sum() + lp_sm.sum())

        mu = st["mu"]                                                    # P,S,T
        sd0 = hy.rw2_init_sd
        head = mu[..., :2]
        lp += -0.5 * float(np.vdot(head, head)) / sd0 ** 2 - head.size * (math.log(sd0) + _HALF_LOG_2PI)
        sigma_mu = np.exp(parts["log_sigma_mu"])
        resid = mu[..., 2:] - 2.0 * mu[..., 1:-1] + mu[..., :-2]
        n_rw = S * max(T - 2, 0)
        rss = (resid * resid).sum(axis=(1, 2))                           # P
        lp += float(np.sum(-0.5 * rss / sigma_mu ** 2 - n_rw * (parts["log_sigma_mu"] + _HALF_LOG_2PI)))

        if not math.isfinite(lp):
            return -np.inf, np.zeros(self.dim)
        if not need_grad:
            return lp, None

        g = np.empty(self.dim)
        sl = self._slices

        def put(name, arr):
            g[sl[name][0]] = arr.ravel()

        g_lr = np.zeros(st["lr"].size)
        g_lr[self._obs_idx] = self._y_obs - mu_obs
        g_lr = g_lr.reshape(st["lr"].shape)                              # A,T,S,C
        g_beta = (self._Y @ g_lr.reshape(A, -1)).reshape(st["beta"].shape)   # P,T,S,C

        # prior gradient wrt mu_beta (P,S,T)
        g_mp = np.zeros_like(mu)
        g_mp[..., :2] -= head / sd0 ** 2
        if T > 2:
            g_r = -resid / sigma_mu[:, None, None] ** 2
            g_mp[..., 2:] += g_r
            g_mp[..., 1:-1] -= 2.0 * g_r
            g_mp[..., :-2] += g_r
        g_mp_t = g_mp.transpose(0, 2, 1)[..., None]                      # P,T,S,1
        sb = sigma_beta[:, :, None, None]
        Lbt = np.swapaxes(Lb, -1, -2)

        if centered:
            Wt = np.linalg.solve(np.broadcast_to(Lbt, (P, T, S, S)), W)
            inv_s2 = 1.0 / sigma_beta ** 2
            g_omega = Wt * inv_s2[:, :, None, None]
            put("beta", (g_beta - g_omega).transpose(0, 2, 3, 1))
            put("mu_beta", g_mp + g_omega.sum(axis=-1).transpose(0, 2, 1))
            g_log_sb = quad * inv_s2 - C * S
            if spec.correlated:
                gLb = (Wt @ np.swapaxes(W, -1, -2)) * inv_s2[:, :, None, None]
                gLb -= C * np.eye(S) / np.diagonal(Lb, axis1=-2, axis2=-1)[..., None]
        elif spec.beta_param == "anchored":
            zc, zbar = st["zc"], st["zbar"]
            g_sum = g_beta.sum(axis=-1, keepdims=True)                   # P,T,S,1
            put("nu_beta", g_mp + g_sum[..., 0].transpose(0, 2, 1))
            g_z = sb * (Lbt @ (g_beta - (g_sum + g_mp_t) / C)) - zw
            put("z_omega", g_z.transpose(0, 2, 3, 1))
            g_log_sb = ((g_beta * st["Lzc"]).sum(axis=(2, 3)) - (g_mp_t * st["Lzbar"]).sum(axis=(2, 3))) * sigma_beta
            if spec.correlated:
                gLb = sb * (g_beta @ np.swapaxes(zc, -1, -2) - g_mp_t @ np.swapaxes(zbar, -1, -2))
        else:
            put("mu_beta", g_mp + g_beta.sum(axis=-1).transpose(0, 2, 1))
            put("z_omega", (sb * (Lbt @ g_beta) - zw).transpose(0, 2, 3, 1))
            g_log_sb = (g_beta * st["Lzw"]).sum(axis=(2, 3)) * sigma_beta
            if spec.correlated:
                gLb = sb * (g_beta @ np.swapaxes(zw, -1, -2))
        put("log_sigma_beta", g_log_sb + d_sb)
        put("log_sigma_mu", rss / sigma_mu ** 2 - n_rw + d_sm)

        put("z_gamma", (sigma_a[:, None, None, None] * (np.swapaxes(Lg, -1, -2) @ g_lr) - zg).transpose(0, 2, 3, 1))
        put("log_sigma_a", (g_lr * st["Lzg"]).sum(axis=(1, 2, 3)) * sigma_a + d_sa)

        if spec.correlated:
            gLg = sigma_a[:, None, None, None] * (g_lr @ np.swapaxes(zg, -1, -2))
            if spec.share_correlations_over_time:
                gLb = gLb.sum(axis=1, keepdims=True)
                gLg = gLg.sum(axis=1, keepdims=True)
            L_all, cache = chol
            gL = np.concatenate([gLb.reshape(-1, S, S), gLg.reshape(-1, S, S)])
            gy = corrchol.backward(L_all, cache, gL)
            nb = self._n_chol_beta
            put("chol_beta", gy[:nb])
            put("chol_gamma", gy[nb:])
        if not np.all(np.isfinite(g)):
            return -np.inf, np.zeros(self.dim)
        return lp, g

    def log_rates(self, v: np.ndarray) -> np.ndarray:
        """Log mortality rates ``A x S x C x T`` at an unconstrained point."""
        return self.constrain(v)[0].log_rates

    def default_init(self) -> np.ndarray:
        """A starting point near the bulk of the posterior, built from the observed rates.

        Each (subpopulation, area, year) curve gets weighted least-squares
        coefficients on the basis (weights are the death counts, the inverse
        variance of a log rate). Subpopulation means average these over areas,
        the coefficient scales are their spread, and the innovations are solved
        back from them with identity correlations. Overdispersion scales come
        from a moment estimate. Everything else stays at 0.
        """
        spec, d = self.spec, self.data
        P, S, C, T = spec.P, spec.S, spec.C, spec.T
        ok = d.likelihood_mask
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.where(ok, np.log(np.maximum(d.deaths, 0.5) / d.population), 0.0)
        w = np.where(ok, np.maximum(d.deaths, 0.5), 0.0)                 # A,S,C,T
        Y = self._Y                                                      # P,A
        G = np.einsum("pa,qa,ascT->scTpq", Y, Y, w) + 1e-8 * np.eye(P)
        b = np.einsum("pa,ascT->scTp", Y, w * rate)
        fitted = np.einsum("a,ascT->scT", np.ones(len(Y.T)), ok) >= P
        beta = np.zeros((S, C, T, P))
        beta[fitted] = np.linalg.solve(G[fitted], b[fitted][..., None])[..., 0]
        # areas too sparse to fit borrow the mean of the others
        n_fit = fitted.sum(axis=1)                                       # S,T
        mu = np.where(n_fit[..., None] > 0,
                      (beta * fitted[..., None]).sum(axis=1) / np.maximum(n_fit, 1)[..., None], 0.0)
        beta = np.where(fitted[..., None], beta, mu[:, None])
        omega = beta - mu[:, None]                                       # S,C,T,P
        sigma = np.sqrt((omega ** 2).mean(axis=(0, 1)))                  # T,P
        sigma = np.clip(sigma, 0.01, 10.0)
        # overdispersion scale per age from the excess of squared residuals over Poisson noise
        expected = np.where(ok, d.population * np.exp(np.einsum("pa,scTp->ascT", Y, beta)), 0.0)
        big = expected >= 10.0
        with np.errstate(divide="ignore", invalid="ignore"):
            excess = np.where(big, ((d.deaths - expected) ** 2 - expected) / expected ** 2, 0.0)
            var_a = excess.sum(axis=(1, 2, 3)) / np.maximum(big.sum(axis=(1, 2, 3)), 1)
        scale = spec.hyper.sigma_gamma_scale
        sigma_a = np.clip(np.sqrt(np.maximum(var_a, 0.0)), 0.05 * scale, scale)
        v = np.zeros(self.dim)
        sl = self._slices
        v[sl["log_sigma_a"][0]] = np.log(sigma_a)
        # with zero-mean innovations the area average of beta equals mu_beta
        v[sl[self._mean_block][0]] = mu.transpose(2, 0, 1).ravel()
        v[sl["log_sigma_beta"][0]] = np.log(sigma.T).ravel()
        if spec.beta_param == "centered":
            v[sl["beta"][0]] = beta.transpose(3, 0, 1, 2).ravel()
        else:
            v[sl["z_omega"][0]] = (omega / sigma[None, None]).transpose(3, 0, 1, 2).ravel()
        return v

    def fisher_inv_metric(self, v: np.ndarray) -> np.ndarray:
        """Inverse of the diagonal expected information at ``v`` (prior plus Poisson terms).

        Correlation factors are treated as identity and correlation coordinates
        get 1. Used only as the metric for the first stretch of warm-up.
        """
        spec = self.spec
        S, C, T = spec.S, spec.C, spec.T
        params, _ = self.constrain(v)
        m = np.where(self.data.likelihood_mask, self.data.population * np.exp(params.log_rates), 0.0)
        info_beta = np.einsum("pa,ascT->pscT", self._Y ** 2, m)           # P,S,C,T
        info = np.ones(self.dim)
        sl = self._slices
        sb = params.sigma_beta[:, None, None, :]
        if spec.beta_param == "centered":
            info[sl["beta"][0]] = (info_beta + 1.0 / sb ** 2).ravel()
            info_mu = np.broadcast_to(C / params.sigma_beta[:, None, :] ** 2, (spec.P, S, T))
        else:
            info[sl["z_omega"][0]] = (sb ** 2 * info_beta + 1.0).ravel()
            info_mu = info_beta.sum(axis=2)
        rw = np.zeros(T)
        rw[:min(T, 2)] = 1.0 / spec.hyper.rw2_init_sd ** 2
        if T > 2:
            # diagonal of D'D for the second-difference operator
            dd = np.zeros(T)
            for k in range(T - 2):
                dd[k:k + 3] += np.array([1.0, 4.0, 1.0])
            rw = rw + dd / params.sigma_mu[:, None, None] ** 2
        info[sl[self._mean_block][0]] = (info_mu + rw).ravel()
        info[sl["z_gamma"][0]] = (params.sigma_a[:, None, None, None] ** 2 * m + 1.0).ravel()
        # a log scale is pinned roughly like a log sd estimated from the values it governs
        info[sl["log_sigma_beta"][0]] = 2.0 * S * C
        info[sl["log_sigma_mu"][0]] = 2.0 * S * max(T - 2, 1)
        info[sl["log_sigma_a"][0]] = 2.0 * S * C * T
        return 1.0 / info


def _corr_jacobian(y: np.ndarray, S: int) -> np.ndarray:
    return corrchol.forward(y, S, None)[1]


def log_rates_from(basis: np.ndarray, beta: np.ndarray, gamma: np.ndarray | float = 0.0) -> np.ndarray:
    """``log lambda[a,s,c,t] = sum_i beta[i,s,c,t] Y[i,a] + gamma[a,s,c,t]``."""
    basis = np.atleast_2d(np.asarray(basis, float))
    beta = np.asarray(beta, float)
    lr = np.tensordot(basis, beta, axes=(0, 0))
    return lr + gamma


# functional wrappers -----------------------------------------------------------

def constrain(spec: ModelSpec, v: np.ndarray, data: MortalityDataset | None = None):
    return HierModel(spec, data or _dummy_data(spec)).constrain(v)


def log_posterior(spec: ModelSpec, data: MortalityDataset, v: np.ndarray) -> float:
    return HierModel(spec, data).log_density(v)


def log_posterior_grad(spec: ModelSpec, data: MortalityDataset, v: np.ndarray):
    return HierModel(spec, data).log_density_and_grad(v)


def log_rates(spec: ModelSpec, params: ConstrainedParams) -> np.ndarray:
    return log_rates_from(spec.basis, params.beta, params.gamma)


def _dummy_data(spec: ModelSpec) -> MortalityDataset:
    from .mortdata import AgeGrid
    A, S, C, T = spec.dims
    grid = AgeGrid([str(i) for i in range(A)], list(range(A)))
    z = np.zeros(spec.dims)
    return MortalityDataset(grid, [str(i) for i in range(S)], [str(i) for i in range(C)],
                            [str(i) for i in range(T)], z.astype(int), z, z.astype(bool))
