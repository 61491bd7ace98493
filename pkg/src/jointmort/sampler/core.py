"""Running chains, collecting draws, diagnostics and posterior summaries."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapt import DualAveraging, WelfordVariance, metric_windows
from .diagnostics import ess_bulk, split_rhat
from .nuts import NUTS, State, find_reasonable_step_size

log = logging.getLogger(__name__)

STAT_FIELDS = ("accept_stat", "treedepth", "n_leapfrog", "divergent", "energy", "lp")


class SamplerError(RuntimeError):
    pass


class InitializationError(SamplerError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 500
    samples: int = 2500
    seed: int = 0
    target_accept: float = 0.9
    max_treedepth: int = 10
    init_jitter: float = 0.5

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.warmup < 100:
            raise ValueError("warmup must be >= 100")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_treedepth < 1:
            raise ValueError("max_treedepth must be >= 1")
        if self.init_jitter < 0:
            raise ValueError("init_jitter must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChainResult:
    draws: np.ndarray            # samples x dim
    stats: dict[str, np.ndarray]
    step_size: float
    inv_metric: np.ndarray
    warmup_stats: dict[str, np.ndarray]
    seconds: float


def chain_seeds(seed: int, chains: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(chains)


def _initialize(target, dim: int, init, jitter: float, rng: np.random.Generator) -> State:
    base = np.zeros(dim) if init is None else np.asarray(init, float)
    for _ in range(100):
        q = base + rng.uniform(-jitter, jitter, dim)
        lp, g = target(q)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return State(q, lp, g)
    raise InitializationError("log density is not finite at any of 100 initial points; "
                              "check data integrity or supply a better initial vector")


def run_chain(target, dim: int, cfg: SamplerConfig, seed_seq: np.random.SeedSequence,
              init=None, chain_id: int = 0, progress: bool = False,
              inv_metric0: np.ndarray | None = None) -> ChainResult:
    """Warm up and sample one chain of multinomial NUTS.

    ``inv_metric0`` replaces the identity as the metric used before the first
    adaptation window closes.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed_seq)
    state = _initialize(target, dim, init, cfg.init_jitter, rng)
    inv_metric = np.ones(dim) if inv_metric0 is None else np.asarray(inv_metric0, float).copy()
    step = find_reasonable_step_size(target, state, inv_metric, 1.0, rng)
    da = DualAveraging(step, cfg.target_accept)
    init_buf, term_buf, windows = metric_windows(cfg.warmup)
    window_ends = {end: start for start, end in windows}
    in_window = (windows[0][0], windows[-1][1]) if windows else (0, 0)
    welford = WelfordVariance(dim)
    kernel = NUTS(target, inv_metric, step, cfg.max_treedepth)

    wstats = {k: np.zeros(cfg.warmup) for k in STAT_FIELDS}
    for it in range(cfg.warmup):
        kernel.step_size = step
        state, st = kernel.transition(state, rng)
        _record(wstats, it, st, state.lp)
        step = da.update(st.accept_stat)
        if in_window[0] <= it < in_window[1]:
            welford.add(state.q)
        if it + 1 in window_ends:
            inv_metric = welford.regularized()
            welford = WelfordVariance(dim)
            kernel = NUTS(target, inv_metric, step, cfg.max_treedepth)
            step = find_reasonable_step_size(target, state, inv_metric, step, rng)
            da.restart(step)
        if progress and (it + 1) % 50 == 0:
            log.info("chain %d warmup %d/%d step %.3g depth %d", chain_id, it + 1, cfg.warmup, step,
                     st.treedepth)
    if wstats["divergent"].all():
        raise SamplerError("every warm-up transition diverged; the posterior geometry is too "
                           "difficult at this scale (try a higher target_accept or check the data)")
    step = da.final_step_size
    kernel = NUTS(target, inv_metric, step, cfg.max_treedepth)

    draws = np.empty((cfg.samples, dim))
    stats = {k: np.zeros(cfg.samples) for k in STAT_FIELDS}
    for it in range(cfg.samples):
        state, st = kernel.transition(state, rng)
        draws[it] = state.q
        _record(stats, it, st, state.lp)
        if progress and (it + 1) % 100 == 0:
            log.info("chain %d sample %d/%d", chain_id, it + 1, cfg.samples)
    return ChainResult(draws, stats, step, inv_metric, wstats, time.perf_counter() - t_start)


def _record(stats, it, st, lp) -> None:
    stats["accept_stat"][it] = st.accept_stat
    stats["treedepth"][it] = st.treedepth
    stats["n_leapfrog"][it] = st.n_leapfrog
    stats["divergent"][it] = st.divergent
    stats["energy"][it] = st.energy
    stats["lp"][it] = lp


def _run_chain_star(args):
    return run_chain(*args)


@dataclass
class Diagnostics:
    names: list[str]
    rhat: np.ndarray
    rhat_rank: np.ndarray
    ess: np.ndarray
    divergences: int
    n_transitions: int
    energy: np.ndarray           # chains x samples

    @property
    def max_rhat(self) -> float:
        return float(np.max(np.maximum(self.rhat, self.rhat_rank)))

    @property
    def divergence_rate(self) -> float:
        return self.divergences / self.n_transitions

    def warnings(self, rhat_limit: float = 1.01, divergence_limit: float = 0.005) -> list[str]:
        out = []
        bad = np.flatnonzero(np.maximum(self.rhat, self.rhat_rank) > rhat_limit)
        if len(bad):
            out.append(f"{len(bad)} parameters have R-hat > {rhat_limit} (max {self.max_rhat:.4f})")
        if self.divergence_rate > divergence_limit:
            out.append(f"{self.divergences} divergent transitions ({100 * self.divergence_rate:.2f}%)")
        return out

    def summary(self) -> dict:
        return {"divergences": self.divergences, "transitions": self.n_transitions,
                "max_rhat": self.max_rhat, "min_ess": float(np.min(self.ess)) if len(self.ess) else None}


@dataclass
class PosteriorSamples:
    """Draws of the unconstrained vector per chain, plus per-draw sampler statistics."""

    draws: np.ndarray                     # chains x samples x dim
    stats: dict[str, np.ndarray]          # each chains x samples
    step_sizes: np.ndarray
    inv_metrics: np.ndarray
    names: list[str] | None = None
    model: object = None
    seconds: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_samples(self) -> int:
        return self.draws.shape[1]

    def pooled(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    def constrained(self, family: str) -> np.ndarray:
        """Per-draw values of a constrained family, shape ``(chains, samples, *family_shape)``."""
        if family not in self._cache:
            if self.model is None:
                raise ValueError("no model attached; constrained quantities unavailable")
            pooled = self.pooled()
            first, _ = self.model.constrain(pooled[0])
            probe = _family(first, family)
            out = np.empty((len(pooled),) + probe.shape)
            out[0] = probe
            for k in range(1, len(pooled)):
                out[k] = _family(self.model.constrain(pooled[k])[0], family)
            self._cache[family] = out.reshape(self.draws.shape[:2] + probe.shape)
        return self._cache[family]


_FAMILIES = {
    "log_rate": "log_rates", "mu_beta": "mu_beta", "beta": "beta", "gamma": "gamma",
    "sigma_beta": "sigma_beta", "sigma_mu": "sigma_mu", "sigma_a": "sigma_a",
    "R_beta": "R_beta", "R_gamma": "R_gamma",
}


def _family(params, family: str) -> np.ndarray:
    if family not in _FAMILIES:
        raise ValueError(f"unknown quantity family {family!r}; expected one of {sorted(_FAMILIES)}")
    return np.asarray(getattr(params, _FAMILIES[family]))


def parse_quantity(name: str) -> tuple[str, tuple[int, ...]]:
    """Split ``'mu_beta[0,1,3]'`` into ``('mu_beta', (0, 1, 3))``."""
    name = name.strip()
    if "[" not in name:
        return name, ()
    fam, rest = name.split("[", 1)
    if not rest.endswith("]"):
        raise ValueError(f"malformed quantity {name!r}")
    idx = tuple(int(x) for x in rest[:-1].split(",") if x.strip())
    return fam, idx


def summarize(s: PosteriorSamples, quantity: str, probs=(0.025, 0.975)) -> dict[str, float]:
    """Pooled-chain empirical quantiles and median of one named quantity.

    Quantities are ``log_rate[a,s,c,t]``, ``mu_beta[i,s,t]``, ``R_beta[i,t,r,q]``,
    ``R_gamma[a,t,r,q]``, ``sigma_beta[i,t]``, ``sigma_mu[i]``, ``sigma_a[a]``,
    ``beta[i,s,c,t]`` or ``gamma[a,s,c,t]``.
    """
    fam, idx = parse_quantity(quantity)
    if fam.startswith("R_") and s.model is not None and not s.model.spec.correlated:
        raise ValueError(f"{quantity}: the independent variant has no correlation parameters")
    vals = s.constrained(fam)
    x = vals[(slice(None), slice(None)) + idx].reshape(-1)
    if x.ndim != 1 or len(x) != s.n_chains * s.n_samples:
        raise ValueError(f"{quantity} does not name a scalar")
    return quantile_row(x, probs)


def quantile_row(x: np.ndarray, probs) -> dict[str, float]:
    probs = sorted(set(float(p) for p in probs))
    qs = np.quantile(x, probs + [0.5])
    row = {f"q{p:g}": float(q) for p, q in zip(probs, qs[:-1])}
    row["median"] = float(qs[-1])
    return row


def compute_diagnostics(s: PosteriorSamples) -> Diagnostics:
    names = s.names or [f"v[{i}]" for i in range(s.draws.shape[-1])]
    x = s.draws
    if s.n_chains * (s.n_samples // 2) >= 2 and s.n_samples >= 4:
        rhat = split_rhat(x)
        rhat_rank = split_rhat(x, rank_normalized=True)
        ess = ess_bulk(x)
    else:
        rhat = rhat_rank = ess = np.full(x.shape[-1], np.nan)
    div = int(s.stats["divergent"].sum())
    return Diagnostics(list(names), rhat, rhat_rank, ess, div, s.n_chains * s.n_samples, s.stats["energy"])


def sample_target(target, dim: int, cfg: SamplerConfig, init=None, names=None, model=None,
                  threads: int = 1, progress: bool = False, inv_metric0=None) -> tuple[PosteriorSamples, Diagnostics]:
    """Run ``cfg.chains`` chains on a log-density ``target(q) -> (lp, grad)``.

    Chains get independent streams spawned from ``cfg.seed``, so results do not
    depend on ``threads``.
    """
    t0 = time.perf_counter()
    seeds = chain_seeds(cfg.seed, cfg.chains)
    jobs = [(target, dim, cfg, seeds[k], init, k, progress, inv_metric0) for k in range(cfg.chains)]
    if threads > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(threads, cfg.chains)) as ex:
            results = list(ex.map(_run_chain_star, jobs))
    else:
        results = [_run_chain_star(j) for j in jobs]
    draws = np.stack([r.draws for r in results])
    stats = {k: np.stack([r.stats[k] for r in results]) for k in STAT_FIELDS}
    samples = PosteriorSamples(draws, stats, np.array([r.step_size for r in results]),
                               np.stack([r.inv_metric for r in results]), names, model,
                               time.perf_counter() - t0)
    return samples, compute_diagnostics(samples)


def sample(spec, data, cfg: SamplerConfig, init="data", threads: int = 1, progress: bool = False):
    """Fit the hierarchical model to ``data`` by NUTS.

    ``init='data'`` centres the jitter on a least-squares fit to the observed
    rates and starts warm-up with a Fisher-information metric; ``init=None``
    centres it on zero with an identity metric; an array is used as given.
    """
    from ..hiermodel import HierModel
    model = HierModel(spec, data)
    if isinstance(init, str):
        if init != "data":
            raise ValueError(f"unknown init {init!r}")
        init = model.default_init()
        metric0 = model.fisher_inv_metric(init)
    else:
        metric0 = None
    return sample_target(model, model.dim, cfg, init, model.layout.names(), model, threads, progress,
                         metric0)
