"""Coverage, holdout predictive checks and the simulation / variant-comparison protocols."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .hiermodel import ModelSpec
from .mortdata import CellIndex, MortalityDataset, holdout_split
from .sampler import PosteriorSamples, SamplerConfig, sample
from .simgen import SimConfig, SimTruth, simulate

LEVELS = (0.80, 0.90, 0.95)
PREDICTIVE_PROBS = (0.025, 0.05, 0.1, 0.5, 0.9, 0.95, 0.975)


def interval_coverage(truths, lowers, uppers) -> float:
    """Fraction of ``i`` with ``lowers[i] <= truths[i] <= uppers[i]``."""
    truths, lowers, uppers = (np.asarray(x, float).ravel() for x in (truths, lowers, uppers))
    if not (len(truths) == len(lowers) == len(uppers)):
        raise ValueError("truths, lowers and uppers must have equal lengths")
    if len(truths) == 0:
        raise ValueError("coverage of an empty set is undefined")
    if np.any(lowers > uppers):
        raise ValueError("every lower bound must be <= its upper bound")
    return float(np.mean((lowers <= truths) & (truths <= uppers)))


def central_interval(draws: np.ndarray, level: float, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Equal-tailed empirical interval holding ``level`` of the draws."""
    if not 0.0 <= level < 1.0:
        raise ValueError("level must lie in [0, 1)")
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [a, 1.0 - a], axis=axis)
    return lo, hi


def _hits(truth, draws, level):
    lo, hi = central_interval(draws, level)
    return (lo <= truth) & (truth <= hi)


def correlation_targets(samples: PosteriorSamples, truth: SimTruth) -> tuple[np.ndarray, np.ndarray]:
    """Lower-triangle correlation draws ``(n_draws, P, T, K)`` and true values ``(P, T, K)``."""
    model = samples.model
    if model is None:
        raise ValueError("samples carry no model")
    if not model.spec.correlated:
        raise ValueError("the independent variant has no correlation parameters to cover")
    R = samples.constrained("R_beta")
    R = R.reshape((-1,) + R.shape[2:])
    S = R.shape[-1]
    il = np.tril_indices(S, -1)
    true_R = truth.R_beta()
    if true_R.shape != R.shape[1:]:
        raise ValueError(f"truth correlations {true_R.shape} do not match fit {R.shape[1:]}")
    return R[..., il[0], il[1]], true_R[..., il[0], il[1]]


def correlation_coverage(samples: PosteriorSamples, truth: SimTruth, level: float) -> float:
    """Coverage of the true off-diagonal correlations by central credible intervals."""
    draws, true = correlation_targets(samples, truth)
    lo, hi = central_interval(draws, level)
    return interval_coverage(true, lo, hi)


def log_rate_coverage(samples: PosteriorSamples, truth: SimTruth, level: float) -> float:
    lr = samples.constrained("log_rate")
    lr = lr.reshape((-1,) + lr.shape[2:])
    lo, hi = central_interval(lr, level)
    return interval_coverage(truth.log_rates, lo, hi)


@dataclass
class Prediction:
    cells: list[CellIndex]
    quantiles: np.ndarray          # n_cells x len(probs)
    probs: tuple[float, ...]
    medians: np.ndarray
    zero_population: np.ndarray    # flags

    def interval(self, level: float) -> tuple[np.ndarray, np.ndarray]:
        a = round((1.0 - level) / 2.0, 10)
        i, j = self.probs.index(a), self.probs.index(round(1.0 - a, 10))
        return self.quantiles[:, i], self.quantiles[:, j]


def predictive_deaths(log_rate_draws: np.ndarray, population: float, rng: np.random.Generator) -> np.ndarray:
    """One Poisson death count per posterior log-rate draw."""
    if population <= 0:
        return np.zeros(len(log_rate_draws))
    return rng.poisson(population * np.exp(log_rate_draws)).astype(float)


def holdout_predict(samples: PosteriorSamples, test_cells: Sequence[CellIndex], population: np.ndarray,
                    seed: int = 0, probs=PREDICTIVE_PROBS) -> Prediction:
    """Posterior predictive death quantiles at held-out cells.

    Each cell draws from its own random stream keyed by ``(seed, cell)``, so
    results do not depend on cell order.
    """
    lr = samples.constrained("log_rate")
    lr = lr.reshape((-1,) + lr.shape[2:])
    probs = tuple(float(p) for p in probs)
    if 0.5 not in probs:
        probs = tuple(sorted(probs + (0.5,)))
    cells = [CellIndex(*map(int, c)) for c in test_cells]
    q = np.zeros((len(cells), len(probs)))
    zero = np.zeros(len(cells), bool)
    for k, cell in enumerate(cells):
        pop = float(population[cell])
        zero[k] = pop <= 0
        rng = np.random.default_rng([seed, *cell])
        sims = predictive_deaths(lr[(slice(None),) + tuple(cell)], pop, rng)
        q[k] = np.quantile(sims, probs)
    return Prediction(cells, q, probs, q[:, probs.index(0.5)], zero)


def error_metrics(observed, predicted_medians) -> tuple[float, float]:
    """Mean absolute deviation and mean squared error."""
    obs = np.asarray(observed, float).ravel()
    pred = np.asarray(predicted_medians, float).ravel()
    if len(obs) != len(pred):
        raise ValueError("observed and predicted lengths differ")
    if len(obs) == 0:
        raise ValueError("no cells to evaluate")
    diff = obs - pred
    return float(np.mean(np.abs(diff))), float(np.mean(diff ** 2))


@dataclass
class EvalReport:
    variant: str
    coverage: dict[str, dict[float, float]] = field(default_factory=dict)
    mad: float | None = None
    mse: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    label: str = ""

    def rows(self) -> list[dict]:
        out = []
        for family, by_level in self.coverage.items():
            for level, value in sorted(by_level.items()):
                out.append({"label": self.label, "variant": self.variant, "metric": f"coverage_{family}",
                            "level": level, "value": value})
        for name in ("mad", "mse"):
            value = getattr(self, name)
            if value is not None:
                out.append({"label": self.label, "variant": self.variant, "metric": name, "level": "",
                            "value": value})
        return out

    def to_dict(self) -> dict:
        return {"label": self.label, "variant": self.variant,
                "coverage": {f: {f"{lv:g}": v for lv, v in d.items()} for f, d in self.coverage.items()},
                "mad": self.mad, "mse": self.mse, "counts": self.counts}


def write_reports(reports: Sequence[EvalReport], out_dir, stem: str = "eval") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / f"{stem}.json").open("w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
    with (out_dir / f"{stem}.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["label", "variant", "metric", "level", "value"], lineterminator="\n")
        w.writeheader()
        for r in reports:
            for row in r.rows():
                w.writerow({**row, "value": f"{row['value']!r}"})


def truth_report(samples: PosteriorSamples, truth: SimTruth, levels=LEVELS, label: str = "") -> EvalReport:
    """Coverage of true log-rates and (joint variant) true correlations."""
    rep = EvalReport(samples.model.spec.variant, label=label)
    lr = samples.constrained("log_rate")
    lr = lr.reshape((-1,) + lr.shape[2:])
    rep.coverage["log_rate"] = {lv: interval_coverage(truth.log_rates, *central_interval(lr, lv)) for lv in levels}
    rep.counts["log_rate"] = int(truth.log_rates.size)
    if samples.model.spec.correlated:
        draws, true = correlation_targets(samples, truth)
        rep.coverage["correlation"] = {lv: interval_coverage(true, *central_interval(draws, lv)) for lv in levels}
        rep.counts["correlation"] = int(true.size)
    return rep


def holdout_report(samples: PosteriorSamples, data: MortalityDataset, test_cells: Sequence[CellIndex],
                   seed: int = 0, levels=LEVELS, label: str = "") -> tuple[EvalReport, Prediction]:
    pred = holdout_predict(samples, test_cells, data.population, seed)
    observed = np.array([data.deaths[c] for c in pred.cells], float)
    rep = EvalReport(samples.model.spec.variant, label=label)
    rep.coverage["holdout_deaths"] = {lv: interval_coverage(observed, *pred.interval(lv)) for lv in levels}
    rep.mad, rep.mse = error_metrics(observed, pred.medians)
    rep.counts["holdout_cells"] = len(pred.cells)
    return rep, pred


def compare_variants(data: MortalityDataset, spec_joint: ModelSpec, spec_indep: ModelSpec, cfg: SamplerConfig,
                     split=(0.2, 0), threads: int = 1, label: str = "") -> tuple[EvalReport, EvalReport]:
    """Fit both variants on one training split and score them on identical held-out cells.

    ``split`` is either ``(fraction, seed)`` or an existing ``(train, test_cells)`` pair.
    """
    if isinstance(split[0], MortalityDataset):
        train, test = split
    else:
        train, test = holdout_split(data, *split)
    reports = []
    for spec in (spec_joint, spec_indep):
        s, _ = sample(spec, train, cfg, threads=threads)
        rep, _ = holdout_report(s, data, test, seed=cfg.seed, label=label)
        reports.append(rep)
    return reports[0], reports[1]


@dataclass
class StudyResult:
    hits: dict[str, dict[float, list[np.ndarray]]]
    reports: list[EvalReport]

    def pooled(self) -> dict[str, dict[float, float]]:
        return {fam: {lv: float(np.mean(np.concatenate(h))) for lv, h in by.items()}
                for fam, by in self.hits.items()}


def simulation_study(sim: SimConfig, cfg: SamplerConfig, seeds: Sequence[int], levels=LEVELS,
                     threads: int = 1, spec_kw: dict | None = None, callback=None) -> StudyResult:
    """Simulate, fit and score coverage for each seed; coverage indicators are pooled across seeds."""
    from dataclasses import replace
    hits = {"log_rate": {lv: [] for lv in levels}, "correlation": {lv: [] for lv in levels}}
    reports = []
    for seed in seeds:
        data, truth = simulate(replace(sim, seed=seed))
        spec = ModelSpec.for_data(truth.curves.basis, data, **(spec_kw or {}))
        s, diag = sample(spec, data, replace(cfg, seed=seed), threads=threads)
        lr = s.constrained("log_rate")
        lr = lr.reshape((-1,) + lr.shape[2:])
        corr_draws, corr_true = correlation_targets(s, truth)
        for lv in levels:
            hits["log_rate"][lv].append(_hits(truth.log_rates, lr, lv).ravel())
            hits["correlation"][lv].append(_hits(corr_true, corr_draws, lv).ravel())
        rep = truth_report(s, truth, levels, label=f"seed{seed}")
        rep.counts["divergences"] = diag.divergences
        reports.append(rep)
        if callback is not None:
            callback(seed, rep, diag, s)
    return StudyResult(hits, reports)
