"""Synthetic small-area populations and deaths with known correlated mortality curves.

Each (area, year, subgroup) log-mortality curve is a baseline curve times a
coefficient plus an accident-hump curve times a second coefficient. Within
an area-year both coefficient vectors are multivariate normal across
subgroups with a correlation matrix chosen by the year's regime.
"""

from __future__ import annotations

import csv
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hiermodel import log_rates_from
from .mortdata import AgeGrid, DataError, MortalityDataset

# Gompertz term plus infant term, evaluated at age-group midpoints
BASELINE_GOMPERTZ_LEVEL = 0.00005
BASELINE_GOMPERTZ_SLOPE = 0.085
BASELINE_INFANT_LEVEL = 0.002
BASELINE_INFANT_DECAY = 0.5
HUMP_HEIGHT = 0.6
HUMP_CENTER = 22.0
HUMP_WIDTH = 6.0

# Share of the population in each of the 19 default age groups, young-adult heavy
AGE_SHARES = np.array([
    0.0125, 0.0500, 0.0620, 0.0640, 0.0670, 0.0760, 0.0820, 0.0790, 0.0740, 0.0720,
    0.0700, 0.0660, 0.0600, 0.0510, 0.0400, 0.0290, 0.0205, 0.0140, 0.0110,
])
AGE_JITTER_SD = 0.05

DEFAULT_SHARES = (0.5, 0.2, 0.1, 0.1, 0.1)

UNSTRUCTURED = {
    "default": np.array([
        [1.00, 0.80, 0.60, 0.30, 0.10],
        [0.80, 1.00, 0.50, 0.20, 0.15],
        [0.60, 0.50, 1.00, 0.40, 0.25],
        [0.30, 0.20, 0.40, 1.00, 0.70],
        [0.10, 0.15, 0.25, 0.70, 1.00],
    ]),
}

_EXCH = re.compile(r"^exchangeable(?:\(\s*([-+0-9.eE]+)\s*\))?$")
_UNSTR = re.compile(r"^unstructured(?:\(\s*(\w+)\s*\))?$")


@dataclass(frozen=True)
class StandardCurves:
    baseline: np.ndarray
    hump: np.ndarray

    @classmethod
    def default(cls, age_grid: AgeGrid | None = None) -> "StandardCurves":
        x = (age_grid or AgeGrid.default()).midpoints()
        baseline = np.log(BASELINE_GOMPERTZ_LEVEL * np.exp(BASELINE_GOMPERTZ_SLOPE * x)
                          + BASELINE_INFANT_LEVEL * np.exp(-BASELINE_INFANT_DECAY * x))
        hump = HUMP_HEIGHT * np.exp(-(((x - HUMP_CENTER) / HUMP_WIDTH) ** 2))
        return cls(baseline, hump)

    @property
    def basis(self) -> np.ndarray:
        """The two curves as a 2 x A basis (baseline first)."""
        return np.vstack([self.baseline, self.hump])


@dataclass(frozen=True)
class SimConfig:
    areas: int = 25
    years: int = 10
    subgroups: int = 5
    base_pop_unit: float = 100000.0
    growth: float = 0.01
    shares: tuple[float, ...] | None = None
    baseline_coef_mean: float = 1.0
    baseline_coef_sd: float = 0.1
    hump_coef_mean: float = 0.0
    hump_coef_sd: float = 0.5
    regime_schedule: tuple[str, ...] | None = None
    exchangeable_rho: float = 0.5
    age_jitter_sd: float = AGE_JITTER_SD
    seed: int = 0
    unstructured: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.areas, self.years, self.subgroups) < 1:
            raise ValueError("areas, years and subgroups must be positive")
        shares = self.shares
        if shares is None:
            shares = _default_shares(self.subgroups)
        shares = tuple(float(x) for x in shares)
        if len(shares) != self.subgroups:
            raise ValueError(f"{len(shares)} shares given for {self.subgroups} subgroups")
        if any(x <= 0 for x in shares) or abs(sum(shares) - 1.0) > 1e-9:
            raise ValueError("shares must be positive and sum to 1")
        object.__setattr__(self, "shares", shares)
        if self.baseline_coef_sd < 0 or self.hump_coef_sd < 0:
            raise ValueError("coefficient sds must be nonnegative")
        sched = self.regime_schedule or default_schedule(self.years, self.exchangeable_rho)
        sched = tuple(sched)
        if len(sched) != self.years:
            raise ValueError(f"regime schedule covers {len(sched)} years, need {self.years}")
        object.__setattr__(self, "regime_schedule", sched)
        for name in sched:
            self.correlation(name)   # validate early

    def correlation(self, regime: str) -> np.ndarray:
        """Correlation matrix (subgroups x subgroups) for a regime name."""
        S = self.subgroups
        regime = regime.strip()
        if regime == "independent":
            return np.eye(S)
        m = _EXCH.match(regime)
        if m:
            rho = float(m.group(1)) if m.group(1) else self.exchangeable_rho
            R = np.full((S, S), rho)
            np.fill_diagonal(R, 1.0)
            _check_psd(R, regime)
            return R
        m = _UNSTR.match(regime)
        if m:
            name = m.group(1) or "default"
            table = {**UNSTRUCTURED, **{k: np.asarray(v, float) for k, v in self.unstructured.items()}}
            if name not in table:
                raise ValueError(f"unknown unstructured matrix {name!r}")
            full = np.asarray(table[name], float)
            if full.shape[0] < S:
                raise ValueError(f"unstructured matrix {name!r} has fewer than {S} rows")
            R = full[:S, :S]
            _check_psd(R, regime)
            return R
        raise ValueError(f"unknown correlation regime {regime!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unstructured"] = {k: np.asarray(v).tolist() for k, v in self.unstructured.items()}
        d["shares"] = list(self.shares)
        d["regime_schedule"] = list(self.regime_schedule)
        return d


def _default_shares(S: int) -> tuple[float, ...]:
    if S <= len(DEFAULT_SHARES):
        base = np.array(DEFAULT_SHARES[:S])
    else:
        base = np.full(S, 1.0)
    return tuple(base / base.sum())


def default_schedule(years: int, rho: float = 0.5) -> tuple[str, ...]:
    """Independent for the first 30% of years, exchangeable to 60%, unstructured after.

    Ten years give 3 / 3 / 4.
    """
    b1 = int(np.floor(0.3 * years + 0.5))
    b2 = int(np.floor(0.6 * years + 0.5))
    return tuple("independent" if t < b1 else f"exchangeable({rho:g})" if t < b2 else "unstructured(default)"
                 for t in range(years))


def _check_psd(R: np.ndarray, name: str) -> None:
    if not np.allclose(R, R.T) or np.any(np.abs(np.diag(R) - 1) > 1e-12):
        raise ValueError(f"{name}: not a symmetric unit-diagonal matrix")
    if np.linalg.eigvalsh(R).min() < -1e-12:
        raise ValueError(f"{name}: correlation matrix is not positive semi-definite")


@dataclass(frozen=True)
class SimTruth:
    log_rates: np.ndarray          # A x S x C x T
    baseline_coefs: np.ndarray     # S x C x T
    hump_coefs: np.ndarray         # S x C x T
    correlations: np.ndarray       # T x S x S, shared by both curve roles
    curves: StandardCurves

    @property
    def beta(self) -> np.ndarray:
        """Coefficients stacked as ``P x S x C x T`` with the baseline first."""
        return np.stack([self.baseline_coefs, self.hump_coefs])

    def R_beta(self) -> np.ndarray:
        """True correlation matrices indexed ``P x T x S x S``."""
        return np.stack([self.correlations, self.correlations])


def _streams(seed: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def make_population(cfg: SimConfig, age_grid: AgeGrid | None = None,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Population tensor ``A x S x C x T``."""
    grid = age_grid or AgeGrid.default()
    if len(grid) != len(AGE_SHARES):
        raise ValueError("built-in age shares cover the 19-group default grid only")
    rng = rng or _streams(cfg.seed)[0]
    C, T = cfg.areas, cfg.years
    totals = cfg.base_pop_unit * np.arange(1, C + 1)[:, None] * (1.0 + cfg.growth) ** np.arange(T)[None, :]
    jitter = np.exp(rng.normal(0.0, cfg.age_jitter_sd, size=(len(grid), C, T)))
    age_share = AGE_SHARES[:, None, None] * jitter
    age_share /= age_share.sum(axis=0, keepdims=True)
    area_age = totals[None] * age_share                                  # A, C, T
    shares = np.asarray(cfg.shares)
    return area_age[:, None, :, :] * shares[None, :, None, None]


def make_truth(cfg: SimConfig, curves: StandardCurves | None = None,
               rng: np.random.Generator | None = None) -> SimTruth:
    curves = curves or StandardCurves.default()
    rng = rng or _streams(cfg.seed)[1]
    S, C, T = cfg.subgroups, cfg.areas, cfg.years
    Rs = np.stack([cfg.correlation(r) for r in cfg.regime_schedule])
    base = np.empty((S, C, T))
    hump = np.empty((S, C, T))
    for t in range(T):
        # eigen factor tolerates singular (e.g. rho = 1) matrices
        w, V = np.linalg.eigh(Rs[t])
        F = V * np.sqrt(np.clip(w, 0.0, None))
        zb = rng.standard_normal((C, S))
        zh = rng.standard_normal((C, S))
        base[:, :, t] = (cfg.baseline_coef_mean + cfg.baseline_coef_sd * zb @ F.T).T
        hump[:, :, t] = (cfg.hump_coef_mean + cfg.hump_coef_sd * zh @ F.T).T
    lr = log_rates_from(curves.basis, np.stack([base, hump]))
    return SimTruth(lr, base, hump, Rs, curves)


def draw_deaths(truth: SimTruth, population: np.ndarray, seed: int | np.random.Generator,
                age_grid: AgeGrid | None = None, subgroup_names=None, area_names=None,
                year_labels=None) -> MortalityDataset:
    """Poisson deaths at ``population * exp(log_rate)``; every cell observed."""
    if truth.log_rates.shape != population.shape:
        raise ValueError("population and truth dimensions differ")
    if np.max(truth.log_rates) > 20:
        raise ValueError("log mortality rate above 20; the simulated curve is implausible")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    deaths = rng.poisson(population * np.exp(truth.log_rates))
    A, S, C, T = population.shape
    return MortalityDataset(
        age_grid or AgeGrid.default(),
        subgroup_names or default_subgroup_names(S),
        area_names or [f"area{c + 1:02d}" for c in range(C)],
        year_labels or [str(t + 1) for t in range(T)],
        deaths, population, np.ones(population.shape, bool))


def default_subgroup_names(S: int) -> list[str]:
    return [chr(ord("A") + s) if S <= 26 else f"G{s + 1:02d}" for s in range(S)]


def simulate(cfg: SimConfig, curves: StandardCurves | None = None
             ) -> tuple[MortalityDataset, SimTruth]:
    """Population, ground truth and deaths from independent substreams of ``cfg.seed``."""
    r_pop, r_truth, r_deaths = _streams(cfg.seed)
    pop = make_population(cfg, rng=r_pop)
    truth = make_truth(cfg, curves, rng=r_truth)
    return draw_deaths(truth, pop, r_deaths), truth


TRUTH_FILES = ("truth_log_rates.csv", "truth_coefficients.csv", "truth_correlations.csv", "basis.csv")


def save_truth(truth: SimTruth, data: MortalityDataset, out_dir, regimes: tuple[str, ...] = ()) -> list[str]:
    """Write ground truth as long CSVs next to a simulated dataset."""
    from .runio import write_csv
    out = Path(out_dir)
    ages, subs, areas, years = data.age_grid.labels, data.subpop_names, data.area_names, data.year_labels
    A, S, C, T = truth.log_rates.shape
    write_csv(out / TRUTH_FILES[0], ["age", "subpop", "area", "year", "log_rate"],
              ((ages[a], subs[s], areas[c], years[t], float(truth.log_rates[a, s, c, t]))
               for c in range(C) for s in range(S) for t in range(T) for a in range(A)))
    write_csv(out / TRUTH_FILES[1], ["subpop", "area", "year", "baseline", "hump"],
              ((subs[s], areas[c], years[t], float(truth.baseline_coefs[s, c, t]), float(truth.hump_coefs[s, c, t]))
               for c in range(C) for s in range(S) for t in range(T)))
    regimes = tuple(regimes) or ("",) * T
    write_csv(out / TRUTH_FILES[2], ["year", "regime", "row", "col", "value"],
              ((years[t], regimes[t], subs[r], subs[q], float(truth.correlations[t, r, q]))
               for t in range(T) for r in range(S) for q in range(S)))
    save_basis(truth.curves.basis, data.age_grid, out / TRUTH_FILES[3])
    return list(TRUTH_FILES)


def load_truth(sim_dir, data: MortalityDataset) -> SimTruth:
    """Read the files written by :func:`save_truth`, indexed like ``data``."""
    sim_dir = Path(sim_dir)
    look = [{lab: i for i, lab in enumerate(x)} for x in
            (data.age_grid.labels, data.subpop_names, data.area_names, data.year_labels)]
    A, S, C, T = data.shape
    lr = np.full((A, S, C, T), np.nan)
    for row in _rows(sim_dir / TRUTH_FILES[0]):
        lr[look[0][row["age"]], look[1][row["subpop"]], look[2][row["area"]], look[3][row["year"]]] = float(row["log_rate"])
    base = np.full((S, C, T), np.nan)
    hump = np.full((S, C, T), np.nan)
    for row in _rows(sim_dir / TRUTH_FILES[1]):
        idx = look[1][row["subpop"]], look[2][row["area"]], look[3][row["year"]]
        base[idx], hump[idx] = float(row["baseline"]), float(row["hump"])
    R = np.full((T, S, S), np.nan)
    for row in _rows(sim_dir / TRUTH_FILES[2]):
        R[look[3][row["year"]], look[1][row["row"]], look[1][row["col"]]] = float(row["value"])
    if np.isnan(lr).any() or np.isnan(base).any() or np.isnan(R).any():
        raise ValueError(f"{sim_dir}: truth files do not cover every cell of the dataset")
    basis = load_basis(sim_dir / TRUTH_FILES[3], data.age_grid)
    return SimTruth(lr, base, hump, R, StandardCurves(basis[0], basis[1]))


def _rows(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        yield from csv.DictReader(fh)


def save_basis(basis: np.ndarray, age_grid: AgeGrid, path) -> None:
    """Basis curves as ``age,pc1,...,pcP`` (one row per age group)."""
    from .runio import write_csv
    basis = np.atleast_2d(basis)
    write_csv(path, ["age", *(f"pc{i + 1}" for i in range(len(basis)))],
              ((lab, *(float(x) for x in basis[:, a])) for a, lab in enumerate(age_grid.labels)))


def load_basis(path, age_grid: AgeGrid | None = None) -> np.ndarray:
    """Read a basis CSV into a ``P x A`` array, checking its ages against ``age_grid``."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "age" or len(header) < 2:
            raise DataError(f"{path}: basis header must be age,pc1,...")
        labels, cols = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                cols.append([float(x) for x in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            labels.append(row[0].strip())
    if age_grid is not None and tuple(labels) != tuple(age_grid.labels):
        raise DataError(f"{path}: basis ages {labels} do not match the data's age groups")
    return np.array(cols).T
