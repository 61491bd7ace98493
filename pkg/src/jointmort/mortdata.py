"""Mortality datasets: age grids, count tensors, long-CSV ingestion and emission.

All tensors are indexed ``[age, subpop, area, year]``.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

LONG_CSV_HEADER = ("age", "subpop", "area", "year", "deaths", "population")

DEFAULT_AGE_LABELS = ("<1", "1-4") + tuple(f"{a}-{a + 4}" for a in range(5, 85, 5)) + ("85+",)
DEFAULT_AGE_LOWER = (0.0, 1.0) + tuple(float(a) for a in range(5, 85, 5)) + (85.0,)

ZERO_DEATH_CODE = -10.0


class DataError(ValueError):
    """Malformed or inconsistent mortality data."""


class ParseError(DataError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


class IntegrityError(DataError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AgeGrid:
    labels: tuple[str, ...]
    lower_bounds: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "lower_bounds", tuple(float(x) for x in self.lower_bounds))
        if len(self.labels) != len(self.lower_bounds):
            raise ValueError("labels and lower_bounds differ in length")
        if self.lower_bounds and self.lower_bounds[0] != 0.0:
            raise ValueError("first age bound must be 0")
        if any(b <= a for a, b in zip(self.lower_bounds, self.lower_bounds[1:])):
            raise ValueError("age lower bounds must be strictly increasing")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def default(cls) -> "AgeGrid":
        """Five-year groups with split infant/child groups: <1, 1-4, 5-9, ..., 80-84, 85+."""
        return cls(DEFAULT_AGE_LABELS, DEFAULT_AGE_LOWER)

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "AgeGrid":
        """Build a grid from labels such as ``<1``, ``5-9`` or ``85+``, ordered by lower bound."""
        labels = list(dict.fromkeys(labels))
        bounds = [age_lower_bound(lab) for lab in labels]
        order = np.argsort(bounds, kind="stable")
        return cls(tuple(labels[i] for i in order), tuple(bounds[i] for i in order))

    def midpoints(self, open_width: float = 5.0) -> np.ndarray:
        """Age-group midpoints in years; the open last group is given width ``open_width``."""
        lo = np.asarray(self.lower_bounds)
        hi = np.append(lo[1:], lo[-1] + open_width)
        return 0.5 * (lo + hi)


def age_lower_bound(label: str) -> float:
    s = label.strip()
    if s.startswith("<"):
        return 0.0
    m = re.match(r"^(\d+(?:\.\d+)?)\s*(?:[-+]|$)", s)
    if m is None:
        raise ValueError(f"cannot parse age-group label {label!r}")
    return float(m.group(1))


class CellIndex(NamedTuple):
    age: int
    subpop: int
    area: int
    year: int


@dataclass(frozen=True)
class MortalityDataset:
    age_grid: AgeGrid
    subpop_names: tuple[str, ...]
    area_names: tuple[str, ...]
    year_labels: tuple[str, ...]
    deaths: np.ndarray
    population: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        for name in ("subpop_names", "area_names", "year_labels"):
            object.__setattr__(self, name, tuple(str(x) for x in getattr(self, name)))
        shape = (len(self.age_grid), len(self.subpop_names), len(self.area_names), len(self.year_labels))
        deaths = np.asarray(self.deaths)
        pop = np.asarray(self.population, dtype=float)
        if deaths.shape != shape or pop.shape != shape:
            raise ValueError(f"tensor shapes {deaths.shape}, {pop.shape} do not match labels {shape}")
        if not np.all(np.isfinite(pop)) or np.any(pop < 0):
            raise IntegrityError("populations must be finite and nonnegative")
        if not np.all(np.isfinite(deaths)) or np.any(deaths < 0) or np.any(deaths != np.round(deaths)):
            raise IntegrityError("deaths must be finite nonnegative integers")
        bad = np.argwhere((deaths > 0) & (pop <= 0))
        if len(bad):
            raise IntegrityError(f"deaths > 0 with population 0 at cell {self.describe(CellIndex(*bad[0]))}")
        mask = np.ones(shape, bool) if self.mask is None else np.asarray(self.mask, bool)
        if mask.shape != shape:
            raise ValueError("mask shape does not match data")
        object.__setattr__(self, "deaths", _frozen(deaths.astype(np.int64)))
        object.__setattr__(self, "population", _frozen(pop))
        object.__setattr__(self, "mask", _frozen(mask))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.deaths.shape

    def describe(self, cell: CellIndex) -> str:
        a, s, c, t = cell
        return (f"(age={self.age_grid.labels[a]}, subpop={self.subpop_names[s]}, "
                f"area={self.area_names[c]}, year={self.year_labels[t]})")

    @property
    def likelihood_mask(self) -> np.ndarray:
        """Cells that enter the likelihood: observed and with positive population."""
        return self.mask & (self.population > 0)

    def with_mask(self, mask: np.ndarray) -> "MortalityDataset":
        return replace(self, mask=np.asarray(mask, bool))

    def observed_cells(self) -> list[CellIndex]:
        return [CellIndex(*map(int, idx)) for idx in np.argwhere(self.mask)]


@dataclass(frozen=True)
class CurveCollection:
    """Rows of log-mortality curves over an age grid, one row per (subpop, area, year)."""

    age_grid: AgeGrid
    rows: np.ndarray
    row_meta: tuple[tuple[str, str, str], ...] = field(default=())

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != len(self.age_grid):
            raise ValueError("rows must be N x A with A matching the age grid")
        if not np.all(np.isfinite(rows)):
            raise DataError("curve collection contains non-finite entries")
        meta = tuple(tuple(str(x) for x in m) for m in self.row_meta) or tuple(("", "", "") for _ in rows)
        if len(meta) != len(rows):
            raise ValueError("row_meta length does not match rows")
        object.__setattr__(self, "rows", _frozen(rows))
        object.__setattr__(self, "row_meta", meta)

    @property
    def subpops(self) -> list[str]:
        return [m[0] for m in self.row_meta]


def format_number(x) -> str:
    """Shortest round-trip decimal form; integral values are written without a fraction."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def _natural_order(labels: Iterable[str]) -> tuple[str, ...]:
    labels = list(dict.fromkeys(labels))
    try:
        return tuple(sorted(labels, key=float))
    except ValueError:
        return tuple(sorted(labels))


def load_dataset(path, format: str = "long-csv") -> MortalityDataset:
    """Read a long-CSV file (``age,subpop,area,year,deaths,population``).

    Dimensions come from the distinct key values. Cells absent from the file get
    zero deaths and population and are masked out.
    """
    if format != "long-csv":
        raise ValueError(f"unsupported format {format!r}")
    path = Path(path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(LONG_CSV_HEADER):
            raise ParseError(path, 1, f"header must be {','.join(LONG_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != 6:
                raise ParseError(path, lineno, f"expected 6 fields, got {len(row)}")
            age, sub, area, year = (x.strip() for x in row[:4])
            try:
                d = float(row[4])
                p = float(row[5])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if not (math.isfinite(d) and d >= 0 and d == int(d)):
                raise ParseError(path, lineno, f"deaths must be a nonnegative integer, got {row[4]!r}")
            if not (math.isfinite(p) and p >= 0):
                raise ParseError(path, lineno, f"population must be finite and nonnegative, got {row[5]!r}")
            records.append((lineno, age, sub, area, year, int(d), p))
    if not records:
        raise ParseError(path, 2, "no data rows")

    try:
        grid = AgeGrid.from_labels(r[1] for r in records)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    subs = _natural_order(r[2] for r in records)
    areas = _natural_order(r[3] for r in records)
    years = _natural_order(r[4] for r in records)
    ia = {lab: i for i, lab in enumerate(grid.labels)}
    isb = {lab: i for i, lab in enumerate(subs)}
    ic = {lab: i for i, lab in enumerate(areas)}
    it = {lab: i for i, lab in enumerate(years)}

    shape = (len(grid), len(subs), len(areas), len(years))
    deaths = np.zeros(shape, np.int64)
    pop = np.zeros(shape)
    mask = np.zeros(shape, bool)
    for lineno, age, sub, area, year, d, p in records:
        idx = (ia[age], isb[sub], ic[area], it[year])
        if mask[idx]:
            raise IntegrityError(f"{path}:{lineno}: duplicate key ({age}, {sub}, {area}, {year})")
        if d > 0 and p == 0:
            raise IntegrityError(f"{path}:{lineno}: deaths > 0 with population 0 at ({age}, {sub}, {area}, {year})")
        deaths[idx], pop[idx], mask[idx] = d, p, True
    return MortalityDataset(grid, subs, areas, years, deaths, pop, mask)


def save_dataset(d: MortalityDataset, path, include_unobserved: bool = False) -> None:
    """Write mask-true cells as long CSV, sorted by (area, subpop, year, age)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_CSV_HEADER)
        A, S, C, T = d.shape
        for c in range(C):
            for s in range(S):
                for t in range(T):
                    for a in range(A):
                        if not (include_unobserved or d.mask[a, s, c, t]):
                            continue
                        w.writerow((d.age_grid.labels[a], d.subpop_names[s], d.area_names[c],
                                    d.year_labels[t], int(d.deaths[a, s, c, t]),
                                    format_number(d.population[a, s, c, t])))


def load_curves(path) -> CurveCollection:
    """Read a curve-collection CSV: ``subpop,area,year,<age-label-1>,...``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["subpop", "area", "year"] or len(header) < 5:
            raise ParseError(path, 1, "header must be subpop,area,year,<age labels...>")
        labels = [h.strip() for h in header[3:]]
        try:
            grid = AgeGrid(labels, [age_lower_bound(x) for x in labels])
        except ValueError as exc:
            raise ParseError(path, 1, str(exc)) from None
        rows, meta = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(x) for x in row[3:]]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(path, lineno, "non-finite log-mortality value")
            rows.append(vals)
            meta.append(tuple(x.strip() for x in row[:3]))
    if not rows:
        raise ParseError(path, 2, "no data rows")
    return CurveCollection(grid, np.array(rows), tuple(meta))


def save_curves(x: CurveCollection, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subpop", "area", "year", *x.age_grid.labels])
        for meta, row in zip(x.row_meta, x.rows):
            w.writerow([*meta, *(format_number(v) for v in row)])


def observed_log_rates(d: MortalityDataset, zero_code: float = ZERO_DEATH_CODE) -> np.ndarray:
    """Empirical log death rates; zero-death cells get ``zero_code``, zero-population cells NaN."""
    pop = d.population
    out = np.full(d.shape, np.nan)
    pos = pop > 0
    with np.errstate(divide="ignore"):
        out[pos] = np.log(d.deaths[pos] / pop[pos])
    out[pos & (d.deaths == 0)] = zero_code
    return out


def curves_from_dataset(d: MortalityDataset, zero_code: float = ZERO_DEATH_CODE) -> CurveCollection:
    """Stack every fully observed (subpop, area, year) log-rate curve into a collection."""
    lr = observed_log_rates(d, zero_code)
    A, S, C, T = d.shape
    rows, meta = [], []
    for s in range(S):
        for c in range(C):
            for t in range(T):
                curve = lr[:, s, c, t]
                if np.all(np.isfinite(curve)) and d.mask[:, s, c, t].all():
                    rows.append(curve)
                    meta.append((d.subpop_names[s], d.area_names[c], d.year_labels[t]))
    return CurveCollection(d.age_grid, np.array(rows).reshape(-1, A), tuple(meta))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def holdout_split(d: MortalityDataset, fraction: float, seed: int
                  ) -> tuple[MortalityDataset, list[CellIndex]]:
    """Hold out ``round(fraction * n)`` observed cells per area, uniformly at random.

    Returns the training dataset (held-out cells masked) and the held-out cells,
    sorted in array order.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    mask = d.mask.copy()
    test: list[CellIndex] = []
    for c in range(d.shape[2]):
        cells = np.argwhere(d.mask[:, :, c, :])  # (age, subpop, year), C order
        n_out = _round_half_up(fraction * len(cells))
        if n_out == 0:
            continue
        chosen = cells[np.sort(rng.choice(len(cells), size=n_out, replace=False))]
        for a, s, t in chosen:
            mask[a, s, c, t] = False
            test.append(CellIndex(int(a), int(s), c, int(t)))
    test.sort()
    return d.with_mask(mask), test


def save_cells(cells: Sequence[CellIndex], d: MortalityDataset, path) -> None:
    """Write cells as labelled keys plus their deaths and population."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_CSV_HEADER)
        for a, s, c, t in cells:
            w.writerow((d.age_grid.labels[a], d.subpop_names[s], d.area_names[c], d.year_labels[t],
                        int(d.deaths[a, s, c, t]), format_number(d.population[a, s, c, t])))


def load_cells(path, d: MortalityDataset) -> list[CellIndex]:
    """Resolve a file of labelled keys against the dimensions of ``d``."""
    lookup = [{lab: i for i, lab in enumerate(labels)} for labels in
              (d.age_grid.labels, d.subpop_names, d.area_names, d.year_labels)]
    cells = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                cells.append(CellIndex(*(lk[x.strip()] for lk, x in zip(lookup, row[:4]))))
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: unknown label {exc}") from None
    return cells
