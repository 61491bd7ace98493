"""Principal-component age bases from collections of log-mortality curves."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy import stats

from .mortdata import AgeGrid, CurveCollection

DEFAULT_VARIANCE_FLOOR = 0.005


@dataclass(frozen=True)
class PCBasis:
    """Leading right singular vectors of a curve matrix ``X = U S V'``.

    ``components`` holds the rows of ``V'`` (one curve over age per row).
    ``left_values`` holds ``U S`` when ``scores_are_scaled`` is true, else ``U``.
    ``all_singular_values`` keeps the full spectrum for explained-variance shares.
    """

    age_grid: AgeGrid
    components: np.ndarray
    singular_values: np.ndarray
    left_values: np.ndarray
    scores_are_scaled: bool = True
    all_singular_values: np.ndarray = field(default=None)

    def __post_init__(self):
        comp = np.atleast_2d(np.asarray(self.components, float))
        sv = np.asarray(self.singular_values, float)
        full = sv if self.all_singular_values is None else np.asarray(self.all_singular_values, float)
        if comp.shape[1] != len(self.age_grid) or len(sv) != comp.shape[0]:
            raise ValueError("components must be P x A with one singular value per row")
        for s in (sv, full):
            if np.any(s < 0) or np.any(np.diff(s) > 0):
                raise ValueError("singular values must be nonnegative and nonincreasing")
        for name, arr in (("components", comp), ("singular_values", sv),
                          ("left_values", np.asarray(self.left_values, float)), ("all_singular_values", full)):
            arr = np.array(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def p_max(self) -> int:
        return self.components.shape[0]

    def truncate(self, p: int) -> "PCBasis":
        if not 1 <= p <= self.p_max:
            raise ValueError(f"cannot keep {p} of {self.p_max} components")
        return PCBasis(self.age_grid, self.components[:p], self.singular_values[:p],
                       self.left_values[:, :p], self.scores_are_scaled, self.all_singular_values)

    def scores(self) -> np.ndarray:
        """Per-row loadings on each component, i.e. rows of ``U S``."""
        if self.scores_are_scaled:
            return self.left_values
        return self.left_values * self.singular_values

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        k = self.p_max if k is None else k
        return self.scores()[:, :k] @ self.components[:k]

    @classmethod
    def from_curves(cls, age_grid: AgeGrid, curves: np.ndarray) -> "PCBasis":
        """Wrap fixed curves (e.g. simulation standard curves) as a basis with no reference data."""
        curves = np.atleast_2d(np.asarray(curves, float))
        return cls(age_grid, curves, np.ones(len(curves)), np.zeros((0, len(curves))))


def svd_basis(x: CurveCollection, p_max: int, scaled: bool = True) -> PCBasis:
    """Decompose the curve matrix without centering and keep ``p_max`` components.

    Each component is oriented so that its entries sum to a nonnegative value.
    """
    rows = np.asarray(x.rows)
    n, a = rows.shape
    if not 1 <= p_max <= a:
        raise ValueError(f"p_max must satisfy 1 <= p_max <= A = {a}, got {p_max}")
    if n < p_max:
        raise ValueError(f"need at least p_max = {p_max} curves, got {n}")
    try:
        u, s, vt = np.linalg.svd(rows, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"SVD did not converge: {exc}") from None
    signs = np.where(vt.sum(axis=1) < 0, -1.0, 1.0)
    vt = vt * signs[:, None]
    u = u * signs[None, :]
    left = u[:, :p_max] * s[:p_max] if scaled else u[:, :p_max]
    return PCBasis(x.age_grid, vt[:p_max], s[:p_max], left, scaled, s)


def explained_variance(b: PCBasis) -> np.ndarray:
    """Share of squared singular mass carried by each retained component."""
    total = np.sum(b.all_singular_values ** 2)
    if total == 0:
        return np.zeros(b.p_max)
    return b.singular_values ** 2 / total


def welch_t(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Two-sided Welch t-test; returns ``(t, p)``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    vx, vy = x.var(ddof=1) / len(x), y.var(ddof=1) / len(y)
    diff = x.mean() - y.mean()
    se2 = vx + vy
    if se2 == 0:
        return (0.0, 1.0) if diff == 0 else (float(np.copysign(np.inf, diff)), 0.0)
    t = diff / np.sqrt(se2)
    df = se2 ** 2 / (vx ** 2 / (len(x) - 1) + vy ** 2 / (len(y) - 1))
    return float(t), float(2 * stats.t.sf(abs(t), df))


@dataclass
class ComponentSeparation:
    component: int
    explained_share: float
    means: dict[str, float]
    pairs: dict[tuple[str, str], tuple[float, float] | None]

    @property
    def min_p(self) -> float:
        ps = [v[1] for v in self.pairs.values() if v is not None]
        return min(ps) if ps else float("nan")


@dataclass
class SelectionReport:
    rows: list[ComponentSeparation]
    recommended_P: int | None = None

    def significant(self, alpha: float) -> list[bool]:
        return [r.min_p < alpha for r in self.rows]


def subpop_separation(b: PCBasis, row_meta: Sequence, i: int) -> ComponentSeparation:
    """Compare the distribution of component ``i`` loadings between subpopulations.

    ``row_meta`` is either a list of subpop labels or of (subpop, area, year) tuples.
    Pairs where a group has fewer than two rows are reported as ``None``.
    """
    labels = np.array([m if isinstance(m, str) else m[0] for m in row_meta])
    if len(labels) != b.left_values.shape[0]:
        raise ValueError("row_meta does not match the basis rows")
    col = b.left_values[:, i]
    groups = list(dict.fromkeys(labels))
    if len(groups) < 2:
        raise ValueError("need at least two subpopulations")
    vals = {g: col[labels == g] for g in groups}
    pairs = {}
    for g, h in combinations(groups, 2):
        pairs[(g, h)] = welch_t(vals[g], vals[h]) if min(len(vals[g]), len(vals[h])) >= 2 else None
    return ComponentSeparation(i, float(explained_variance(b)[i]),
                               {g: float(v.mean()) for g, v in vals.items()}, pairs)


def selection_report(b: PCBasis, row_meta: Sequence, alpha: float = 0.05, min_P: int = 1,
                     floor: float = DEFAULT_VARIANCE_FLOOR) -> SelectionReport:
    rep = SelectionReport([subpop_separation(b, row_meta, i) for i in range(b.p_max)])
    rep.recommended_P = recommend_P(rep, alpha, min_P, b.p_max, floor)
    return rep


def recommend_P(report: SelectionReport, alpha: float = 0.05, min_P: int = 3, max_P: int | None = None,
                floor: float = DEFAULT_VARIANCE_FLOOR) -> int:
    """Number of leading components that each either separate subpopulations or carry real variance.

    Counting stops at the first component failing both checks; the result is
    clamped to ``[min_P, max_P]``.
    """
    max_P = len(report.rows) if max_P is None else max_P
    if len(report.rows) < max_P:
        raise ValueError("report does not cover max_P components")
    p = 0
    for row in report.rows[:max_P]:
        if row.explained_share >= floor or row.min_p < alpha:
            p += 1
        else:
            break
    return max(min_P, p)
