"""Warm-up tuning: dual-averaging step size and windowed diagonal metric estimation."""

from __future__ import annotations

import math

import numpy as np


class DualAveraging:
    """Nesterov dual averaging of ``log(step_size)`` towards a target acceptance rate."""

    def __init__(self, step_size: float, target: float, gamma: float = 0.05, t0: float = 10.0,
                 kappa: float = 0.75):
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat: float) -> float:
        """Feed one acceptance statistic; returns the next step size."""
        self.counter += 1
        accept_stat = min(1.0, accept_stat) if np.isfinite(accept_stat) else 0.0
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        w = self.counter ** -self.kappa
        self.x_bar = (1.0 - w) * self.x_bar + w * x
        return math.exp(x)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.x_bar)


class WelfordVariance:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized(self) -> np.ndarray:
        """Sample variance shrunk towards 1e-3, as a diagonal inverse metric."""
        n = self.n
        var = self.m2 / (n - 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def metric_windows(warmup: int, init_frac: float = 0.15, term_frac: float = 0.10,
                   base_window: int = 25) -> tuple[int, int, list[tuple[int, int]]]:
    """Slow-adaptation windows as ``(start, end)`` iteration ranges.

    The first ``init_frac`` of warm-up and the last ``term_frac`` tune only the
    step size. Windows in between double from ``base_window``; a window that
    would leave too little room for its successor absorbs the remainder.
    """
    init = int(math.ceil(init_frac * warmup))
    term = int(math.ceil(term_frac * warmup))
    end_all = warmup - term
    windows = []
    start, size = init, base_window
    while start < end_all:
        end = start + size
        if end + 2 * size > end_all:
            end = end_all
        windows.append((start, end))
        start, size = end, size * 2
    return init, term, windows
