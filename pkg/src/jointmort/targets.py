"""Closed-form Gaussian log densities for checking the sampler."""

from __future__ import annotations

import numpy as np


class GaussianTarget:
    """Multivariate normal ``N(mean, cov)`` returning ``(log density, gradient)``."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, float)
        self.cov = np.asarray(cov, float)
        self.prec = np.linalg.inv(self.cov)
        self.dim = len(self.mean)
        _, logdet = np.linalg.slogdet(self.cov)
        self._const = -0.5 * (self.dim * np.log(2 * np.pi) + logdet)

    def __call__(self, q):
        r = q - self.mean
        g = -self.prec @ r
        return self._const + 0.5 * float(r @ g), g

    @classmethod
    def standard(cls, dim: int) -> "GaussianTarget":
        return cls(np.zeros(dim), np.eye(dim))

    @classmethod
    def correlated_2d(cls, rho: float) -> "GaussianTarget":
        return cls(np.zeros(2), np.array([[1.0, rho], [rho, 1.0]]))
