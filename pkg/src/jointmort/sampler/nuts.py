"""Multinomial No-U-Turn transitions with a diagonal metric.

Trajectories grow by doubling in a random direction. Within a subtree the
proposal is drawn uniformly-progressively, across doublings biased-progressively.
Subtrees are rejected on a U-turn (including the checks across the seam of
merged subtrees) or when the energy error exceeds ``max_energy_error``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_ENERGY_ERROR = 1000.0


@dataclass
class State:
    q: np.ndarray
    lp: float
    grad: np.ndarray


@dataclass
class TransitionStats:
    accept_stat: float
    treedepth: int
    n_leapfrog: int
    divergent: bool
    energy: float


class _Tree:
    __slots__ = ("minus", "plus", "p_minus", "p_plus", "ps_minus", "ps_plus", "rho", "log_w",
                 "prop", "p_prop", "n_leapfrog", "sum_accept", "valid", "divergent")


def _no_uturn(ps_minus: np.ndarray, ps_plus: np.ndarray, rho: np.ndarray) -> bool:
    return float(ps_plus @ rho) > 0.0 and float(ps_minus @ rho) > 0.0


class NUTS:
    def __init__(self, logp_grad, inv_metric: np.ndarray, step_size: float, max_treedepth: int = 10,
                 max_energy_error: float = MAX_ENERGY_ERROR):
        self.logp_grad = logp_grad
        self.inv_metric = np.asarray(inv_metric, float)
        self.step_size = float(step_size)
        self.max_treedepth = int(max_treedepth)
        self.max_energy_error = max_energy_error

    def kinetic(self, p: np.ndarray) -> float:
        # a runaway trajectory may overflow to inf; callers treat that as a divergence
        with np.errstate(over="ignore", invalid="ignore"):
            return 0.5 * float(p @ (self.inv_metric * p))

    def sample_momentum(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(len(self.inv_metric)) / np.sqrt(self.inv_metric)

    def leapfrog(self, s: State, p: np.ndarray, eps: float) -> tuple[State, np.ndarray]:
        p = p + 0.5 * eps * s.grad
        q = s.q + eps * self.inv_metric * p
        lp, g = self.logp_grad(q)
        if not np.isfinite(lp):
            return State(q, -np.inf, g), p
        return State(q, lp, g), p + 0.5 * eps * g

    def _leaf(self, s: State, p: np.ndarray, direction: int, H0: float) -> _Tree:
        s2, p2 = self.leapfrog(s, p, direction * self.step_size)
        t = _Tree()
        H = -s2.lp + self.kinetic(p2) if np.isfinite(s2.lp) else np.inf
        if not np.isfinite(H):
            H = np.inf
        delta = H - H0
        t.n_leapfrog = 1
        t.divergent = bool(delta > self.max_energy_error)
        t.valid = not t.divergent
        t.sum_accept = float(np.exp(min(0.0, -delta))) if np.isfinite(delta) else 0.0
        t.log_w = -delta
        t.minus = t.plus = t.prop = s2
        t.p_minus = t.p_plus = t.p_prop = p2
        t.ps_minus = t.ps_plus = self.inv_metric * p2
        t.rho = p2
        return t

    def _build(self, s: State, p: np.ndarray, direction: int, depth: int, H0: float,
               rng: np.random.Generator) -> _Tree:
        if depth == 0:
            return self._leaf(s, p, direction, H0)
        t1 = self._build(s, p, direction, depth - 1, H0, rng)
        if not t1.valid:
            return t1
        edge, p_edge = (t1.plus, t1.p_plus) if direction > 0 else (t1.minus, t1.p_minus)
        t2 = self._build(edge, p_edge, direction, depth - 1, H0, rng)
        t2.n_leapfrog += t1.n_leapfrog
        t2.sum_accept += t1.sum_accept
        if not t2.valid:
            return t2
        log_w = np.logaddexp(t1.log_w, t2.log_w)
        if rng.random() >= np.exp(t2.log_w - log_w):
            t2.prop, t2.p_prop = t1.prop, t1.p_prop
        left, right = (t1, t2) if direction > 0 else (t2, t1)
        merged = self._merge(left, right)
        merged.prop, merged.p_prop = t2.prop, t2.p_prop
        merged.log_w = log_w
        merged.n_leapfrog, merged.sum_accept = t2.n_leapfrog, t2.sum_accept
        merged.divergent = False
        merged.valid = self._criterion(left, right, merged.rho)
        return merged

    @staticmethod
    def _merge(left: _Tree, right: _Tree) -> _Tree:
        t = _Tree()
        t.minus, t.p_minus, t.ps_minus = left.minus, left.p_minus, left.ps_minus
        t.plus, t.p_plus, t.ps_plus = right.plus, right.p_plus, right.ps_plus
        t.rho = left.rho + right.rho
        return t

    @staticmethod
    def _criterion(left: _Tree, right: _Tree, rho: np.ndarray) -> bool:
        return (_no_uturn(left.ps_minus, right.ps_plus, rho)
                and _no_uturn(left.ps_minus, right.ps_minus, left.rho + right.p_minus)
                and _no_uturn(left.ps_plus, right.ps_plus, right.rho + left.p_plus))

    def transition(self, s0: State, rng: np.random.Generator) -> tuple[State, TransitionStats]:
        p0 = self.sample_momentum(rng)
        H0 = -s0.lp + self.kinetic(p0)
        traj = _Tree()
        traj.minus = traj.plus = s0
        traj.p_minus = traj.p_plus = p0
        traj.ps_minus = traj.ps_plus = self.inv_metric * p0
        traj.rho = p0
        traj.log_w = 0.0
        sample, p_sample = s0, p0
        depth = n_leapfrog = 0
        sum_accept = 0.0
        divergent = False
        while depth < self.max_treedepth:
            direction = 1 if rng.random() < 0.5 else -1
            edge, p_edge = (traj.plus, traj.p_plus) if direction > 0 else (traj.minus, traj.p_minus)
            sub = self._build(edge, p_edge, direction, depth, H0, rng)
            n_leapfrog += sub.n_leapfrog
            sum_accept += sub.sum_accept
            if not sub.valid:
                divergent = sub.divergent
                break
            depth += 1
            if sub.log_w > traj.log_w or rng.random() < np.exp(sub.log_w - traj.log_w):
                sample, p_sample = sub.prop, sub.p_prop
            left, right = (traj, sub) if direction > 0 else (sub, traj)
            merged = self._merge(left, right)
            merged.log_w = np.logaddexp(traj.log_w, sub.log_w)
            keep_going = self._criterion(left, right, merged.rho)
            traj = merged
            if not keep_going:
                break
        energy = -sample.lp + self.kinetic(p_sample)
        return sample, TransitionStats(sum_accept / max(n_leapfrog, 1), depth, n_leapfrog, divergent, energy)


def find_reasonable_step_size(logp_grad, s: State, inv_metric: np.ndarray, step_size: float,
                              rng: np.random.Generator, target: float = 0.8) -> float:
    """Double or halve the step size until one leapfrog step's acceptance crosses ``target``."""
    k = NUTS(logp_grad, inv_metric, step_size)
    log_target = np.log(target)
    direction = 0
    for _ in range(100):
        p = k.sample_momentum(rng)
        H0 = -s.lp + k.kinetic(p)
        s2, p2 = k.leapfrog(s, p, k.step_size)
        H = -s2.lp + k.kinetic(p2) if np.isfinite(s2.lp) else np.inf
        delta = H0 - H if np.isfinite(H) else -np.inf
        if direction == 0:
            direction = 1 if delta > log_target else -1
        if direction == 1 and not delta > log_target:
            break
        if direction == -1 and not delta < log_target:
            break
        k.step_size = k.step_size * 2.0 if direction == 1 else k.step_size / 2.0
        if k.step_size > 1e7 or k.step_size < 1e-10:
            break
    return k.step_size
