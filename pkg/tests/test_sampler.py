from types import SimpleNamespace

import numpy as np
import pytest

from jointmort.sampler import (InitializationError, PosteriorSamples, SamplerConfig, compute_diagnostics, ess_bulk,
                               parse_quantity, quantile_row, sample_target, split_rhat, summarize)
from jointmort.sampler.adapt import DualAveraging, WelfordVariance, metric_windows
from jointmort.sampler.nuts import NUTS, State
from jointmort.sampler.core import STAT_FIELDS
from jointmort.targets import GaussianTarget

QUICK = SamplerConfig(chains=2, warmup=150, samples=300, seed=3)


def test_rhat_constant_chains_flagged():
    x = np.ones((4, 100))
    assert split_rhat(x) == np.inf
    assert split_rhat(x, rank_normalized=True) == np.inf


def test_rhat_iid_and_separated():
    rng = np.random.default_rng(0)
    assert split_rhat(rng.standard_normal((4, 1000))) < 1.01
    assert split_rhat(rng.standard_normal((4, 1000)), rank_normalized=True) < 1.01
    x = np.stack([rng.normal(0, 1, 500), rng.normal(5, 1, 500)])
    assert split_rhat(x) > 2
    # hand value: split halves have means 0,0,5,5, B/n = var of means ~ 8.33, W ~ 1
    assert split_rhat(x) == pytest.approx(np.sqrt(1 + 25 / 3), rel=0.05)


def test_rhat_vectorized_matches_scalar():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 200, 4))
    r = split_rhat(x)
    assert r.shape == (4,)
    assert r[2] == split_rhat(x[:, :, 2])


def test_ess_iid_ar1_constant():
    rng = np.random.default_rng(2)
    assert 8000 <= ess_bulk(rng.standard_normal((4, 2500))) <= 12000
    phi, n = 0.9, 5000
    x = np.zeros((4, n))
    e = rng.standard_normal((4, n))
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + e[:, t]
    expected = 4 * n * (1 - phi) / (1 + phi)
    assert expected / 1.5 <= ess_bulk(x) <= expected * 1.5
    assert ess_bulk(np.full((2, 50), 3.0)) == 0.0


def test_diagnostics_reject_short_input():
    with pytest.raises(ValueError):
        split_rhat(np.ones((1, 3)))
    with pytest.raises(ValueError):
        split_rhat(np.ones((2, 2, 2, 2)))


def test_quantile_rows():
    assert quantile_row(np.full(100, 2.5), [0.5]) == {"q0.5": 2.5, "median": 2.5}
    u = np.random.default_rng(3).uniform(size=10_000)
    row = quantile_row(u, [0.025, 0.975])
    assert row["q0.025"] == pytest.approx(0.025, abs=0.01)
    assert row["q0.975"] == pytest.approx(0.975, abs=0.01)
    nested = quantile_row(np.random.default_rng(4).normal(size=5000), [0.025, 0.1, 0.9, 0.975])
    assert nested["q0.025"] <= nested["q0.1"] <= nested["q0.9"] <= nested["q0.975"]


class _StubModel:
    spec = SimpleNamespace(correlated=True)

    def constrain(self, v):
        return SimpleNamespace(sigma_mu=np.array([v[0], 7.0]), R_beta=np.eye(2)[None, None] * v[1]), 0.0


def test_summarize_named_quantities():
    rng = np.random.default_rng(5)
    draws = rng.uniform(size=(2, 400, 2))
    s = PosteriorSamples(draws, {k: np.zeros((2, 400)) for k in STAT_FIELDS}, np.ones(2), np.ones((2, 2)),
                         model=_StubModel())
    assert summarize(s, "sigma_mu[1]", [0.5]) == {"q0.5": 7.0, "median": 7.0}
    row = summarize(s, "sigma_mu[0]", [0.1, 0.9])
    assert row["q0.1"] == pytest.approx(np.quantile(draws[..., 0], 0.1))
    with pytest.raises(ValueError):
        summarize(s, "sigma_mu", [0.5])                  # not a scalar
    with pytest.raises(ValueError):
        summarize(s, "theta[0]", [0.5])
    assert parse_quantity("mu_beta[0, 1,3]") == ("mu_beta", (0, 1, 3))
    with pytest.raises(ValueError):
        parse_quantity("mu_beta[0")


def test_metric_windows_schedule():
    init, term, windows = metric_windows(500)
    assert (init, term) == (75, 50)
    assert windows[0] == (75, 100)
    assert windows[-1][1] == 450
    assert all(a[1] == b[0] for a, b in zip(windows, windows[1:]))
    sizes = [e - s for s, e in windows]
    assert sizes[:3] == [25, 50, 100]


def test_welford_matches_numpy():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(200, 3)) * [1, 2, 3]
    w = WelfordVariance(3)
    for row in x:
        w.add(row)
    np.testing.assert_allclose(w.mean, x.mean(axis=0))
    var = x.var(axis=0, ddof=1)
    np.testing.assert_allclose(w.regularized(), 200 / 205 * var + 1e-3 * 5 / 205)


def test_dual_averaging_moves_the_right_way():
    lo, hi = DualAveraging(1.0, 0.8), DualAveraging(1.0, 0.8)
    small = [lo.update(0.1) for _ in range(50)]
    big = [hi.update(1.0) for _ in range(50)]
    assert all(a < b for a, b in zip(small, big))
    assert small[-1] < 1.0 < big[-1]


def test_leapfrog_is_reversible():
    target = GaussianTarget.correlated_2d(0.5)
    kernel = NUTS(target, np.array([1.0, 2.0]), 0.1)
    q0 = np.array([0.3, -0.2])
    s0 = State(q0, *target(q0))
    p0 = np.array([0.5, 1.0])
    s, p = s0, p0
    for _ in range(10):
        s, p = kernel.leapfrog(s, p, 0.1)
    for _ in range(10):
        s, p = kernel.leapfrog(s, p, -0.1)
    np.testing.assert_allclose(s.q, q0, atol=1e-12)
    np.testing.assert_allclose(p, p0, atol=1e-12)


def test_sampler_small_gaussian_and_determinism():
    target = GaussianTarget(np.array([1.0, -2.0]), np.diag([1.0, 4.0]))
    s1, d1 = sample_target(target, 2, QUICK)
    s2, _ = sample_target(target, 2, QUICK)
    assert np.array_equal(s1.draws, s2.draws)
    pooled = s1.pooled()
    np.testing.assert_allclose(pooled.mean(axis=0), [1.0, -2.0], atol=0.3)
    np.testing.assert_allclose(pooled.std(axis=0), [1.0, 2.0], rtol=0.2)
    assert d1.divergences == 0
    assert s1.draws.shape == (2, 300, 2)
    s3, _ = sample_target(target, 2, SamplerConfig(chains=2, warmup=150, samples=300, seed=4))
    assert not np.array_equal(s1.draws, s3.draws)


def test_threads_do_not_change_draws():
    target = GaussianTarget.standard(3)
    cfg = SamplerConfig(chains=2, warmup=100, samples=50, seed=8)
    a, _ = sample_target(target, 3, cfg, threads=1)
    b, _ = sample_target(target, 3, cfg, threads=2)
    assert np.array_equal(a.draws, b.draws)


def test_initialization_failure():
    def bad(q):
        return -np.inf, np.zeros_like(q)
    with pytest.raises(InitializationError):
        sample_target(bad, 2, QUICK)


@pytest.mark.parametrize("kw", [dict(chains=0), dict(warmup=50), dict(samples=0), dict(target_accept=1.0),
                                dict(max_treedepth=0), dict(init_jitter=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SamplerConfig(**kw)


def test_diagnostic_warnings():
    rng = np.random.default_rng(9)
    draws = np.stack([rng.normal(0, 1, (200, 2)), rng.normal(3, 1, (200, 2))])
    stats = {k: np.zeros((2, 200)) for k in STAT_FIELDS}
    stats["divergent"][0, :5] = 1
    diag = compute_diagnostics(PosteriorSamples(draws, stats, np.ones(2), np.ones((2, 2))))
    w = diag.warnings()
    assert len(w) == 2 and "R-hat" in w[0] and "divergent" in w[1]
    assert diag.summary()["divergences"] == 5
