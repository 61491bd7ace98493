import math

import numpy as np
import pytest
from scipy import stats

from _support import central_diff, central_diff4, rel_err, tiny_dataset
from jointmort.hiermodel import (BETA_PARAMS, HierModel, Hyper, ModelSpec, constrain, half_normal_lp_log,
                                 log_posterior, log_posterior_grad, log_rates, log_rates_from, lognormal_lp_log)
from jointmort.mortdata import AgeGrid, MortalityDataset
from oracle_density import reference_log_posterior

VARIANTS = [(v, bp, sh) for v in ("joint", "independent") for bp in BETA_PARAMS for sh in (False, True)]


def _spec(data, basis, variant="joint", beta_param="anchored", share=False, **kw):
    return ModelSpec.for_data(basis, data, variant=variant, beta_param=beta_param,
                              share_correlations_over_time=share, **kw)


@pytest.mark.parametrize("beta_param", BETA_PARAMS)
def test_zero_vector_maps_to_identity(beta_param):
    d, basis = tiny_dataset()
    spec = _spec(d, basis, beta_param=beta_param)
    params, _ = constrain(spec, np.zeros(spec.layout.size))
    for x in (params.sigma_beta, params.sigma_mu, params.sigma_a):
        np.testing.assert_array_equal(x, 1.0)
    np.testing.assert_array_equal(params.R_beta, np.broadcast_to(np.eye(2), params.R_beta.shape))
    np.testing.assert_array_equal(params.R_gamma, np.broadcast_to(np.eye(2), params.R_gamma.shape))
    for x in (params.beta, params.mu_beta, params.gamma, params.log_rates):
        np.testing.assert_array_equal(x, 0.0)


def test_single_correlation_entry():
    d, basis = tiny_dataset()
    spec = _spec(d, basis)
    v = spec.layout.pack({"chol_beta": 0.5})
    params, _ = constrain(spec, v)
    np.testing.assert_allclose(params.R_beta[..., 1, 0], math.tanh(0.5), rtol=1e-15)
    assert params.R_beta[0, 0, 1, 0] == pytest.approx(0.4621, abs=5e-5)


def test_independent_variant_has_no_correlation_block():
    d, basis = tiny_dataset()
    spec = _spec(d, basis, variant="independent")
    names = [n for n, _ in spec.layout.blocks]
    assert "chol_beta" not in names and "chol_gamma" not in names
    params, _ = constrain(spec, np.random.default_rng(0).normal(size=spec.layout.size))
    np.testing.assert_array_equal(params.R_beta, np.broadcast_to(np.eye(2), params.R_beta.shape))
    assert spec.layout.size == _spec(d, basis).layout.size - (2 + 5) * 4


def _one_cell(deaths, pop, mask=True):
    grid = AgeGrid.from_labels(["<1"])
    a = lambda x: np.full((1, 1, 1, 1), x)
    return MortalityDataset(grid, ["s"], ["c"], ["1"], a(deaths), a(float(pop)), a(mask))


def test_poisson_term_at_unit_rate():
    basis = np.ones((1, 1))
    spec = ModelSpec(basis, 1, 1, 1)
    v = np.zeros(spec.layout.size)
    with_cell = log_posterior(spec, _one_cell(0, 100), v)
    without = log_posterior(spec, _one_cell(0, 100, mask=False), v)
    assert with_cell - without == pytest.approx(-100.0, abs=1e-12)
    # y = 3 adds y log(P lambda) = 3 log 100, log y! is dropped
    assert log_posterior(spec, _one_cell(3, 100), v) - without == pytest.approx(-100 + 3 * math.log(100), abs=1e-12)


def test_rw2_prior_mean():
    basis = np.ones((1, 1))
    spec = ModelSpec(basis, 1, 1, 3, beta_param="noncentered")
    data = MortalityDataset(AgeGrid.from_labels(["<1"]), ["s"], ["c"], ["1", "2", "3"],
                            np.zeros((1, 1, 1, 3), int), np.zeros((1, 1, 1, 3)))
    m = HierModel(spec, data)
    sl = m.layout.slices()["mu_beta"][0]

    def at(mu2):
        v = np.zeros(m.dim)
        v[sl] = [1.0, 2.0, mu2]
        return m(v)

    lp3, g3 = at(3.0)
    assert g3[sl][2] == pytest.approx(0.0, abs=1e-12)
    assert at(2.9)[0] < lp3 and at(3.1)[0] < lp3
    # slope is -(mu_t - 3) / sigma_mu^2 with sigma_mu = 1 at the origin
    assert at(3.5)[1][sl][2] == pytest.approx(-0.5, abs=1e-12)


@pytest.mark.parametrize("variant,beta_param,share", VARIANTS)
def test_matches_independent_density(variant, beta_param, share):
    d, basis = tiny_dataset(1, mask_frac=0.2)
    spec = _spec(d, basis, variant, beta_param, share, hyper=Hyper(lkj_eta=1.5))
    m = HierModel(spec, d)
    v = m.default_init() + np.random.default_rng(3).uniform(-0.5, 0.5, m.dim)
    ref = reference_log_posterior(spec, d, v)
    assert m.log_density(v) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("variant,beta_param,share", VARIANTS)
def test_gradient_near_data(variant, beta_param, share):
    d, basis = tiny_dataset(2, mask_frac=0.2)
    m = HierModel(_spec(d, basis, variant, beta_param, share), d)
    rng = np.random.default_rng(4)
    for _ in range(3):
        v = m.default_init() + rng.uniform(-0.5, 0.5, m.dim)
        lp, g = m(v)
        assert rel_err(central_diff(m.log_density, v), g).max() < 1e-6


@pytest.mark.parametrize("variant,beta_param,share", VARIANTS[::2])
def test_gradient_far_from_data(variant, beta_param, share):
    # |lp| reaches 1e5 and |grad| 1e9 here, so difference quotients lose about eps * |lp| / h
    # in absolute terms; compare with a fourth-order stencil against the largest gradient entry
    d, basis = tiny_dataset(3)
    m = HierModel(_spec(d, basis, variant, beta_param, share), d)
    v = np.random.default_rng(5).normal(0, 0.5, m.dim)
    lp, g = m(v)
    fd = central_diff4(m.log_density, v)
    assert np.abs(fd - g).max() < 1e-8 * np.abs(g).max()


def test_sigma_prior_pieces():
    for scale in (1.0, 0.25):
        for u in (-1.0, 0.0, 0.7):
            lp, g = half_normal_lp_log(u, scale)
            assert lp == pytest.approx(stats.halfnorm.logpdf(math.exp(u), scale=scale) + u, abs=1e-12)
            assert g == pytest.approx(1.0 - math.exp(2 * u) / scale ** 2, abs=1e-12)
    assert half_normal_lp_log(0.0, 1.0)[1] == 0.0
    assert half_normal_lp_log(0.0, 0.25)[1] == pytest.approx(-15.0)
    for u in (-2.0, 0.0, 0.3):
        lp, g = lognormal_lp_log(u, -1.5, 0.5)
        assert lp == pytest.approx(stats.lognorm.logpdf(math.exp(u), s=0.5, scale=math.exp(-1.5)) + u, abs=1e-12)
    assert lognormal_lp_log(0.0, -1.5, 0.5)[1] == pytest.approx(-6.0)


def test_unobserved_cells_get_prior_gradient_only():
    d, basis = tiny_dataset(4)
    mask = np.ones(d.shape, bool)
    mask[1, :, 0, 2] = False                   # every subpop of one (age, area, year)
    mask[3, :, 2, 0] = False
    d = MortalityDataset(d.age_grid, d.subpop_names, d.area_names, d.year_labels,
                         np.zeros(d.shape, int), d.population, mask)
    m = HierModel(_spec(d, basis), d)
    v = np.random.default_rng(6).normal(0, 0.5, m.dim)
    _, g = m(v)
    sl, shape = m.layout.slices()["z_gamma"]
    zg, gz = v[sl].reshape(shape), g[sl].reshape(shape)
    for a, c, t in ((1, 0, 2), (3, 2, 0)):
        np.testing.assert_allclose(gz[a, :, c, t], -zg[a, :, c, t], atol=1e-14)
    assert not np.allclose(gz[0, :, 0, 0], -zg[0, :, 0, 0])


def test_log_rates_identities():
    rng = np.random.default_rng(7)
    basis = rng.normal(size=(3, 6))
    beta = np.zeros((3, 2, 2, 2))
    beta[0] = 1.0
    lr = log_rates_from(basis, beta)
    np.testing.assert_array_equal(lr, np.broadcast_to(basis[0][:, None, None, None], lr.shape))
    np.testing.assert_array_equal(log_rates_from(basis, np.zeros_like(beta), 2.5), 2.5)
    beta = rng.normal(size=(3, 2, 4, 5))
    gamma = rng.normal(size=(6, 2, 4, 5))
    ref = np.empty_like(gamma)
    for a, s, c, t in np.ndindex(*gamma.shape):
        ref[a, s, c, t] = sum(basis[i, a] * beta[i, s, c, t] for i in range(3)) + gamma[a, s, c, t]
    np.testing.assert_allclose(log_rates_from(basis, beta, gamma), ref, rtol=1e-12, atol=1e-13)


def test_constrained_log_rates_agree():
    d, basis = tiny_dataset(5)
    spec = _spec(d, basis)
    v = np.random.default_rng(8).normal(0, 0.3, spec.layout.size)
    params, _ = constrain(spec, v, d)
    np.testing.assert_allclose(log_rates(spec, params), params.log_rates, rtol=1e-12, atol=1e-12)
    assert np.array_equal(HierModel(spec, d).log_rates(v), params.log_rates)


def test_functional_wrappers_and_bad_points():
    d, basis = tiny_dataset(6)
    spec = _spec(d, basis)
    m = HierModel(spec, d)
    v = m.default_init()
    lp, g = log_posterior_grad(spec, d, v)
    assert lp == log_posterior(spec, d, v) and np.all(np.isfinite(g))
    v[m.layout.slices()["log_sigma_beta"][0]] = 800.0
    lp, g = m(v)
    assert lp == -np.inf or np.isfinite(lp)


def test_layout_round_trip_and_names():
    d, basis = tiny_dataset()
    spec = _spec(d, basis)
    lay = spec.layout
    v = np.arange(lay.size, dtype=float)
    assert np.array_equal(lay.pack(lay.unpack(v)), v)
    names = lay.names()
    assert len(names) == lay.size == len(set(names))
    assert names[0] == "z_omega[0,0,0,0]"
    with pytest.raises(ValueError):
        lay.unpack(v[:-1])


def test_spec_validation_and_serialization():
    d, basis = tiny_dataset()
    spec = _spec(d, basis, share=True, P=1)
    back = ModelSpec.loads(spec.dumps())
    assert back.to_dict() == spec.to_dict()
    assert np.array_equal(back.basis, spec.basis) and back.P == 1
    with pytest.raises(ValueError):
        ModelSpec.for_data(basis, d, P=3)
    with pytest.raises(ValueError):
        ModelSpec.for_data(basis, d, variant="pooled")
    with pytest.raises(ValueError):
        ModelSpec.for_data(basis, d, beta_param="other")
    with pytest.raises(ValueError):
        ModelSpec.for_data(basis[:, :4], d)
    with pytest.raises(ValueError):
        Hyper(sigma_beta_scale=0.0)


@pytest.mark.parametrize("beta_param", BETA_PARAMS)
def test_data_init_and_metric(beta_param):
    d, basis = tiny_dataset(7)
    m = HierModel(_spec(d, basis, beta_param=beta_param), d)
    v = m.default_init()
    assert np.isfinite(m.log_density(v))
    assert m.log_density(v) > m.log_density(np.zeros(m.dim))
    inv = m.fisher_inv_metric(v)
    assert inv.shape == (m.dim,) and np.all(np.isfinite(inv)) and np.all(inv > 0)
