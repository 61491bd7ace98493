"""Acceptance criteria 1-10, one PASS/FAIL line each.

Criterion 1 is a multi-hour run and only executes when JOINTMORT_FULL_SCALE=1.
"""

import json
import math
import os
import shutil
import time

import numpy as np
import pytest
from scipy import integrate

from jointmort.cli import main
from jointmort.evalharness import compare_variants, interval_coverage, simulation_study
from jointmort.hiermodel import HierModel, ModelSpec, half_normal_lp_log, log_rates_from, lognormal_lp_log
from jointmort.mortdata import AgeGrid, CurveCollection
from jointmort.pcbasis import explained_variance, svd_basis
from jointmort.sampler import SamplerConfig, sample_target, split_rhat
from jointmort.simgen import SimConfig, simulate
from jointmort.targets import GaussianTarget

from _support import central_diff, rel_err, tiny_dataset
from test_evalharness import COVERAGE_FIXTURES

LEVELS = (0.80, 0.90, 0.95)


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _fmt(cov: dict) -> str:
    return "/".join(f"{cov[lv]:.3f}" for lv in LEVELS)


def test_criterion_01_full_scale_coverage(capsys, tmp_path):
    if os.environ.get("JOINTMORT_FULL_SCALE") != "1":
        with capsys.disabled():
            print("\ncriterion 1: NOT RUN  set JOINTMORT_FULL_SCALE=1 (several hours)")
        pytest.skip("full-scale run disabled")
    sim, run, val = tmp_path / "sim", tmp_path / "run", tmp_path / "val"
    assert main(["simulate", "--seed", "1", "--out", str(sim)]) == 0
    assert main(["fit", "--data", str(sim / "dataset.csv"), "--P", "2", "--seed", "1", "--out", str(run)]) == 0
    assert main(["validate", "--run", str(run), "--against-truth", str(sim), "--out", str(val)]) == 0
    cov = json.loads((val / "eval.json").read_text())[0]["coverage"]
    corr = {lv: cov["correlation"][f"{lv:g}"] for lv in LEVELS}
    lr = {lv: cov["log_rate"][f"{lv:g}"] for lv in LEVELS}
    ok = all(abs(corr[lv] - r) <= 0.07 for lv, r in zip(LEVELS, (0.78, 0.90, 0.94)))
    ok &= all(abs(lr[lv] - r) <= 0.07 for lv, r in zip(LEVELS, (0.83, 0.92, 0.96)))
    report(capsys, 1, ok, f"correlation {_fmt(corr)} vs 0.78/0.90/0.94, log-rate {_fmt(lr)} vs 0.83/0.92/0.96")


def test_criterion_02_desk_scale_coverage(capsys):
    t0 = time.perf_counter()
    res = simulation_study(SimConfig(areas=8, years=5, subgroups=3),
                           SamplerConfig(chains=2, warmup=300, samples=600), seeds=range(5))
    minutes = (time.perf_counter() - t0) / 60
    pooled = res.pooled()
    ok = all(abs(pooled[fam][lv] - lv) <= 0.10 for fam in pooled for lv in LEVELS) and minutes < 20
    report(capsys, 2, ok, f"correlation {_fmt(pooled['correlation'])}, log-rate {_fmt(pooled['log_rate'])} "
                          f"at nominal 0.80/0.90/0.95; {minutes:.1f} min")


def test_criterion_03_gradient(capsys):
    data, basis = tiny_dataset(seed=0, S=2, C=3, T=4)
    worst = 0.0
    for variant in ("joint", "independent"):
        m = HierModel(ModelSpec.for_data(basis, data, variant=variant), data)
        rng = np.random.default_rng(3)
        for _ in range(50 if variant == "joint" else 10):
            v = m.default_init() + rng.uniform(-0.5, 0.5, m.dim)
            _, g = m(v)
            worst = max(worst, float(rel_err(central_diff(m.log_density, v), g).max()))
    report(capsys, 3, worst < 1e-6, f"max relative error {worst:.2e} over 60 points (P=2, A=5, S=2, C=3, T=4)")


def test_criterion_04_prior_normalization(capsys):
    priors = {"half-normal(1)": lambda u: half_normal_lp_log(u, 1.0)[0],
              "half-normal(0.25)": lambda u: half_normal_lp_log(u, 0.25)[0],
              "log-normal(-1.5, 0.5)": lambda u: lognormal_lp_log(u, -1.5, 0.5)[0]}
    with np.errstate(over="ignore"):        # exp(2u) overflows far in the upper tail; the integrand is 0 there
        mass = {k: integrate.quad(lambda u: math.exp(f(u)), -np.inf, np.inf, epsabs=1e-12, epsrel=1e-12)[0]
                for k, f in priors.items()}
    ok = all(abs(v - 1) <= 1e-3 for v in mass.values())
    report(capsys, 4, ok, ", ".join(f"{k} {v:.8f}" for k, v in mass.items()))


def test_criterion_05_sampler_calibration(capsys):
    cfg = SamplerConfig(chains=4, warmup=500, samples=2500, seed=11)
    details, ok = [], True
    for name, target in (("std10", GaussianTarget.standard(10)), ("rho0.9", GaussianTarget.correlated_2d(0.9))):
        s, diag = sample_target(target, target.dim, cfg)
        x = s.pooled()
        mean_err = float(np.abs(x.mean(axis=0) - target.mean).max())
        sd_err = float(np.abs(x.std(axis=0) - np.sqrt(np.diag(target.cov))).max())
        rhat = max(float(np.max(split_rhat(s.draws))), float(np.max(split_rhat(s.draws, rank_normalized=True))))
        div = diag.divergences / (cfg.chains * cfg.samples)
        ok &= mean_err < 0.05 and sd_err < 0.05 and rhat < 1.01 and div < 0.001
        d = f"{name}: mean {mean_err:.3f} sd {sd_err:.3f} R-hat {rhat:.4f} div {div:.2%}"
        if target.dim == 2:
            corr_err = abs(float(np.corrcoef(x.T)[0, 1]) - 0.9)
            ok &= corr_err < 0.03
            d += f" corr {corr_err:.3f}"
        details.append(d)
    report(capsys, 5, ok, "; ".join(details))


def test_criterion_06_truth_identity(capsys):
    data, truth = simulate(SimConfig(seed=2))
    lr = log_rates_from(truth.curves.basis, truth.beta, 0.0)
    m = HierModel(ModelSpec.for_data(truth.curves.basis, data), data)
    assert m.spec.P == 2
    ok = lr.shape == truth.log_rates.shape and np.array_equal(lr, truth.log_rates)
    report(capsys, 6, ok, f"bitwise equal over {truth.log_rates.size} cells")


def test_criterion_07_joint_vs_independent(capsys):
    wins, lines = 0, []
    for seed in range(5):
        sim = SimConfig(areas=8, years=5, subgroups=3, regime_schedule=("exchangeable(0.8)",) * 5, seed=seed)
        data, truth = simulate(sim)
        sj = ModelSpec.for_data(truth.curves.basis, data)
        j, i = compare_variants(data, sj, sj.with_variant("independent"),
                                SamplerConfig(chains=2, warmup=300, samples=600, seed=seed), split=(0.2, seed))
        assert j.counts == i.counts
        wins += j.mad <= i.mad
        lines.append(f"{j.mad:.3f}/{i.mad:.3f}")
    report(capsys, 7, wins >= 4, f"joint <= independent MAD in {wins}/5 seeds (joint/indep: {', '.join(lines)})")


def test_criterion_08_svd_contract(capsys):
    rng = np.random.default_rng(8)
    n, A, r = 120, 19, 4
    signal = rng.normal(size=(n, r)) * [8, 4, 2, 1] @ np.linalg.qr(rng.normal(size=(A, r)))[0].T
    rows = signal + rng.normal(0, 0.01 * signal.std(), signal.shape)
    cc = CurveCollection(AgeGrid.from_labels([str(a) for a in range(A)]), rows, ())
    b = svd_basis(cc, A)
    share = float(explained_variance(b)[:r].sum())
    ortho = float(np.abs(b.components @ b.components.T - np.eye(A)).max())
    recon = float(np.abs(b.reconstruct() - rows).max())
    ok = share >= 0.99 and ortho < 1e-10 and recon < 1e-10
    report(capsys, 8, ok, f"first 4 explain {share:.5f}; orthonormality {ortho:.1e}; reconstruction {recon:.1e}")


def test_criterion_09_coverage_fixtures(capsys):
    bad = [k for k, (t, lo, hi, want) in enumerate(COVERAGE_FIXTURES)
           if abs(interval_coverage(t, lo, hi) - want) > 1e-12]
    ok = len(COVERAGE_FIXTURES) >= 10 and not bad
    report(capsys, 9, ok, f"{len(COVERAGE_FIXTURES)} fixture sets, mismatches {bad}")


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _stable_run_json(b: bytes) -> dict:
    d = json.loads(b)
    d.pop("timestamp"), d.pop("elapsed_seconds")
    return d


def test_criterion_10_cli_determinism(capsys, tmp_path):
    snapshots = []
    for _ in range(2):
        out = tmp_path / "work"
        assert main(["simulate", "--areas", "2", "--years", "3", "--subgroups", "2", "--seed", "5",
                     "--out", str(out / "sim")]) == 0
        assert main(["fit", "--data", str(out / "sim" / "dataset.csv"), "--seed", "5", "--chains", "2",
                     "--warmup", "150", "--samples", "100", "--out", str(out / "fit")]) == 0
        snapshots.append(_tree(out))
        shutil.rmtree(out)
    a, b = snapshots
    differing = [f for f in a if a[f] != b.get(f) and not f.endswith("run.json")]
    runs_equal = all(_stable_run_json(a[f]) == _stable_run_json(b[f]) for f in a if f.endswith("run.json"))
    ok = set(a) == set(b) and not differing and runs_equal
    report(capsys, 10, ok, f"{len(a)} files byte-identical across two runs; differing {differing or 'none'} "
                           "(run.json timestamp and elapsed time excluded)")
