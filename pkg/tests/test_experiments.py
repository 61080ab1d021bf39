import math

import numpy as np
import pytest
from scipy import stats

import sdelab.experiments as ex
from sdelab.experiments import (
    Experiment,
    ExperimentConfig,
    grid_density_discrepancy,
    normalized_draws,
    run_consistency,
    run_dependence,
    run_discretization,
    run_experiment,
    run_intervals,
    run_lrt,
    run_normality,
    sym_sqrt,
)
from sdelab.model import DesignKind, NormalMu, Theta, UniformBox
from sdelab.rng import substream


def cfg(experiment, **kw):
    return ExperimentConfig(experiment=Experiment(experiment), **kw)


def test_config_invariants():
    with pytest.raises(ValueError):
        cfg("consistency", sizes=(10, 10))
    with pytest.raises(ValueError):
        cfg("consistency", replicates=0)
    with pytest.raises(ValueError):
        cfg("discretization", m_grid=(300,), m_ref=1000)
    a = cfg("consistency", seed=1)
    assert a.config_hash() == cfg("consistency", seed=1).config_hash() != cfg("consistency", seed=2).config_hash()


def test_runner_checks_experiment_kind():
    with pytest.raises(ValueError):
        run_lrt(cfg("consistency"))
    with pytest.raises(ValueError):
        run_experiment(ExperimentConfig())
    with pytest.raises(ValueError, match="normal_mu"):
        run_intervals(cfg("intervals", prior=UniformBox()))
    with pytest.raises(ValueError, match="two-parameter"):
        run_normality(cfg("normality"))


def test_row_count_order_and_provenance():
    c = cfg("consistency", sizes=(10, 100, 1000), replicates=4, seed=3)
    res = run_consistency(c)
    assert len(res.rows) == 3 * 4 * 4
    keys = [(r.n_or_m, r.replicate) for r in res.rows]
    assert keys == sorted(keys)
    assert res.config_hash == c.config_hash() and res.seed == 3
    assert res.provenance["config_hash"] == c.config_hash()
    assert all(r.error_flag == 0 for r in res.rows)


def test_consistency_closed_form_variance():
    res = run_consistency(cfg("consistency", sizes=(10, 100, 1000), replicates=3, seed=1))
    for n in (10, 100, 1000):
        expected = 1 / (n * 5 / 6 + 1 / 2.25)
        assert np.all(np.abs(res.values("sigma2", n) - expected) <= 1e-12 * expected)
    med = [np.median(res.values("sigma2", n)) for n in (10, 100, 1000)]
    assert 8 <= med[0] / med[1] <= 12 and 8 <= med[1] / med[2] <= 12
    np.testing.assert_allclose(res.values("abs_error"), np.abs(res.values("mu_hat") - 1.0))


def test_consistency_mcmc_route():
    res = run_consistency(cfg("consistency", sizes=(20, 200), replicates=2, prior=UniformBox(), mcmc_steps=4000))
    assert len(res.rows) == 2 * 2 * 4 and not res.errors
    assert np.all((res.values("ball_prob") >= 0) & (res.values("ball_prob") <= 1))


def test_error_isolation(monkeypatch):
    real = ex.conjugate_posterior_mu

    def flaky(data, *a):
        if data.n == 100:
            raise FloatingPointError("synthetic failure")
        return real(data, *a)

    monkeypatch.setattr(ex, "conjugate_posterior_mu", flaky)
    res = run_consistency(cfg("consistency", sizes=(10, 100, 1000), replicates=2))
    assert len(res.rows) == 3 * 2 * 4
    bad = [r for r in res.rows if r.error_flag]
    assert len(bad) == 2 * 4 and all(r.n_or_m == 100 and math.isnan(r.value) for r in bad)
    assert len(res.errors) == 2 and "synthetic" in res.errors[0]["error"]
    assert res.summary["per_key"]["100"]["sigma2"]["errors"] == 2
    assert res.summary["per_key"]["1000"]["sigma2"]["count"] == 2


def test_simulation_failure_marks_whole_replicate():
    c = cfg("consistency", model="linear", theta0=Theta(1e5, 1.0), sizes=(2, 4), replicates=1, path_steps=200)
    res = run_consistency(c)
    assert len(res.rows) == 2 * 4 and all(r.error_flag == 1 for r in res.rows)


def test_replay_exact_and_thread_invariant():
    c = cfg("lrt", sizes=(30, 60), replicates=6, seed=9)
    a = run_lrt(c)
    b = run_lrt(c)
    d = run_lrt(c, threads=3)
    assert a.rows == b.rows == d.rows
    assert a.summary == d.summary


def test_sym_sqrt_and_normalization():
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    R = sym_sqrt(A)
    np.testing.assert_allclose(R, R.T)
    np.testing.assert_allclose(R @ R, A, atol=1e-12)
    cov = np.linalg.inv(A)
    x = substream(0).multivariate_normal([1.0, 2.0], cov, size=200_000)
    psi = normalized_draws(x, np.array([1.0, 2.0]), A)
    np.testing.assert_allclose(np.cov(psi, rowvar=False), np.eye(2), atol=0.01)
    assert grid_density_discrepancy(psi) < 0.05


def test_normality_identity_sanity():
    res = run_normality(cfg("normality", sizes=(50, 200), replicates=2, prior=UniformBox(), sampler="exact_normal"))
    assert np.all(res.values("ks_max") < 0.01)
    assert np.all(res.values("acceptance_rate") == 1.0)


def test_normality_mcmc_small():
    res = run_normality(cfg("normality", sizes=(50, 400), replicates=2, prior=UniformBox(), mcmc_steps=20_000))
    assert len(res.rows) == 2 * 2 * 6 and not res.errors
    ks50, ks400 = np.median(res.values("ks_max", 50)), np.median(res.values("ks_max", 400))
    assert ks400 < ks50
    assert res.summary["ks_nonincreasing_fraction"] is not None


def test_dependence_runner():
    res = run_dependence(cfg("dependence", sizes=(40, 100, 500, 1000), replicates=2))
    assert len(res.rows) == 4 * 2 * 6
    tri = [res.values("tridiagonal.sigma2", n)[0] for n in (40, 1000)]
    cs = [res.values("compound.sigma2", n)[0] for n in (500, 1000)]
    assert tri[1] < tri[0] / 20
    assert abs(cs[1] / cs[0] - 1) < 0.1
    assert len(res.curves) == 2 * 4 * 301
    # curves integrate to ~1 on the plotting grid at n = 40
    g = np.array([c[2] for c in res.curves if c[0] == "tridiagonal" and c[1] == 40])
    dens = np.array([c[3] for c in res.curves if c[0] == "tridiagonal" and c[1] == 40])
    assert np.trapezoid(dens, g) == pytest.approx(1.0, abs=1e-3)


def test_intervals_runner():
    res = run_intervals(cfg("intervals", sizes=tuple(range(2, 11)), replicates=50, prior=NormalMu(0, 2.25, 1.0)))
    assert len(res.rows) == 9 * 50 * 8
    hpd2 = res.values("hpd_length", 2)
    assert np.allclose(hpd2, 2 * stats.norm.ppf(0.975) * math.sqrt(1 / (2 * 5 / 6 + 1 / 2.25)))
    assert np.all(res.values("ci_length") > res.values("hpd_length"))
    gaps = [res.summary["length_gap"][str(n)] for n in range(2, 11)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_discretization_unit_exact():
    res = run_discretization(cfg("discretization", sizes=(4,), m_grid=(10, 100), m_ref=1000))
    assert np.all(res.values("rms_v") == 0.0)
    assert np.all(res.values("rms_u") < 1e-12)
    with pytest.raises(ValueError):
        run_discretization(cfg("discretization", sizes=(4, 8), m_grid=(10,), m_ref=1000))


def test_discretization_linear_monotone():
    res = run_discretization(cfg("discretization", model="linear", theta0=Theta(0.2, 0.1), T=1.0, x0=1.0,
                                 sizes=(3,), m_grid=(10, 100, 1000), m_ref=100_000))
    for metric in ("rms_u", "rms_v"):
        v = [res.values(metric, m)[0] for m in (10, 100, 1000)]
        assert v[0] > v[1] > v[2]


def test_lrt_runner_summary():
    res = run_lrt(cfg("lrt", sizes=(200,), replicates=40, seed=2))
    z = res.values("z2")
    assert np.all(z >= 0) and np.all(res.values("converged") == 1)
    ref = res.summary["chi2_reference"]["200"]
    assert ref["fraction_nonnegative"] == 1.0 and set(ref) >= {"ks_chi2_df1", "ks_chi2_df2", "mean"}


def test_design_kinds_flow_through():
    res = run_consistency(cfg("consistency", design=DesignKind.SQUARE, sizes=(5, 50), replicates=1))
    T = np.concatenate([[5.0], 1 / (np.arange(2, 51) ** 2 - 1)])
    expected = 1 / (np.sum(T / (1 + T)) + 1 / 2.25)
    assert res.values("sigma2", 50)[0] == pytest.approx(expected, rel=1e-12)
