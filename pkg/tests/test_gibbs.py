import math

import numpy as np
import pytest
from scipy import stats

from factorgibbs import gibbs, linalg
from factorgibbs.errors import ConfigError, NotPositiveDefinite
from factorgibbs.gibbs import (
    ChainState,
    DrawStore,
    GibbsConfig,
    StoreMode,
    init_from_prior,
    make_rng,
    run_chain,
    sample_factors,
    sample_loading_row_head,
    sample_loading_row_tail,
    sample_uniquenesses,
)
from factorgibbs.priors import PriorSpec
from oracles import grid_inversion, ks_crit


def _small_problem(n=40, m=5, k=2, seed=0):
    rng = np.random.default_rng(seed)
    beta = np.tril(rng.normal(0, 0.8, (m, k)))
    beta[np.arange(k), np.arange(k)] = np.abs(beta[np.arange(k), np.arange(k)]) + 0.3
    omega2 = rng.uniform(0.1, 0.5, m)
    F = rng.standard_normal((n, k))
    Y = F @ beta.T + rng.standard_normal((n, m)) * np.sqrt(omega2)
    return Y, beta, omega2, F


def test_make_rng_streams():
    a = make_rng(5, 0).random(4)
    np.testing.assert_array_equal(a, make_rng(5, 0).random(4))
    assert not np.array_equal(a, make_rng(5, 1).random(4))
    assert not np.array_equal(a, make_rng(6, 0).random(4))


def test_config_validation():
    with pytest.raises(ConfigError):
        GibbsConfig(burn_in=-1)
    with pytest.raises(ConfigError):
        GibbsConfig(iterations=0)
    with pytest.raises(ConfigError):
        GibbsConfig(iterations=3, thin=5)
    with pytest.raises(ValueError):
        GibbsConfig(store="everything")
    assert GibbsConfig(store="full-sigma").store is StoreMode.FULL_SIGMA


def test_factor_conditional_moments():
    Y, beta, omega2, _ = _small_problem(n=3)
    rng = np.random.default_rng(1)
    draws = np.array([sample_factors(beta, omega2, Y, rng) for _ in range(40_000)])
    prec = np.eye(2) + beta.T @ np.diag(1 / omega2) @ beta
    cov = np.linalg.inv(prec)
    mean = Y @ np.diag(1 / omega2) @ beta @ cov
    se = np.sqrt(np.diag(cov) / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 4 * se)
    for t in range(3):
        np.testing.assert_allclose(np.cov(draws[:, t, :], rowvar=False), cov, atol=0.03 * cov.max())
    np.testing.assert_allclose(gibbs.factor_posterior_mean(beta, omega2, Y), mean, atol=1e-12)


def test_uniqueness_conditional():
    Y, beta, _, F = _small_problem(n=30)
    spec = PriorSpec()
    rng = np.random.default_rng(2)
    draws = np.array([sample_uniquenesses(beta, F, Y, spec, rng) for _ in range(40_000)])
    d = ((Y - F @ beta.T) ** 2).sum(axis=0)
    shape, rate = (spec.nu + 30) / 2, (spec.nu * spec.s2 + d) / 2
    mean = rate / (shape - 1)
    sd = mean / math.sqrt(shape - 2)
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 4 * sd / math.sqrt(draws.shape[0]))
    ref = stats.invgamma(shape, scale=rate[0])
    assert stats.kstest(draws[:, 0], ref.cdf).statistic < ks_crit(draws.shape[0], 10**12)


@pytest.mark.parametrize("family,i", [("order-invariant", 1), ("order-invariant", 2), ("standard", 2)])
def test_head_row_vs_grid(family, i):
    k = 3
    Y, _, omega2, F = _small_problem(n=6, m=5, k=k, seed=3)
    F = np.random.default_rng(4).standard_normal((6, k))
    spec = PriorSpec(family)
    y = Y[:, i - 1]
    w = omega2[i - 1]
    rng = np.random.default_rng(5)
    n = 20_000
    draws = np.array([sample_loading_row_head(i, w, F, y, spec, rng) for _ in range(n)])
    power = (k - i) if family == "order-invariant" else 0
    # marginal of the diagonal by direct numerical integration of the joint kernel
    Fi = F[:, :i]
    prec = np.eye(i) / spec.c0 + Fi.T @ Fi / w
    cov = np.linalg.inv(prec)
    mu = cov @ Fi.T @ y / w
    a, b = mu[-1], math.sqrt(cov[-1, -1])
    kern = lambda t: power * np.log(t) - (t - a) ** 2 / (2 * b * b)
    ref = grid_inversion(kern, 1e-12, max(a, 0) + 12 * b + 1, n, rng)
    assert np.all(draws[:, -1] > 0)
    assert stats.ks_2samp(draws[:, -1], ref).statistic < ks_crit(n, n)
    if i > 1:
        # E[beta_i1 | diag] is linear in diag with slope cov[0,-1]/cov[-1,-1]
        slope, intercept = np.polyfit(draws[:, -1], draws[:, 0], 1)
        assert slope == pytest.approx(cov[0, -1] / cov[-1, -1], abs=0.05 * (1 + abs(slope)))
        assert intercept == pytest.approx(mu[0] - slope * mu[-1], abs=0.05 * (1 + abs(mu[0])))


def test_head_row_validation():
    F = np.ones((4, 2))
    with pytest.raises(ValueError):
        sample_loading_row_head(3, 0.1, F, np.ones(4), PriorSpec(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_loading_row_tail(2, 0.1, F, np.ones(4), PriorSpec(), np.random.default_rng(0))


def test_tail_row_moments():
    k = 3
    rng = np.random.default_rng(6)
    F = rng.standard_normal((25, k))
    y = F @ np.array([0.4, -0.7, 1.1]) + 0.5 * rng.standard_normal(25)
    spec = PriorSpec(c0=2.0)
    draws = np.array([sample_loading_row_tail(5, 0.25, F, y, spec, rng) for _ in range(40_000)])
    cov = np.linalg.inv(np.eye(k) / 2.0 + F.T @ F / 0.25)
    mean = cov @ F.T @ y / 0.25
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 4 * np.sqrt(np.diag(cov) / draws.shape[0]))
    np.testing.assert_allclose(np.cov(draws, rowvar=False), cov, atol=0.05 * cov.max())


def test_tail_row_limits():
    rng = np.random.default_rng(7)
    F = rng.standard_normal((50, 2))
    y = F @ np.array([0.3, 0.9]) + 0.1 * rng.standard_normal(50)
    ols = np.linalg.lstsq(F, y, rcond=None)[0]
    # flat prior: posterior mean is least squares
    _, mean = gibbs.row_posterior(np.float64(0.01), F.T @ F, F.T @ y, 1e12)
    np.testing.assert_allclose(mean, ols, atol=1e-8)
    # tiny noise: draws collapse onto least squares
    x = sample_loading_row_tail(3, 1e-12, F, y, PriorSpec(), rng)
    np.testing.assert_allclose(x, ols, atol=1e-4)
    # huge noise: draws follow the prior N(0, c0)
    xs = np.array([sample_loading_row_tail(3, 1e12, F, y, PriorSpec(c0=4.0), rng) for _ in range(20_000)])
    assert np.all(np.abs(xs.mean(axis=0)) < 0.1)
    np.testing.assert_allclose(xs.var(axis=0), 4.0, rtol=0.05)


def test_factor_rotation_does_not_enter():
    # the loading conditional depends on F only through F'F and F'y
    rng = np.random.default_rng(8)
    F = rng.standard_normal((20, 3))
    y = rng.standard_normal(20)
    q, _ = np.linalg.qr(rng.standard_normal((20, 20)))
    a = sample_loading_row_tail(4, 0.3, F, y, PriorSpec(), np.random.default_rng(1))
    b = sample_loading_row_tail(4, 0.3, q @ F, q @ y, PriorSpec(), np.random.default_rng(1))
    np.testing.assert_allclose(a, b, atol=1e-10)


@pytest.mark.parametrize("family", ["standard", "order-invariant"])
def test_run_chain_constraints_and_determinism(family):
    Y, *_ = _small_problem()
    cfg = GibbsConfig(prior=PriorSpec(family), burn_in=20, iterations=60, thin=3, seed=11, store="beta-omega")
    init = init_from_prior(Y, 2, cfg.prior, seed=11)
    a = run_chain(Y, cfg, init, check=True)
    b = run_chain(Y, cfg, init)
    assert len(a) == 20 and not a.truncated
    np.testing.assert_array_equal(a.iterations, np.arange(3, 61, 3) + 20)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.columns[:3] == ["beta_1_1", "beta_2_1", "beta_2_2"]
    assert np.all(a.column("beta_1_1") > 0) and np.all(a.column("beta_2_2") > 0)
    c = run_chain(Y, gibbs.with_seed(cfg, chain_index=1), init)
    assert not np.array_equal(a.draws, c.draws)


def test_store_modes_agree():
    Y, *_ = _small_problem()
    init = init_from_prior(Y, 2, PriorSpec(), seed=3)
    out = {}
    for mode in StoreMode:
        cfg = GibbsConfig(iterations=5, seed=1, store=mode)
        out[mode] = run_chain(Y, cfg, init)
    m = 5
    assert len(out[StoreMode.FULL_SIGMA].columns) == m * (m + 1) // 2
    diag_cols = [f"sigma_{i}_{i}" for i in range(1, m + 1)]
    full = np.column_stack([out[StoreMode.FULL_SIGMA].column(c) for c in diag_cols])
    np.testing.assert_allclose(full, out[StoreMode.SIGMA_DIAG].draws, rtol=1e-14)
    bo = out[StoreMode.BETA_OMEGA]
    s11 = bo.column("beta_1_1") ** 2 + bo.column("omega2_1")
    np.testing.assert_allclose(s11, out[StoreMode.SIGMA_DIAG].column("sigma_1_1"), rtol=1e-14)


def test_csv_round_trip(tmp_path):
    Y, *_ = _small_problem()
    cfg = GibbsConfig(iterations=10, seed=2)
    store = run_chain(Y, cfg, init_from_prior(Y, 2, cfg.prior, seed=2))
    store.to_csv(tmp_path / "d.csv")
    back = DrawStore.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.draws, store.draws)
    np.testing.assert_array_equal(back.iterations, store.iterations)
    assert back.columns == store.columns
    store.write_metadata(tmp_path / "d.meta.txt", cfg)
    meta = dict(line.split(" = ", 1) for line in (tmp_path / "d.meta.txt").read_text().splitlines())
    assert meta["seed"] == "2" and meta["stored"] == "10" and meta["truncated"] == "false"


def test_truncated_on_numerical_failure(monkeypatch):
    Y, *_ = _small_problem()
    real = gibbs.gibbs_sweep
    calls = {"n": 0}

    def flaky(state, Y, config, rng):
        calls["n"] += 1
        if calls["n"] > 7:
            raise NotPositiveDefinite("injected")
        return real(state, Y, config, rng)

    monkeypatch.setattr(gibbs, "gibbs_sweep", flaky)
    cfg = GibbsConfig(burn_in=2, iterations=20, seed=1)
    store = run_chain(Y, cfg, init_from_prior(Y, 2, cfg.prior, seed=1))
    assert store.truncated and "injected" in store.error
    assert len(store) == 5


def test_small_n_warns():
    Y, *_ = _small_problem(n=1, k=2)
    cfg = GibbsConfig(iterations=3, seed=1)
    with pytest.warns(UserWarning):
        store = run_chain(Y, cfg, init_from_prior(Y, 2, cfg.prior, seed=1))
    assert len(store) == 3


@pytest.mark.slow
def test_no_data_recovers_prior():
    # with Y empty (n = 0) the chain targets the prior, so sigma_11 / c0 - omega2_1 is chi2_k
    m, k = 4, 3
    Y = np.empty((0, m))
    spec = PriorSpec("order-invariant")
    init = ChainState(np.tril(np.ones((m, k))), np.ones(m), np.empty((0, k)))
    cfg = GibbsConfig(prior=spec, iterations=30_000, seed=9, store="beta-omega")
    with pytest.warns(UserWarning):
        store = run_chain(Y, cfg, init)
    b11 = store.column("beta_1_1")
    assert stats.kstest(b11**2, stats.chi2(k).cdf).statistic < ks_crit(b11.size, 10**12)
    b22 = store.column("beta_2_2")
    assert stats.kstest(b22**2, stats.chi2(k - 1).cdf).statistic < ks_crit(b22.size, 10**12)


@pytest.mark.slow
def test_stationarity_independent_of_start():
    # two very different starts give the same stationary law
    from factorgibbs.study import batch_means_ess, ks_critical_value

    Y, beta, omega2, _ = _small_problem(n=60, m=5, k=2, seed=12)
    spec = PriorSpec()
    far = ChainState(np.tril(np.full((5, 2), 3.0)), np.full(5, 5.0), np.zeros((60, 2)))
    near = ChainState(beta.copy(), omega2.copy(), np.zeros((60, 2)))
    cfg = GibbsConfig(prior=spec, burn_in=1000, iterations=20_000, seed=4)
    a = run_chain(Y, cfg, far)
    b = run_chain(Y, gibbs.with_seed(cfg, chain_index=1), near)
    for j in range(5):
        x, y = a.draws[:, j], b.draws[:, j]
        d = stats.ks_2samp(x, y).statistic
        assert d < ks_critical_value(batch_means_ess(x), batch_means_ess(y), 0.01), j
