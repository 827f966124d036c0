import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from factorgibbs import linalg
from factorgibbs.errors import NotPositiveDefinite, RankDeficient


def test_cholesky_identity():
    np.testing.assert_array_equal(linalg.cholesky(np.eye(3)), np.eye(3))


def test_cholesky_2x2():
    np.testing.assert_allclose(linalg.cholesky([[4.0, 2.0], [2.0, 5.0]]), [[2.0, 0.0], [1.0, 2.0]], atol=1e-15)


def test_cholesky_paper_sigma(paper_truth):
    sigma = paper_truth.sigma
    g = linalg.cholesky(sigma)
    assert np.max(np.abs(g @ g.T - sigma)) < 1e-10
    assert np.all(np.triu(g, 1) == 0)


def test_cholesky_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        linalg.cholesky([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefinite):
        linalg.cholesky(np.zeros((2, 2)))


def test_cholesky_batched(rng):
    a = rng.standard_normal((5, 7, 4, 4))
    a = a @ np.swapaxes(a, -1, -2) + np.eye(4)
    g = linalg.cholesky(a)
    assert g.shape == a.shape
    np.testing.assert_allclose(g @ np.swapaxes(g, -1, -2), a, rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(-3, 3)), st.floats(1e-3, 10))
def test_cholesky_reconstructs_spd(x, ridge):
    a = x @ x.T + ridge * np.eye(6)
    g = linalg.cholesky(a)
    assert np.linalg.norm(g @ g.T - a) <= 1e-10 * np.linalg.norm(a)


def test_triangular_solves(rng):
    g = np.tril(rng.standard_normal((5, 5))) + 5 * np.eye(5)
    b = rng.standard_normal(5)
    np.testing.assert_allclose(g @ linalg.solve_lower(g, b), b, atol=1e-12)
    np.testing.assert_allclose(g.T @ linalg.solve_upper(g.T, b), b, atol=1e-12)
    B = rng.standard_normal((5, 3))
    np.testing.assert_allclose(g @ linalg.solve_lower(g, B), B, atol=1e-12)
    a = g @ g.T
    np.testing.assert_allclose(a @ linalg.cho_solve(g, b), b, atol=1e-10)
    np.testing.assert_allclose(linalg.cho_inverse(g) @ a, np.eye(5), atol=1e-10)


def test_lq_fixed_point():
    b = np.array([[2.0, 0.0, 0.0], [0.5, 1.0, 0.0], [-1.0, 0.3, 0.7], [0.2, 0.2, 0.2]])
    l, q = linalg.lq_decompose(b)
    np.testing.assert_allclose(l, b, atol=1e-14)
    np.testing.assert_allclose(q, np.eye(3), atol=1e-14)


def test_lq_small_example():
    b = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    l, q = linalg.lq_decompose(b)
    np.testing.assert_allclose(l @ q, b, atol=1e-12)
    np.testing.assert_allclose(q.T @ q, np.eye(2), atol=1e-12)
    assert l[0, 1] == 0.0 and np.all(np.diag(l) > 0)


def test_lq_rank_deficient():
    with pytest.raises(RankDeficient):
        linalg.lq_decompose(np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]))
    with pytest.raises(RankDeficient):
        linalg.lq_decompose(np.zeros((3, 2)))


@pytest.mark.parametrize("shape", [(3, 3), (5, 3), (15, 3), (15, 6)])
def test_lq_round_trip_1000(shape, rng):
    m, k = shape
    b = rng.standard_normal((1000, m, k))
    l, q = linalg.lq_decompose(b)
    scale = np.linalg.norm(b, axis=(1, 2))
    assert np.all(np.linalg.norm(l @ q - b, axis=(1, 2)) <= 1e-10 * scale)
    assert np.all(np.abs(np.swapaxes(q, 1, 2) @ q - np.eye(k)) <= 1e-10)
    assert np.all(np.diagonal(l, axis1=1, axis2=2) > 0)
    assert np.all(np.triu(l[:, :k, :], 1) == 0)


def test_lq_uniqueness(rng):
    b = rng.standard_normal((15, 6))
    l1, q1 = linalg.lq_decompose(b)
    # a second, independent route: LQ of (b R') recovers the same L, with Q R
    r, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    l2, q2 = linalg.lq_decompose(b @ r)
    np.testing.assert_allclose(l2, l1, atol=1e-10)
    l3, q3 = linalg.lq_decompose(b.copy())
    np.testing.assert_allclose(l3, l1, atol=1e-10)
    np.testing.assert_allclose(q3, q1, atol=1e-10)


def test_lq_spherical_moments():
    # spherical normal 5 x 3: L_ii^2 ~ chi2_{k-i+1}, L_ij ~ N(0,1), entries uncorrelated
    rng = np.random.default_rng(1)
    n, m, k = 100_000, 5, 3
    l, q = linalg.lq_decompose(rng.standard_normal((n, m, k)))
    for i in range(k):
        x = l[:, i, i] ** 2
        df = k - i
        assert abs(x.mean() - df) <= 3 * math.sqrt(2 * df / n)
    rows, cols = np.tril_indices(m, -1, k)
    entries = [l[:, i, j] for i, j in zip(rows, cols)]
    for x in entries:
        assert abs(x.mean()) <= 3 / math.sqrt(n)
        assert abs((x**2).mean() - 1) <= 3 * math.sqrt(2 / n)
    allents = np.column_stack([l[:, i, j] for i, j in zip(*np.tril_indices(m, 0, k))])
    corr = np.corrcoef(allents, rowvar=False)
    off = corr[np.triu_indices_from(corr, 1)]
    assert np.all(np.abs(off) <= 3 / math.sqrt(n))


def test_lq_chi2_mean_with_c0():
    rng = np.random.default_rng(2)
    c0 = 2.5
    l, _ = linalg.lq_decompose(rng.normal(0, math.sqrt(c0), (100_000, 5, 3)))
    assert abs((l[:, 0, 0] ** 2 / c0).mean() - 3) < 0.05


def test_mvn_sample_standard():
    g = np.eye(3)
    a = linalg.mvn_sample(np.zeros(3), g, np.random.default_rng(5))
    b = linalg.mvn_sample(np.zeros(3), g, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    draws = linalg.mvn_sample(np.zeros(3), g, np.random.default_rng(6), size=1_000_000)
    assert np.max(np.abs(np.cov(draws, rowvar=False) - np.eye(3))) < 0.01


def test_mvn_sample_row_conditional_mean(rng):
    n, k = 40, 3
    F = rng.standard_normal((n, k))
    y = F @ np.array([0.5, -1.0, 2.0]) + rng.standard_normal(n) * 0.7
    omega2, c0 = 0.49, 1.0
    prec = np.eye(k) / c0 + F.T @ F / omega2
    cov = np.linalg.inv(prec)
    mean = cov @ F.T @ y / omega2
    draws = linalg.mvn_sample(mean, linalg.cholesky(cov), rng, size=100_000)
    se = np.sqrt(np.diag(cov) / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 3 * se)
    pdraws = np.array([linalg.mvn_sample_precision(mean, linalg.cholesky(prec), rng) for _ in range(20_000)])
    assert np.all(np.abs(pdraws.mean(axis=0) - mean) <= 3 * np.sqrt(np.diag(cov) / 20_000))
    np.testing.assert_allclose(np.cov(pdraws, rowvar=False), cov, atol=0.05 * np.max(np.diag(cov)))


def test_gaussian_condition_diagonal():
    mean = np.array([1.0, 2.0, 3.0])
    cov = np.diag([1.0, 2.0, 3.0])
    cm, cc = linalg.gaussian_condition(mean, cov, 10.0)
    np.testing.assert_allclose(cm, mean[:2])
    np.testing.assert_allclose(cc, cov[:2, :2])


@pytest.mark.parametrize("rho,v", [(0.5, 1.0), (-0.8, 2.0), (0.0, -3.0)])
def test_gaussian_condition_bivariate(rho, v):
    cm, cc = linalg.gaussian_condition(np.zeros(2), np.array([[1.0, rho], [rho, 1.0]]), v)
    assert cm[0] == pytest.approx(rho * v)
    assert cc[0, 0] == pytest.approx(1 - rho**2)


def test_gaussian_condition_singular():
    with pytest.raises(NotPositiveDefinite):
        linalg.gaussian_condition(np.zeros(2), np.ones((2, 2)), 0.0)
    with pytest.raises(ValueError):
        linalg.gaussian_condition(np.zeros(1), np.eye(1), 0.0)


def test_gaussian_condition_monte_carlo():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 4))
    cov = x @ x.T + np.eye(4)
    mean = np.array([0.5, -1.0, 2.0, 0.0])
    draws = linalg.mvn_sample(mean, linalg.cholesky(cov), rng, size=2_000_000)
    sd4 = math.sqrt(cov[3, 3])
    for v in (-sd4, 0.0, 0.7 * sd4):
        sel = draws[np.abs(draws[:, 3] - v) < 0.02 * sd4]
        cm, cc = linalg.gaussian_condition(mean, cov, float(sel[:, 3].mean()))
        se = np.sqrt(np.diag(cc) / sel.shape[0])
        assert np.all(np.abs(sel[:, :3].mean(axis=0) - cm) <= 3 * se + 0.02 * sd4 * np.abs(cov[:3, 3]) / cov[3, 3])
