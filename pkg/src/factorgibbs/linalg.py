"""Small dense linear-algebra kernel.

Every routine accepts optional leading batch dimensions, so a stack of small
systems (one per loading row, or one per Monte Carlo replicate) is handled in
one call.  The factorizations are written out by hand as scalar loops and
compiled with numba; the systems are tiny (dimension <= 15) and the Gibbs
sampler calls them hundreds of thousands of times, so per-call overhead
matters more than asymptotic speed.
"""

from __future__ import annotations

import numba
import numpy as np

from .errors import NotPositiveDefinite, RankDeficient

__all__ = [
    "cholesky",
    "solve_lower",
    "solve_upper",
    "cho_solve",
    "cho_inverse",
    "lq_decompose",
    "mvn_sample",
    "mvn_sample_precision",
    "gaussian_condition",
]

RANK_TOL = 1e-12

_jit = numba.njit(cache=True, nogil=True)


@_jit
def _chol_batch(a):
    nb, n, _ = a.shape
    g = np.zeros_like(a)
    for b in range(nb):
        for j in range(n):
            s = a[b, j, j]
            for p in range(j):
                s -= g[b, j, p] * g[b, j, p]
            if not s > 0.0:
                return g, b, j
            d = np.sqrt(s)
            g[b, j, j] = d
            for i in range(j + 1, n):
                s = a[b, i, j]
                for p in range(j):
                    s -= g[b, i, p] * g[b, j, p]
                g[b, i, j] = s / d
    return g, -1, -1


@_jit
def _lower_solve_batch(g, rhs):
    nb, n, r = rhs.shape
    x = np.empty_like(rhs)
    for b in range(nb):
        for c in range(r):
            for i in range(n):
                s = rhs[b, i, c]
                for p in range(i):
                    s -= g[b, i, p] * x[b, p, c]
                x[b, i, c] = s / g[b, i, i]
    return x


@_jit
def _upper_solve_batch(u, rhs):
    nb, n, r = rhs.shape
    x = np.empty_like(rhs)
    for b in range(nb):
        for c in range(r):
            for i in range(n - 1, -1, -1):
                s = rhs[b, i, c]
                for p in range(i + 1, n):
                    s -= u[b, i, p] * x[b, p, c]
                x[b, i, c] = s / u[b, i, i]
    return x


@_jit
def _lq_batch(bmat):
    # Householder QR of each b.T; returns (l, q) with b = l q before sign fixing
    nb, m, k = bmat.shape
    l = np.zeros((nb, m, k))
    q = np.zeros((nb, k, k))
    r = np.empty((k, m))
    qacc = np.empty((k, k))
    v = np.empty(k)
    for b in range(nb):
        for i in range(k):
            for c in range(m):
                r[i, c] = bmat[b, c, i]
            for c in range(k):
                qacc[i, c] = 1.0 if i == c else 0.0
        for j in range(k):
            norm = 0.0
            for i in range(j, k):
                norm += r[i, j] * r[i, j]
            norm = np.sqrt(norm)
            for i in range(j, k):
                v[i] = r[i, j]
            v[j] += norm if r[j, j] >= 0.0 else -norm
            vn = 0.0
            for i in range(j, k):
                vn += v[i] * v[i]
            if vn == 0.0:
                continue
            scale = 2.0 / vn
            for c in range(m):
                s = 0.0
                for i in range(j, k):
                    s += v[i] * r[i, c]
                s *= scale
                for i in range(j, k):
                    r[i, c] -= s * v[i]
            for rr in range(k):
                s = 0.0
                for i in range(j, k):
                    s += qacc[rr, i] * v[i]
                s *= scale
                for i in range(j, k):
                    qacc[rr, i] -= s * v[i]
        for i in range(m):
            for j in range(min(i + 1, k)):
                l[b, i, j] = r[j, i]
        for i in range(k):
            for c in range(k):
                q[b, i, c] = qacc[c, i]
    return l, q


def _flatten(a: np.ndarray, core: int) -> tuple[np.ndarray, tuple]:
    lead = a.shape[: a.ndim - core]
    return np.ascontiguousarray(a.reshape((-1,) + a.shape[a.ndim - core :])), lead


def cholesky(a) -> np.ndarray:
    """Lower Cholesky factor ``g`` with ``g @ g.T == a``.

    ``a`` may carry leading batch dimensions ``(..., n, n)``.  Only the lower
    triangle of ``a`` is read.  Raises :class:`NotPositiveDefinite` if any
    pivot is not strictly positive; no jitter is ever added here.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    flat, lead = _flatten(a, 2)
    g, bad, col = _chol_batch(flat)
    if bad >= 0:
        raise NotPositiveDefinite(f"non-positive pivot at column {col} (batch item {bad})")
    return g.reshape(a.shape)


def _solve(kernel, t, b):
    t = np.asarray(t, dtype=float)
    b = np.asarray(b, dtype=float)
    vec = b.ndim < t.ndim  # b is a (batch of) vector(s) iff it has one dimension fewer than t
    rhs = b[..., None] if vec else b
    if t.ndim == 2 and rhs.ndim == 2:
        x = kernel(np.ascontiguousarray(t)[None], np.ascontiguousarray(rhs)[None])[0]
        return x[..., 0] if vec else x
    lead = np.broadcast_shapes(t.shape[:-2], rhs.shape[:-2])
    if t.shape[:-2] != lead:
        t = np.broadcast_to(t, lead + t.shape[-2:])
    if rhs.shape[:-2] != lead:
        rhs = np.broadcast_to(rhs, lead + rhs.shape[-2:])
    tf = np.ascontiguousarray(t.reshape((-1,) + t.shape[-2:]))
    rf = np.ascontiguousarray(rhs.reshape((-1,) + rhs.shape[-2:]))
    x = kernel(tf, rf).reshape(lead + rhs.shape[-2:])
    return x[..., 0] if vec else x


def solve_lower(g, b) -> np.ndarray:
    """Solve ``g x = b`` by forward substitution (``g`` lower triangular).

    ``b`` is a vector ``(..., n)`` when it has one dimension fewer than ``g``,
    otherwise a matrix ``(..., n, r)``.
    """
    return _solve(_lower_solve_batch, g, b)


def solve_upper(u, b) -> np.ndarray:
    """Solve ``u x = b`` by back substitution (``u`` upper triangular)."""
    return _solve(_upper_solve_batch, u, b)


def cho_solve(g, b) -> np.ndarray:
    """Solve ``a x = b`` given the Cholesky factor ``g`` of ``a``."""
    return solve_upper(np.swapaxes(g, -1, -2), solve_lower(g, b))


def cho_inverse(g) -> np.ndarray:
    """Inverse of ``a = g g'`` via two triangular solves, symmetrised."""
    g = np.asarray(g, dtype=float)
    eye = np.eye(g.shape[-1])
    if g.ndim > 2:
        eye = np.broadcast_to(eye, g.shape)
    inv = cho_solve(g, eye)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def lq_decompose(b) -> tuple[np.ndarray, np.ndarray]:
    """LQ decomposition ``b = l @ q`` of an ``m x k`` matrix with ``m >= k``.

    ``l`` is ``m x k`` lower triangular with a strictly positive diagonal and
    ``q`` is ``k x k`` orthogonal.  Computed as a Householder QR of ``b.T``
    followed by transposition; signs are fixed by flipping rows of ``q``, which
    makes the pair unique.  Leading batch dimensions are supported.

    Raises :class:`RankDeficient` when a diagonal pivot is smaller than
    ``1e-12`` times the largest column norm of ``b``.
    """
    b = np.asarray(b, dtype=float)
    m, k = b.shape[-2:]
    if m < k:
        raise ValueError(f"lq_decompose needs m >= k, got {m}x{k}")
    flat, lead = _flatten(b, 2)
    l, q = _lq_batch(flat)
    diag = np.diagonal(l, axis1=-2, axis2=-1)
    colnorm = np.sqrt((flat * flat).sum(axis=-2)).max(axis=-1)
    if np.any(colnorm == 0.0) or np.any(np.abs(diag) < RANK_TOL * colnorm[:, None]):
        raise RankDeficient("columns are numerically linearly dependent")
    signs = np.where(diag < 0.0, -1.0, 1.0)
    l *= signs[:, None, :]
    q *= signs[:, :, None]
    return l.reshape(lead + (m, k)), q.reshape(lead + (k, k))


def mvn_sample(mean, cov_chol, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mean + cov_chol @ z`` with ``z`` standard normal.

    With ``size`` given, returns an array of shape ``(size, d)``.
    """
    mean = np.asarray(mean, dtype=float)
    cov_chol = np.asarray(cov_chol, dtype=float)
    d = mean.shape[-1]
    if size is None:
        return mean + cov_chol @ rng.standard_normal(d)
    z = rng.standard_normal((size, d))
    return mean + z @ cov_chol.T


def mvn_sample_precision(mean, prec_chol, rng: np.random.Generator) -> np.ndarray:
    """Draw from ``N(mean, (g g')^{-1})`` where ``g`` is the precision's Cholesky factor.

    The covariance square root is ``g'^{-1}``, so the draw is
    ``mean + solve(g', z)``.  Batched over leading dimensions of ``mean``.
    """
    mean = np.asarray(mean, dtype=float)
    z = rng.standard_normal(mean.shape)
    return mean + solve_upper(np.swapaxes(prec_chol, -1, -2), z)


def gaussian_condition(mean, cov, value: float) -> tuple[np.ndarray, np.ndarray]:
    """Law of the first ``d-1`` coordinates of ``N(mean, cov)`` given the last equals ``value``.

    Returns ``(cond_mean, cond_cov)``.  Raises :class:`NotPositiveDefinite` if
    the conditional covariance does not factor.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = mean.shape[0]
    if d < 2:
        raise ValueError("gaussian_condition needs dimension >= 2")
    s12 = cov[:-1, -1]
    s22 = cov[-1, -1]
    cond_mean = mean[:-1] + s12 * (value - mean[-1]) / s22
    cond_cov = cov[:-1, :-1] - np.outer(s12, s12) / s22
    cond_cov = 0.5 * (cond_cov + cond_cov.T)
    cholesky(cond_cov)
    return cond_mean, cond_cov
