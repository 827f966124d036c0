"""Priors on the lower-triangular loading matrix and on the uniquenesses.

Two loading priors are supported:

* ``standard``: off-diagonal loadings iid N(0, c0) and diagonal loadings
  half-normal TN(0, c0).
* ``order-invariant``: the law of the L factor in the LQ decomposition of a
  spherical N(0, c0) m x k matrix.  Off-diagonals are unchanged; the i-th
  diagonal loading has density proportional to x^(k-i) exp(-x^2 / (2 c0)),
  i.e. beta_ii^2 / c0 is chi-square with k - i + 1 degrees of freedom.

Uniquenesses are iid inverse gamma IG(nu/2, nu s2 / 2) under both, with
IG(a, b) having density proportional to x^(-a-1) exp(-b/x).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ConfigError, DomainError

__all__ = [
    "PriorFamily",
    "PriorSpec",
    "ModelDims",
    "truncated_normal",
    "inverse_gamma",
    "log_prior_loadings",
    "sample_loadings_prior",
    "sample_uniquenesses_prior",
    "gram_diag_df",
    "diag_powers",
]


class PriorFamily(str, enum.Enum):
    STANDARD = "standard"
    ORDER_INVARIANT = "order-invariant"


@dataclass(frozen=True)
class PriorSpec:
    """Prior family plus hyperparameters (defaults are the replication values)."""

    family: PriorFamily = PriorFamily.ORDER_INVARIANT
    c0: float = 1.0
    nu: float = 2.2
    s2: float = 0.1 / 2.2

    def __post_init__(self):
        object.__setattr__(self, "family", PriorFamily(self.family))
        for name in ("c0", "nu", "s2"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be positive, got {value!r}")


@dataclass(frozen=True)
class ModelDims:
    m: int
    k: int
    n: int = 1

    def __post_init__(self):
        if not 1 <= self.k <= self.m:
            raise ConfigError(f"need 1 <= k <= m, got m={self.m}, k={self.k}")
        if self.n < 1:
            raise ConfigError(f"need n >= 1, got {self.n}")


def diag_powers(family: PriorFamily | str, k: int) -> np.ndarray:
    """Exponent of beta_ii in the prior density for rows i = 1..k."""
    if PriorFamily(family) is PriorFamily.STANDARD:
        return np.zeros(k, dtype=int)
    return k - np.arange(1, k + 1)


def truncated_normal(mean, sd, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw from N(mean, sd^2) restricted to (0, inf) by inverse CDF.

    Works in log space, so a mean many standard deviations below zero is
    still handled exactly.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    shape = np.broadcast_shapes(mean.shape, sd.shape) if size is None else size
    u = rng.random(shape)
    lower = -mean / sd
    # Z | Z > lower: P(Z > z) = u * P(Z > lower)
    log_tail = special.log_ndtr(-lower) + np.log1p(-u)
    z = -special.ndtri_exp(log_tail)
    return np.maximum(mean + sd * z, np.finfo(float).tiny)


def inverse_gamma(shape, rate, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw from IG(shape, rate) as ``rate / Gamma(shape, 1)``."""
    return np.asarray(rate, dtype=float) / rng.gamma(shape, 1.0, size=size)


def log_prior_loadings(beta, spec: PriorSpec, dims: ModelDims) -> float:
    """Log prior density of a lower-triangular loading matrix, up to a constant.

    Raises :class:`DomainError` if a diagonal loading is not strictly positive.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dims.m, dims.k):
        raise DomainError(f"beta has shape {beta.shape}, expected {(dims.m, dims.k)}")
    diag = np.diagonal(beta)
    if np.any(diag <= 0.0):
        raise DomainError("diagonal loadings must be strictly positive")
    if np.any(np.triu(beta, 1) != 0.0):
        raise DomainError("beta must be lower triangular")
    value = -0.5 * float(np.sum(np.tril(beta) ** 2)) / spec.c0
    powers = diag_powers(spec.family, dims.k)
    return value + float(np.sum(powers * np.log(diag)))


def sample_loadings_prior(spec: PriorSpec, dims: ModelDims, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw lower-triangular loading matrices from the prior.

    Returns shape ``(m, k)``, or ``(size, m, k)`` when ``size`` is given.
    """
    m, k = dims.m, dims.k
    lead = () if size is None else (size,)
    sd = np.sqrt(spec.c0)
    beta = np.tril(rng.normal(0.0, sd, lead + (m, k)), -1)
    if PriorFamily(spec.family) is PriorFamily.STANDARD:
        diag = truncated_normal(0.0, sd, rng, size=lead + (k,))
    else:
        df = k - np.arange(k)  # k - i + 1 for i = 1..k
        diag = np.sqrt(spec.c0 * rng.chisquare(df, size=lead + (k,)))
    idx = np.arange(k)
    beta[..., idx, idx] = diag
    return beta


def sample_uniquenesses_prior(spec: PriorSpec, dims: ModelDims, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw the m uniquenesses iid from IG(nu/2, nu s2/2)."""
    shape = (dims.m,) if size is None else (size, dims.m)
    return inverse_gamma(spec.nu / 2.0, spec.nu * spec.s2 / 2.0, rng, size=shape)


def gram_diag_df(family: PriorFamily | str, i: int, k: int) -> int:
    """Chi-square degrees of freedom of (beta beta')_ii / c0 under ``family`` (1-based ``i``)."""
    if i < 1:
        raise ValueError("i is 1-based")
    if PriorFamily(family) is PriorFamily.STANDARD:
        return min(i, k)
    return k
