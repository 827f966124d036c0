"""Gibbs sampler for the lower-triangular factor model.

One sweep updates, in this fixed order, the latent factors F, the
uniquenesses omega2 and then the loading rows 1..m.  Rows i <= k carry the
extra beta_ii^power factor of the prior (power = k - i under the
order-invariant prior, 0 under the standard prior); rows i > k are plain
multivariate normal.

Random streams: every chain uses a PCG64 generator seeded from
``SeedSequence(seed, spawn_key=(chain_index,))``, so chains indexed 0, 1, ...
are independent and reproducible regardless of how they are scheduled.
"""

from __future__ import annotations

import enum
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import linalg
from .ars import DiagConditional, sample_diag_conditional
from .errors import DimensionMismatch, FactorGibbsError, NotPositiveDefinite
from .priors import PriorSpec, diag_powers, inverse_gamma

__all__ = [
    "StoreMode",
    "ChainState",
    "GibbsConfig",
    "DrawStore",
    "make_rng",
    "sample_factors",
    "factor_posterior_mean",
    "init_from_prior",
    "sample_uniquenesses",
    "row_posterior",
    "sample_loading_row_head",
    "sample_loading_row_tail",
    "gibbs_sweep",
    "run_chain",
    "sigma_diag",
]

log = logging.getLogger(__name__)

JITTER = 1e-10


class StoreMode(str, enum.Enum):
    SIGMA_DIAG = "sigma-diag"
    FULL_SIGMA = "full-sigma"
    BETA_OMEGA = "beta-omega"


def make_rng(seed: int, chain_index: int = 0) -> np.random.Generator:
    """Independent, reproducible stream for chain ``chain_index`` of run ``seed``."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(chain_index),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class ChainState:
    beta: np.ndarray
    omega2: np.ndarray
    factors: np.ndarray
    iteration: int = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        m, k = self.beta.shape
        return m, k, self.factors.shape[0]

    def check(self) -> None:
        """Raise ``AssertionError`` if the identification constraints are violated."""
        b = self.beta
        k = b.shape[1]
        assert np.all(np.triu(b[:k], 1) == 0.0), "beta not lower triangular"
        assert np.all(np.diagonal(b) > 0.0), "beta diagonal not positive"
        assert np.all(self.omega2 > 0.0), "non-positive uniqueness"
        assert np.all(np.isfinite(b)) and np.all(np.isfinite(self.omega2))

    def copy(self) -> "ChainState":
        return ChainState(self.beta.copy(), self.omega2.copy(), self.factors.copy(), self.iteration)


@dataclass(frozen=True)
class GibbsConfig:
    prior: PriorSpec = field(default_factory=PriorSpec)
    burn_in: int = 0
    iterations: int = 1
    thin: int = 1
    seed: int = 0
    store: StoreMode = StoreMode.SIGMA_DIAG
    chain_index: int = 0

    def __post_init__(self):
        from .errors import ConfigError

        object.__setattr__(self, "store", StoreMode(self.store))
        if self.burn_in < 0:
            raise ConfigError("burn_in must be nonnegative")
        if self.iterations < 1 or self.thin < 1:
            raise ConfigError("iterations and thin must be positive")
        if self.iterations < self.thin:
            raise ConfigError("iterations must be at least thin")


@dataclass
class DrawStore:
    columns: list[str]
    draws: np.ndarray
    iterations: np.ndarray
    dims: tuple[int, int, int]
    truncated: bool = False
    error: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.columns.index(name)]

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(["iteration"] + self.columns) + "\n")
            for it, row in zip(self.iterations, self.draws):
                fh.write(str(int(it)) + "," + ",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, dims=(0, 0, 0)) -> "DrawStore":
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(header[1:], data[:, 1:], data[:, 0].astype(int), tuple(dims))

    def write_metadata(self, path, config: GibbsConfig, extra: dict | None = None) -> None:
        """Plain-text ``key = value`` sidecar describing how the draws were made."""
        m, k, n = self.dims
        items = {
            "prior": config.prior.family.value,
            "c0": repr(config.prior.c0),
            "nu": repr(config.prior.nu),
            "s2": repr(config.prior.s2),
            "burn_in": config.burn_in,
            "iterations": config.iterations,
            "thin": config.thin,
            "seed": config.seed,
            "chain_index": config.chain_index,
            "store": config.store.value,
            "m": m,
            "k": k,
            "n": n,
            "stored": len(self),
            "truncated": str(self.truncated).lower(),
            "rng": "numpy PCG64 via SeedSequence(seed, spawn_key=(chain_index,)), numpy " + np.__version__,
        }
        if self.error:
            items["error"] = self.error
        items.update(extra or {})
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for key, value in items.items():
                fh.write(f"{key} = {value}\n")


def _check_dims(beta, omega2, Y) -> None:
    m, _ = beta.shape
    if omega2.shape != (m,) or Y.shape[1] != m:
        raise DimensionMismatch(f"beta {beta.shape}, omega2 {omega2.shape}, Y {Y.shape} disagree")


def _chol_with_jitter(prec):
    try:
        return linalg.cholesky(prec)
    except NotPositiveDefinite:
        d = prec.shape[-1]
        ridge = JITTER * np.trace(prec, axis1=-2, axis2=-1)
        log.warning("precision not positive definite; retrying with ridge %g", float(np.max(ridge)))
        return linalg.cholesky(prec + np.asarray(ridge)[..., None, None] * np.eye(d))


def sample_factors(beta, omega2, Y, rng: np.random.Generator) -> np.ndarray:
    """Draw all rows of F from their conditionally independent normal laws.

    Posterior precision ``I + beta' Omega^-1 beta`` is factored once.
    """
    beta = np.asarray(beta, dtype=float)
    omega2 = np.asarray(omega2, dtype=float)
    Y = np.asarray(Y, dtype=float)
    _check_dims(beta, omega2, Y)
    k = beta.shape[1]
    bw = beta / omega2[:, None]  # Omega^-1 beta
    prec = np.eye(k) + beta.T @ bw
    g = linalg.cholesky(prec)
    mean = linalg.cho_solve(g, (Y @ bw).T).T  # (n, k)
    z = rng.standard_normal(mean.shape)
    return mean + linalg.solve_upper(g.T, z.T).T


def factor_posterior_mean(beta, omega2, Y) -> np.ndarray:
    """Conditional mean of F given (beta, omega2, Y)."""
    beta = np.asarray(beta, dtype=float)
    omega2 = np.asarray(omega2, dtype=float)
    Y = np.asarray(Y, dtype=float)
    bw = beta / omega2[:, None]
    g = linalg.cholesky(np.eye(beta.shape[1]) + beta.T @ bw)
    return linalg.cho_solve(g, (Y @ bw).T).T


def init_from_prior(Y, k: int, spec: PriorSpec, seed: int, chain_index: int = 0) -> ChainState:
    """Starting state drawn from the prior, with factors at their conditional mean.

    Uses a stream distinct from the chain's own (spawn key offset by 2**32).
    """
    from .priors import ModelDims, sample_loadings_prior, sample_uniquenesses_prior

    Y = np.asarray(Y, dtype=float)
    n, m = Y.shape
    rng = make_rng(seed, chain_index + 2**32)
    dims = ModelDims(m, k, max(n, 1))
    beta = sample_loadings_prior(spec, dims, rng)
    omega2 = sample_uniquenesses_prior(spec, dims, rng)
    return ChainState(beta, omega2, factor_posterior_mean(beta, omega2, Y))


def sample_uniquenesses(beta, F, Y, spec: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw omega2_i ~ IG((nu + n)/2, (nu s2 + d_i)/2) for every variable."""
    beta = np.asarray(beta, dtype=float)
    F = np.asarray(F, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    resid = Y - F @ beta.T
    d = np.einsum("ti,ti->i", resid, resid)
    return inverse_gamma((spec.nu + n) / 2.0, (spec.nu * spec.s2 + d) / 2.0, rng, size=d.shape)


def row_posterior(omega2_i, FtF, FtY, c0):
    """Precision Cholesky factor and mean of the Gaussian part of a row conditional.

    ``FtF`` is ``F_i' F_i`` (or a stack of them), ``FtY`` is ``F_i' Y_i``.
    Returns ``(g, mean)`` with ``g g' = I/c0 + F_i'F_i/omega2_i``.
    """
    omega2_i = np.asarray(omega2_i, dtype=float)
    d = FtF.shape[-1]
    prec = np.eye(d) / c0 + FtF / omega2_i[..., None, None]
    g = _chol_with_jitter(prec)
    mean = linalg.cho_solve(g, FtY / omega2_i[..., None])
    return g, mean


def sample_loading_row_head(i: int, omega2_i: float, F, y_col, spec: PriorSpec, rng: np.random.Generator,
                            power: int | None = None, _moments=None) -> np.ndarray:
    """Draw (beta_i1, ..., beta_ii) for a row i <= k (1-based).

    The diagonal entry is drawn first from its marginal
    x^power exp(-(x-a)^2/(2b^2)) on x > 0, with a and b^2 the last entry of the
    Gaussian mean and covariance; the other entries then follow from the
    Gaussian conditional given it.  ``power`` defaults to the prior family's
    exponent k - i (order-invariant) or 0 (standard).
    """
    F = np.asarray(F, dtype=float)
    k = F.shape[1]
    if not 1 <= i <= k:
        raise ValueError(f"head rows need 1 <= i <= k, got i={i}, k={k}")
    if power is None:
        power = int(diag_powers(spec.family, k)[i - 1])
    if _moments is None:
        Fi = F[:, :i]
        g, mean = row_posterior(np.float64(omega2_i), Fi.T @ Fi, Fi.T @ np.asarray(y_col, dtype=float), spec.c0)
    else:
        g, mean = _moments
    cov = linalg.cho_inverse(g)
    diag = sample_diag_conditional(DiagConditional(float(mean[-1]), math.sqrt(cov[-1, -1]), power), rng)
    row = np.empty(i)
    row[-1] = diag
    if i > 1:
        cmean, ccov = linalg.gaussian_condition(mean, cov, diag)
        row[:-1] = linalg.mvn_sample(cmean, linalg.cholesky(ccov), rng)
    return row


def sample_loading_row_tail(i: int, omega2_i: float, F, y_col, spec: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    """Exact normal draw of the full k-vector of loadings for a row i > k."""
    F = np.asarray(F, dtype=float)
    if i <= F.shape[1]:
        raise ValueError("tail rows need i > k")
    g, mean = row_posterior(np.float64(omega2_i), F.T @ F, F.T @ np.asarray(y_col, dtype=float), spec.c0)
    return linalg.mvn_sample_precision(mean, g, rng)


def gibbs_sweep(state: ChainState, Y, config: GibbsConfig, rng: np.random.Generator) -> ChainState:
    """One scan F -> omega2 -> beta rows 1..m; returns a new state."""
    Y = np.asarray(Y, dtype=float)
    spec = config.prior
    beta = state.beta
    m, k = beta.shape
    F = sample_factors(beta, state.omega2, Y, rng)
    omega2 = sample_uniquenesses(beta, F, Y, spec, rng)
    FtF = F.T @ F
    FtY = F.T @ Y  # (k, m)
    new_beta = np.zeros_like(beta)
    powers = diag_powers(spec.family, k)
    for i in range(1, k + 1):
        moments = row_posterior(omega2[i - 1 : i], FtF[:i, :i][None], FtY[:i, i - 1][None], spec.c0)
        moments = (moments[0][0], moments[1][0])
        new_beta[i - 1, :i] = sample_loading_row_head(
            i, omega2[i - 1], F, None, spec, rng, power=int(powers[i - 1]), _moments=moments
        )
    if m > k:
        g, mean = row_posterior(omega2[k:], np.broadcast_to(FtF, (m - k, k, k)), FtY[:, k:].T, spec.c0)
        new_beta[k:] = linalg.mvn_sample_precision(mean, g, rng)
    return ChainState(new_beta, omega2, F, state.iteration + 1)


def sigma_diag(beta, omega2) -> np.ndarray:
    return omega2 + np.einsum("ij,ij->i", beta, beta)


def _columns(mode: StoreMode, m: int, k: int) -> list[str]:
    if mode is StoreMode.SIGMA_DIAG:
        return [f"sigma_{i}_{i}" for i in range(1, m + 1)]
    if mode is StoreMode.FULL_SIGMA:
        return [f"sigma_{i}_{j}" for i in range(1, m + 1) for j in range(i, m + 1)]
    cols = [f"beta_{i}_{j}" for i in range(1, m + 1) for j in range(1, min(i, k) + 1)]
    return cols + [f"omega2_{i}" for i in range(1, m + 1)]


def _record(mode: StoreMode, state: ChainState) -> np.ndarray:
    beta, omega2 = state.beta, state.omega2
    if mode is StoreMode.SIGMA_DIAG:
        return sigma_diag(beta, omega2)
    if mode is StoreMode.FULL_SIGMA:
        sigma = beta @ beta.T + np.diag(omega2)
        return sigma[np.triu_indices(sigma.shape[0])]
    m, k = beta.shape
    rows, cols = np.tril_indices(m, 0, k)
    return np.concatenate([beta[rows, cols], omega2])


def run_chain(Y, config: GibbsConfig, init: ChainState, check: bool = False) -> DrawStore:
    """Burn in, then run ``config.iterations`` sweeps keeping every ``thin``-th state.

    A numerical failure mid-run does not raise: the draws stored so far are
    returned with ``truncated=True`` and the error message attached.
    """
    Y = np.asarray(Y, dtype=float)
    m, k = init.beta.shape
    n = Y.shape[0]
    _check_dims(init.beta, init.omega2, Y)
    if n < k:
        warnings.warn(f"n={n} < k={k}: the posterior is proper only through the prior", stacklevel=2)
    rng = make_rng(config.seed, config.chain_index)
    mode = config.store
    cols = _columns(mode, m, k)
    n_keep = config.iterations // config.thin
    draws = np.empty((n_keep, len(cols)))
    its = np.empty(n_keep, dtype=np.int64)
    state = init.copy()
    state.iteration = 0
    if check:
        state.check()
    stored = 0
    error = None
    start = time.perf_counter()
    try:
        for _ in range(config.burn_in):
            state = gibbs_sweep(state, Y, config, rng)
            if check:
                state.check()
        for t in range(1, config.iterations + 1):
            state = gibbs_sweep(state, Y, config, rng)
            if check:
                state.check()
            if t % config.thin == 0:
                draws[stored] = _record(mode, state)
                its[stored] = state.iteration
                stored += 1
    except FactorGibbsError as exc:
        error = f"{type(exc).__name__}: {exc}"
        log.error("chain aborted after %d sweeps: %s", state.iteration, error)
    elapsed = time.perf_counter() - start
    return DrawStore(
        cols,
        draws[:stored],
        its[:stored],
        (m, k, n),
        truncated=error is not None,
        error=error,
        diagnostics={"wall_seconds": elapsed, "sweeps": state.iteration, "final_state": state},
    )


def with_seed(config: GibbsConfig, seed: int | None = None, chain_index: int | None = None) -> GibbsConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if chain_index is not None:
        changes["chain_index"] = chain_index
    return replace(config, **changes)
