"""Simulation study around the sampler: data, permutations, initialization, diagnostics.

The built-in fixture ``paper-sim-1`` holds the 15 x 3 loading matrix, the 15
uniquenesses and the permutation used for the reordering experiment.  The
published uniqueness for variable 9 is negative; the fixture uses its
absolute value and reports that substitution through ``SimTruth.warnings``.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import linalg
from .errors import DimensionMismatch, InvalidTruth, NonConvergence
from .gibbs import (
    ChainState,
    DrawStore,
    GibbsConfig,
    StoreMode,
    factor_posterior_mean,
    init_from_prior,
    run_chain,
)

__all__ = [
    "SimTruth",
    "Permutation",
    "Dataset",
    "EMResult",
    "InvarianceReport",
    "VariableCheck",
    "fixture",
    "permutation_fixture",
    "simulate_dataset",
    "permute_columns",
    "fit_factor_em",
    "principal_axis",
    "mle_init",
    "silverman_bandwidth",
    "kde",
    "ks_two_sample",
    "ks_critical_value",
    "batch_means_ess",
    "invariance_study",
]

log = logging.getLogger(__name__)

_BETA0 = np.array([
    [0.97, 0.00, 0.00],
    [0.04, 0.90, 0.00],
    [1.00, -1.12, 0.57],
    [2.03, 0.42, 0.57],
    [0.31, 0.47, 0.09],
    [0.43, -0.21, -0.35],
    [0.75, 0.31, 0.68],
    [0.45, -0.48, -1.50],
    [-2.21, 1.45, 0.38],
    [1.98, -0.30, 0.96],
    [-2.63, 0.41, 1.09],
    [-0.72, 1.39, 0.97],
    [-0.88, 2.01, -0.39],
    [-0.53, 0.04, 0.59],
    [-0.95, 1.39, 0.37],
])
_OMEGA0_PRINTED = np.array([0.17, 0.05, 0.02, 0.02, 0.05, 0.06, 0.04, 0.67, -0.04, 0.21, 0.10, 0.09, 0.21, 0.51, 0.03])
_PI = (10, 14, 13, 15, 12, 6, 7, 2, 11, 9, 8, 3, 5, 1, 4)

KS_C_1PCT = math.sqrt(-0.5 * math.log(0.01 / 2.0))  # 1.6276


# -- data types ---------------------------------------------------------------


@dataclass(frozen=True)
class SimTruth:
    beta0: np.ndarray
    omega0: np.ndarray
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        beta0 = np.asarray(self.beta0, dtype=float)
        omega0 = np.asarray(self.omega0, dtype=float)
        if beta0.ndim != 2 or omega0.shape != (beta0.shape[0],):
            raise InvalidTruth(f"beta0 {beta0.shape} and omega0 {omega0.shape} disagree")
        if np.any(omega0 <= 0.0):
            raise InvalidTruth("uniquenesses must be strictly positive")
        object.__setattr__(self, "beta0", beta0)
        object.__setattr__(self, "omega0", omega0)

    @property
    def sigma(self) -> np.ndarray:
        return self.beta0 @ self.beta0.T + np.diag(self.omega0)

    def permuted(self, pi: "Permutation") -> "SimTruth":
        """Truth for the reordered variables: row pi(i) gets the old row i."""
        inv = pi.inverse_indices()
        return SimTruth(self.beta0[inv], self.omega0[inv], self.warnings)


@dataclass(frozen=True)
class Permutation:
    """Bijection on {1..m}; ``mapping[i-1] = pi(i)``."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        mapping = tuple(int(v) for v in self.mapping)
        if sorted(mapping) != list(range(1, len(mapping) + 1)):
            raise DimensionMismatch(f"not a permutation of 1..{len(mapping)}: {mapping}")
        object.__setattr__(self, "mapping", mapping)

    @classmethod
    def identity(cls, m: int) -> "Permutation":
        return cls(tuple(range(1, m + 1)))

    def __len__(self):
        return len(self.mapping)

    def __call__(self, i: int) -> int:
        return self.mapping[i - 1]

    def inverse(self) -> "Permutation":
        inv = [0] * len(self)
        for i, p in enumerate(self.mapping, start=1):
            inv[p - 1] = i
        return Permutation(tuple(inv))

    def inverse_indices(self) -> np.ndarray:
        """0-based ``idx`` with ``new[:, idx]`` ordering: new column j holds old column idx[j]."""
        return np.asarray(self.inverse().mapping) - 1


@dataclass
class Dataset:
    Y: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim != 2:
            raise DimensionMismatch("Y must be an n x m matrix")
        if not self.names:
            self.names = [f"v{j}" for j in range(1, self.m + 1)]

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def m(self) -> int:
        return self.Y.shape[1]

    def to_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(self.names) + "\n")
            for row in self.Y:
                fh.write(",".join(_fmt(v) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with Path(path).open(encoding="utf-8") as fh:
            names = fh.readline().strip().split(",")
        Y = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if Y.shape[1] != len(names):
            raise DimensionMismatch(f"{path}: header has {len(names)} columns, data {Y.shape[1]}")
        return cls(Y, names)


def _fmt(v: float) -> str:
    return np.format_float_positional(float(v), unique=True, trim="-")


# -- fixtures -------------------------------------------------------------------


def fixture(name: str = "paper-sim-1") -> SimTruth:
    if name != "paper-sim-1":
        raise KeyError(f"unknown truth fixture {name!r}")
    msg = "uniqueness of variable 9 is printed as -0.04; using +0.04"
    return SimTruth(_BETA0.copy(), np.abs(_OMEGA0_PRINTED), (msg,))


def permutation_fixture(name: str, m: int | None = None) -> Permutation:
    if name in ("paper-pi", "paper-sim-1"):
        return Permutation(_PI)
    if name == "identity":
        if m is None:
            raise ValueError("identity permutation needs m")
        return Permutation.identity(m)
    raise KeyError(f"unknown permutation {name!r}")


# -- simulation and permutation ---------------------------------------------------


def simulate_dataset(truth: SimTruth, n: int, seed: int) -> Dataset:
    """Y = F beta0' + E with standard normal factors and N(0, Omega0) errors."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    m, k = truth.beta0.shape
    F = rng.standard_normal((n, k))
    E = rng.standard_normal((n, m)) * np.sqrt(truth.omega0)
    return Dataset(F @ truth.beta0.T + E)


def permute_columns(data: Dataset | np.ndarray, pi: Permutation):
    """Column i of the input becomes column pi(i) of the output."""
    Y = data.Y if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    if len(pi) != Y.shape[1]:
        raise DimensionMismatch(f"permutation of length {len(pi)} for {Y.shape[1]} columns")
    out = np.empty_like(Y)
    out[:, np.asarray(pi.mapping) - 1] = Y
    if isinstance(data, Dataset):
        return Dataset(out)
    return out


# -- maximum likelihood initialization ----------------------------------------------


@dataclass
class EMResult:
    beta: np.ndarray
    omega2: np.ndarray
    loglik: list[float]
    converged: bool
    heywood: bool
    method: str = "em"


def _loglik(S, beta, psi, n) -> float:
    sigma = beta @ beta.T + np.diag(psi)
    g = linalg.cholesky(sigma)
    logdet = 2.0 * np.sum(np.log(np.diagonal(g)))
    trace = np.trace(linalg.cho_solve(g, S))
    m = S.shape[0]
    return -0.5 * n * (logdet + trace + m * math.log(2.0 * math.pi))


def principal_axis(S: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k scaled eigenvectors of ``S``; uniquenesses are the residual diagonal floored at 1e-4."""
    vals, vecs = np.linalg.eigh(S)
    order = np.argsort(vals)[::-1][:k]
    beta = vecs[:, order] * np.sqrt(np.maximum(vals[order], 1e-8))
    omega2 = np.maximum(np.diag(S) - np.sum(beta**2, axis=1), 1e-4)
    return beta, omega2


def fit_factor_em(Y, k: int, max_iter: int = 500, tol: float = 1e-8, heywood_floor: float = 1e-6) -> EMResult:
    """Maximum likelihood for the k-factor model by EM.

    E-step uses the conditional moments of the factors; M-step is the
    per-variable regression update.  Raises :class:`NonConvergence` if the
    relative log-likelihood change has not dropped below ``tol`` after
    ``max_iter`` iterations (the partial result is attached as ``.result``).
    """
    Y = np.asarray(Y, dtype=float)
    n, m = Y.shape
    S = Y.T @ Y / n
    beta, _ = principal_axis(S, k)
    psi = np.maximum(0.5 * np.diag(S), 1e-3)
    history = [_loglik(S, beta, psi, n)]
    eye = np.eye(k)
    for _ in range(max_iter):
        bw = beta / psi[:, None]
        g = linalg.cholesky(eye + beta.T @ bw)
        cov_f = linalg.cho_inverse(g)
        delta = cov_f @ bw.T  # k x m: E[f | y] = delta y
        sd = S @ delta.T  # m x k
        eff = cov_f + delta @ sd
        beta = linalg.cho_solve(linalg.cholesky(eff), sd.T).T
        psi = np.maximum(np.diag(S) - np.einsum("ij,ij->i", beta, sd), 1e-12)
        history.append(_loglik(S, beta, psi, n))
        if history[-1] < history[-2] - 1e-9 * abs(history[-2]):
            raise AssertionError(f"EM log-likelihood decreased: {history[-2]} -> {history[-1]}")
        if abs(history[-1] - history[-2]) <= tol * abs(history[-2]):
            return EMResult(beta, psi, history, True, bool(np.any(psi < heywood_floor)))
    exc = NonConvergence(f"EM did not converge in {max_iter} iterations")
    exc.result = EMResult(beta, psi, history, False, bool(np.any(psi < heywood_floor)))
    raise exc


def mle_init(Y, k: int, max_iter: int = 500, tol: float = 1e-8) -> tuple[ChainState, EMResult]:
    """Starting state at the ML estimate, rotated to lower-triangular form.

    Falls back to the principal-axis solution when EM fails to converge or
    hits a Heywood case.  The factors start at their conditional mean.
    """
    Y = np.asarray(Y, dtype=float)
    n, m = Y.shape
    if k >= m:
        raise ValueError(f"k={k} must be smaller than m={m} for maximum likelihood initialization")
    try:
        fit = fit_factor_em(Y, k, max_iter=max_iter, tol=tol)
    except NonConvergence as exc:
        log.warning("%s; using principal-axis start", exc)
        fit = exc.result
        fit.converged = False
    if not fit.converged or fit.heywood:
        beta, omega2 = principal_axis(Y.T @ Y / n, k)
        fit = EMResult(beta, omega2, fit.loglik, fit.converged, fit.heywood, method="principal-axis")
    beta, _ = linalg.lq_decompose(fit.beta)
    omega2 = np.maximum(fit.omega2, 1e-4)
    F = factor_posterior_mean(beta, omega2, Y)
    return ChainState(beta, omega2, F), fit


# -- density estimates and distances ---------------------------------------------------


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0.0:
        spread = max(sd, (q75 - q25) / 1.34)
    return max(0.9 * spread * x.size ** (-0.2), 1e-8)


def kde(samples, grid, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian kernel density estimate evaluated on ``grid``."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("kde needs at least two samples")
    grid = np.asarray(grid, dtype=float)
    h = silverman_bandwidth(x) if bandwidth is None else max(float(bandwidth), 1e-8)
    out = np.zeros(grid.shape)
    chunk = max(1, 2_000_000 // max(grid.size, 1))
    for start in range(0, x.size, chunk):
        u = (grid[:, None] - x[None, start : start + chunk]) / h
        out += np.exp(-0.5 * u * u).sum(axis=1)
    return out / (x.size * h * math.sqrt(2.0 * math.pi))


def ks_two_sample(a, b) -> float:
    """Supremum distance between the two empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_two_sample needs non-empty samples")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_critical_value(n1: float, n2: float, alpha: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value c(alpha) sqrt((n1 + n2) / (n1 n2))."""
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c * math.sqrt((n1 + n2) / (n1 * n2))


def batch_means_ess(x, n_batches: int = 100) -> float:
    """Effective sample size from the batch-means estimate of the asymptotic variance."""
    x = np.asarray(x, dtype=float)
    n = x.size
    size = n // n_batches
    if size < 1:
        return float(n)
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    var_bm = size * means.var(ddof=1)
    var = x.var(ddof=1)
    if var_bm <= 0.0 or var <= 0.0:
        return float(n)
    return float(min(n, n * var / var_bm))


def batch_means_se(x, n_batches: int = 100) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(batch_means_ess(x, n_batches)))


# -- the reordering experiment -----------------------------------------------------------


@dataclass
class VariableCheck:
    index: int
    permuted_index: int
    ks: float
    ess_y: float
    ess_ypi: float
    critical: float
    passed: bool
    mean_y: float
    mean_ypi: float


@dataclass
class InvarianceReport:
    prior: str
    k: int
    alpha: float
    checks: list[VariableCheck]
    grids: dict[int, np.ndarray] = field(default_factory=dict)
    densities: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    chain_info: dict = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[int]:
        return [c.index for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "prior": self.prior,
            "k": self.k,
            "alpha": self.alpha,
            "all_passed": self.all_passed,
            "failures": self.failures,
            "variables": [
                {
                    "i": c.index,
                    "pi_i": c.permuted_index,
                    "ks": c.ks,
                    "ess_y": c.ess_y,
                    "ess_ypi": c.ess_ypi,
                    "critical": c.critical,
                    "pass": c.passed,
                    "mean_y": c.mean_y,
                    "mean_ypi": c.mean_ypi,
                }
                for c in self.checks
            ],
            "chains": self.chain_info,
        }

    def write(self, outdir) -> list[Path]:
        """Write ``report.json`` and one ``kde_v{i}.csv`` per variable."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        written = [outdir / "report.json"]
        written[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        for i, grid in sorted(self.grids.items()):
            dy, dpi = self.densities[i]
            path = outdir / f"kde_v{i}.csv"
            with path.open("w", encoding="utf-8", newline="\n") as fh:
                fh.write("grid,density_Y,density_Ypi\n")
                for row in zip(grid, dy, dpi):
                    fh.write(",".join(_fmt(v) for v in row) + "\n")
            written.append(path)
        return written


def _run_arm(args):
    Y, config, init = args
    return run_chain(Y, config, init)


def invariance_study(
    Y,
    pi: Permutation,
    k: int,
    config: GibbsConfig,
    init: str = "mle",
    alpha: float = 0.01,
    grid_points: int = 256,
    parallel: bool = False,
) -> InvarianceReport:
    """Paired chains on ``Y`` and its column permutation; per-variable KS of sigma_ii draws.

    The chain on ``Y`` uses stream ``(seed, 0)`` and the chain on ``Y^pi``
    stream ``(seed, 1)``, so running the arms in parallel or in sequence gives
    the same draws.  Critical values use the batch-means ESS of each arm.
    """
    Y = np.asarray(Y, dtype=float)
    m = Y.shape[1]
    Ypi = permute_columns(Y, pi)
    config = replace(config, store=StoreMode.SIGMA_DIAG)
    arms = []
    info = {}
    for idx, data in enumerate((Y, Ypi)):
        state, how = _initial_state(data, k, init, config, idx)
        info[("Y", "Ypi")[idx]] = {"init": how}
        arms.append((data, replace(config, chain_index=idx), state))
    if parallel:
        with ProcessPoolExecutor(max_workers=2) as pool:
            stores: list[DrawStore] = list(pool.map(_run_arm, arms))
    else:
        stores = [_run_arm(a) for a in arms]
    for name, store in zip(("Y", "Ypi"), stores):
        info[name].update(stored=len(store), truncated=store.truncated, error=store.error)
    checks = []
    grids, dens = {}, {}
    for i in range(1, m + 1):
        j = pi(i)
        a = stores[0].draws[:, i - 1]
        b = stores[1].draws[:, j - 1]
        ess_a, ess_b = batch_means_ess(a), batch_means_ess(b)
        stat = ks_two_sample(a, b)
        crit = ks_critical_value(ess_a, ess_b, alpha)
        checks.append(VariableCheck(i, j, stat, ess_a, ess_b, crit, stat <= crit, float(a.mean()), float(b.mean())))
        lo = min(np.quantile(a, 0.001), np.quantile(b, 0.001))
        hi = max(np.quantile(a, 0.999), np.quantile(b, 0.999))
        pad = 0.1 * (hi - lo)
        grid = np.linspace(max(lo - pad, 0.0), hi + pad, grid_points)
        grids[i] = grid
        dens[i] = (kde(a, grid), kde(b, grid))
    return InvarianceReport(config.prior.family.value, k, alpha, checks, grids, dens, info)


def _initial_state(Y, k, init, config, idx):
    if init == "mle":
        state, fit = mle_init(Y, k)
        return state, fit.method
    if init == "prior":
        return init_from_prior(Y, k, config.prior, config.seed, chain_index=idx), "prior"
    raise ValueError(f"unknown init {init!r}")
