"""Adaptive rejection sampling for f(x | alpha, gamma) ∝ x^(alpha-1) exp(-(x-gamma)^2), x > 0.

The log density is concave for alpha >= 1, so the tangent-line construction
of Gilks and Wild gives a piecewise-exponential upper hull and a chord-based
lower squeeze.  The hull is refined every time the squeeze test fails and
the log density has to be evaluated.

The diagonal loadings of the Gibbs sampler have conditionals of the form
x^power exp(-(x-a)^2 / (2 b^2)); :func:`reduce_to_family` maps them onto the
family above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import special

from .errors import DomainError, InvalidInitialPoints
from .priors import truncated_normal

__all__ = [
    "FamilyParams",
    "DiagConditional",
    "Envelope",
    "log_f",
    "mode",
    "build_envelope",
    "ars_sample",
    "ars_sample_n",
    "sample_family",
    "reduce_to_family",
    "sample_diag_conditional",
    "MAX_ABSCISSAE",
    "sample_family_fast",
]

MAX_ABSCISSAE = 64


@dataclass(frozen=True)
class FamilyParams:
    alpha: float
    gamma: float

    def __post_init__(self):
        if not self.alpha >= 1.0:
            raise DomainError(f"alpha must be >= 1 for log-concavity, got {self.alpha}")
        if not math.isfinite(self.gamma):
            raise DomainError(f"gamma must be finite, got {self.gamma}")


@dataclass(frozen=True)
class DiagConditional:
    """Kernel x^power exp(-(x - a)^2 / (2 b^2)) on x > 0."""

    a: float
    b: float
    power: int

    def __post_init__(self):
        if not self.b > 0:
            raise DomainError(f"b must be positive, got {self.b}")
        if self.power < 0:
            raise DomainError(f"power must be nonnegative, got {self.power}")


def log_f(x, p: FamilyParams):
    """Unnormalized log density and its derivative at ``x > 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise DomainError("log_f is defined for x > 0 only")
    am1 = p.alpha - 1.0
    value = am1 * np.log(x) - (x - p.gamma) ** 2
    deriv = am1 / x - 2.0 * (x - p.gamma)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def _log_f_scalar(x: float, am1: float, gamma: float) -> float:
    return am1 * math.log(x) - (x - gamma) ** 2


def mode(p: FamilyParams) -> float:
    """Location of the maximum of f on [0, inf)."""
    if p.alpha == 1.0:
        return max(p.gamma, 0.0)
    return 0.5 * (p.gamma + math.sqrt(p.gamma**2 + 2.0 * (p.alpha - 1.0)))


def default_abscissae(p: FamilyParams) -> list[float]:
    """Starting points that straddle the mode, so both hull tails are finite."""
    xm = mode(p)
    if xm <= 0.0:
        # decreasing density (alpha == 1, gamma <= 0); the left tail stops at 0
        scale = 1.0 / (1.0 + 2.0 * abs(p.gamma))
        return [0.5 * scale, scale, 2.0 * scale]
    curvature = (p.alpha - 1.0) / xm**2 + 2.0
    sd = 1.0 / math.sqrt(curvature)
    pts = {xm / 2.0, xm, 2.0 * xm, xm + sd}
    if xm - sd > xm / 2.0:
        pts.add(xm - sd)
    return sorted(pts)


class Envelope:
    """Tangent upper hull and chord squeeze built on sorted abscissae.

    Instances are treated as values: :meth:`insert` returns a new envelope.
    """

    __slots__ = ("x", "h", "dh", "z", "log_mass", "log_total", "cum")

    def __init__(self, x, h, dh):
        self.x = np.asarray(x, dtype=float)
        self.h = np.asarray(h, dtype=float)
        self.dh = np.asarray(dh, dtype=float)
        if self.x.size < 2:
            raise InvalidInitialPoints("need at least two abscissae")
        if np.any(np.diff(self.x) <= 0.0) or self.x[0] <= 0.0:
            raise InvalidInitialPoints("abscissae must be positive and strictly increasing")
        if np.any(np.diff(self.dh) > 1e-12 * (1.0 + np.abs(self.dh[1:]))):
            raise InvalidInitialPoints("derivatives increase: density is not log-concave")
        if not self.dh[-1] < 0.0:
            raise InvalidInitialPoints("right-most derivative must be negative for a finite hull")
        x, h, dh = self.x, self.h, self.dh
        ds = dh[:-1] - dh[1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            zi = (h[1:] - h[:-1] - x[1:] * dh[1:] + x[:-1] * dh[:-1]) / ds
        mid = 0.5 * (x[:-1] + x[1:])
        zi = np.where(ds > 0.0, zi, mid)
        zi = np.clip(np.nan_to_num(zi, nan=0.0), x[:-1], x[1:])
        self.z = np.concatenate(([0.0], zi, [np.inf]))
        self.log_mass = np.array([
            _segment_log_mass(h[j], dh[j], x[j], self.z[j], self.z[j + 1]) for j in range(x.size)
        ])
        self.log_total = float(special.logsumexp(self.log_mass))
        self.cum = np.cumsum(np.exp(self.log_mass - self.log_total))
        self.cum[-1] = 1.0

    def __len__(self):
        return self.x.size

    @property
    def total_mass(self) -> float:
        return math.exp(self.log_total)

    def hull(self, t):
        """Upper hull (log scale) at ``t``."""
        t = np.asarray(t, dtype=float)
        j = np.clip(np.searchsorted(self.z, t, side="right") - 1, 0, self.x.size - 1)
        return self.h[j] + self.dh[j] * (t - self.x[j])

    def squeeze(self, t):
        """Lower chord hull (log scale) at ``t``; ``-inf`` outside the abscissae."""
        t = np.asarray(t, dtype=float)
        x, h = self.x, self.h
        j = np.clip(np.searchsorted(x, t, side="right") - 1, 0, x.size - 2)
        w = (t - x[j]) / (x[j + 1] - x[j])
        val = (1.0 - w) * h[j] + w * h[j + 1]
        inside = (t >= x[0]) & (t <= x[-1])
        return np.where(inside, val, -np.inf)

    def insert(self, t: float, ht: float, dht: float) -> "Envelope":
        j = int(np.searchsorted(self.x, t))
        if j < self.x.size and self.x[j] == t:
            return self
        return Envelope(np.insert(self.x, j, t), np.insert(self.h, j, ht), np.insert(self.dh, j, dht))

    def _draw(self, u_seg, u_pos):
        j = np.minimum(np.searchsorted(self.cum, u_seg, side="right"), self.x.size - 1)
        lo, hi, s = self.z[j], self.z[j + 1], self.dh[j]
        return _segment_inverse(lo, hi, s, u_pos)


def _segment_log_mass(h, s, x0, lo, hi) -> float:
    if hi <= lo:
        return -math.inf
    width = hi - lo
    if s == 0.0:
        return h + math.log(width)
    if s > 0.0:
        top = h + s * (hi - x0)
        return top + math.log(-math.expm1(-s * width)) - math.log(s)
    bottom = h + s * (lo - x0)
    if math.isinf(width):
        return bottom - math.log(-s)
    return bottom + math.log(-math.expm1(s * width)) - math.log(-s)


def _segment_inverse(lo, hi, s, v):
    """Inverse CDF of the density ∝ exp(s x) on [lo, hi]; vectorized."""
    lo, hi, s, v = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (lo, hi, s, v)))
    out = np.empty(lo.shape)
    width = hi - lo
    flat = np.abs(s) * np.where(np.isfinite(width), width, np.inf) < 1e-12
    pos = (s > 0.0) & ~flat
    neg = (s < 0.0) & ~flat
    out[flat] = lo[flat] + v[flat] * width[flat]
    if np.any(pos):
        sp, wp = s[pos], width[pos]
        out[pos] = hi[pos] + np.log(v[pos] + (1.0 - v[pos]) * np.exp(-sp * wp)) / sp
    if np.any(neg):
        sn, wn = s[neg], width[neg]
        out[neg] = lo[neg] + np.log1p(v[neg] * np.expm1(sn * wn)) / sn
    out = np.clip(out, lo, hi)
    return np.maximum(out, np.finfo(float).tiny)


def build_envelope(p: FamilyParams, init_abscissae=None) -> Envelope:
    """Hull for ``f(.|p)`` from ``init_abscissae`` (default: mode-straddling points)."""
    pts = default_abscissae(p) if init_abscissae is None else sorted(set(float(t) for t in init_abscissae))
    h, dh = log_f(np.asarray(pts), p)
    return Envelope(pts, h, dh)


def ars_sample(env: Envelope, p: FamilyParams, rng: np.random.Generator) -> tuple[float, Envelope]:
    """One exact draw from ``f(.|p)``; returns the draw and the refined envelope."""
    am1, gamma = p.alpha - 1.0, p.gamma
    while True:
        u = rng.random(3)
        t = float(env._draw(u[0], u[1]))
        log_u = math.log(u[2]) if u[2] > 0.0 else -math.inf
        upper = float(env.hull(t))
        if log_u <= float(env.squeeze(t)) - upper:
            return t, env
        ht = _log_f_scalar(t, am1, gamma)
        if len(env) < MAX_ABSCISSAE:
            env = env.insert(t, ht, am1 / t - 2.0 * (t - gamma))
        if log_u <= ht - upper:
            return t, env


def ars_sample_n(p: FamilyParams, n: int, rng: np.random.Generator, env: Envelope | None = None,
                 warmup: int = 100) -> np.ndarray:
    """``n`` iid draws: sequential adaptive draws first, then vectorized rejection.

    After ``warmup`` sequential draws the envelope is frozen and proposals are
    accepted or rejected in blocks.  Every accepted value is an exact draw
    whatever the envelope, so freezing only affects speed.
    """
    if env is None:
        env = build_envelope(p)
    out = np.empty(n)
    head = min(n, warmup)
    for i in range(head):
        out[i], env = ars_sample(env, p, rng)
    filled = head
    am1, gamma = p.alpha - 1.0, p.gamma
    while filled < n:
        need = n - filled
        block = int(need * 1.1) + 16
        u = rng.random((3, block))
        t = env._draw(u[0], u[1])
        log_u = np.log(u[2])
        upper = env.hull(t)
        ok = log_u <= env.squeeze(t) - upper
        rest = ~ok
        ok[rest] = log_u[rest] <= am1 * np.log(t[rest]) - (t[rest] - gamma) ** 2 - upper[rest]
        acc = t[ok][:need]
        out[filled : filled + acc.size] = acc
        filled += acc.size
    return out


def sample_family(p: FamilyParams, rng: np.random.Generator) -> float:
    """One draw from ``f(.|p)``; alpha == 1 uses the exact truncated-normal sampler."""
    if p.alpha == 1.0:
        return float(truncated_normal(p.gamma, math.sqrt(0.5), rng))
    return sample_family_fast(p, rng)


def reduce_to_family(d: DiagConditional) -> tuple[FamilyParams, float]:
    """Map x^power exp(-(x-a)^2/(2b^2)) onto the family: x = scale * u, u ~ f(.|alpha, gamma).

    With scale = b sqrt(2), (x - a)^2 / (2 b^2) = (u - a/scale)^2 exactly.
    """
    scale = d.b * math.sqrt(2.0)
    return FamilyParams(alpha=d.power + 1.0, gamma=d.a / scale), scale


def sample_diag_conditional(d: DiagConditional, rng: np.random.Generator) -> float:
    """One draw of a diagonal loading from its full conditional kernel."""
    if d.power == 0:
        return float(truncated_normal(d.a, d.b, rng))
    p, scale = reduce_to_family(d)
    return scale * sample_family(p, rng)


# ---------------------------------------------------------------------------
# Compiled single-draw path used inside the Gibbs sweep.  Same tangent hull
# and squeeze as Envelope, on fixed-capacity arrays.  Uniforms come from a
# caller-supplied block so the numpy Generator stays the only RNG.

_UNIFORM_BLOCK = 3 * 24


@numba.njit(cache=True)
def _hull_tables(x, h, dh, npts, z, cum):
    z[0] = 0.0
    for j in range(npts - 1):
        ds = dh[j] - dh[j + 1]
        if ds > 0.0:
            zj = (h[j + 1] - h[j] - x[j + 1] * dh[j + 1] + x[j] * dh[j]) / ds
        else:
            zj = 0.5 * (x[j] + x[j + 1])
        zj = min(max(zj, x[j]), x[j + 1])
        z[j + 1] = zj
    z[npts] = np.inf
    lm_max = -np.inf
    for j in range(npts):
        lo = z[j]
        hi = z[j + 1]
        s = dh[j]
        width = hi - lo
        if width <= 0.0:
            lm = -np.inf
        elif s == 0.0:
            lm = h[j] + np.log(width)
        elif s > 0.0:
            lm = h[j] + s * (hi - x[j]) + np.log(-np.expm1(-s * width)) - np.log(s)
        elif np.isinf(width):
            lm = h[j] + s * (lo - x[j]) - np.log(-s)
        else:
            lm = h[j] + s * (lo - x[j]) + np.log(-np.expm1(s * width)) - np.log(-s)
        cum[j] = lm
        if lm > lm_max:
            lm_max = lm
    acc = 0.0
    for j in range(npts):
        acc += np.exp(cum[j] - lm_max)
        cum[j] = acc
    for j in range(npts):
        cum[j] /= acc


@numba.njit(cache=True)
def _ars_kernel(am1, gamma, init, u):
    cap = 64
    x = np.empty(cap)
    h = np.empty(cap)
    dh = np.empty(cap)
    z = np.empty(cap + 1)
    cum = np.empty(cap)
    npts = init.size
    for j in range(npts):
        t = init[j]
        x[j] = t
        h[j] = am1 * np.log(t) - (t - gamma) ** 2
        dh[j] = am1 / t - 2.0 * (t - gamma)
    _hull_tables(x, h, dh, npts, z, cum)
    tries = u.size // 3
    for it in range(tries):
        u0 = u[3 * it]
        u1 = u[3 * it + 1]
        u2 = u[3 * it + 2]
        j = 0
        while j < npts - 1 and cum[j] <= u0:
            j += 1
        lo = z[j]
        hi = z[j + 1]
        s = dh[j]
        width = hi - lo
        if np.abs(s) * width < 1e-12:
            t = lo + u1 * width
        elif s > 0.0:
            t = hi + np.log(u1 + (1.0 - u1) * np.exp(-s * width)) / s
        else:
            t = lo + np.log1p(u1 * np.expm1(s * width)) / s
        t = min(max(t, lo), hi)
        if t <= 0.0:
            t = 5e-324
        upper = h[j] + s * (t - x[j])
        log_u = np.log(u2) if u2 > 0.0 else -np.inf
        # squeeze
        if t >= x[0] and t <= x[npts - 1]:
            i = 0
            while i < npts - 2 and x[i + 1] < t:
                i += 1
            w = (t - x[i]) / (x[i + 1] - x[i])
            if log_u <= (1.0 - w) * h[i] + w * h[i + 1] - upper:
                return t, True
        ht = am1 * np.log(t) - (t - gamma) ** 2
        if log_u <= ht - upper:
            return t, True
        if npts < cap:
            pos = 0
            while pos < npts and x[pos] < t:
                pos += 1
            if pos < npts and x[pos] == t:
                continue
            for q in range(npts, pos, -1):
                x[q] = x[q - 1]
                h[q] = h[q - 1]
                dh[q] = dh[q - 1]
            x[pos] = t
            h[pos] = ht
            dh[pos] = am1 / t - 2.0 * (t - gamma)
            npts += 1
            _hull_tables(x, h, dh, npts, z, cum)
    return 0.0, False


def sample_family_fast(p: FamilyParams, rng: np.random.Generator) -> float:
    """Compiled equivalent of ``ars_sample(build_envelope(p), p, rng)`` for alpha > 1."""
    init = np.asarray(default_abscissae(p))
    while True:
        x, ok = _ars_kernel(p.alpha - 1.0, p.gamma, init, rng.random(_UNIFORM_BLOCK))
        if ok:
            return x
