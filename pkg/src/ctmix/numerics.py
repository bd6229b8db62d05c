"""Special functions, normal / t log-densities and monotone cdf inversion.

Everything here is vectorized over numpy arrays and free of hidden state,
so it can be called from any number of workers at once.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DomainError, NumericError

LOG_2PI = math.log(2.0 * math.pi)
PROB_CLAMP = 1e-12

# Lanczos approximation, g = 7, nine terms.
_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * LOG_2PI


def _as_positive(x, name):
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} requires x > 0")
    return arr


def _lanczos_lgamma(x):
    # valid for x >= 0.5
    z = x - 1.0
    acc = np.full_like(z, _LANCZOS_COEF[0])
    for k in range(1, _LANCZOS_COEF.size):
        acc = acc + _LANCZOS_COEF[k] / (z + k)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(acc)


def _stirling_lgamma(x):
    # valid for x >= 10; truncation error below 1e-14
    r = 1.0 / x
    r2 = r * r
    series = r * (1.0 / 12 + r2 * (-1.0 / 360 + r2 * (1.0 / 1260 + r2 * (-1.0 / 1680 + r2 / 1188))))
    return (x - 0.5) * np.log(x) - x + _HALF_LOG_2PI + series


def log_gamma(x):
    """Natural log of the gamma function for positive arguments.

    Stirling series above 10, Lanczos (g=7) on [0.5, 10) and the shift
    ``lnG(x) = lnG(x+1) - ln x`` below 0.5.
    """
    arr = _as_positive(x, "log_gamma")
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    big = arr >= 10.0
    small = arr < 0.5
    mid = ~(big | small)
    if big.any():
        out[big] = _stirling_lgamma(arr[big])
    if mid.any():
        out[mid] = _lanczos_lgamma(arr[mid])
    if small.any():
        xs = arr[small]
        out[small] = _lanczos_lgamma(xs + 1.0) - np.log(xs)
    return float(out[0]) if scalar else out


def digamma(x):
    """Digamma function for positive arguments.

    Upward recurrence until the argument is at least 10, then the
    asymptotic expansion in 1/x^2.
    """
    arr = _as_positive(x, "digamma")
    scalar = arr.ndim == 0
    z = np.array(np.atleast_1d(arr), dtype=float)
    acc = np.zeros_like(z)
    for _ in range(10):
        low = z < 10.0
        if not low.any():
            break
        acc[low] -= 1.0 / z[low]
        z[low] += 1.0
    r2 = 1.0 / (z * z)
    tail = r2 * (1.0 / 12 - r2 * (1.0 / 120 - r2 * (1.0 / 252 - r2 * (1.0 / 240 - r2 / 132))))
    out = acc + np.log(z) - 0.5 / z - tail
    return float(out[0]) if scalar else out


def log_multigamma(a, d):
    """Log of the multivariate gamma function Gamma_d(a)."""
    h = np.arange(d, dtype=float)
    return 0.25 * d * (d - 1) * math.log(math.pi) + float(np.sum(log_gamma(a - 0.5 * h)))


class SpdMatrix:
    """Symmetric positive definite matrix with a cached Cholesky factor.

    The factor is computed once at construction; instances are never
    mutated afterwards.
    """

    __slots__ = ("entries", "chol", "dim")

    def __init__(self, entries, *, jitter=False):
        a = np.array(entries, dtype=float, copy=True)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DomainError(f"expected a square matrix, got shape {a.shape}")
        scale = max(np.max(np.abs(a)), 1.0)
        if np.max(np.abs(a - a.T)) > 1e-12 * scale:
            raise DomainError("matrix is not symmetric")
        a = 0.5 * (a + a.T)
        self.entries = a
        self.dim = a.shape[0]
        self.chol = cholesky(a, jitter=jitter)
        self.entries.setflags(write=False)
        self.chol.setflags(write=False)

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def whiten(self, r):
        """Solve L y = r for rows of ``r`` (shape (..., d))."""
        r = np.asarray(r, dtype=float)
        flat = r.reshape(-1, self.dim)
        y = solve_triangular(self.chol, flat.T, lower=True, check_finite=False).T
        return y.reshape(r.shape)

    def mahalanobis(self, r):
        y = self.whiten(r)
        return np.sum(y * y, axis=-1)

    def __repr__(self):
        return f"SpdMatrix(dim={self.dim})"


def cholesky(a, *, jitter=False):
    """Lower Cholesky factor; optionally retry once with 1e-8 * trace/d jitter."""
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        if not jitter:
            raise NumericError("matrix is not positive definite") from None
    d = a.shape[0]
    eps = 1e-8 * max(np.trace(a) / d, 1e-300)
    try:
        return np.linalg.cholesky(a + eps * np.eye(d))
    except np.linalg.LinAlgError:
        raise NumericError("matrix is not positive definite after jitter",
                           {"jitter": eps}) from None


def _as_spd(V):
    return V if isinstance(V, SpdMatrix) else SpdMatrix(V)


def mvn_logpdf(x, mu, V):
    """Multivariate normal log-density; rows of ``x`` are observations."""
    V = _as_spd(V)
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if x.shape[-1] != V.dim or mu.shape[-1] != V.dim:
        raise DomainError("dimension mismatch between x, mu and V")
    maha = V.mahalanobis(x - mu)
    out = -0.5 * (V.dim * LOG_2PI + V.logdet() + maha)
    return float(out) if np.ndim(out) == 0 else out


def mvt_logpdf(x, mu, V, nu):
    """Multivariate t log-density with scale matrix ``V`` and ``nu`` dof."""
    if not nu > 0:
        raise DomainError("nu must be positive")
    V = _as_spd(V)
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if x.shape[-1] != V.dim or mu.shape[-1] != V.dim:
        raise DomainError("dimension mismatch between x, mu and V")
    d = V.dim
    maha = V.mahalanobis(x - mu)
    out = (log_gamma(0.5 * (nu + d)) - log_gamma(0.5 * nu)
           - 0.5 * d * math.log(nu * math.pi) - 0.5 * V.logdet()
           - 0.5 * (nu + d) * np.log1p(maha / nu))
    return float(out) if np.ndim(out) == 0 else out


def t_logpdf_std(z, nu):
    """Log-density of the standard univariate t, vectorized in z and nu."""
    z = np.asarray(z, dtype=float)
    nu = np.asarray(nu, dtype=float)
    return (log_gamma(0.5 * (nu + 1.0)) - log_gamma(0.5 * nu)
            - 0.5 * np.log(nu * math.pi) - 0.5 * (nu + 1.0) * np.log1p(z * z / nu))


class UnivariateCdf:
    """A continuous univariate distribution: pdf, cdf and quantile.

    Subclasses provide ``logpdf`` and ``cdf``; the quantile defaults to
    numerical inversion. ``center`` and ``spread`` seed the bracket search.
    """

    support = (-math.inf, math.inf)

    def logpdf(self, x):
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def quantile(self, u):
        return invert_cdf(self, u)

    @property
    def center(self):
        return 0.0

    @property
    def spread(self):
        return 1.0


class StandardNormal(UnivariateCdf):
    """Phi, with exact quantiles from scipy's ndtri."""

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * (LOG_2PI + x * x)

    def cdf(self, x):
        from scipy.special import ndtr
        return ndtr(x)

    def quantile(self, u):
        from scipy.special import ndtri
        return ndtri(clamp_probability(u))


def clamp_probability(u, delta=PROB_CLAMP):
    return np.clip(np.asarray(u, dtype=float), delta, 1.0 - delta)


def invert_cdf(F, u, *, tol=1e-10, max_iter=200):
    """Solve ``F.cdf(x) = u`` elementwise.

    A bracket is grown by doubling away from ``F.center``; the root is then
    polished by Newton steps safeguarded with bisection (rtsafe). ``u`` is
    clamped to ``[1e-12, 1 - 1e-12]`` first.
    """
    u_arr = np.asarray(u, dtype=float)
    if np.any(~np.isfinite(u_arr)) or np.any((u_arr < 0) | (u_arr > 1)):
        raise DomainError("probabilities must lie in [0, 1]")
    scalar = u_arr.ndim == 0
    target = np.atleast_1d(clamp_probability(u_arr)).ravel()

    c = float(F.center)
    s = float(F.spread)
    lo = np.full(target.shape, c - s)
    hi = np.full(target.shape, c + s)
    for _ in range(2000):
        need_lo = F.cdf(lo) > target
        need_hi = F.cdf(hi) < target
        if not (need_lo.any() or need_hi.any()):
            break
        width = hi - lo
        lo = np.where(need_lo, lo - width, lo)
        hi = np.where(need_hi, hi + width, hi)
    else:
        raise NumericError("could not bracket the quantile")

    x = 0.5 * (lo + hi)
    step_old = hi - lo
    step = step_old.copy()
    active = np.ones(target.shape, dtype=bool)
    f = F.cdf(x) - target
    for it in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xi, fi = x[idx], f[idx]
        lo_i, hi_i = lo[idx], hi[idx]
        lo_i = np.where(fi < 0, xi, lo_i)
        hi_i = np.where(fi > 0, xi, hi_i)
        dens = F.pdf(xi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = xi - fi / dens
        so = step_old[idx]
        bad = (~np.isfinite(newton) | (newton <= lo_i) | (newton >= hi_i)
               | (np.abs(newton - xi) > 0.5 * np.abs(so)))
        xn = np.where(bad, 0.5 * (lo_i + hi_i), newton)
        step_old[idx] = step[idx]
        step[idx] = xn - xi
        fn = F.cdf(xn) - target[idx]
        x[idx], f[idx], lo[idx], hi[idx] = xn, fn, lo_i, hi_i
        done = ((fn == 0)
                | (np.abs(xn - xi) <= 4e-16 * (1.0 + np.abs(xn)))
                | (hi_i - lo_i <= 4e-16 * (1.0 + np.abs(xn))))
        active[idx[done]] = False

    resid = np.abs(F.cdf(x) - target)
    if np.any(resid >= tol):
        worst = int(np.argmax(resid))
        raise NumericError(
            "quantile inversion did not converge",
            {"u": float(target[worst]), "x": float(x[worst]),
             "residual": float(resid[worst]), "iterations": max_iter},
        )
    x = x.reshape(np.shape(u_arr)) if not scalar else x
    return float(x[0]) if scalar else x
