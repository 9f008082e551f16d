"""Scalar and multivariate special functions used throughout the package.

Everything here is a pure function of its inputs and safe to call from any
number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.integrate import quad
from scipy.special import ndtr, ndtri

from .exceptions import DomainError, UnsupportedModelError

__all__ = [
    "CorrelationMatrix",
    "log_gamma",
    "stirling2",
    "std_normal_cdf",
    "std_normal_pdf",
    "bvn_cdf",
    "mvn_cdf",
    "gh_nodes",
]

_SQRT2 = math.sqrt(2.0)
_MAX_STIRLING_K = 30
_MVN_MAX_DIM = 12


def log_gamma(x: float) -> float:
    """Natural log of the gamma function for positive real ``x``."""
    if not np.isfinite(x) or x <= 0.0:
        raise DomainError(f"log_gamma requires finite x > 0, got {x!r}")
    return math.lgamma(x)


@lru_cache(maxsize=None)
def _stirling2_cached(k: int, ell: int) -> int:
    if ell == k:
        return 1
    if ell == 0:
        return 0  # k >= 1 here
    # S(k, l) = l * S(k-1, l) + S(k-1, l-1), exact integer arithmetic
    return ell * _stirling2_cached(k - 1, ell) + _stirling2_cached(k - 1, ell - 1)


def stirling2(k: int, ell: int) -> int:
    """Stirling number of the second kind: partitions of ``k`` items into
    ``ell`` nonempty blocks. Exact integers, guarded at k <= 30."""
    if k != int(k) or ell != int(ell) or k < 0 or ell < 0:
        raise DomainError(f"stirling2 requires nonnegative integers, got ({k}, {ell})")
    k, ell = int(k), int(ell)
    if ell > k:
        raise DomainError(f"stirling2 requires ell <= k, got ({k}, {ell})")
    if k > _MAX_STIRLING_K:
        raise DomainError(f"stirling2 overflow guard: k = {k} exceeds {_MAX_STIRLING_K}")
    return _stirling2_cached(k, ell)


def std_normal_cdf(x):
    """Standard normal CDF, saturating cleanly in the tails.

    Accepts scalars or arrays; relies on erfc under the hood so the absolute
    error stays well below 1e-12 everywhere.
    """
    x = np.asarray(x, dtype=float)
    if np.isnan(x).any():
        raise DomainError("std_normal_cdf: NaN input")
    out = ndtr(x)
    return float(out) if out.ndim == 0 else out


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    val = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    """A symmetric PSD matrix with unit diagonal.

    Construction validates shape, symmetry and the diagonal; positive
    semi-definiteness is established by attempting a Cholesky factorization
    (with a tiny tolerance for matrices that are PSD up to roundoff).
    """

    values: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.values, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DomainError(f"correlation matrix must be square, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise DomainError("correlation matrix has non-finite entries")
        if not np.allclose(m, m.T, atol=1e-12):
            raise DomainError("correlation matrix is not symmetric")
        if not np.allclose(np.diag(m), 1.0, atol=1e-12):
            raise DomainError("correlation matrix diagonal must be exactly 1")
        m = 0.5 * (m + m.T)
        np.fill_diagonal(m, 1.0)
        object.__setattr__(self, "values", m)
        object.__setattr__(self, "_chol", _psd_cholesky(m))

    @property
    def dimension(self) -> int:
        return self.values.shape[0]

    def cholesky(self) -> np.ndarray:
        return self._chol.copy()


def _psd_cholesky(m: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, tolerating PSD-up-to-roundoff matrices."""
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        pass
    # Rank-deficient or slightly indefinite: shift by a hair and retry, but
    # reject anything with a genuinely negative spectrum.
    w = np.linalg.eigvalsh(m)
    if w.min() < -1e-8 * max(1.0, w.max()):
        raise DomainError("matrix is not positive semi-definite")
    n = m.shape[0]
    return np.linalg.cholesky(m + (abs(w.min()) + 1e-12) * np.eye(n))


def bvn_cdf(h: float, k: float, rho: float) -> float:
    """Bivariate standard normal CDF P(X <= h, Y <= k) for correlation rho.

    Uses the classical reduction of the correlation-derivative identity to a
    single smooth, bounded integral over an angle, so adaptive quadrature
    delivers near machine precision for every |rho| < 1; the degenerate
    |rho| = 1 cases are handled exactly.
    """
    if not (np.isfinite(h) and np.isfinite(k)):
        if h == -math.inf or k == -math.inf:
            return 0.0
        if h == math.inf:
            return float(std_normal_cdf(k))
        if k == math.inf:
            return float(std_normal_cdf(h))
        raise DomainError("bvn_cdf: NaN limit")
    if not -1.0 <= rho <= 1.0:
        raise DomainError(f"correlation must lie in [-1, 1], got {rho}")
    if rho == 1.0:
        return float(std_normal_cdf(min(h, k)))
    if rho == -1.0:
        return float(max(0.0, std_normal_cdf(h) + std_normal_cdf(k) - 1.0))
    base = float(std_normal_cdf(h)) * float(std_normal_cdf(k))
    if rho == 0.0:
        return base

    hs = h * h + k * k
    hk2 = 2.0 * h * k

    def integrand(theta):
        s = math.sin(theta)
        c2 = 1.0 - s * s
        return math.exp(-(hs - hk2 * s) / (2.0 * c2)) if c2 > 0 else 0.0

    val, _ = quad(integrand, 0.0, math.asin(rho), epsabs=1e-14, epsrel=1e-12, limit=200)
    return float(min(1.0, max(0.0, base + val / (2.0 * math.pi))))


# First primes, enough for the 11-dimensional Richtmyer lattice below.
_PRIMES = np.array([2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31], dtype=float)


def mvn_cdf(upper, corr, tol: float = 1e-6, seed: int = 0):
    """Zero-mean multivariate normal CDF with an error estimate.

    Parameters
    ----------
    upper : array of upper limits (lower limits are all -inf)
    corr : CorrelationMatrix or array convertible to one
    tol : requested absolute accuracy of the returned probability
    seed : seed for the randomized lattice shifts; results are
        deterministic for a fixed seed

    Returns
    -------
    (probability, error_estimate) with error_estimate <= tol unless the
    point budget is exhausted (the estimate is honest either way).

    Dimensions 1 and 2 are dispatched to closed(-ish) forms; 3..12 use
    separation-of-variables over a randomized rank-1 lattice.
    """
    if not isinstance(corr, CorrelationMatrix):
        corr = CorrelationMatrix(np.asarray(corr, dtype=float))
    b = np.asarray(upper, dtype=float).reshape(-1)
    n = corr.dimension
    if b.shape[0] != n:
        raise DomainError(f"limit vector has length {b.shape[0]}, matrix dimension {n}")
    if n > _MVN_MAX_DIM:
        raise UnsupportedModelError(f"mvn_cdf supports dimensions <= {_MVN_MAX_DIM}, got {n}")
    if np.isnan(b).any():
        raise DomainError("mvn_cdf: NaN limit")

    if n == 1:
        return float(std_normal_cdf(b[0])), 0.0
    if n == 2:
        return bvn_cdf(b[0], b[1], float(corr.values[0, 1])), 1e-14

    if np.isneginf(b).any():
        return 0.0, 0.0
    finite = np.isfinite(b)
    if not finite.all():
        # +inf limits drop out: reduce to the marginal sub-problem
        idx = np.where(finite)[0]
        if idx.size == 0:
            return 1.0, 0.0
        sub = CorrelationMatrix(corr.values[np.ix_(idx, idx)])
        return mvn_cdf(b[idx], sub, tol=tol, seed=seed)

    # Most restrictive limits first cuts the variance of the SOV integrand.
    order = np.argsort(b)
    b = b[order]
    chol = _psd_cholesky(corr.values[np.ix_(order, order)])

    rng = np.random.default_rng(seed)
    sqp = np.sqrt(_PRIMES[: n - 1])
    n_batches = 12
    pts = 256
    total = np.zeros(n_batches)
    max_pts = 1 << 17
    while True:
        for i in range(n_batches):
            shift = rng.random(n - 1)
            j = np.arange(1, pts + 1)[:, None]
            u = np.abs(2.0 * np.mod(j * sqp[None, :] + shift[None, :], 1.0) - 1.0)
            total[i] = _sov_batch(chol, b, u)
        p = float(total.mean())
        err = 3.0 * float(total.std(ddof=1)) / math.sqrt(n_batches)
        if err <= tol or pts >= max_pts:
            return min(1.0, max(0.0, p)), err
        pts *= 4


def _sov_batch(chol: np.ndarray, b: np.ndarray, u: np.ndarray) -> float:
    """Mean of the separation-of-variables integrand over the points ``u``."""
    npts, nm1 = u.shape
    n = nm1 + 1
    eps = 1e-15
    e = np.full(npts, float(std_normal_cdf(b[0] / chol[0, 0])))
    prob = e.copy()
    y = np.empty((npts, nm1))
    for i in range(1, n):
        z = np.clip(u[:, i - 1] * e, eps, 1.0 - eps)
        y[:, i - 1] = ndtri(z)
        s = y[:, :i] @ chol[i, :i]
        e = std_normal_cdf((b[i] - s) / chol[i, i])
        prob *= e
        if i < n - 1:
            e = np.clip(e, eps, 1.0)
    return float(prob.mean())


def gh_nodes(order: int):
    """Gauss-Hermite nodes and weights for the weight function exp(-x^2).

    The rule integrates polynomials up to degree 2*order - 1 exactly;
    weights sum to sqrt(pi) and nodes are symmetric about zero.
    """
    if order != int(order) or not 1 <= int(order) <= 100:
        raise DomainError(f"gh_nodes order must be an integer in [1, 100], got {order!r}")
    nodes, weights = hermgauss(int(order))
    return nodes, weights
