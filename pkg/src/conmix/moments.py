"""Closed-form marginal moments, correlation functions, and joint
probabilities after integrating out both sets of random effects.

Count outcomes with log link admit exact lognormal-style moments; probit
outcomes admit exact multivariate-normal orthant probabilities; the logit
link is served by rescaling onto the probit closed forms (flagged
approximate). All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DataError,
    DomainError,
    MomentExistenceError,
    NumericError,
    UnsupportedModelError,
)
from .model import ModelSpec, Params
from .special import CorrelationMatrix, bvn_cdf, log_gamma, mvn_cdf, std_normal_cdf, stirling2

__all__ = [
    "LOGIT_PROBIT_SCALE",
    "MomentSet",
    "CorrelationSummary",
    "poisson_combined_moments",
    "poisson_marginal_moment",
    "moment_set",
    "marginal_correlation",
    "correlation_grid",
    "design_from_profile",
    "probit_joint_prob",
    "logit_moments_via_probit",
    "bernoulli_beta_moments",
    "betabinomial_aggregate",
    "approx_moments_delta",
    "marginal_mean_rows",
    "marginal_fixed_effect",
]

# scale constant aligning the logistic CDF with the normal CDF
LOGIT_PROBIT_SCALE = 16.0 * math.sqrt(3.0) / (15.0 * math.pi)

_MAX_MOMENT_ORDER = 30
_MAX_PROBIT_N = 15
_EXP_GUARD = 700.0


@dataclass(frozen=True)
class MomentSet:
    """Marginal means and covariance over one subject's occasions, plus any
    requested higher moments; ``approximate`` marks bridge-based results."""

    means: np.ndarray
    cov: np.ndarray
    higher: dict = field(default_factory=dict)
    approximate: bool = False

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.cov)

    def correlation(self) -> np.ndarray:
        sd = np.sqrt(np.diag(self.cov))
        if (sd <= 0).any():
            raise DomainError("zero marginal variance; correlation undefined")
        return self.cov / np.outer(sd, sd)


def _as_designs(X, Z, q: int):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.asarray(Z, dtype=float)
    if Z.size == 0:
        Z = np.zeros((X.shape[0], max(q, 1)))
    Z = np.atleast_2d(Z)
    if Z.shape[0] != X.shape[0]:
        raise DomainError("X and Z must have the same number of rows")
    return X, Z


def _poisson_moment_core(
    xi, D, mean_theta: float, var_theta: float, X, Z, shared_theta: bool
) -> MomentSet:
    """Lognormal-style count moments for multiplicative overdispersion with
    mean ``mean_theta`` and variance ``var_theta``."""
    xi = np.asarray(xi, dtype=float)
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if var_theta < 0 or mean_theta <= 0:
        raise DomainError("overdispersion moments must satisfy mean > 0, variance >= 0")
    w = np.linalg.eigvalsh(0.5 * (D + D.T))
    if w.min() < -1e-10:
        raise DomainError("D must be positive semi-definite")
    X, Z = _as_designs(X, Z, D.shape[0])
    a = X @ xi
    zdz = Z @ D @ Z.T
    c = 0.5 * np.diag(zdz)
    m = np.exp(a + c)  # E(kappa_j)
    means = mean_theta * m
    # E(kappa_j kappa_k) = exp(a_j + a_k + c_j + c_k + z_j' D z_k)
    ekk = np.exp(a[:, None] + a[None, :] + c[:, None] + c[None, :] + zdz)
    e_theta_pair = mean_theta**2 + (var_theta if shared_theta else 0.0)
    cov = e_theta_pair * ekk - np.outer(means, means)
    e_theta2 = var_theta + mean_theta**2
    var = means + e_theta2 * np.exp(2.0 * a + 2.0 * np.diag(zdz)) - means**2
    np.fill_diagonal(cov, var)
    return MomentSet(means=means, cov=cov)


def poisson_combined_moments(xi, D, var_theta: float, X, Z, shared_theta: bool = False) -> MomentSet:
    """Marginal moments for counts with log link, normal effects with
    covariance D in the predictor, and mean-one multiplicative
    overdispersion with variance ``var_theta``.

    Independent overdispersion inflates only the variances; with
    ``shared_theta`` the single subject-level effect also adds to every
    covariance.
    """
    return _poisson_moment_core(xi, D, 1.0, var_theta, X, Z, shared_theta)


def poisson_marginal_moment(k: int, alpha: float, beta: float, x, xi, z, D) -> float:
    """k-th marginal moment of one count outcome: the Stirling expansion of
    the conditional moment, integrated over the gamma and normal effects."""
    if k != int(k) or k < 1:
        raise DomainError("moment order must be a positive integer")
    if k > _MAX_MOMENT_ORDER:
        raise DomainError(f"moment order capped at {_MAX_MOMENT_ORDER}")
    if alpha <= 0 or beta <= 0:
        raise DomainError("alpha and beta must be positive")
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    z = np.asarray(z, dtype=float)
    D = np.atleast_2d(np.asarray(D, dtype=float)) if np.size(D) else np.zeros((z.size, z.size))
    a = float(x @ xi)
    zdz = float(z @ D @ z) if z.size else 0.0
    terms = []
    for ell in range(0, int(k) + 1):
        s = stirling2(int(k), ell)
        if s == 0:
            continue
        expo = (
            math.log(s)
            + ell * math.log(beta)
            + log_gamma(alpha + ell)
            - log_gamma(alpha)
            + ell * a
            + 0.5 * ell * ell * zdz
        )
        if expo > _EXP_GUARD:
            raise NumericError(
                f"moment term overflows (exponent {expo:.1f}); reduce k or the variance"
            )
        terms.append(expo)
    m = max(terms)
    return float(math.exp(m) * sum(math.exp(t - m) for t in terms))


def _theta_mean_var(spec: ModelSpec, params: Params):
    if not spec.has_overdispersion:
        return 1.0, 0.0
    if spec.is_bernoulli:
        p0 = params.bernoulli_mean()
        if params.alpha is not None and params.beta is not None:
            s = params.alpha + params.beta
            return p0, params.alpha * params.beta / (s * s * (s + 1.0))
        return p0, 0.0  # independent beta effect: only the mean is identified
    if params.alpha is None or params.beta is None:
        raise DomainError("gamma overdispersion needs alpha and beta")
    return params.alpha * params.beta, params.alpha * params.beta**2


def moment_set(spec: ModelSpec, params: Params, X, Z) -> MomentSet:
    """Closed-form MomentSet for the families that admit one (counts,
    normal, probit; logit via the probit bridge, flagged approximate)."""
    X, Z = _as_designs(X, Z, max(spec.q, 1))
    fam = spec.family
    if fam == "poisson":
        mean_theta, var_theta = _theta_mean_var(spec, params)
        return _poisson_moment_core(
            params.xi,
            params.D if spec.q else np.zeros((1, 1)),
            mean_theta,
            var_theta,
            X,
            Z if spec.q else np.zeros((X.shape[0], 1)),
            shared_theta=(spec.overdispersion == "shared"),
        )
    if fam == "normal":
        means = X @ params.xi
        cov = (Z @ params.D @ Z.T if spec.q else np.zeros((X.shape[0], X.shape[0]))) + params.sigma2 * np.eye(X.shape[0])
        return MomentSet(means=means, cov=cov)
    if fam == "bernoulli-probit":
        if spec.overdispersion == "shared":
            raise UnsupportedModelError("closed-form probit moments cover independent effects")
        pi0 = params.bernoulli_mean() if spec.has_overdispersion else 1.0
        return _probit_moment_set(X @ params.xi, Z if spec.q else np.zeros((X.shape[0], 1)), params.D if spec.q else np.zeros((1, 1)), pi0)
    if fam == "bernoulli-logit":
        if spec.overdispersion == "shared":
            raise UnsupportedModelError("closed-form logit moments cover independent effects")
        pi0 = params.bernoulli_mean() if spec.has_overdispersion else 1.0
        return logit_moments_via_probit(params.xi, params.D if spec.q else np.zeros((1, 1)), pi0, X, Z if spec.q else np.zeros((X.shape[0], 1)))
    raise UnsupportedModelError(
        f"no closed-form moment set for family {fam!r}; simulate instead"
    )


def _probit_moment_set(xb: np.ndarray, Z: np.ndarray, D: np.ndarray, pi0: float, scale: float = 1.0, approximate: bool = False) -> MomentSet:
    """Mean vector and covariance for threshold outcomes: success means
    pi0 * P(latent normal below the scaled predictor)."""
    n = xb.shape[0]
    sigma = np.eye(n) + scale * scale * (Z @ D @ Z.T)
    sd = np.sqrt(np.diag(sigma))
    limits = scale * xb / sd
    means = pi0 * std_normal_cdf(limits)
    cov = np.empty((n, n))
    for j in range(n):
        for k in range(j + 1, n):
            r = sigma[j, k] / (sd[j] * sd[k])
            p11 = pi0 * pi0 * bvn_cdf(limits[j], limits[k], r)
            cov[j, k] = cov[k, j] = p11 - means[j] * means[k]
    np.fill_diagonal(cov, means * (1.0 - means))
    return MomentSet(means=means, cov=cov, approximate=approximate)


def probit_joint_prob(pattern, xb, Z, D, pi0: float, tol: float = 1e-7, seed: int = 0) -> float:
    """Probability of one binary response pattern under the probit model
    with independent beta-mean ``pi0`` thinning and normal effects.

    The all-ones pattern is a single scaled multivariate-normal orthant
    probability with covariance I + Z D Z'; other patterns expand by
    inclusion-exclusion over the zero positions.
    """
    pattern = np.asarray(pattern, dtype=float).reshape(-1)
    if not np.isin(pattern, (0.0, 1.0)).all():
        raise DomainError("pattern must be a vector of 0/1")
    n = pattern.size
    if n > _MAX_PROBIT_N:
        raise UnsupportedModelError(f"pattern length capped at {_MAX_PROBIT_N}")
    if not 0.0 < pi0 <= 1.0:
        raise DomainError("pi0 must lie in (0, 1]")
    xb = np.asarray(xb, dtype=float).reshape(-1)
    if xb.size != n:
        raise DomainError("xb must have one entry per pattern position")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    sigma = np.eye(n) + Z @ D @ Z.T
    sd = np.sqrt(np.diag(sigma))
    limits = xb / sd
    corr = sigma / np.outer(sd, sd)

    ones = np.flatnonzero(pattern == 1.0)
    zeros = np.flatnonzero(pattern == 0.0)

    def ones_prob(idx):
        if idx.size == 0:
            return 1.0
        if np.allclose(corr[np.ix_(idx, idx)], np.eye(idx.size)):
            return float(np.prod(std_normal_cdf(limits[idx])))
        if idx.size == 1:
            return float(std_normal_cdf(limits[idx[0]]))
        if idx.size == 2:
            return bvn_cdf(limits[idx[0]], limits[idx[1]], float(corr[idx[0], idx[1]]))
        p, _ = mvn_cdf(limits[idx], CorrelationMatrix(corr[np.ix_(idx, idx)]), tol=tol, seed=seed)
        return p

    from itertools import combinations

    total = 0.0
    for r in range(zeros.size + 1):
        for sub in combinations(zeros.tolist(), r):
            idx = np.sort(np.concatenate([ones, np.asarray(sub, dtype=int)])).astype(int)
            total += (-1.0) ** r * pi0 ** idx.size * ones_prob(idx)
    return float(min(1.0, max(0.0, total)))


def logit_moments_via_probit(xi, D, pi0: float, X, Z) -> MomentSet:
    """Approximate logit-link moments via the logistic-to-normal CDF match:
    the predictor is rescaled by 16*sqrt(3)/(15*pi) and pushed through the
    probit closed forms. Flagged approximate."""
    xi = np.asarray(xi, dtype=float)
    D = np.atleast_2d(np.asarray(D, dtype=float))
    X, Z = _as_designs(X, Z, D.shape[0])
    return _probit_moment_set(
        X @ xi, Z, D, pi0, scale=LOGIT_PROBIT_SCALE, approximate=True
    )


def bernoulli_beta_moments(kappas, alpha: float, beta: float, rho_shared: float | None = None) -> MomentSet:
    """Moments for binary outcomes whose success probability is a beta
    effect times a fixed-effect probability (no normal effects).

    ``rho_shared`` is the correlation between the per-occasion beta draws:
    omitted or 0 for independent draws, 1 when all occasions share one.
    """
    k = np.asarray(kappas, dtype=float).reshape(-1)
    if (k <= 0).any() or (k > 1).any():
        raise DomainError("kappa values must lie in (0, 1]")
    if alpha <= 0 or beta <= 0:
        raise DomainError("alpha and beta must be positive")
    rho = 0.0 if rho_shared is None else float(rho_shared)
    if not -1.0 <= rho <= 1.0:
        raise DomainError("rho_shared must lie in [-1, 1]")
    s = alpha + beta
    p0 = alpha / s
    var_theta = alpha * beta / (s * s * (s + 1.0))
    means = p0 * k
    cov = rho * var_theta * np.outer(k, k)
    np.fill_diagonal(cov, means * (1.0 - means))
    return MomentSet(means=means, cov=cov)


def betabinomial_aggregate(n: int, pi: float, rho: float):
    """Mean and variance of the sum of ``n`` exchangeable binary outcomes
    with common success probability ``pi`` and pairwise correlation
    ``rho``."""
    if n != int(n) or n < 1:
        raise DomainError("n must be a positive integer")
    if not 0.0 <= pi <= 1.0:
        raise DomainError("pi must lie in [0, 1]")
    n = int(n)
    lo = -1.0 / (n - 1.0) if n > 1 else -1.0
    if not lo <= rho <= 1.0:
        raise DomainError(f"rho must lie in [{lo:.4g}, 1] for n = {n}")
    mean = n * pi
    var = n * pi * (1.0 - pi) * (1.0 + (n - 1.0) * rho)
    if var < 0:
        raise DomainError("negative variance; inputs inconsistent")
    return float(mean), float(var)


_LINKS = {
    "poisson": (np.exp, np.exp, np.exp),
    "normal": (
        lambda e: e,
        lambda e: np.ones_like(np.asarray(e, dtype=float)),
        lambda e: np.zeros_like(np.asarray(e, dtype=float)),
    ),
    "bernoulli-logit": (
        lambda e: 1.0 / (1.0 + np.exp(-e)),
        lambda e: (lambda k: k * (1 - k))(1.0 / (1.0 + np.exp(-e))),
        lambda e: (lambda k: k * (1 - k) * (1 - 2 * k))(1.0 / (1.0 + np.exp(-e))),
    ),
    "bernoulli-probit": (
        std_normal_cdf,
        lambda e: np.exp(-0.5 * e * e) / math.sqrt(2 * math.pi),
        lambda e: -e * np.exp(-0.5 * e * e) / math.sqrt(2 * math.pi),
    ),
}


def approx_moments_delta(spec: ModelSpec, params: Params, X, Z) -> MomentSet:
    """Second-order expansion of the predictor factor around zero normal
    effects, combined with the overdispersion effect's mean and variance.

    Exact for the identity link; a fast approximation elsewhere.
    """
    if spec.family not in _LINKS:
        raise UnsupportedModelError(f"no delta-method expansion for family {spec.family!r}")
    g, g1, g2 = _LINKS[spec.family]
    X, Z = _as_designs(X, Z, max(spec.q, 1))
    D = params.D if spec.q else np.zeros((Z.shape[1], Z.shape[1]))
    eta = X @ params.xi
    zdz = Z @ D @ Z.T
    diag = np.diag(zdz)
    kappa_mean = g(eta) + 0.5 * g2(eta) * diag
    kappa_cov = (g1(eta)[:, None] * g1(eta)[None, :]) * zdz
    mean_theta, var_theta = _theta_mean_var(spec, params)
    shared = spec.overdispersion == "shared"
    means = mean_theta * kappa_mean
    e_theta2 = var_theta + mean_theta**2
    # Var(theta*kappa) = E(theta^2) E(kappa^2) - E(theta)^2 E(kappa)^2
    var_mu = e_theta2 * (np.diag(kappa_cov) + kappa_mean**2) - (mean_theta * kappa_mean) ** 2
    cov_theta = var_theta if shared else 0.0
    e_kk = kappa_cov + np.outer(kappa_mean, kappa_mean)
    cov = (cov_theta + mean_theta**2) * e_kk - np.outer(means, means)
    if spec.family == "poisson":
        var_y = means + var_mu
    elif spec.is_bernoulli:
        var_y = means * (1.0 - means)
    else:  # normal
        var_y = params.sigma2 + var_mu
    np.fill_diagonal(cov, var_y)
    return MomentSet(means=means, cov=cov, approximate=True)


@dataclass(frozen=True)
class CorrelationSummary:
    """Correlation function evaluated over a grid of occasions."""

    labels: np.ndarray
    matrix: np.ndarray
    pairs: list
    values: list
    min_value: float
    min_pair: tuple
    max_value: float
    max_pair: tuple
    approximate: bool = False


def marginal_correlation(spec: ModelSpec, params: Params, X, Z, pairs=None) -> CorrelationSummary:
    """Marginal correlations between occasions from the closed-form
    moments, with the smallest and largest off-diagonal values and the
    occasion pairs where they occur."""
    ms = moment_set(spec, params, X, Z)
    corr = ms.correlation()
    n = corr.shape[0]
    if n < 2:
        raise DomainError("need at least two occasions for a correlation")
    all_pairs = [(j, k) for j in range(n) for k in range(j + 1, n)]
    use = all_pairs if pairs is None else [(int(a), int(b)) for a, b in pairs]
    values = [float(corr[j, k]) for j, k in use]
    off = [(float(corr[j, k]), (j, k)) for j, k in all_pairs]
    min_value, min_pair = min(off)
    max_value, max_pair = max(off)
    return CorrelationSummary(
        labels=np.arange(n),
        matrix=corr,
        pairs=use,
        values=values,
        min_value=min_value,
        min_pair=min_pair,
        max_value=max_value,
        max_pair=max_pair,
        approximate=ms.approximate,
    )


def design_from_profile(spec: ModelSpec, times, profile=None, time_col: str = "time"):
    """Build one pseudo-subject's design over a time grid.

    Columns resolve as: ``intercept`` -> 1, the time column -> the grid
    value, ``a:b`` -> the product of its factors, anything else -> the
    constant from ``profile``.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    profile = dict(profile or {})

    def column(name):
        out = np.ones_like(times)
        for factor in name.split(":"):
            if factor == "intercept":
                continue
            if factor == time_col:
                out = out * times
            elif factor in profile:
                out = out * float(profile[factor])
            else:
                raise DataError(
                    f"covariate {factor!r} is not the time column and has no profile value"
                )
        return out

    X = np.column_stack([column(c) for c in spec.fixed_effects])
    Z = (
        np.column_stack([column(c) for c in spec.random_effects])
        if spec.q
        else np.zeros((times.size, 1))
    )
    return X, Z


def correlation_grid(
    spec: ModelSpec, params: Params, times, profile=None, time_col: str = "time"
) -> CorrelationSummary:
    """Correlation function over a time grid, reported with the time labels
    (not the grid indices)."""
    times = np.asarray(times, dtype=float).reshape(-1)
    X, Z = design_from_profile(spec, times, profile=profile, time_col=time_col)
    summary = marginal_correlation(spec, params, X, Z)
    to_label = lambda pair: (times[pair[0]], times[pair[1]])
    return CorrelationSummary(
        labels=times,
        matrix=summary.matrix,
        pairs=[to_label(p) for p in summary.pairs],
        values=summary.values,
        min_value=summary.min_value,
        min_pair=to_label(summary.min_pair),
        max_value=summary.max_value,
        max_pair=to_label(summary.max_pair),
        approximate=summary.approximate,
    )


def marginal_mean_rows(spec: ModelSpec, params: Params, X, Z) -> np.ndarray:
    """Closed-form marginal mean per design row (logit rows are
    bridge-approximate)."""
    X, Z = _as_designs(X, Z, max(spec.q, 1))
    D = params.D if spec.q else np.zeros((Z.shape[1], Z.shape[1]))
    fam = spec.family
    eta = X @ params.xi
    zdz = np.einsum("nq,qr,nr->n", Z, D, Z)
    if fam == "poisson":
        mean_theta, _ = _theta_mean_var(spec, params)
        return mean_theta * np.exp(eta + 0.5 * zdz)
    if fam == "normal":
        return eta
    if fam == "bernoulli-probit":
        pi0 = params.bernoulli_mean() if spec.has_overdispersion else 1.0
        return pi0 * std_normal_cdf(eta / np.sqrt(1.0 + zdz))
    if fam == "bernoulli-logit":
        pi0 = params.bernoulli_mean() if spec.has_overdispersion else 1.0
        c = LOGIT_PROBIT_SCALE
        return pi0 * std_normal_cdf(c * eta / np.sqrt(1.0 + c * c * zdz))
    if fam == "weibull":
        rho = params.rho if params.rho is not None else 1.0
        if spec.has_overdispersion:
            alpha, beta = params.alpha, params.beta
            if alpha * rho <= 1.0:
                raise MomentExistenceError(
                    "weibull-gamma marginal mean requires alpha > 1/rho"
                )
            etheta = math.exp(log_gamma(alpha - 1.0 / rho) - log_gamma(alpha)) * beta ** (
                -1.0 / rho
            )
        else:
            etheta = 1.0
        gam = math.exp(log_gamma(1.0 + 1.0 / rho))
        return gam * etheta * np.exp(-eta / rho + zdz / (2.0 * rho * rho))
    raise UnsupportedModelError(fam)


def marginal_fixed_effect(
    spec: ModelSpec,
    params: Params,
    profile_null: dict,
    profile_alt: dict,
    vcov_packed=None,
    time: float = 0.0,
    time_col: str = "time",
):
    """Difference of closed-form marginal means between two covariate
    profiles, with a delta-method standard error when the packed-parameter
    covariance from a fit is supplied.

    Returns ``(estimate, se_or_None, approximate)``.
    """

    def mean_for(p: Params) -> float:
        vals = []
        for prof in (profile_null, profile_alt):
            X, Z = design_from_profile(spec, [time], profile=prof, time_col=time_col)
            vals.append(float(marginal_mean_rows(spec, p, X, Z)[0]))
        return vals[1] - vals[0]

    est = mean_for(params)
    approximate = spec.family == "bernoulli-logit"
    if vcov_packed is None:
        return est, None, approximate
    from .model import pack, unpack

    x = pack(spec, params)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (mean_for(unpack(xp, spec)) - mean_for(unpack(xm, spec))) / (2.0 * h)
    var = float(grad @ np.asarray(vcov_packed) @ grad)
    return est, math.sqrt(max(var, 0.0)), approximate
