"""Marginal log-likelihood via analytic-plus-numerical integration.

The conjugate overdispersion effect is integrated out of each conditional
density in closed form; the normal random effects in the linear predictor
are then integrated numerically with (adaptive) Gauss-Hermite quadrature.
Everything is accumulated in log space, and subjects are processed in
vectorized buckets grouped by cluster size so repeated likelihood
evaluations inside an optimizer stay cheap.

``CONMIX_THREADS`` caps the worker count used to spread subject buckets
over threads; the reduction order is fixed, so results are bit-identical
for any thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln, log_ndtr, logsumexp, ndtri

from .exceptions import DomainError, NumericError, UnsupportedModelError
from .model import Dataset, ModelSpec, Params, SubjectDesign, build_designs
from .special import gh_nodes

__all__ = [
    "QuadratureRule",
    "cond_density",
    "cond_log_density",
    "cond_density_shared",
    "subject_loglik",
    "total_loglik",
    "LikelihoodEvaluator",
]

_ETA_MAX = 300.0  # exp() guard; far outside any plausible linear predictor
_LOG_SQRT_PI = 0.5 * math.log(math.pi)


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite settings for the normal-effect integral.

    ``order=None`` resolves to 21 nodes for one random effect and 13 per
    dimension for two. With ``adaptive`` the rule is recentered at each
    subject's posterior mode and rescaled by the local curvature (the inner
    maximization is run to gradient norm < 1e-8), which keeps low orders
    accurate even for random-intercept variances above 1.
    """

    order: int | None = None
    adaptive: bool = True

    def resolve(self, q: int) -> int:
        if self.order is not None:
            if self.order < 1:
                raise DomainError("quadrature order must be >= 1")
            return int(self.order)
        return 13 if q == 2 else 21


def _clip_eta(eta):
    return np.clip(eta, -_ETA_MAX, _ETA_MAX)


# ---------------------------------------------------------------------------
# Conditional observation models on the linear-predictor scale.
# Each provides the per-observation log density with the conjugate effect
# integrated out, plus its first two eta-derivatives for mode finding.
# ---------------------------------------------------------------------------


class _PoissonPlain:
    separable = True

    def logf(self, y, eta):
        lam = np.exp(_clip_eta(eta))
        return y * eta - lam - gammaln(y + 1.0)

    def d1(self, y, eta):
        return y - np.exp(_clip_eta(eta))

    def d2(self, y, eta):
        return -np.exp(_clip_eta(eta))


class _PoissonGamma:
    """Negative-binomial conditional: Poisson rate kappa scaled by an
    independent gamma effect with shape alpha, scale beta."""

    separable = True

    def __init__(self, alpha, beta):
        self.alpha = alpha
        self.log_beta = math.log(beta)

    def logf(self, y, eta):
        t = _clip_eta(eta + self.log_beta)
        return (
            gammaln(y + self.alpha)
            - gammaln(self.alpha)
            - gammaln(y + 1.0)
            + y * t
            - (y + self.alpha) * np.logaddexp(0.0, t)
        )

    def d1(self, y, eta):
        return y - (y + self.alpha) * expit(eta + self.log_beta)

    def d2(self, y, eta):
        e = expit(eta + self.log_beta)
        return -(y + self.alpha) * e * (1.0 - e)


class _BernoulliLogit:
    """Bernoulli with success probability pi0 * logistic(eta); pi0 = 1 is
    the plain logistic model, pi0 < 1 the beta-effect mean."""

    separable = True

    def __init__(self, pi0=1.0):
        if not 0.0 < pi0 <= 1.0:
            raise DomainError(f"pi0 must lie in (0, 1], got {pi0}")
        self.pi0 = pi0

    def logf(self, y, eta):
        log_k = -np.logaddexp(0.0, -eta)  # log logistic(eta)
        one = math.log(self.pi0) + log_k
        # 1 - pi0*k = (1 - pi0) + pi0*(1 - k), computed stably
        u = (1.0 - self.pi0) + self.pi0 * expit(-eta)
        zero = np.log(u)
        return np.where(y == 1.0, one, zero)

    def d1(self, y, eta):
        k = expit(eta)
        s = k * (1.0 - k)
        u = (1.0 - self.pi0) + self.pi0 * (1.0 - k)
        return np.where(y == 1.0, 1.0 - k, -self.pi0 * s / u)

    def d2(self, y, eta):
        k = expit(eta)
        s = k * (1.0 - k)
        u = (1.0 - self.pi0) + self.pi0 * (1.0 - k)
        zero = -self.pi0 * (s * (1.0 - 2.0 * k) * u + self.pi0 * s * s) / (u * u)
        return np.where(y == 1.0, -s, zero)


class _BernoulliProbit:
    """Bernoulli with success probability pi0 * Phi(eta)."""

    separable = True

    def __init__(self, pi0=1.0):
        if not 0.0 < pi0 <= 1.0:
            raise DomainError(f"pi0 must lie in (0, 1], got {pi0}")
        self.pi0 = pi0

    def _pieces(self, eta):
        log_phi = -0.5 * eta * eta - 0.5 * math.log(2.0 * math.pi)
        log_cdf = log_ndtr(eta)
        mills = np.exp(log_phi - log_cdf)  # phi/Phi
        # 1 - pi0*Phi(eta) = (1 - pi0) + pi0*Phi(-eta)
        u = (1.0 - self.pi0) + self.pi0 * np.exp(log_ndtr(-eta))
        return log_phi, log_cdf, mills, u

    def logf(self, y, eta):
        _, log_cdf, _, u = self._pieces(eta)
        return np.where(y == 1.0, math.log(self.pi0) + log_cdf, np.log(u))

    def d1(self, y, eta):
        log_phi, _, mills, u = self._pieces(eta)
        phi = np.exp(log_phi)
        return np.where(y == 1.0, mills, -self.pi0 * phi / u)

    def d2(self, y, eta):
        log_phi, _, mills, u = self._pieces(eta)
        phi = np.exp(log_phi)
        one = -mills * (eta + mills)
        zero = self.pi0 * phi * (eta * u - self.pi0 * phi) / (u * u)
        return np.where(y == 1.0, one, zero)


class _WeibullPlain:
    """Event density with rate kappa = exp(eta) in the y**rho scale."""

    separable = True

    def __init__(self, rho):
        self.rho = rho

    def _t(self, y, eta):
        return _clip_eta(eta + self.rho * np.log(y))

    def logf(self, y, eta):
        return (
            eta + math.log(self.rho) + (self.rho - 1.0) * np.log(y) - np.exp(self._t(y, eta))
        )

    def d1(self, y, eta):
        return 1.0 - np.exp(self._t(y, eta))

    def d2(self, y, eta):
        return -np.exp(self._t(y, eta))


class _WeibullGamma:
    """Weibull rate scaled by an independent gamma effect."""

    separable = True

    def __init__(self, alpha, beta, rho):
        self.alpha = alpha
        self.log_beta = math.log(beta)
        self.rho = rho

    def _t(self, y, eta):
        return _clip_eta(eta + self.log_beta + self.rho * np.log(y))

    def logf(self, y, eta):
        const = (
            math.log(self.rho)
            + (self.rho - 1.0) * np.log(y)
            + math.log(self.alpha)
            + self.log_beta
        )
        return const + eta - (self.alpha + 1.0) * np.logaddexp(0.0, self._t(y, eta))

    def d1(self, y, eta):
        return 1.0 - (self.alpha + 1.0) * expit(self._t(y, eta))

    def d2(self, y, eta):
        e = expit(self._t(y, eta))
        return -(self.alpha + 1.0) * e * (1.0 - e)


class _SharedGamma:
    """Joint conditional for one subject whose occasions share a single
    gamma effect (Poisson or Weibull data model).

    The same conjugacy algebra as the independent case applies to the
    product over occasions: the gamma posterior update just accumulates
    every occasion's contribution.
    """

    separable = False

    def __init__(self, alpha, beta, kind, rho=1.0):
        self.alpha = alpha
        self.beta = beta
        self.kind = kind
        self.rho = rho

    def _parts(self, y, eta):
        if self.kind == "poisson":
            u = np.exp(_clip_eta(eta))  # kappa_j
            s = y.sum(axis=-1)  # total count
            base = (y * eta - gammaln(y + 1.0)).sum(axis=-1)
        else:
            u = np.exp(_clip_eta(eta)) * y**self.rho  # kappa_j y_j^rho
            n = y.shape[-1]
            s = float(n)
            base = (eta + math.log(self.rho) + (self.rho - 1.0) * np.log(y)).sum(axis=-1)
        return u, s, base

    def logf(self, y, eta):
        u, s, base = self._parts(y, eta)
        t = 1.0 / self.beta + u.sum(axis=-1)
        return (
            base
            + gammaln(self.alpha + s)
            - gammaln(self.alpha)
            - self.alpha * math.log(self.beta)
            - (self.alpha + s) * np.log(t)
        )

    def grad_eta(self, y, eta):
        u, s, _ = self._parts(y, eta)
        t = (1.0 / self.beta + u.sum(axis=-1))[..., None]
        lead = y if self.kind == "poisson" else 1.0
        return lead - (self.alpha + np.atleast_1d(s))[..., None] * u / t

    def hess_eta(self, y, eta):
        u, s, _ = self._parts(y, eta)
        t = 1.0 / self.beta + u.sum(axis=-1)
        a_s = self.alpha + np.atleast_1d(s)
        n = eta.shape[-1]
        diag = u / t[..., None]
        outer = u[..., :, None] * u[..., None, :] / (t[..., None, None] ** 2)
        h = outer - np.eye(n) * diag[..., None]
        return a_s[..., None, None] * h


class _SharedBeta:
    """Joint conditional for one subject with a single beta effect on the
    success probabilities: E_theta prod_j (theta k_j)^{y_j} (1 - theta k_j)^{1-y_j},
    expanded as a polynomial in theta and closed with beta moments."""

    separable = False

    def __init__(self, alpha, beta, link):
        self.alpha = alpha
        self.beta = beta
        self.link = link  # "logit" or "probit"

    def _kappa(self, eta):
        if self.link == "logit":
            return expit(eta)
        from .special import std_normal_cdf

        return std_normal_cdf(eta)

    def _moments(self, m):
        # E(theta^r) for r = 0..m
        r = np.arange(m)
        steps = (self.alpha + r) / (self.alpha + self.beta + r)
        return np.concatenate(([1.0], np.cumprod(steps)))

    def _prob_one(self, y_row, k_row):
        ones = y_row == 1.0
        pref = float(np.prod(k_row[ones])) if ones.any() else 1.0
        coeffs = np.array([1.0])
        for kj in k_row[~ones]:
            coeffs = np.concatenate((coeffs, [0.0])) - kj * np.concatenate(([0.0], coeffs))
        mom = self._moments(int(ones.sum()) + len(coeffs) - 1)
        val = pref * float(coeffs @ mom[int(ones.sum()):])
        return max(val, 1e-300)

    def logf(self, y, eta):
        k = self._kappa(eta)
        flat_eta = k.reshape(-1, k.shape[-1])
        flat_y = np.broadcast_to(y, k.shape).reshape(-1, k.shape[-1])
        out = np.array(
            [math.log(self._prob_one(flat_y[i], flat_eta[i])) for i in range(flat_eta.shape[0])]
        )
        return out.reshape(k.shape[:-1])

    def grad_eta(self, y, eta, h=1e-6):
        n = eta.shape[-1]
        g = np.empty_like(eta)
        for j in range(n):
            ep = eta.copy()
            em = eta.copy()
            ep[..., j] += h
            em[..., j] -= h
            g[..., j] = (self.logf(y, ep) - self.logf(y, em)) / (2.0 * h)
        return g

    def hess_eta(self, y, eta, h=1e-4):
        n = eta.shape[-1]
        shape = eta.shape[:-1] + (n, n)
        out = np.empty(shape)
        f0 = self.logf(y, eta)
        for j in range(n):
            for l in range(j, n):
                epp = eta.copy(); epp[..., j] += h; epp[..., l] += h
                epm = eta.copy(); epm[..., j] += h; epm[..., l] -= h
                emp = eta.copy(); emp[..., j] -= h; emp[..., l] += h
                emm = eta.copy(); emm[..., j] -= h; emm[..., l] -= h
                val = (self.logf(y, epp) - self.logf(y, epm) - self.logf(y, emp) + self.logf(y, emm)) / (
                    4.0 * h * h
                )
                out[..., j, l] = val
                out[..., l, j] = val
        return out


def _obs_model(spec: ModelSpec, params: Params):
    """Per-observation conditional model (independent or no overdispersion)."""
    fam = spec.family
    if spec.overdispersion == "independent" and not spec.is_bernoulli:
        if params.alpha is None or params.beta is None:
            raise DomainError("gamma overdispersion needs alpha and beta set")
    if fam == "poisson":
        if spec.overdispersion == "independent":
            return _PoissonGamma(params.alpha, params.beta)
        return _PoissonPlain()
    if fam == "bernoulli-logit":
        pi0 = params.bernoulli_mean() if spec.overdispersion == "independent" else 1.0
        return _BernoulliLogit(pi0)
    if fam == "bernoulli-probit":
        pi0 = params.bernoulli_mean() if spec.overdispersion == "independent" else 1.0
        return _BernoulliProbit(pi0)
    if fam == "weibull":
        rho = params.rho if params.rho is not None else 1.0
        if spec.overdispersion == "independent":
            return _WeibullGamma(params.alpha, params.beta, rho)
        return _WeibullPlain(rho)
    raise UnsupportedModelError(f"no conditional observation model for family {fam!r}")


def _shared_model(spec: ModelSpec, params: Params):
    fam = spec.family
    if fam == "poisson":
        return _SharedGamma(params.alpha, params.beta, "poisson")
    if fam == "weibull":
        rho = params.rho if params.rho is not None else 1.0
        return _SharedGamma(params.alpha, params.beta, "weibull", rho=rho)
    if fam in ("bernoulli-logit", "bernoulli-probit"):
        if params.alpha is None or params.beta is None:
            raise DomainError("shared beta effects need explicit alpha and beta")
        return _SharedBeta(params.alpha, params.beta, "logit" if fam.endswith("logit") else "probit")
    raise UnsupportedModelError(f"shared overdispersion is not supported for family {fam!r}")


# ---------------------------------------------------------------------------
# Public conditional densities (kappa scale)
# ---------------------------------------------------------------------------


def _kappa_to_eta(spec: ModelSpec, kappa):
    kappa = np.asarray(kappa, dtype=float)
    fam = spec.family
    if fam in ("poisson", "weibull"):
        if (kappa <= 0).any():
            raise DomainError("kappa must be positive")
        return np.log(kappa)
    if fam == "bernoulli-logit":
        if (kappa <= 0).any() or (kappa > 1).any():
            raise DomainError("kappa must lie in (0, 1] for a Bernoulli model")
        with np.errstate(divide="ignore"):
            return np.log(kappa) - np.log1p(-kappa)
    if fam == "bernoulli-probit":
        if (kappa <= 0).any() or (kappa > 1).any():
            raise DomainError("kappa must lie in (0, 1] for a Bernoulli model")
        return ndtri(kappa)
    if fam == "normal":
        return kappa
    raise UnsupportedModelError(fam)


def cond_log_density(spec: ModelSpec, params: Params, y, kappa):
    """Log conditional density of one outcome given the normal effects,
    with the conjugate overdispersion effect already integrated out.

    ``kappa`` is on the inverse-link scale: the Poisson/Weibull rate
    multiplier, the Bernoulli success probability from the predictor, or
    the normal mean.
    """
    if spec.overdispersion == "shared":
        raise UnsupportedModelError(
            "shared overdispersion couples occasions; use cond_density_shared"
        )
    spec.member().check_support(y)
    y = np.asarray(y, dtype=float)
    if spec.family == "normal":
        if spec.has_overdispersion:
            raise UnsupportedModelError(
                "normal outcomes identify a single set of random effects"
            )
        mu = np.asarray(kappa, dtype=float)
        s2 = params.sigma2
        return -0.5 * (y - mu) ** 2 / s2 - 0.5 * np.log(2.0 * np.pi * s2)
    eta = _kappa_to_eta(spec, kappa)
    model = _obs_model(spec, params)
    return model.logf(y, eta)


def cond_density(spec: ModelSpec, params: Params, y, kappa):
    out = np.exp(cond_log_density(spec, params, y, kappa))
    return float(out) if np.ndim(out) == 0 else out


def cond_density_shared(spec: ModelSpec, params: Params, y, kappa):
    """Joint conditional density of one subject's outcomes when all
    occasions share a single conjugate effect."""
    if spec.overdispersion != "shared":
        raise UnsupportedModelError("spec does not declare shared overdispersion")
    spec.member().check_support(y)
    y = np.asarray(y, dtype=float).reshape(-1)
    eta = np.asarray(_kappa_to_eta(spec, kappa), dtype=float).reshape(-1)
    if y.shape != eta.shape:
        raise DomainError("y and kappa must have matching lengths")
    model = _shared_model(spec, params)
    return float(np.exp(model.logf(y[None, :], eta[None, :])[0]))


# ---------------------------------------------------------------------------
# Quadrature over the normal effects
# ---------------------------------------------------------------------------


@dataclass
class _Bucket:
    idx: np.ndarray  # positions in the dataset's subject order
    ids: list
    Y: np.ndarray  # (m, n)
    X: np.ndarray  # (m, n, p)
    Z: np.ndarray  # (m, n, q)


def _group_buckets(designs: list[SubjectDesign]) -> list[_Bucket]:
    by_n: dict[int, list[int]] = {}
    for pos, d in enumerate(designs):
        by_n.setdefault(d.n, []).append(pos)
    buckets = []
    for n, positions in sorted(by_n.items()):
        buckets.append(
            _Bucket(
                idx=np.asarray(positions),
                ids=[designs[p].subject_id for p in positions],
                Y=np.stack([designs[p].y for p in positions]),
                X=np.stack([designs[p].X for p in positions]),
                Z=np.stack([designs[p].Z for p in positions]),
            )
        )
    return buckets


def _worker_count() -> int:
    raw = os.environ.get("CONMIX_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


class LikelihoodEvaluator:
    """Reusable likelihood machine for one (spec, dataset) pair.

    Groups subjects into equal-size buckets once, then evaluates per-subject
    log-likelihood contributions for any parameter value. The reduction
    order over subjects is fixed (dataset order), so totals are
    deterministic and permutation-invariant.
    """

    def __init__(self, spec: ModelSpec, data: Dataset, quad: QuadratureRule | None = None):
        self.spec = spec
        self.quad = quad or QuadratureRule()
        self.designs = build_designs(spec, data)
        self.n_subjects = len(self.designs)
        self.buckets = _group_buckets(self.designs)
        self.subject_ids = [d.subject_id for d in self.designs]

    def subject_logliks(self, params: Params) -> np.ndarray:
        out = np.empty(self.n_subjects)
        workers = _worker_count()
        tasks = []
        for bucket in self.buckets:
            if workers == 1 or len(bucket.idx) < 2 * workers:
                tasks.append(bucket)
            else:
                splits = np.array_split(np.arange(len(bucket.idx)), workers)
                for s in splits:
                    if len(s):
                        tasks.append(
                            _Bucket(
                                idx=bucket.idx[s],
                                ids=[bucket.ids[i] for i in s],
                                Y=bucket.Y[s],
                                X=bucket.X[s],
                                Z=bucket.Z[s],
                            )
                        )

        def run(b):
            return b.idx, _bucket_logliks(self.spec, params, b, self.quad)

        if workers == 1:
            results = [run(b) for b in tasks]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, tasks))
        for idx, vals in results:
            out[idx] = vals
        bad = ~np.isfinite(out)
        if bad.any():
            culprit = self.subject_ids[int(np.flatnonzero(bad)[0])]
            raise NumericError(f"non-finite likelihood contribution for subject {culprit!r}")
        return out

    def total(self, params: Params) -> float:
        return float(np.sum(self.subject_logliks(params)))


def _normal_exact_logliks(spec: ModelSpec, params: Params, bucket: _Bucket) -> np.ndarray:
    """Closed-form marginal for normal outcomes: the residual covariance
    plus the random-effect contribution, no quadrature needed."""
    mean = np.einsum("mnp,p->mn", bucket.X, params.xi)
    resid = bucket.Y - mean
    n = bucket.Y.shape[1]
    D = params.D
    if spec.q:
        V = np.einsum("mnq,qr,mkr->mnk", bucket.Z, D, bucket.Z)
    else:
        V = np.zeros((bucket.Y.shape[0], n, n))
    V = V + params.sigma2 * np.eye(n)
    chol = np.linalg.cholesky(V)
    sol = np.linalg.solve(chol, resid[..., None])[..., 0]
    quad_form = (sol**2).sum(axis=1)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    return -0.5 * (quad_form + logdet + n * math.log(2.0 * math.pi))


def _bucket_logliks(
    spec: ModelSpec, params: Params, bucket: _Bucket, quad: QuadratureRule
) -> np.ndarray:
    if spec.family == "normal":
        if spec.has_overdispersion:
            raise UnsupportedModelError(
                "normal outcomes identify a single set of random effects"
            )
        return _normal_exact_logliks(spec, params, bucket)

    model = (
        _shared_model(spec, params)
        if spec.overdispersion == "shared"
        else _obs_model(spec, params)
    )
    base = np.einsum("mnp,p->mn", bucket.X, params.xi)
    q = spec.q

    def joint_logf(eta):
        if model.separable:
            y = bucket.Y[:, None, :] if eta.ndim == 3 else bucket.Y
            return model.logf(y, eta).sum(axis=-1)
        y = bucket.Y[:, None, :] if eta.ndim == 3 else bucket.Y
        return model.logf(y, eta)

    if q == 0:
        return joint_logf(base)

    D = params.D
    diag = np.diag(D)
    if np.max(diag) <= 0.0:
        return joint_logf(base)  # degenerate effects pinned at zero
    d_chol = params.d_chol
    d_inv = np.linalg.inv(D)
    logdet_d = 2.0 * float(np.log(np.diag(d_chol)).sum())

    order = quad.resolve(q)
    nodes, weights = gh_nodes(order)
    log_w = np.log(weights)

    m = bucket.Y.shape[0]
    Z = bucket.Z

    def g_value(b):
        eta = base + np.einsum("mnq,mq->mn", Z, b)
        quad_form = np.einsum("mq,qr,mr->m", b, d_inv, b)
        return joint_logf(eta) - 0.5 * quad_form - 0.5 * (q * math.log(2 * math.pi) + logdet_d)

    def g_grad_hess(b):
        eta = base + np.einsum("mnq,mq->mn", Z, b)
        if model.separable:
            d1 = model.d1(bucket.Y, eta)
            d2 = model.d2(bucket.Y, eta)
            grad = np.einsum("mn,mnq->mq", d1, Z)
            hess = np.einsum("mn,mnq,mnr->mqr", d2, Z, Z)
        else:
            d1 = model.grad_eta(bucket.Y, eta)
            h = model.hess_eta(bucket.Y, eta)
            grad = np.einsum("mn,mnq->mq", d1, Z)
            hess = np.einsum("mjk,mjq,mkr->mqr", h, Z, Z)
        grad = grad - b @ d_inv
        hess = hess - d_inv
        return grad, hess

    if not quad.adaptive:
        # fixed rule centered at zero, scaled by chol(D)
        if q == 1:
            b_nodes = math.sqrt(2.0) * d_chol[0, 0] * nodes  # (K,)
            eta = base[:, None, :] + Z[:, None, :, 0] * b_nodes[None, :, None]
            vals = joint_logf(eta) + log_w[None, :]
            return logsumexp(vals, axis=1) - _LOG_SQRT_PI
        u1, u2 = np.meshgrid(nodes, nodes, indexing="ij")
        U = np.stack([u1.ravel(), u2.ravel()], axis=1)
        lw2 = (log_w[:, None] + log_w[None, :]).ravel()
        b_nodes = math.sqrt(2.0) * U @ d_chol.T  # (K2, 2)
        eta = base[:, None, :] + np.einsum("mnq,kq->mkn", Z, b_nodes)
        vals = joint_logf(eta) + lw2[None, :]
        return logsumexp(vals, axis=1) - 2.0 * _LOG_SQRT_PI

    # adaptive: find each subject's posterior mode by damped Newton
    b = np.zeros((m, q))
    g0 = g_value(b)
    for _ in range(80):
        grad, hess = g_grad_hess(b)
        if np.max(np.abs(grad)) < 1e-8:
            break
        step = _newton_step(grad, hess)
        t = np.ones(m)
        improved = np.zeros(m, dtype=bool)
        cand_best = b.copy()
        g_best = g0.copy()
        for _ls in range(30):
            cand = b + t[:, None] * step
            gc = g_value(cand)
            better = gc > g_best
            cand_best[better] = cand[better]
            g_best[better] = gc[better]
            improved |= better
            if improved.all():
                break
            t = np.where(improved, t, 0.5 * t)
        if not improved.any():
            break
        b, g0 = cand_best, g_best

    grad, hess = g_grad_hess(b)
    if q == 1:
        curv = np.maximum(-hess[:, 0, 0], 1e-8)
        scale = 1.0 / np.sqrt(curv)  # (m,)
        b_nodes = b[:, 0][:, None] + math.sqrt(2.0) * scale[:, None] * nodes[None, :]
        eta = base[:, None, :] + Z[:, None, :, 0] * b_nodes[:, :, None]
        quad_form = (
            d_inv[0, 0] * b_nodes**2
        )
        gvals = (
            joint_logf(eta)
            - 0.5 * quad_form
            - 0.5 * (math.log(2 * math.pi) + logdet_d)
        )
        vals = gvals + log_w[None, :] + nodes[None, :] ** 2
        return logsumexp(vals, axis=1) + 0.5 * math.log(2.0) + np.log(scale)

    # q == 2: tensor rule standardized by the local curvature
    neg_h = -hess
    neg_h = _force_positive_definite(neg_h)
    cov = np.linalg.inv(neg_h)
    C = np.linalg.cholesky(cov)  # (m, 2, 2)
    u1, u2 = np.meshgrid(nodes, nodes, indexing="ij")
    U = np.stack([u1.ravel(), u2.ravel()], axis=1)  # (K2, 2)
    lw2 = (log_w[:, None] + log_w[None, :]).ravel()
    usq = (U**2).sum(axis=1)
    b_nodes = b[:, None, :] + math.sqrt(2.0) * np.einsum("mqr,kr->mkq", C, U)
    eta = base[:, None, :] + np.einsum("mnq,mkq->mkn", Z, b_nodes)
    quad_form = np.einsum("mkq,qr,mkr->mk", b_nodes, d_inv, b_nodes)
    gvals = joint_logf(eta) - 0.5 * quad_form - 0.5 * (2 * math.log(2 * math.pi) + logdet_d)
    vals = gvals + lw2[None, :] + usq[None, :]
    log_det_c = np.log(np.diagonal(C, axis1=1, axis2=2)).sum(axis=1)
    return logsumexp(vals, axis=1) + math.log(2.0) + log_det_c


def _newton_step(grad, hess):
    """Ascent step -H^{-1} g with the Hessian forced negative definite."""
    m, q = grad.shape
    if q == 1:
        h = np.minimum(hess[:, 0, 0], -1e-8)
        return -(grad / h[:, None])
    neg = _force_positive_definite(-hess)
    return np.linalg.solve(neg, grad[:, :, None])[:, :, 0]


def _force_positive_definite(mats, floor=1e-8):
    """Shift stacked symmetric matrices so their smallest eigenvalue is at
    least ``floor`` (used on curvatures near flat regions)."""
    w = np.linalg.eigvalsh(mats)
    shift = np.maximum(floor - w[:, 0], 0.0)
    out = mats + shift[:, None, None] * np.eye(mats.shape[-1])
    return out


def subject_loglik(
    spec: ModelSpec,
    params: Params,
    subject: SubjectDesign,
    quad: QuadratureRule | None = None,
) -> float:
    """Log of one subject's marginal likelihood contribution."""
    quad = quad or QuadratureRule()
    bucket = _Bucket(
        idx=np.array([0]),
        ids=[subject.subject_id],
        Y=subject.y[None, :],
        X=subject.X[None, :, :],
        Z=subject.Z[None, :, :],
    )
    val = _bucket_logliks(spec, params, bucket, quad)[0]
    if not np.isfinite(val):
        raise NumericError(
            f"non-finite likelihood contribution for subject {subject.subject_id!r}"
        )
    return float(val)


def total_loglik(
    spec: ModelSpec,
    params: Params,
    data: Dataset,
    quad: QuadratureRule | None = None,
) -> float:
    """Marginal log-likelihood: the fixed-order sum of subject contributions."""
    return LikelihoodEvaluator(spec, data, quad).total(params)
