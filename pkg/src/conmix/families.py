"""Exponential-family members and conjugate random-effect pairings.

The two catalogs here carry the algebra the rest of the package runs on:

* ``FamilyMember`` describes an outcome distribution through its cumulant,
  link, and normalizer, so densities and mean/variance come from one generic
  formula.
* ``ConjugatePair`` describes how a random effect multiplying the mean can be
  integrated out in closed form, both in the plain two-stage setting and in
  the rescaled setting where a positive predictor factor ``kappa`` multiplies
  the effect first ("strong" pairings: normal-normal and the gamma pairs;
  the beta pairing is conjugate but does not survive rescaling).

All catalog objects are immutable; every function is pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import betaln, expit, gammaln

from .exceptions import (
    DomainError,
    MomentExistenceError,
    StrongConjugacyError,
)
from .special import std_normal_cdf, std_normal_pdf

__all__ = [
    "FamilyMember",
    "ConjugatePair",
    "get_family",
    "get_pair",
    "density",
    "log_density",
    "mean_variance",
    "conjugate_marginal",
    "strong_conjugate_marginal",
    "marginal_moments",
    "FAMILY_KINDS",
    "PAIR_NAMES",
]

FAMILY_KINDS = ("normal", "bernoulli-logit", "bernoulli-probit", "poisson", "weibull")
PAIR_NAMES = ("normal-normal", "poisson-gamma", "bernoulli-beta", "weibull-gamma")


@dataclass(frozen=True)
class FamilyMember:
    """One exponential-family outcome model.

    ``natural_link`` is False for the probit member (its index is not the
    natural parameter) and ``power_transformed`` is True for the Weibull,
    which is an exponential family in ``y**rho`` rather than in ``y``.
    """

    kind: str
    psi: Callable[[float], float] | None
    psi_prime: Callable[[float], float] | None
    psi_double: Callable[[float], float] | None
    inverse_link: Callable[[float], float]
    link: Callable[[float], float]
    natural_link: bool = True
    power_transformed: bool = False
    discrete: bool = False
    fixed_dispersion: float | None = 1.0
    rho: float = 1.0

    def check_support(self, y) -> None:
        y = np.asarray(y, dtype=float)
        if not np.isfinite(y).all():
            raise DomainError(f"{self.kind}: outcome must be finite")
        if self.kind in ("bernoulli-logit", "bernoulli-probit"):
            if not np.isin(y, (0.0, 1.0)).all():
                raise DomainError(f"{self.kind}: outcomes must lie in {{0, 1}}")
        elif self.kind == "poisson":
            if (y < 0).any() or (y != np.round(y)).any():
                raise DomainError("poisson: outcomes must be nonnegative integers")
        elif self.kind == "weibull":
            if (y <= 0).any():
                raise DomainError("weibull: outcomes must be strictly positive")


def get_family(kind: str, rho: float = 1.0) -> FamilyMember:
    """Look up a family member by kind.

    ``rho`` only matters for the Weibull member (``rho = 1`` is the
    exponential model).
    """
    if kind == "normal":
        return FamilyMember(
            kind,
            psi=lambda e: 0.5 * e * e,
            psi_prime=lambda e: e,
            psi_double=lambda e: np.ones_like(np.asarray(e, dtype=float)),
            inverse_link=lambda e: e,
            link=lambda m: m,
            fixed_dispersion=None,
        )
    if kind == "bernoulli-logit":
        return FamilyMember(
            kind,
            psi=lambda e: np.logaddexp(0.0, e),
            psi_prime=expit,
            psi_double=lambda e: expit(e) * (1.0 - expit(e)),
            inverse_link=expit,
            link=lambda m: np.log(m / (1.0 - m)),
            discrete=True,
        )
    if kind == "bernoulli-probit":
        return FamilyMember(
            kind,
            psi=None,
            psi_prime=None,
            psi_double=None,
            inverse_link=std_normal_cdf,
            link=None,
            natural_link=False,
            discrete=True,
        )
    if kind == "poisson":
        return FamilyMember(
            kind,
            psi=np.exp,
            psi_prime=np.exp,
            psi_double=np.exp,
            inverse_link=np.exp,
            link=np.log,
            discrete=True,
        )
    if kind == "weibull":
        if not (np.isfinite(rho) and rho > 0):
            raise DomainError(f"weibull shape must be positive, got {rho}")
        return FamilyMember(
            kind,
            psi=None,
            psi_prime=None,
            psi_double=None,
            inverse_link=np.exp,  # eta is the log of the rate multiplier
            link=np.log,
            power_transformed=True,
            rho=rho,
        )
    raise DomainError(f"unknown family kind {kind!r}; choose from {FAMILY_KINDS}")


def log_density(member: FamilyMember, y, eta, phi: float = 1.0):
    """Log density/mass of one outcome at natural index ``eta``.

    For the Weibull member ``eta`` is the log rate in the ``y**rho`` scale
    and the value is reported on the original ``y`` scale (Jacobian
    included).
    """
    member.check_support(y)
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    kind = member.kind
    if kind == "normal":
        if phi <= 0:
            raise DomainError("normal dispersion must be positive")
        return (y * eta - 0.5 * eta**2) / phi - 0.5 * y**2 / phi - 0.5 * np.log(2 * np.pi * phi)
    if kind == "bernoulli-logit":
        return y * eta - np.logaddexp(0.0, eta)
    if kind == "bernoulli-probit":
        p = std_normal_cdf(eta)
        return np.where(y == 1.0, np.log(p), np.log1p(-p))
    if kind == "poisson":
        return y * eta - np.exp(eta) - gammaln(y + 1.0)
    if kind == "weibull":
        r = member.rho
        return eta + np.log(r) + (r - 1.0) * np.log(y) - np.exp(eta) * y**r
    raise DomainError(f"unknown family kind {kind!r}")


def density(member: FamilyMember, y, eta, phi: float = 1.0):
    """Density/mass of one outcome; see ``log_density``."""
    out = np.exp(log_density(member, y, eta, phi))
    return float(out) if np.ndim(out) == 0 else out


def mean_variance(member: FamilyMember, eta, phi: float = 1.0):
    """Mean and variance implied by the cumulant at index ``eta``.

    The natural-link members return (psi'(eta), phi * psi''(eta)); probit
    and Weibull use their closed forms directly.
    """
    eta = np.asarray(eta, dtype=float)
    if not np.isfinite(eta).all():
        raise DomainError("mean_variance: eta must be finite")
    kind = member.kind
    if kind == "normal":
        return float(eta), float(phi)
    if kind == "bernoulli-logit":
        p = expit(eta)
        return float(p), float(p * (1.0 - p))
    if kind == "bernoulli-probit":
        p = std_normal_cdf(eta)
        return float(p), float(p * (1.0 - p))
    if kind == "poisson":
        lam = np.exp(eta)
        return float(lam), float(lam)
    if kind == "weibull":
        r = member.rho
        w = np.exp(eta)  # rate in the y**rho scale
        m = w ** (-1.0 / r) * math.gamma(1.0 / r + 1.0)
        v = w ** (-2.0 / r) * (math.gamma(2.0 / r + 1.0) - math.gamma(1.0 / r + 1.0) ** 2)
        return float(m), float(v)
    raise DomainError(f"unknown family kind {kind!r}")


# ---------------------------------------------------------------------------
# Conjugate pairings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConjugatePair:
    """A (data model, random effect) pairing whose product integrates in
    closed form.

    The generic fields express both densities in the shared algebraic shape
    ``exp{a [y h(theta) - g(theta)] + normalizer}``; marginalization then
    only updates the effect's hyperparameters ``(gamma, psi)``.

    ``c_y(y, phi)``        data-model normalizer (original outcome scale)
    ``c_star(gamma, psi, phi)``  effect normalizer
    ``sufficient(y)``      the statistic entering the hyperparameter update
                           (``y`` itself, or ``y**rho`` for the Weibull)
    ``absorb(kappa, gamma, psi)``  hyperparameters of ``kappa * theta``;
                           None when the pairing is not strong
    """

    name: str
    data_kind: str
    effect_kind: str
    strong_conjugate: bool
    h: Callable
    g: Callable
    c_y: Callable
    c_star: Callable
    sufficient: Callable
    validate_hyper: Callable
    absorb: Callable | None = None
    effect_logpdf: Callable | None = None
    rho: float = 1.0

    def natural_to_generic(self, **natural):
        """Translate the distribution's usual parameters into the generic
        (phi, gamma, psi) triple. Accepted keys depend on the pairing."""
        return _TRANSLATIONS[self.name](self.rho, **natural)


def _normal_c_y(y, phi):
    return -0.5 * y * y / phi - 0.5 * math.log(2 * math.pi * phi)


def _normal_c_star(gamma, psi, phi):
    return -0.5 * gamma * psi * psi - 0.5 * math.log(2 * math.pi / gamma)


def _gamma_c_star_poisson(gamma, psi, phi):
    a = 1.0 + gamma * psi  # = alpha
    return a * math.log(gamma) - gammaln(a)


def _beta_c_star(gamma, psi, phi):
    return -betaln(gamma * psi + 1.0, gamma * (1.0 - psi) + 1.0)


def _gamma_c_star_weibull(gamma, psi, phi):
    a = gamma * phi + 1.0  # = alpha
    return a * math.log(gamma * psi) - gammaln(a)


def _translate_normal(rho, mu=0.0, d=None, sigma2=None):
    if d is None or sigma2 is None or d <= 0 or sigma2 <= 0:
        raise DomainError("normal-normal needs d > 0 and sigma2 > 0")
    return sigma2, 1.0 / d, mu


def _translate_poisson(rho, alpha=None, beta=None):
    if alpha is None or beta is None or alpha <= 0 or beta <= 0:
        raise DomainError("poisson-gamma needs alpha > 0 and beta > 0")
    return 1.0, 1.0 / beta, beta * (alpha - 1.0)


def _translate_beta(rho, alpha=None, beta=None):
    if alpha is None or beta is None or alpha <= 0 or beta <= 0:
        raise DomainError("bernoulli-beta needs alpha > 0 and beta > 0")
    gamma = alpha + beta - 2.0
    if gamma == 0.0:
        # alpha + beta = 2 makes the (gamma, psi) chart degenerate; nudge
        # within roundoff of the same distribution.
        gamma = 1e-12
    return 1.0, gamma, (alpha - 1.0) / gamma


def _translate_weibull(rho, alpha=None, beta=None, rate=1.0):
    if alpha is None or beta is None or alpha <= 0 or beta <= 0 or rate <= 0:
        raise DomainError("weibull-gamma needs alpha, beta, rate > 0")
    return 1.0 / rate, rate * (alpha - 1.0), 1.0 / (beta * rate * (alpha - 1.0))


_TRANSLATIONS = {
    "normal-normal": _translate_normal,
    "poisson-gamma": _translate_poisson,
    "bernoulli-beta": _translate_beta,
    "weibull-gamma": _translate_weibull,
}


def get_pair(name: str, rho: float = 1.0) -> ConjugatePair:
    """Look up a conjugate pairing. ``exponential-gamma`` is accepted as an
    alias for the Weibull pairing with shape 1."""
    if name == "exponential-gamma":
        name, rho = "weibull-gamma", 1.0
    if name == "normal-normal":
        return ConjugatePair(
            name="normal-normal",
            data_kind="normal",
            effect_kind="normal",
            strong_conjugate=True,
            h=lambda t: t,
            g=lambda t: 0.5 * t * t,
            c_y=_normal_c_y,
            c_star=_normal_c_star,
            sufficient=lambda y: y,
            validate_hyper=lambda gamma, psi: gamma > 0 and np.isfinite(psi),
            absorb=lambda k, gamma, psi: (gamma / (k * k), k * psi),
            effect_logpdf=lambda t, gamma, psi: -0.5 * gamma * (t - psi) ** 2
            + 0.5 * math.log(gamma / (2 * math.pi)),
        )
    if name == "poisson-gamma":
        return ConjugatePair(
            name="poisson-gamma",
            data_kind="poisson",
            effect_kind="gamma",
            strong_conjugate=True,
            h=np.log,
            g=lambda t: t,
            c_y=lambda y, phi: -gammaln(y + 1.0),
            c_star=_gamma_c_star_poisson,
            sufficient=lambda y: y,
            validate_hyper=lambda gamma, psi: gamma > 0 and 1.0 + gamma * psi > 0,
            absorb=lambda k, gamma, psi: (gamma / k, k * psi),
            effect_logpdf=lambda t, gamma, psi: _gamma_logpdf(t, 1.0 + gamma * psi, 1.0 / gamma),
        )
    if name == "bernoulli-beta":
        return ConjugatePair(
            name="bernoulli-beta",
            data_kind="bernoulli-logit",
            effect_kind="beta",
            strong_conjugate=False,
            h=lambda t: np.log(t / (1.0 - t)),
            g=lambda t: -np.log1p(-t),
            c_y=lambda y, phi: 0.0,
            c_star=_beta_c_star,
            sufficient=lambda y: y,
            validate_hyper=lambda gamma, psi: gamma * psi + 1.0 > 0
            and gamma * (1.0 - psi) + 1.0 > 0,
            absorb=None,
            effect_logpdf=lambda t, gamma, psi: (gamma * psi) * np.log(t)
            + (gamma * (1.0 - psi)) * np.log1p(-t)
            + _beta_c_star(gamma, psi, 1.0),
        )
    if name == "weibull-gamma":
        if not (np.isfinite(rho) and rho > 0):
            raise DomainError(f"weibull shape must be positive, got {rho}")
        return ConjugatePair(
            name="weibull-gamma",
            data_kind="weibull",
            effect_kind="gamma",
            strong_conjugate=True,
            h=lambda t: -t,
            g=lambda t, phi=1.0: -np.log(t) * phi,  # phi here is the pair dispersion 1/rate
            c_y=lambda y, phi: np.log(rho / phi) + (rho - 1.0) * np.log(y),
            c_star=_gamma_c_star_weibull,
            sufficient=lambda y: y**rho,
            validate_hyper=lambda gamma, psi: gamma > 0 and psi > 0,
            # alpha unchanged, beta -> kappa * beta: gamma stays, psi scales
            absorb=lambda k, gamma, psi: (gamma, psi / k),
            effect_logpdf=None,  # set below, needs phi for alpha
            rho=rho,
        )
    raise DomainError(f"unknown pair {name!r}; choose from {PAIR_NAMES}")


def _gamma_logpdf(t, alpha, scale):
    t = np.asarray(t, dtype=float)
    return (alpha - 1.0) * np.log(t) - t / scale - alpha * math.log(scale) - gammaln(alpha)


def conjugate_marginal(pair: ConjugatePair, y, phi: float, gamma: float, psi: float):
    """Marginal density of one outcome after integrating the conjugate
    effect out: the data normalizer plus the effect normalizer, minus the
    effect normalizer at the posterior-updated hyperparameters."""
    if not pair.validate_hyper(gamma, psi):
        raise DomainError(
            f"{pair.name}: hyperparameters (gamma={gamma}, psi={psi}) outside the admissible region"
        )
    if phi <= 0:
        raise DomainError(f"{pair.name}: dispersion must be positive, got {phi}")
    member = get_family(pair.data_kind, rho=pair.rho)
    member.check_support(y)
    u = pair.sufficient(np.asarray(y, dtype=float))
    inv_phi = 1.0 / phi
    g_new = inv_phi + gamma
    if g_new == 0.0:
        # beta pairing with alpha + beta = 1: the (gamma, psi) chart is
        # singular there, but gamma * psi stays finite; nudge within roundoff
        g_new = 1e-12
    p_new = (inv_phi * u + gamma * psi) / g_new
    val = pair.c_y(np.asarray(y, dtype=float), phi) + pair.c_star(gamma, psi, phi)
    val = val - _cstar_vec(pair, g_new, p_new, phi)
    out = np.exp(val)
    return float(out) if np.ndim(out) == 0 else out


def _cstar_vec(pair, gamma, psi, phi):
    gamma = np.asarray(gamma, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if gamma.ndim == 0 and psi.ndim == 0:
        return pair.c_star(float(gamma), float(psi), phi)
    gamma, psi = np.broadcast_arrays(gamma, psi)
    return np.array([pair.c_star(g, p, phi) for g, p in zip(gamma.ravel(), psi.ravel())]).reshape(
        gamma.shape
    )


def strong_conjugate_marginal(
    pair: ConjugatePair, y, kappa: float, phi: float, gamma: float, psi: float
):
    """Marginal density of one outcome whose conjugate effect is first
    multiplied by the positive factor ``kappa``.

    Only pairings whose effect distribution is closed under rescaling
    support this; the beta pairing is not, and raises.
    """
    if not pair.strong_conjugate or pair.absorb is None:
        raise StrongConjugacyError(
            f"{pair.name}: the effect distribution does not stay in its class "
            "under rescaling (lack of strong conjugacy)"
        )
    if not (np.isfinite(kappa) and kappa > 0):
        raise DomainError(f"kappa must be positive, got {kappa}")
    g2, p2 = pair.absorb(kappa, gamma, psi)
    return conjugate_marginal(pair, y, phi, g2, p2)


def marginal_moments(pair: ConjugatePair, **params):
    """Closed-form mean and variance of the two-stage marginal.

    Accepted parameters mirror ``natural_to_generic``: ``mu, d, sigma2``
    for normal-normal; ``alpha, beta`` for the gamma and beta pairings;
    plus ``rate`` for the Weibull pairing (shape comes from the pair).
    Raises when a requested moment does not exist.
    """
    name = pair.name
    if name == "normal-normal":
        mu, d, sigma2 = params["mu"], params["d"], params["sigma2"]
        if d <= 0 or sigma2 <= 0:
            raise DomainError("normal-normal needs d > 0 and sigma2 > 0")
        return float(mu), float(sigma2 + d)
    alpha, beta = params["alpha"], params["beta"]
    if alpha <= 0 or beta <= 0:
        raise DomainError(f"{name} needs alpha > 0 and beta > 0")
    if name == "poisson-gamma":
        return float(alpha * beta), float(alpha * beta * (beta + 1.0))
    if name == "bernoulli-beta":
        p = alpha / (alpha + beta)
        return float(p), float(p * (1.0 - p))
    if name == "weibull-gamma":
        rate = params.get("rate", 1.0)
        r = pair.rho
        if rate <= 0:
            raise DomainError("weibull-gamma needs rate > 0")
        if alpha * r <= 1.0:
            raise MomentExistenceError(
                f"weibull-gamma mean requires alpha > 1/rho (alpha={alpha}, rho={r})"
            )
        ws = (rate * beta) ** (1.0 / r)
        mean = math.exp(gammaln(alpha - 1.0 / r) + gammaln(1.0 / r + 1.0) - gammaln(alpha)) / ws
        if alpha * r <= 2.0:
            raise MomentExistenceError(
                f"weibull-gamma variance requires alpha > 2/rho (alpha={alpha}, rho={r})"
            )
        m2 = (
            math.exp(gammaln(alpha - 2.0 / r) + gammaln(2.0 / r + 1.0) - gammaln(alpha))
            / ws**2
        )
        return float(mean), float(m2 - mean * mean)
    raise DomainError(f"unknown pair {name!r}")
