"""Maximum-likelihood fitting, standard errors, and model comparison.

Fitting is quasi-Newton (BFGS) on the packed, unconstrained parameter
vector with central-difference gradients, optionally from several jittered
starting points. Standard errors come from the inverse of the negative
numerical Hessian, pushed through to the natural scale by the delta
method. Variance-component comparisons use the half-chi-squared boundary
mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .exceptions import DataError, DomainError, FitError, InitializationError
from .likelihood import LikelihoodEvaluator, QuadratureRule
from .model import (
    Dataset,
    ModelSpec,
    Params,
    natural_names,
    natural_values,
    pack,
    packed_names,
    unpack,
)
from .special import std_normal_cdf

__all__ = [
    "FitOptions",
    "FitResult",
    "fit",
    "standard_errors",
    "hessian_vcov",
    "central_diff_grad",
    "wald_test",
    "boundary_variance_test",
    "compare_models",
    "default_init",
]

_PENALTY = 1e12
_BOUNDARY_LOG = -11.5  # log-scale packed value treated as "at the boundary"


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings: iteration cap, gradient tolerance on the packed
    scale, number of jittered starts, and the jitter seed."""

    max_iter: int = 500
    gtol: float = 1e-6
    starts: int = 3
    seed: int = 0
    init: Params | None = None


@dataclass
class FitResult:
    """Estimates and diagnostics from one maximum-likelihood fit."""

    spec: ModelSpec
    estimates: dict
    se: dict
    packed: np.ndarray
    packed_names: list
    vcov_packed: np.ndarray
    vcov_natural: np.ndarray
    natural_order: list
    free_names: list
    loglik: float
    converged: bool
    iterations: int
    n_evaluations: int
    gradient_norm: float
    se_unreliable: bool
    boundary: bool
    messages: list
    data_fingerprint: tuple
    quad_order: int
    quad_adaptive: bool

    @property
    def minus2ll(self) -> float:
        return -2.0 * self.loglik

    @property
    def params(self) -> Params:
        return unpack(self.packed, self.spec)


def central_diff_grad(f, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient with per-coordinate step h = rel_step*(1+|x|)."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def numeric_hessian(f, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Symmetric central-difference Hessian, step h_i = rel_step*(1+|x_i|)."""
    x = np.asarray(x, dtype=float)
    k = x.size
    h = rel_step * (1.0 + np.abs(x))
    hess = np.empty((k, k))
    f0 = f(x)
    for i in range(k):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        hess[i, i] = (f(xp) - 2.0 * f0 + f(xm)) / (h[i] * h[i])
    for i in range(k):
        for j in range(i + 1, k):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[i, j]] += [h[i], h[j]]
            xpm[i] += h[i]
            xpm[j] -= h[j]
            xmp[i] -= h[i]
            xmp[j] += h[j]
            xmm[[i, j]] -= [h[i], h[j]]
            hess[i, j] = hess[j, i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * h[i] * h[j])
    return hess


def hessian_vcov(loglik_fn, x: np.ndarray, rel_step: float = 1e-4):
    """Covariance of estimates as the inverse negative Hessian of a
    log-likelihood callable at its maximizer.

    Returns ``(vcov, unreliable)``; a non-positive-definite curvature falls
    back to the pseudo-inverse and flags the result.
    """
    hess = numeric_hessian(loglik_fn, x, rel_step=rel_step)
    neg = -0.5 * (hess + hess.T)
    unreliable = False
    try:
        eig_min = float(np.linalg.eigvalsh(neg)[0])
    except np.linalg.LinAlgError:
        eig_min = -1.0
    if eig_min <= 0.0:
        unreliable = True
        vcov = np.linalg.pinv(neg)
    else:
        vcov = np.linalg.inv(neg)
    return vcov, unreliable


def default_init(spec: ModelSpec, data: Dataset) -> Params:
    """Starting values: fixed effects from the plain one-stage model with
    random effects ignored, small variance components, unit shape and
    overdispersion parameters."""
    base = ModelSpec(
        family=spec.family,
        fixed_effects=spec.fixed_effects,
        random_effects=(),
        overdispersion="none",
    )
    X = np.column_stack(
        [np.ones(data.n_obs) if c == "intercept" else _col(data, c) for c in spec.fixed_effects]
    )
    y = data.column("y")
    if spec.family == "normal":
        xi, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ xi
        sigma2 = float(max(resid.var(ddof=min(len(y) - 1, X.shape[1])), 1e-6))
        glm_params = Params(xi=xi, sigma2=sigma2)
    else:
        ev = LikelihoodEvaluator(base, data, QuadratureRule())
        base_kwargs = {"rho": 1.0} if spec.family == "weibull" else {}

        def nll(v):
            val = ev.total(Params(xi=v, **base_kwargs))
            return -val if np.isfinite(val) else _PENALTY

        x0 = np.zeros(spec.p)
        res = minimize(nll, x0, method="BFGS", jac=lambda v: central_diff_grad(nll, v),
                       options={"gtol": 1e-8, "maxiter": 200})
        glm_params = Params(xi=res.x, **base_kwargs)

    kwargs: dict = {}
    if spec.has_overdispersion:
        if spec.is_bernoulli:
            kwargs["pi0"] = 0.5
            if spec.overdispersion == "shared":
                kwargs["alpha"] = 1.0
                kwargs["beta"] = 1.0
        else:
            kwargs["alpha"] = 1.0
            if spec.constraint == "mean_one":
                kwargs["beta"] = 1.0
            elif spec.constraint == "exponential":
                kwargs["beta"] = 1.0
            else:
                kwargs["beta"] = float(spec.beta_value)
    if spec.family == "weibull":
        kwargs["rho"] = 1.0
    if spec.family == "normal":
        kwargs["sigma2"] = glm_params.sigma2
    d_chol = math.sqrt(0.1) * np.eye(spec.q)
    return Params(xi=glm_params.xi, d_chol=d_chol, **kwargs)


def _col(data: Dataset, name: str) -> np.ndarray:
    if ":" in name:
        out = np.ones(data.n_obs)
        for factor in name.split(":"):
            out = out * (np.ones(data.n_obs) if factor == "intercept" else data.column(factor))
        return out
    return data.column(name)


def fit(
    spec: ModelSpec,
    data: Dataset,
    quad: QuadratureRule | None = None,
    opts: FitOptions | None = None,
) -> FitResult:
    """Maximize the marginal log-likelihood.

    Runs BFGS from the default start plus ``opts.starts - 1`` uniformly
    jittered copies (+-0.5 on the packed scale), keeps the best final
    log-likelihood, and always returns a result; ``converged`` is False
    when no start met the gradient tolerance.
    """
    opts = opts or FitOptions()
    quad = quad or QuadratureRule()
    evaluator = LikelihoodEvaluator(spec, data, quad)
    init = opts.init if opts.init is not None else default_init(spec, data)
    x0 = pack(spec, init)

    n_eval = [0]

    def objective(v):
        n_eval[0] += 1
        try:
            val = evaluator.total(unpack(v, spec))
        except Exception:
            return _PENALTY
        return -val if np.isfinite(val) else _PENALTY

    if objective(x0) >= _PENALTY:
        raise InitializationError(
            "log-likelihood is not finite at the starting point; check the spec and data"
        )

    rng = np.random.default_rng(opts.seed)
    starts = [x0]
    for _ in range(max(0, opts.starts - 1)):
        starts.append(x0 + rng.uniform(-0.5, 0.5, size=x0.size))

    best = None
    messages: list[str] = []
    for k, start in enumerate(starts):
        if objective(start) >= _PENALTY:
            messages.append(f"start {k}: non-finite likelihood, skipped")
            continue
        try:
            res = minimize(
                objective,
                start,
                method="BFGS",
                jac=lambda v: central_diff_grad(objective, v, rel_step=1e-5),
                options={"gtol": opts.gtol, "maxiter": opts.max_iter},
            )
        except Exception as exc:  # pragma: no cover - scipy internal failures
            messages.append(f"start {k}: optimizer error: {exc}")
            continue
        gnorm = float(np.max(np.abs(res.jac))) if res.jac is not None else math.inf
        # central differences floor the achievable gradient accuracy at
        # roughly eps * |loglik| / h; don't call a noise-limited optimum
        # unconverged
        noise_floor = 5e-11 * (1.0 + abs(float(res.fun)))
        cand = {
            "x": res.x,
            "loglik": -float(res.fun),
            "nit": int(res.nit),
            "gnorm": gnorm,
            "converged": bool(res.success) or gnorm <= max(opts.gtol, noise_floor),
            "message": str(res.message),
        }
        if not np.isfinite(cand["loglik"]) or cand["loglik"] <= -_PENALTY / 2:
            messages.append(f"start {k}: diverged ({res.message})")
            continue
        if best is None or cand["loglik"] > best["loglik"]:
            best = cand
    if best is None:
        raise FitError("all optimizer starts failed: " + "; ".join(messages))
    if not best["converged"]:
        messages.append(f"not converged: {best['message']} (|grad| = {best['gnorm']:.3g})")

    vcov_packed, vcov_nat, se_vec, unreliable = _se_pieces(spec, evaluator, best["x"])
    boundary = bool((best["x"] < _BOUNDARY_LOG)[_log_scale_mask(spec)].any())
    if boundary:
        unreliable = True
        messages.append("estimate at or near a variance-component boundary; se unreliable")

    order = natural_names(spec)
    values = natural_values(spec, unpack(best["x"], spec))
    return FitResult(
        spec=spec,
        estimates=dict(zip(order, values.tolist())),
        se=dict(zip(order, se_vec.tolist())),
        packed=np.asarray(best["x"], dtype=float),
        packed_names=packed_names(spec),
        vcov_packed=vcov_packed,
        vcov_natural=vcov_nat,
        natural_order=order,
        free_names=natural_names(spec, free_only=True),
        loglik=best["loglik"],
        converged=bool(best["converged"]),
        iterations=best["nit"],
        n_evaluations=n_eval[0],
        gradient_norm=best["gnorm"],
        se_unreliable=unreliable,
        boundary=boundary,
        messages=messages,
        data_fingerprint=data.fingerprint(),
        quad_order=quad.resolve(spec.q),
        quad_adaptive=quad.adaptive,
    )


def _log_scale_mask(spec: ModelSpec) -> np.ndarray:
    return np.array([n.startswith(("log_", "logit_")) for n in packed_names(spec)])


def _natural_jacobian(spec: ModelSpec, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    def nat(v):
        return natural_values(spec, unpack(v, spec))

    k = x.size
    cols = []
    for i in range(k):
        h = rel_step * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((nat(xp) - nat(xm)) / (2.0 * h))
    return np.stack(cols, axis=1)


def _se_pieces(spec: ModelSpec, evaluator: LikelihoodEvaluator, x: np.ndarray):
    def ll(v):
        try:
            val = evaluator.total(unpack(v, spec))
        except Exception:
            return -_PENALTY
        return val if np.isfinite(val) else -_PENALTY

    vcov_packed, unreliable = hessian_vcov(ll, x, rel_step=1e-4)
    J = _natural_jacobian(spec, x)
    vcov_nat = J @ vcov_packed @ J.T
    diag = np.diag(vcov_nat).copy()
    if (diag < -1e-10).any():
        unreliable = True
    se = np.sqrt(np.clip(diag, 0.0, None))
    return vcov_packed, vcov_nat, se, unreliable


def standard_errors(
    spec: ModelSpec,
    data: Dataset,
    quad: QuadratureRule | None,
    packed_estimates: np.ndarray,
):
    """Covariance of the packed estimates (inverse negative numerical
    Hessian) and natural-scale standard errors via the delta method.

    Returns ``(vcov_packed, se_dict, vcov_natural, unreliable)``.
    """
    evaluator = LikelihoodEvaluator(spec, data, quad or QuadratureRule())
    vcov_packed, vcov_nat, se_vec, unreliable = _se_pieces(
        spec, evaluator, np.asarray(packed_estimates, dtype=float)
    )
    return vcov_packed, dict(zip(natural_names(spec), se_vec.tolist())), vcov_nat, unreliable


def wald_test(fit_result: FitResult, contrast, null_value: float = 0.0):
    """Z statistic and two-sided p-value for a linear combination of
    natural-scale parameters.

    ``contrast`` is either a parameter name or a mapping name -> weight.
    """
    if isinstance(contrast, str):
        contrast = {contrast: 1.0}
    order = fit_result.natural_order
    c = np.zeros(len(order))
    for name, w in contrast.items():
        if name not in order:
            raise DomainError(f"unknown parameter {name!r}; available: {order}")
        c[order.index(name)] = float(w)
    est = float(c @ np.array([fit_result.estimates[n] for n in order]))
    var = float(c @ fit_result.vcov_natural @ c)
    if var <= 0:
        raise DomainError("contrast variance is not positive; fit may be degenerate")
    z = (est - null_value) / math.sqrt(var)
    p = 2.0 * (1.0 - std_normal_cdf(abs(z)))
    return z, p


def wald_from_estimate(estimate: float, se: float, null_value: float = 0.0):
    """Z and two-sided p straight from a printed estimate/se pair."""
    if se <= 0:
        raise DomainError("standard error must be positive")
    z = (estimate - null_value) / se
    return z, 2.0 * (1.0 - std_normal_cdf(abs(z)))


def boundary_variance_test(loglik_null: float, loglik_alt: float):
    """Likelihood-ratio test for one variance component sitting on the
    boundary of its parameter space under the null.

    The reference distribution is the half-half mixture of a point mass at
    zero and chi-squared with 1 df, so p = 0.5 * P(chi2_1 > w).
    """
    w = 2.0 * (loglik_alt - loglik_null)
    if w < -1e-8:
        raise DomainError(
            f"alternative log-likelihood is below the null by {-w / 2:.3g}; models are not nested"
        )
    w = max(0.0, w)
    p = 1.0 - std_normal_cdf(math.sqrt(w))
    return w, float(p)


_COMPARE_KINDS = ("lr_boundary", "wald_variance_boundary", "lr", "wald")


def compare_models(fits, nesting):
    """Nested-model comparison table.

    ``fits`` is a list of (label, FitResult); ``nesting`` a list of
    (null_label, alt_label, kind) with kind one of ``lr_boundary`` (the
    boundary-corrected likelihood ratio), ``wald_variance_boundary`` (Z of
    the single added variance-type parameter with the half-mixture p),
    or the interior variants ``lr`` / ``wald``.

    Returns a list of row dicts with keys null, alternative, kind,
    statistic, p.
    """
    table = dict(fits)
    rows = []
    for null_label, alt_label, kind in nesting:
        if kind not in _COMPARE_KINDS:
            raise DomainError(f"unknown comparison kind {kind!r}; choose from {_COMPARE_KINDS}")
        if null_label not in table or alt_label not in table:
            raise DomainError(f"unknown model label in ({null_label!r}, {alt_label!r})")
        f0, f1 = table[null_label], table[alt_label]
        if f0.data_fingerprint != f1.data_fingerprint:
            raise DataError(
                f"models {null_label!r} and {alt_label!r} were fitted on different datasets"
            )
        if kind in ("lr_boundary", "lr"):
            w = max(0.0, 2.0 * (f1.loglik - f0.loglik)) if f0 is not f1 else 0.0
            if f0 is not f1 and f1.loglik < f0.loglik - 1e-8:
                raise DomainError(
                    f"{alt_label!r} has lower log-likelihood than {null_label!r}; not nested/converged"
                )
            tail = 2.0 * (1.0 - std_normal_cdf(math.sqrt(w)))  # P(chi2_1 > w)
            p = 0.5 * tail if kind == "lr_boundary" else tail
            stat = w
        else:
            added = [n for n in f1.free_names if n not in f0.free_names]
            if f0 is f1 or not added:
                stat = 0.0
            elif len(added) > 1:
                raise DomainError(
                    f"comparison needs exactly one added parameter, got {added}"
                )
            else:
                name = added[0]
                se = f1.se[name]
                if se <= 0:
                    raise DomainError(f"non-positive se for {name!r}")
                stat = f1.estimates[name] / se
            tail = 1.0 - std_normal_cdf(abs(stat))
            p = tail if kind == "wald_variance_boundary" else 2.0 * tail
        rows.append(
            {
                "null": null_label,
                "alternative": alt_label,
                "kind": kind,
                "statistic": float(stat),
                "p": float(p),
            }
        )
    return rows
