"""Scikit-learn style estimator facade.

``CombinedModel`` wraps the whole pipeline (spec construction, validation,
maximum-likelihood fitting, marginal-mean prediction) behind the familiar
``fit`` / ``predict`` / ``score`` / ``get_params`` surface, so the model
slots into sklearn-style tooling. The estimand stays a repeated-measures
model, so ``fit`` takes a long-format DataFrame (or Dataset) rather than an
(X, y) pair.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from .estimate import FitOptions, fit as _fit
from .exceptions import DataError
from .likelihood import LikelihoodEvaluator, QuadratureRule
from .model import Dataset, ModelSpec, build_designs, validate
from .moments import marginal_mean_rows

__all__ = ["CombinedModel"]


class CombinedModel(BaseEstimator):
    """Repeated-measures GLM with conjugate overdispersion and normal
    random effects, estimated by maximum likelihood.

    Parameters mirror the model specification: the outcome ``family``
    (``normal``, ``logit``, ``probit``, ``poisson``, ``weibull``,
    ``exponential``), ordered ``fixed_effects`` / ``random_effects`` column
    names (the reserved name ``intercept`` is a column of ones), the
    ``overdispersion`` structure (``none`` / ``independent`` / ``shared``)
    and the gamma identifiability ``constraint``.

    After ``fit``: ``params_`` (natural-scale dict), ``se_``, ``loglik_``,
    ``converged_`` and the full ``result_``.
    """

    def __init__(
        self,
        family="poisson",
        fixed_effects=("intercept",),
        random_effects=(),
        overdispersion="none",
        constraint="mean_one",
        beta_value=None,
        weibull_shape_free=False,
        quad_order=None,
        adaptive=True,
        starts=3,
        max_iter=500,
        tol=1e-6,
        seed=0,
    ):
        self.family = family
        self.fixed_effects = fixed_effects
        self.random_effects = random_effects
        self.overdispersion = overdispersion
        self.constraint = constraint
        self.beta_value = beta_value
        self.weibull_shape_free = weibull_shape_free
        self.quad_order = quad_order
        self.adaptive = adaptive
        self.starts = starts
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed

    # -- plumbing ----------------------------------------------------------

    def _spec(self) -> ModelSpec:
        return ModelSpec(
            family=self.family,
            fixed_effects=tuple(self.fixed_effects),
            random_effects=tuple(self.random_effects),
            overdispersion=self.overdispersion,
            constraint=self.constraint,
            beta_value=self.beta_value,
            weibull_shape_free=self.weibull_shape_free,
        )

    def _quad(self) -> QuadratureRule:
        return QuadratureRule(order=self.quad_order, adaptive=self.adaptive)

    @staticmethod
    def _as_dataset(data) -> Dataset:
        if isinstance(data, Dataset):
            return data
        if isinstance(data, pd.DataFrame):
            return Dataset(data)
        raise DataError("expected a conmix Dataset or a pandas DataFrame")

    # -- estimator API ------------------------------------------------------

    def fit(self, data, y=None):
        """Fit by maximum likelihood on long-format repeated measures.

        ``y`` is ignored (the outcome lives in the data's ``y`` column);
        it is accepted for pipeline compatibility.
        """
        spec = self._spec()
        ds = self._as_dataset(data)
        violations = validate(spec, ds)
        if violations:
            raise DataError("; ".join(violations))
        opts = FitOptions(max_iter=self.max_iter, gtol=self.tol, starts=self.starts, seed=self.seed)
        res = _fit(spec, ds, self._quad(), opts)
        self.result_ = res
        self.spec_ = spec
        self.params_ = dict(res.estimates)
        self.se_ = dict(res.se)
        self.loglik_ = res.loglik
        self.converged_ = res.converged
        self.n_subjects_, self.n_obs_, _ = res.data_fingerprint
        return self

    def predict(self, data):
        """Closed-form marginal mean for every row (logit rows are
        bridge-approximate)."""
        self._check_fitted()
        ds = self._as_dataset(data)
        params = self.result_.params
        out = np.empty(ds.n_obs)
        designs = build_designs(self.spec_, ds)
        for subj, (_, sl) in zip(designs, ds.subject_slices()):
            out[sl] = marginal_mean_rows(self.spec_, params, subj.X, subj.Z)
        return out

    def score(self, data, y=None):
        """Total marginal log-likelihood of ``data`` at the fitted
        parameters (larger is better)."""
        self._check_fitted()
        ds = self._as_dataset(data)
        return LikelihoodEvaluator(self.spec_, ds, self._quad()).total(self.result_.params)

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise DataError("this CombinedModel instance is not fitted yet; call fit first")
