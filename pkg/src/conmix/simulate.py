"""Seeded data generation from the hierarchical model.

Each subject gets an independent child stream spawned from the master
seed, so generation is reproducible and order-independent: the data for
subject i do not depend on how many subjects come before it or on any
parallel execution schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .exceptions import DataError, DomainError, NumericError, UnsupportedModelError
from .model import Dataset, ModelSpec, Params
from .special import std_normal_cdf

__all__ = ["SimDesign", "simulate"]


@dataclass(frozen=True)
class SimDesign:
    """What to generate: subject count, the occasion schedule (a count
    meaning times 1..n, or an explicit time vector), named covariate
    generators, and the master seed.

    Generator forms:
      {"kind": "constant", "value": v}   same value in every row
      {"kind": "time"}                   the occasion time
      {"kind": "bernoulli", "p": p}      one subject-level 0/1 draw
      {"kind": "column_file", "path": f} single-column CSV, one value per row
    """

    n_subjects: int
    occasions: int | Sequence[float] = 1
    covariates: Mapping[str, Mapping] = field(default_factory=dict)
    seed: int = 0

    def times(self) -> np.ndarray:
        if isinstance(self.occasions, (int, np.integer)):
            if self.occasions < 1:
                raise DomainError("occasions must be >= 1")
            return np.arange(1, int(self.occasions) + 1, dtype=float)
        t = np.asarray(list(self.occasions), dtype=float)
        if t.size < 1:
            raise DomainError("occasion schedule is empty")
        return t


def _file_column(path: str, needed: int) -> np.ndarray:
    frame = pd.read_csv(path)
    col = frame.iloc[:, 0].to_numpy(dtype=float)
    if col.size != needed:
        raise DataError(
            f"column file {path!r} has {col.size} values; design needs {needed}"
        )
    return col


def _resolve_design_row(names, cov: Mapping[str, np.ndarray], n: int) -> np.ndarray:
    cols = []
    for name in names:
        out = np.ones(n)
        for factor in name.split(":"):
            if factor == "intercept":
                continue
            if factor not in cov:
                raise DataError(
                    f"design column {factor!r} has no covariate generator in the simulation design"
                )
            out = out * cov[factor]
        cols.append(out)
    return np.column_stack(cols) if cols else np.empty((n, 0))


def simulate(spec: ModelSpec, params: Params, design: SimDesign) -> Dataset:
    """Draw a dataset from the hierarchical model: normal effects in the
    predictor, conjugate effects on the mean, then the outcome family."""
    if design.n_subjects < 1:
        raise DomainError("need at least one subject")
    times = design.times()
    n = times.size
    if spec.has_overdispersion and not spec.is_bernoulli:
        if params.alpha is None or params.beta is None:
            raise DomainError("gamma overdispersion needs alpha and beta to simulate")
    if spec.has_overdispersion and spec.is_bernoulli:
        if params.alpha is None or params.beta is None:
            raise DomainError(
                "beta overdispersion needs the full (alpha, beta) pair to simulate, "
                "not just the mean pi0"
            )
    if spec.family == "normal" and spec.has_overdispersion:
        raise UnsupportedModelError("normal outcomes take a single set of random effects")

    file_cols = {
        name: _file_column(gen["path"], design.n_subjects * n)
        for name, gen in design.covariates.items()
        if gen.get("kind") == "column_file"
    }

    streams = np.random.SeedSequence(design.seed).spawn(design.n_subjects)
    rows: list[dict] = []
    rho = params.rho if params.rho is not None else 1.0
    for i in range(design.n_subjects):
        rng = np.random.default_rng(streams[i])
        cov: dict[str, np.ndarray] = {}
        for name, gen in design.covariates.items():
            kind = gen.get("kind")
            if kind == "constant":
                cov[name] = np.full(n, float(gen["value"]))
            elif kind == "time":
                cov[name] = times.copy()
            elif kind == "bernoulli":
                cov[name] = np.full(n, float(rng.random() < float(gen["p"])))
            elif kind == "column_file":
                cov[name] = file_cols[name][i * n : (i + 1) * n]
            else:
                raise DomainError(f"unknown covariate generator kind {kind!r} for {name!r}")
        X = _resolve_design_row(spec.fixed_effects, cov, n)
        Z = _resolve_design_row(spec.random_effects, cov, n)
        eta = X @ params.xi
        if spec.q:
            b = params.d_chol @ rng.standard_normal(spec.q)
            eta = eta + Z @ b

        if not spec.has_overdispersion:
            theta = np.ones(n)
        elif spec.is_bernoulli:
            size = 1 if spec.overdispersion == "shared" else n
            theta = np.broadcast_to(rng.beta(params.alpha, params.beta, size=size), (n,)) \
                if size == 1 else rng.beta(params.alpha, params.beta, size=n)
        else:
            size = 1 if spec.overdispersion == "shared" else n
            draw = rng.gamma(params.alpha, scale=params.beta, size=size)
            theta = np.broadcast_to(draw, (n,)) if size == 1 else draw

        fam = spec.family
        if fam == "poisson":
            y = rng.poisson(theta * np.exp(eta)).astype(float)
        elif fam == "bernoulli-logit" or fam == "bernoulli-probit":
            kappa = expit(eta) if fam == "bernoulli-logit" else std_normal_cdf(eta)
            p = theta * kappa
            if (p > 1.0 + 1e-12).any():
                raise NumericError(
                    f"success probability above 1 (max {p.max():.4g}) for subject {i + 1}"
                )
            y = (rng.random(n) < p).astype(float)
        elif fam == "weibull":
            rate = theta * np.exp(eta)
            y = (rng.exponential(size=n) / rate) ** (1.0 / rho)
        elif fam == "normal":
            y = eta + math.sqrt(params.sigma2) * rng.standard_normal(n)
        else:  # pragma: no cover
            raise UnsupportedModelError(fam)

        for j in range(n):
            row = {"id": i + 1, "occasion": j + 1, "y": y[j]}
            for name in design.covariates:
                row[name] = cov[name][j]
            if fam == "weibull":
                row["status"] = 1.0
            rows.append(row)
    return Dataset(pd.DataFrame(rows))
