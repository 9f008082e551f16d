"""Model specification, dataset container, and parameter packing.

A ``ModelSpec`` names the outcome family, the design columns, and the
overdispersion structure; a ``Dataset`` wraps long-format repeated measures
(one row per subject/occasion); ``Params`` holds the structured parameter
values, and ``pack``/``unpack`` move them to and from the unconstrained
vector a generic optimizer works on.

Specs, datasets and parameter values are immutable after construction and
safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .exceptions import DataError, DomainError, UnsupportedModelError
from .families import FAMILY_KINDS, get_family

__all__ = [
    "OverdispersionKind",
    "ConstraintKind",
    "ModelSpec",
    "Dataset",
    "SubjectDesign",
    "Params",
    "pack",
    "unpack",
    "packed_names",
    "natural_names",
    "natural_values",
    "build_designs",
    "validate",
]

INTERCEPT = "intercept"

OVERDISPERSION_KINDS = ("none", "independent", "shared")
CONSTRAINT_KINDS = ("mean_one", "exponential", "fixed_beta")

# reserved natural-parameter names; covariates may not shadow them
_RESERVED = {"d", "alpha", "beta", "pi0", "ratio", "rho", "sigma2"}


def _normalize_choice(value: str, allowed, what: str) -> str:
    v = str(value).lower().replace("-", "_")
    aliases = {
        "independentconjugate": "independent",
        "sharedconjugate": "shared",
        "meanonegamma": "mean_one",
        "exponentialgamma": "exponential",
        "freewithfixedbeta": "fixed_beta",
    }
    v = aliases.get(v, v)
    if v not in allowed:
        raise DomainError(f"{what} must be one of {allowed}, got {value!r}")
    return v


@dataclass(frozen=True)
class ModelSpec:
    """Description of one combined model.

    ``fixed_effects`` and ``random_effects`` are ordered column names; the
    reserved name ``intercept`` produces a column of ones without requiring
    a dataset column. ``overdispersion`` picks the conjugate-effect
    structure (none / one effect per observation / one shared effect per
    subject), and ``constraint`` pins the gamma hyperparameters for
    identifiability: mean-one (alpha * beta = 1), exponential (alpha = 1,
    beta free) or a user-fixed beta.
    """

    family: str
    fixed_effects: tuple[str, ...]
    random_effects: tuple[str, ...] = ()
    overdispersion: str = "none"
    constraint: str = "mean_one"
    beta_value: float | None = None
    weibull_shape_free: bool = False

    def __post_init__(self):
        fam = str(self.family).lower()
        aliases = {
            "logit": "bernoulli-logit",
            "bernoulli": "bernoulli-logit",
            "probit": "bernoulli-probit",
            "exponential": "weibull",
        }
        fam = aliases.get(fam, fam)
        if fam not in FAMILY_KINDS:
            raise DomainError(f"unknown family {self.family!r}; choose from {FAMILY_KINDS}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "fixed_effects", tuple(self.fixed_effects))
        object.__setattr__(self, "random_effects", tuple(self.random_effects))
        object.__setattr__(
            self,
            "overdispersion",
            _normalize_choice(self.overdispersion, OVERDISPERSION_KINDS, "overdispersion"),
        )
        object.__setattr__(
            self, "constraint", _normalize_choice(self.constraint, CONSTRAINT_KINDS, "constraint")
        )
        if not self.fixed_effects:
            raise DomainError("at least one fixed effect is required")
        if len(set(self.fixed_effects)) != len(self.fixed_effects):
            raise DomainError("duplicate fixed-effect names")
        if len(set(self.random_effects)) != len(self.random_effects):
            raise DomainError("duplicate random-effect names")
        if len(self.random_effects) > 2:
            raise UnsupportedModelError(
                "at most two normal random effects are supported (intercept and one slope)"
            )
        if self.constraint == "fixed_beta" and (
            self.beta_value is None or not self.beta_value > 0
        ):
            raise DomainError("fixed_beta constraint requires a positive beta_value")

    @property
    def p(self) -> int:
        return len(self.fixed_effects)

    @property
    def q(self) -> int:
        return len(self.random_effects)

    @property
    def is_bernoulli(self) -> bool:
        return self.family in ("bernoulli-logit", "bernoulli-probit")

    @property
    def has_overdispersion(self) -> bool:
        return self.overdispersion != "none"

    def member(self, rho: float = 1.0):
        return get_family(self.family, rho=rho)

    def data_columns(self) -> tuple[str, ...]:
        """Dataset columns the design needs, interaction factors included."""
        cols: list[str] = []
        for name in self.fixed_effects + self.random_effects:
            for factor in name.split(":"):
                if factor != INTERCEPT and factor not in cols:
                    cols.append(factor)
        return tuple(cols)


@dataclass(frozen=True)
class SubjectDesign:
    """Design pieces for one subject, rows sorted by occasion."""

    subject_id: object
    occasions: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[0]


class Dataset:
    """Long-format repeated measures: one row per (subject, occasion).

    Rows are normalized to (subject, occasion) order at construction, so
    everything downstream is invariant to the input row order. ``(subject,
    occasion)`` pairs must be unique and covariates finite.
    """

    REQUIRED = ("id", "occasion", "y")

    def __init__(self, frame: pd.DataFrame):
        if not isinstance(frame, pd.DataFrame):
            raise DataError("Dataset expects a pandas DataFrame")
        missing = [c for c in self.REQUIRED if c not in frame.columns]
        if missing:
            raise DataError(f"dataset is missing required column(s): {missing}")
        df = frame.reset_index(drop=True).copy()
        dup = df.duplicated(subset=["id", "occasion"])
        if dup.any():
            row = int(np.where(dup)[0][0])
            raise DataError(
                f"duplicate (id, occasion) pair at input row {row}: "
                f"({df.at[row, 'id']!r}, {df.at[row, 'occasion']!r})"
            )
        occ = pd.to_numeric(df["occasion"], errors="coerce")
        if occ.isna().any():
            row = int(np.where(occ.isna())[0][0])
            raise DataError(f"non-numeric occasion at input row {row}")
        df["occasion"] = occ
        yv = pd.to_numeric(df["y"], errors="coerce")
        if yv.isna().any():
            row = int(np.where(yv.isna())[0][0])
            raise DataError(f"non-numeric outcome y at input row {row}")
        df["y"] = yv.astype(float)
        for col in df.columns:
            if col in ("id",):
                continue
            vals = pd.to_numeric(df[col], errors="coerce")
            if vals.isna().any():
                row = int(np.where(vals.isna())[0][0])
                raise DataError(f"non-numeric or missing value in column {col!r} at input row {row}")
            if not np.isfinite(vals.to_numpy(dtype=float)).all():
                raise DataError(f"non-finite value in column {col!r}")
            df[col] = vals.astype(float)
        df = df.sort_values(["id", "occasion"], kind="mergesort").reset_index(drop=True)
        self._df = df
        ids = df["id"].to_numpy()
        change = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
        bounds = np.r_[change, len(ids)]
        self._groups = [
            (ids[bounds[k]], slice(bounds[k], bounds[k + 1])) for k in range(len(change))
        ]

    @classmethod
    def from_rows(cls, rows: Iterable[dict]) -> "Dataset":
        return cls(pd.DataFrame(list(rows)))

    @property
    def frame(self) -> pd.DataFrame:
        return self._df.copy()

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(self._df.columns)

    @property
    def n_subjects(self) -> int:
        return len(self._groups)

    @property
    def n_obs(self) -> int:
        return len(self._df)

    @property
    def subject_ids(self) -> list:
        return [g[0] for g in self._groups]

    def subject_slices(self):
        return list(self._groups)

    def column(self, name: str) -> np.ndarray:
        if name not in self._df.columns:
            raise DataError(f"dataset has no column {name!r}")
        return self._df[name].to_numpy(dtype=float)

    def fingerprint(self) -> tuple:
        return (self.n_subjects, self.n_obs, float(self._df["y"].sum()))

    def __len__(self) -> int:
        return self.n_obs


def _design_column(data: Dataset, name: str, rows: slice | None = None) -> np.ndarray:
    full = slice(None) if rows is None else rows
    n = data.n_obs if rows is None else rows.stop - rows.start
    if name == INTERCEPT:
        return np.ones(n)
    out = np.ones(n)
    for factor in name.split(":"):
        if factor == INTERCEPT:
            continue
        out = out * data.column(factor)[full]
    return out


def _design_matrix(data: Dataset, names: Sequence[str]) -> np.ndarray:
    if not names:
        return np.empty((data.n_obs, 0))
    return np.column_stack([_design_column(data, n) for n in names])


def build_designs(spec: ModelSpec, data: Dataset) -> list[SubjectDesign]:
    """Per-subject outcome vector and design matrices, occasion-ordered.

    Interaction names like ``treat:time`` multiply the named factor
    columns; the reserved name ``intercept`` is a column of ones.
    """
    X = _design_matrix(data, spec.fixed_effects)
    Z = _design_matrix(data, spec.random_effects)
    y = data.column("y")
    occ = data.column("occasion")
    out = []
    for sid, sl in data.subject_slices():
        out.append(
            SubjectDesign(
                subject_id=sid,
                occasions=occ[sl],
                y=y[sl],
                X=X[sl],
                Z=Z[sl],
            )
        )
    return out


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Params:
    """Structured, natural-scale parameter values.

    ``d_chol`` is the lower-triangular factor of the random-effect
    covariance D (positive diagonal), so D is positive semi-definite by
    construction. Overdispersion parameters are whichever of
    ``alpha``/``beta``/``pi0`` the spec calls for; ``rho`` is the Weibull
    shape and ``sigma2`` the normal residual variance.
    """

    xi: np.ndarray
    d_chol: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    alpha: float | None = None
    beta: float | None = None
    pi0: float | None = None
    rho: float | None = None
    sigma2: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "xi", np.atleast_1d(np.asarray(self.xi, dtype=float)))
        dc = np.asarray(self.d_chol, dtype=float)
        if dc.ndim == 0:
            dc = dc.reshape(1, 1) if dc.size else np.empty((0, 0))
        if dc.ndim != 2 or dc.shape[0] != dc.shape[1]:
            raise DomainError("d_chol must be a square lower-triangular matrix")
        if dc.size and (np.diag(dc) <= 0).any():
            raise DomainError("d_chol diagonal must be strictly positive")
        object.__setattr__(self, "d_chol", np.tril(dc))

    @property
    def D(self) -> np.ndarray:
        return self.d_chol @ self.d_chol.T

    @property
    def q(self) -> int:
        return self.d_chol.shape[0]

    def bernoulli_mean(self) -> float:
        """Mean of the beta effect: explicit pi0, or alpha/(alpha+beta)."""
        if self.pi0 is not None:
            return float(self.pi0)
        if self.alpha is not None and self.beta is not None:
            return float(self.alpha / (self.alpha + self.beta))
        raise DomainError("need pi0 or (alpha, beta) for a beta effect")


def _od_layout(spec: ModelSpec) -> list[str]:
    """Packed slots contributed by the overdispersion structure."""
    if not spec.has_overdispersion:
        return []
    if spec.is_bernoulli:
        if spec.overdispersion == "shared":
            return ["log_alpha", "log_beta"]
        return ["logit_pi0"]
    # gamma effects
    if spec.constraint == "mean_one":
        return ["log_alpha"]
    if spec.constraint == "exponential":
        return ["log_beta"]
    return ["log_alpha"]  # fixed_beta: alpha free


def packed_names(spec: ModelSpec) -> list[str]:
    names = [f"xi:{c}" for c in spec.fixed_effects]
    q = spec.q
    for i in range(q):
        for j in range(i + 1):
            names.append(f"log_dchol:{i}{j}" if i == j else f"dchol:{i}{j}")
    names += _od_layout(spec)
    if spec.family == "weibull" and spec.weibull_shape_free:
        names.append("log_rho")
    if spec.family == "normal":
        names.append("log_sigma2")
    return names


def pack(spec: ModelSpec, params: Params) -> np.ndarray:
    """Flatten natural-scale parameters into the unconstrained vector."""
    if params.xi.shape[0] != spec.p:
        raise DomainError(
            f"xi has length {params.xi.shape[0]}, spec names {spec.p} fixed effects"
        )
    if params.q != spec.q:
        raise DomainError(f"d_chol is {params.q}x{params.q}, spec names {spec.q} random effects")
    out = list(params.xi)
    dc = params.d_chol
    for i in range(spec.q):
        for j in range(i + 1):
            out.append(math.log(dc[i, i]) if i == j else dc[i, j])
    for slot in _od_layout(spec):
        if slot == "log_alpha":
            if params.alpha is None or params.alpha <= 0:
                raise DomainError("spec requires a positive alpha")
            out.append(math.log(params.alpha))
        elif slot == "log_beta":
            if params.beta is None or params.beta <= 0:
                raise DomainError("spec requires a positive beta")
            out.append(math.log(params.beta))
        elif slot == "logit_pi0":
            p0 = params.bernoulli_mean()
            if not 0.0 < p0 < 1.0:
                raise DomainError("pi0 must lie strictly inside (0, 1)")
            out.append(math.log(p0 / (1.0 - p0)))
    if spec.family == "weibull" and spec.weibull_shape_free:
        if params.rho is None or params.rho <= 0:
            raise DomainError("weibull_shape_free requires a positive rho")
        out.append(math.log(params.rho))
    if spec.family == "normal":
        if params.sigma2 is None or params.sigma2 <= 0:
            raise DomainError("normal family requires a positive sigma2")
        out.append(math.log(params.sigma2))
    return np.asarray(out, dtype=float)


def unpack(vector: np.ndarray, spec: ModelSpec) -> Params:
    """Inverse of ``pack``;  exact round-trip in both directions."""
    v = np.asarray(vector, dtype=float).reshape(-1)
    expected = len(packed_names(spec))
    if v.shape[0] != expected:
        raise DomainError(f"packed vector has length {v.shape[0]}, spec needs {expected}")
    pos = spec.p
    xi = v[:pos]
    q = spec.q
    dc = np.zeros((q, q))
    for i in range(q):
        for j in range(i + 1):
            dc[i, j] = math.exp(v[pos]) if i == j else v[pos]
            pos += 1
    kw: dict = {}
    for slot in _od_layout(spec):
        if slot == "log_alpha":
            kw["alpha"] = math.exp(v[pos])
        elif slot == "log_beta":
            kw["beta"] = math.exp(v[pos])
        elif slot == "logit_pi0":
            kw["pi0"] = 1.0 / (1.0 + math.exp(-v[pos]))
        pos += 1
    # derived gamma hyperparameters under the identifiability constraint
    if spec.has_overdispersion and not spec.is_bernoulli:
        if spec.constraint == "mean_one":
            kw["beta"] = 1.0 / kw["alpha"]
        elif spec.constraint == "exponential":
            kw["alpha"] = 1.0
        else:
            kw["beta"] = float(spec.beta_value)
    if spec.family == "weibull":
        if spec.weibull_shape_free:
            kw["rho"] = math.exp(v[pos])
            pos += 1
        else:
            kw["rho"] = 1.0
    if spec.family == "normal":
        kw["sigma2"] = math.exp(v[pos])
        pos += 1
    return Params(xi=xi, d_chol=dc, **kw)


def natural_names(spec: ModelSpec, free_only: bool = False) -> list[str]:
    """Natural-scale parameter names for reporting and Wald contrasts.

    With ``free_only`` the derived entries (``beta`` under the mean-one
    constraint, the beta-effect ``ratio``) are dropped, leaving names in
    one-to-one correspondence with packed slots.
    """
    names = list(spec.fixed_effects)
    if spec.q == 1:
        names.append("d")
    elif spec.q == 2:
        names += ["d[1,1]", "d[2,1]", "d[2,2]"]
    if spec.has_overdispersion:
        if spec.is_bernoulli:
            if spec.overdispersion == "shared":
                names += ["alpha", "beta"] + ([] if free_only else ["ratio"])
            else:
                names += ["pi0"] + ([] if free_only else ["ratio"])
        else:
            if spec.constraint == "mean_one":
                names += ["alpha"] + ([] if free_only else ["beta"])
            elif spec.constraint == "exponential":
                names += [] if free_only else ["alpha"]
                names += ["beta"]
            else:
                names += ["alpha"] + ([] if free_only else ["beta"])
    if spec.family == "weibull" and spec.weibull_shape_free:
        names.append("rho")
    if spec.family == "normal":
        names.append("sigma2")
    return names


def natural_values(spec: ModelSpec, params: Params) -> np.ndarray:
    """Values matching ``natural_names(spec)`` order."""
    vals = list(params.xi)
    D = params.D
    if spec.q == 1:
        vals.append(D[0, 0])
    elif spec.q == 2:
        vals += [D[0, 0], D[1, 0], D[1, 1]]
    if spec.has_overdispersion:
        if spec.is_bernoulli:
            p0 = params.bernoulli_mean()
            if spec.overdispersion == "shared":
                vals += [params.alpha, params.beta, params.alpha / params.beta]
            else:
                vals += [p0, p0 / (1.0 - p0)]
        else:
            if spec.constraint == "exponential":
                vals += [params.alpha, params.beta]
            else:
                vals += [params.alpha, params.beta]
    if spec.family == "weibull" and spec.weibull_shape_free:
        vals.append(params.rho)
    if spec.family == "normal":
        vals.append(params.sigma2)
    return np.asarray(vals, dtype=float)


def validate(spec: ModelSpec, data: Dataset) -> list[str]:
    """Check a spec/dataset combination; returns a list of violation
    messages (empty when clean) instead of raising."""
    report: list[str] = []
    for col in spec.data_columns():
        if col not in data.columns:
            report.append(f"missing covariate column {col!r}")
    member = spec.member()
    try:
        member.check_support(data.column("y"))
    except (DomainError, DataError) as exc:
        report.append(f"outcome support violation: {exc}")
    for name in spec.fixed_effects:
        if name in _RESERVED:
            report.append(f"covariate name {name!r} shadows a reserved parameter name")
    if spec.overdispersion == "shared":
        sizes = [sl.stop - sl.start for _, sl in data.subject_slices()]
        if sizes and max(sizes) < 2:
            report.append(
                "shared overdispersion needs at least one subject with 2+ occasions to be identifiable"
            )
    if (
        spec.has_overdispersion
        and not spec.is_bernoulli
        and spec.constraint != "mean_one"
        and INTERCEPT in spec.fixed_effects
    ):
        report.append(
            "identifiability: the overdispersion mean is free under this constraint "
            "and aliases with the intercept; prefer the mean-one constraint"
        )
    if spec.family == "normal" and spec.has_overdispersion:
        report.append(
            "normal outcomes identify a single set of random effects; "
            "conjugate overdispersion must be 'none'"
        )
    if spec.family == "weibull" and "status" in data.columns:
        status = data.column("status")
        if not np.all(status == 1.0):
            report.append("censoring is unsupported: every status must equal 1")
    return report
