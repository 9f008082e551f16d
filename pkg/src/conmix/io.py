"""CSV ingestion, JSON run configuration, and result serialization.

The dataset format is long: one row per (subject, occasion) with required
columns ``id``, ``occasion``, ``y`` (UTF-8, header row, ``.`` decimal).
Fit results round-trip through JSON bit-exactly (floats are serialized
with full repr precision).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib.metadata import PackageNotFoundError, version

import numpy as np
import pandas as pd

from .estimate import FitOptions, FitResult
from .exceptions import DataError, DomainError
from .likelihood import QuadratureRule
from .model import Dataset, ModelSpec, Params, natural_names
from .simulate import SimDesign

__all__ = [
    "read_dataset",
    "write_dataset",
    "RunConfig",
    "params_from_mapping",
    "spec_to_dict",
    "spec_from_dict",
    "result_to_dict",
    "result_from_dict",
    "save_result",
    "load_result",
]


def _package_version() -> str:
    try:
        return version("conmix")
    except PackageNotFoundError:  # pragma: no cover - editable quirk
        return "unknown"


def read_dataset(path: str, family: str | None = None) -> Dataset:
    """Parse and validate a long-format CSV.

    Reports the first offending cell with its file line number (the header
    is line 1). For time-to-event outcomes a ``status`` column is required
    and every value must be 1: censored records are out of scope.
    """
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}")
    except Exception as exc:
        raise DataError(f"{path}: cannot parse CSV: {exc}")
    missing = [c for c in ("id", "occasion", "y") if c not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing required column(s) {missing}")
    frame = pd.DataFrame({"id": raw["id"]})
    for col in raw.columns:
        if col == "id":
            continue
        vals = pd.to_numeric(raw[col].str.strip(), errors="coerce")
        bad = vals.isna() | ~np.isfinite(vals.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataError(
                f"{path}:{row + 2}: unparseable or non-finite value "
                f"{raw[col].iloc[row]!r} in column {col!r}"
            )
        frame[col] = vals.astype(float)
    dup = frame.duplicated(subset=["id", "occasion"])
    if dup.any():
        row = int(np.flatnonzero(dup)[0])
        raise DataError(
            f"{path}:{row + 2}: duplicate (id, occasion) pair "
            f"({frame['id'].iloc[row]!r}, {frame['occasion'].iloc[row]!r})"
        )
    fam = None
    if family is not None:
        fam = ModelSpec(family=family, fixed_effects=("intercept",)).family
        if fam == "weibull":
            if "status" not in frame.columns:
                raise DataError(f"{path}: time-to-event data requires a status column")
            off = frame["status"] != 1.0
            if off.any():
                row = int(np.flatnonzero(off)[0])
                raise DataError(
                    f"{path}:{row + 2}: status={frame['status'].iloc[row]!r}; "
                    "censoring is out of scope, every status must equal 1"
                )
    ds = Dataset(frame)
    if fam is not None:
        from .families import get_family

        try:
            get_family(fam).check_support(ds.column("y"))
        except DomainError as exc:
            raise DataError(f"{path}: {exc}")
    return ds


def write_dataset(data: Dataset, path: str) -> None:
    data.frame.to_csv(path, index=False)


@dataclass(frozen=True)
class RunConfig:
    """One JSON-configurable run: the model, quadrature and optimizer
    settings, plus optional parameter values and a simulation design."""

    family: str
    fixed_effects: tuple
    random_effects: tuple = ()
    overdispersion: str = "none"
    constraint: str = "mean_one"
    beta_value: float | None = None
    weibull_shape_free: bool = False
    quad_order: int | None = None
    adaptive: bool = True
    starts: int = 3
    max_iter: int = 500
    tol: float = 1e-6
    seed: int = 0
    params: dict | None = None
    sim: dict | None = None

    def spec(self) -> ModelSpec:
        return ModelSpec(
            family=self.family,
            fixed_effects=tuple(self.fixed_effects),
            random_effects=tuple(self.random_effects),
            overdispersion=self.overdispersion,
            constraint=self.constraint,
            beta_value=self.beta_value,
            weibull_shape_free=self.weibull_shape_free,
        )

    def quad(self) -> QuadratureRule:
        return QuadratureRule(order=self.quad_order, adaptive=self.adaptive)

    def fit_options(self) -> FitOptions:
        return FitOptions(max_iter=self.max_iter, gtol=self.tol, starts=self.starts, seed=self.seed)

    def sim_design(self) -> SimDesign:
        if not self.sim:
            raise DomainError("config has no 'simulate' block")
        s = dict(self.sim)
        return SimDesign(
            n_subjects=int(s["n_subjects"]),
            occasions=s.get("occasions", 1),
            covariates=s.get("covariates", {}),
            seed=int(s.get("seed", self.seed)),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if "family" not in d or "fixed_effects" not in d:
            raise DomainError("config needs at least 'family' and 'fixed_effects'")
        quad = d.get("quad", {})
        optim = d.get("optimizer", {})
        return cls(
            family=d["family"],
            fixed_effects=tuple(d["fixed_effects"]),
            random_effects=tuple(d.get("random_effects", ())),
            overdispersion=d.get("overdispersion", "none"),
            constraint=d.get("constraint", "mean_one"),
            beta_value=d.get("beta_value"),
            weibull_shape_free=bool(d.get("weibull_shape_free", False)),
            quad_order=quad.get("order"),
            adaptive=bool(quad.get("adaptive", True)),
            starts=int(optim.get("starts", 3)),
            max_iter=int(optim.get("max_iter", 500)),
            tol=float(optim.get("tol", 1e-6)),
            seed=int(d.get("seed", 0)),
            params=d.get("params"),
            sim=d.get("simulate"),
        )

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"no such config file: {path}")
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}")
        return cls.from_dict(payload)


def params_from_mapping(spec: ModelSpec, mapping: dict) -> Params:
    """Build structured parameters from natural-scale named values, e.g.
    published estimates: fixed effects by design-column name, ``d`` (or the
    ``d[i,j]`` entries), ``alpha``/``beta``/``pi0``/``ratio``, ``rho``,
    ``sigma2``."""
    mapping = dict(mapping)
    try:
        xi = np.array([float(mapping[c]) for c in spec.fixed_effects])
    except KeyError as exc:
        raise DomainError(f"params missing fixed-effect value for {exc.args[0]!r}")
    kw: dict = {}
    if spec.q == 1:
        if "d" not in mapping:
            raise DomainError("params missing the random-effect variance 'd'")
        d = float(mapping["d"])
        if d <= 0:
            raise DomainError("'d' must be positive")
        dch = np.array([[math.sqrt(d)]])
    elif spec.q == 2:
        try:
            D = np.array(
                [
                    [float(mapping["d[1,1]"]), float(mapping["d[2,1]"])],
                    [float(mapping["d[2,1]"]), float(mapping["d[2,2]"])],
                ]
            )
        except KeyError as exc:
            raise DomainError(f"params missing covariance entry {exc.args[0]!r}")
        try:
            dch = np.linalg.cholesky(D)
        except np.linalg.LinAlgError:
            raise DomainError("random-effect covariance is not positive definite")
    else:
        dch = np.empty((0, 0))
    if spec.has_overdispersion:
        if spec.is_bernoulli:
            if "pi0" in mapping:
                kw["pi0"] = float(mapping["pi0"])
            elif "ratio" in mapping:
                r = float(mapping["ratio"])
                kw["pi0"] = r / (1.0 + r)
            if "alpha" in mapping and "beta" in mapping:
                kw["alpha"] = float(mapping["alpha"])
                kw["beta"] = float(mapping["beta"])
                kw.setdefault("pi0", kw["alpha"] / (kw["alpha"] + kw["beta"]))
            if "pi0" not in kw:
                raise DomainError("params need 'pi0', 'ratio', or ('alpha','beta')")
        else:
            if spec.constraint == "mean_one":
                if "alpha" not in mapping:
                    raise DomainError("params missing 'alpha'")
                kw["alpha"] = float(mapping["alpha"])
                kw["beta"] = float(mapping.get("beta", 1.0 / kw["alpha"]))
            elif spec.constraint == "exponential":
                if "beta" not in mapping:
                    raise DomainError("params missing 'beta'")
                kw["alpha"] = float(mapping.get("alpha", 1.0))
                kw["beta"] = float(mapping["beta"])
            else:
                if "alpha" not in mapping:
                    raise DomainError("params missing 'alpha'")
                kw["alpha"] = float(mapping["alpha"])
                kw["beta"] = float(mapping.get("beta", spec.beta_value))
    if spec.family == "weibull":
        kw["rho"] = float(mapping.get("rho", 1.0))
    if spec.family == "normal":
        if "sigma2" not in mapping:
            raise DomainError("params missing 'sigma2'")
        kw["sigma2"] = float(mapping["sigma2"])
    return Params(xi=xi, d_chol=dch, **kw)


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "family": spec.family,
        "fixed_effects": list(spec.fixed_effects),
        "random_effects": list(spec.random_effects),
        "overdispersion": spec.overdispersion,
        "constraint": spec.constraint,
        "beta_value": spec.beta_value,
        "weibull_shape_free": spec.weibull_shape_free,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        family=d["family"],
        fixed_effects=tuple(d["fixed_effects"]),
        random_effects=tuple(d.get("random_effects", ())),
        overdispersion=d.get("overdispersion", "none"),
        constraint=d.get("constraint", "mean_one"),
        beta_value=d.get("beta_value"),
        weibull_shape_free=bool(d.get("weibull_shape_free", False)),
    )


def result_to_dict(res: FitResult, config_echo: dict | None = None) -> dict:
    return {
        "format": "conmix-result-v1",
        "package_version": _package_version(),
        "spec": spec_to_dict(res.spec),
        "quad": {"order": res.quad_order, "adaptive": res.quad_adaptive},
        "estimates": res.estimates,
        "se": res.se,
        "packed": list(map(float, res.packed)),
        "packed_names": list(res.packed_names),
        "vcov_packed": res.vcov_packed.tolist(),
        "vcov_natural": res.vcov_natural.tolist(),
        "natural_order": list(res.natural_order),
        "free_names": list(res.free_names),
        "loglik": float(res.loglik),
        "minus2ll": float(res.minus2ll),
        "converged": bool(res.converged),
        "iterations": int(res.iterations),
        "n_evaluations": int(res.n_evaluations),
        "gradient_norm": float(res.gradient_norm),
        "se_unreliable": bool(res.se_unreliable),
        "boundary": bool(res.boundary),
        "messages": list(res.messages),
        "data_fingerprint": list(res.data_fingerprint),
        "config_echo": config_echo or {},
    }


def result_from_dict(d: dict) -> FitResult:
    if d.get("format") != "conmix-result-v1":
        raise DataError("not a recognized result file (missing format tag)")
    spec = spec_from_dict(d["spec"])
    return FitResult(
        spec=spec,
        estimates={k: float(v) for k, v in d["estimates"].items()},
        se={k: float(v) for k, v in d["se"].items()},
        packed=np.asarray(d["packed"], dtype=float),
        packed_names=list(d["packed_names"]),
        vcov_packed=np.asarray(d["vcov_packed"], dtype=float),
        vcov_natural=np.asarray(d["vcov_natural"], dtype=float),
        natural_order=list(d["natural_order"]),
        free_names=list(d["free_names"]),
        loglik=float(d["loglik"]),
        converged=bool(d["converged"]),
        iterations=int(d["iterations"]),
        n_evaluations=int(d["n_evaluations"]),
        gradient_norm=float(d["gradient_norm"]),
        se_unreliable=bool(d["se_unreliable"]),
        boundary=bool(d["boundary"]),
        messages=list(d["messages"]),
        data_fingerprint=tuple(d["data_fingerprint"]),
        quad_order=int(d["quad"]["order"]),
        quad_adaptive=bool(d["quad"]["adaptive"]),
    )


def save_result(res: FitResult, path: str, config_echo: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result_to_dict(res, config_echo), fh, indent=2)
        fh.write("\n")


def load_result(path: str) -> FitResult:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return result_from_dict(json.load(fh))
    except FileNotFoundError:
        raise DataError(f"no such result file: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}")
