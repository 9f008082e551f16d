"""Command-line interface.

Subcommands: ``fit``, ``simulate``, ``moments``, ``corr``, ``compare``.
Exit codes: 0 success, 1 usage, 2 validation error, 3 fit did not converge
(results are still written), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .estimate import FitOptions, compare_models, fit
from .exceptions import (
    ConmixError,
    DataError,
    DomainError,
    FitError,
    NumericError,
    UnsupportedModelError,
)
from .io import (
    RunConfig,
    load_result,
    params_from_mapping,
    read_dataset,
    result_to_dict,
    save_result,
    spec_to_dict,
    write_dataset,
)
from .likelihood import QuadratureRule
from .model import unpack, validate
from .moments import correlation_grid, design_from_profile, marginal_mean_rows, moment_set
from .simulate import simulate as run_simulation

__all__ = ["run", "main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NOT_CONVERGED = 3
EXIT_NUMERIC = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_spec_flags(p: _Parser):
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--family", help="normal | logit | probit | poisson | weibull | exponential")
    p.add_argument("--fixed", help="comma-separated fixed-effect columns")
    p.add_argument("--random", help="comma-separated random-effect columns")
    p.add_argument("--overdispersion", help="none | independent | shared")
    p.add_argument("--constraint", help="mean_one | exponential | fixed_beta")
    p.add_argument("--beta-value", type=float, help="fixed beta for the fixed_beta constraint")
    p.add_argument("--shape-free", action="store_true", help="estimate the Weibull shape")


def _add_common_flags(p: _Parser):
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--quad-order", type=int, help="Gauss-Hermite order")
    p.add_argument("--no-adaptive", action="store_true", help="disable adaptive centering")
    p.add_argument("--starts", type=int, help="number of optimizer starts")
    p.add_argument("--max-iter", type=int, help="optimizer iteration cap")
    p.add_argument("--tol", type=float, help="gradient tolerance")


def _build_parser() -> _Parser:
    parser = _Parser(prog="conmix", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p_fit = sub.add_parser("fit", description="maximum-likelihood fit")
    _add_spec_flags(p_fit)
    _add_common_flags(p_fit)
    p_fit.add_argument("--data", required=True, help="long-format CSV")
    p_fit.add_argument("--out", help="output directory for result.json and estimates.txt")

    p_sim = sub.add_parser("simulate", description="draw a dataset from the model")
    _add_spec_flags(p_sim)
    p_sim.add_argument("--seed", type=int, help="seed override")
    p_sim.add_argument("--params", help="natural-scale parameter values (JSON string or file)")
    p_sim.add_argument("--out", required=True, help="output CSV path")

    for name in ("moments", "corr"):
        p = sub.add_parser(name, description=f"closed-form {name} over a time grid")
        _add_spec_flags(p)
        p.add_argument("--params", help="natural-scale parameter values (JSON string or file)")
        p.add_argument("--result", help="use estimates from a fit result file")
        p.add_argument("--grid", required=True, help="time grid, e.g. 1..27 or 1,2,5")
        p.add_argument("--profile", help="JSON covariate profile for non-time columns")
        p.add_argument("--time-col", default="time", help="name of the time column")

    p_cmp = sub.add_parser("compare", description="nested-model comparison table")
    p_cmp.add_argument("--results", nargs="+", required=True, help="fit result files")
    p_cmp.add_argument("--labels", help="comma-separated labels (default: file stems)")
    p_cmp.add_argument(
        "--nesting",
        nargs="+",
        required=True,
        help="comparisons as null:alt:kind (kind: lr_boundary, wald_variance_boundary, lr, wald)",
    )
    return parser


def _parse_grid(text: str) -> np.ndarray:
    text = text.strip()
    if ".." in text:
        parts = text.split("..")
        if len(parts) == 2:
            lo, hi, step = float(parts[0]), float(parts[1]), 1.0
        elif len(parts) == 3:
            lo, hi, step = float(parts[0]), float(parts[1]), float(parts[2])
        else:
            raise DomainError(f"cannot parse grid {text!r}")
        if step <= 0 or hi < lo:
            raise DomainError(f"bad grid bounds {text!r}")
        return np.arange(lo, hi + 0.5 * step, step)
    return np.array([float(v) for v in text.split(",")], dtype=float)


def _parse_json_arg(value: str) -> dict:
    value = value.strip()
    if value.startswith("{"):
        try:
            return json.loads(value)
        except json.JSONDecodeError as exc:
            raise DomainError(f"invalid inline JSON: {exc}")
    try:
        with open(value, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no such file: {value}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{value}: invalid JSON: {exc}")


def _config_from_args(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_file(args.config)
        base = json.loads(json.dumps(_config_dict(cfg)))
    else:
        base = {}
    if getattr(args, "family", None):
        base["family"] = args.family
    if getattr(args, "fixed", None):
        base["fixed_effects"] = [c.strip() for c in args.fixed.split(",") if c.strip()]
    if getattr(args, "random", None) is not None and getattr(args, "random", None) != "":
        if args.random:
            base["random_effects"] = [c.strip() for c in args.random.split(",") if c.strip()]
    if getattr(args, "overdispersion", None):
        base["overdispersion"] = args.overdispersion
    if getattr(args, "constraint", None):
        base["constraint"] = args.constraint
    if getattr(args, "beta_value", None) is not None:
        base["beta_value"] = args.beta_value
    if getattr(args, "shape_free", False):
        base["weibull_shape_free"] = True
    quad = base.setdefault("quad", {})
    if getattr(args, "quad_order", None) is not None:
        quad["order"] = args.quad_order
    if getattr(args, "no_adaptive", False):
        quad["adaptive"] = False
    optim = base.setdefault("optimizer", {})
    if getattr(args, "starts", None) is not None:
        optim["starts"] = args.starts
    if getattr(args, "max_iter", None) is not None:
        optim["max_iter"] = args.max_iter
    if getattr(args, "tol", None) is not None:
        optim["tol"] = args.tol
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    return RunConfig.from_dict(base)


def _config_dict(cfg: RunConfig) -> dict:
    return {
        "family": cfg.family,
        "fixed_effects": list(cfg.fixed_effects),
        "random_effects": list(cfg.random_effects),
        "overdispersion": cfg.overdispersion,
        "constraint": cfg.constraint,
        "beta_value": cfg.beta_value,
        "weibull_shape_free": cfg.weibull_shape_free,
        "quad": {"order": cfg.quad_order, "adaptive": cfg.adaptive},
        "optimizer": {"starts": cfg.starts, "max_iter": cfg.max_iter, "tol": cfg.tol},
        "seed": cfg.seed,
        "params": cfg.params,
        "simulate": cfg.sim,
    }


def _estimates_text(res) -> str:
    lines = [f"{'Parameter':<22}{'Estimate':>14}{'Std. err.':>14}"]
    for name in res.natural_order:
        lines.append(f"{name:<22}{res.estimates[name]:>14.4f}{res.se[name]:>14.4f}")
    lines.append("")
    lines.append(f"log-likelihood      {res.loglik:.6f}")
    lines.append(f"-2 log-likelihood   {res.minus2ll:.6f}")
    status = "yes" if res.converged else "NO"
    lines.append(
        f"converged           {status} ({res.iterations} iterations, |grad| = {res.gradient_norm:.3g})"
    )
    if res.se_unreliable:
        lines.append("note: standard errors flagged unreliable")
    for msg in res.messages:
        lines.append(f"note: {msg}")
    return "\n".join(lines)


def _cmd_fit(args) -> int:
    cfg = _config_from_args(args)
    spec = cfg.spec()
    data = read_dataset(args.data, family=spec.family)
    violations = validate(spec, data)
    if violations:
        for v in violations:
            print(f"validation: {v}", file=sys.stderr)
        return EXIT_VALIDATION
    res = fit(spec, data, cfg.quad(), cfg.fit_options())
    text = _estimates_text(res)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_result(res, os.path.join(args.out, "result.json"), config_echo=_config_dict(cfg))
        with open(os.path.join(args.out, "estimates.txt"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    spec = cfg.spec()
    mapping = cfg.params or {}
    if args.params:
        mapping = _parse_json_arg(args.params)
    if not mapping:
        raise DomainError("simulate needs parameter values (config 'params' or --params)")
    params = params_from_mapping(spec, mapping)
    design = cfg.sim_design()
    if args.seed is not None:
        design = dataclasses.replace(design, seed=args.seed)
    data = run_simulation(spec, params, design)
    write_dataset(data, args.out)
    print(f"wrote {data.n_obs} rows for {data.n_subjects} subjects to {args.out}")
    return EXIT_OK


def _spec_params_for_tables(args):
    if getattr(args, "result", None):
        res = load_result(args.result)
        return res.spec, unpack(res.packed, res.spec)
    cfg = _config_from_args(args)
    spec = cfg.spec()
    mapping = cfg.params or {}
    if args.params:
        mapping = _parse_json_arg(args.params)
    if not mapping:
        raise DomainError("need parameter values: --params, config 'params', or --result")
    return spec, params_from_mapping(spec, mapping)


def _cmd_moments(args) -> int:
    spec, params = _spec_params_for_tables(args)
    times = _parse_grid(args.grid)
    profile = _parse_json_arg(args.profile) if args.profile else None
    X, Z = design_from_profile(spec, times, profile=profile, time_col=args.time_col)
    try:
        ms = moment_set(spec, params, X, Z)
        var = ms.variances
        means = ms.means
        approx = ms.approximate
    except UnsupportedModelError:
        means = marginal_mean_rows(spec, params, X, Z)
        var = None
        approx = False
    header = f"{'time':>8}{'mean':>14}" + ("" if var is None else f"{'variance':>14}")
    print(header)
    for i, t in enumerate(times):
        row = f"{t:>8g}{means[i]:>14.4f}"
        if var is not None:
            row += f"{var[i]:>14.4f}"
        print(row)
    if approx:
        print("note: values are bridge-approximate for the logit link")
    if var is None:
        print("note: no closed-form variance for this family; use simulate")
    return EXIT_OK


def _cmd_corr(args) -> int:
    spec, params = _spec_params_for_tables(args)
    times = _parse_grid(args.grid)
    profile = _parse_json_arg(args.profile) if args.profile else None
    summary = correlation_grid(spec, params, times, profile=profile, time_col=args.time_col)
    print(f"{'pair':>14}{'correlation':>14}")
    for t in range(len(times) - 1):
        print(f"{times[t]:>6g} & {times[t + 1]:<6g}{summary.matrix[t, t + 1]:>14.4f}")
    print()
    print(
        f"largest  {summary.max_value:.4f} at {summary.max_pair[0]:g} & {summary.max_pair[1]:g}"
    )
    print(
        f"smallest {summary.min_value:.4f} at {summary.min_pair[0]:g} & {summary.min_pair[1]:g}"
    )
    if summary.approximate:
        print("note: values are bridge-approximate for the logit link")
    return EXIT_OK


def _cmd_compare(args) -> int:
    labels = (
        [s.strip() for s in args.labels.split(",")]
        if args.labels
        else [os.path.splitext(os.path.basename(p))[0] for p in args.results]
    )
    if len(labels) != len(args.results):
        raise DomainError("--labels must match --results in length")
    fits = [(lab, load_result(path)) for lab, path in zip(labels, args.results)]
    nesting = []
    for item in args.nesting:
        parts = item.split(":")
        if len(parts) != 3:
            raise DomainError(f"nesting entry {item!r} is not null:alt:kind")
        nesting.append(tuple(parts))
    rows = compare_models(fits, nesting)
    print(f"{'Null model':<18}{'Alternative':<18}{'Kind':<24}{'Statistic':>12}{'p':>12}")
    for r in rows:
        p_txt = f"{r['p']:.4f}" if r["p"] >= 1e-4 else "<0.0001"
        print(
            f"{r['null']:<18}{r['alternative']:<18}{r['kind']:<24}{r['statistic']:>12.4f}{p_txt:>12}"
        )
    return EXIT_OK


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    handlers = {
        "fit": _cmd_fit,
        "simulate": _cmd_simulate,
        "moments": _cmd_moments,
        "corr": _cmd_corr,
        "compare": _cmd_compare,
    }
    try:
        return handlers[args.command](args)
    except (DataError, DomainError, UnsupportedModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, FitError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConmixError as exc:  # pragma: no cover - catch-all for new kinds
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())
