"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. Tolerances are pinned here, not configurable.

Statistical criteria (parameter recovery, interval coverage, boundary-test
calibration) use fixed seeds so the suite is deterministic.
"""

import itertools
import math
import time

import numpy as np
import pandas as pd
import pytest
from scipy import stats
from scipy.integrate import quad

from conmix.estimate import (
    FitOptions,
    boundary_variance_test,
    fit,
    wald_from_estimate,
)
from conmix.io import params_from_mapping
from conmix.likelihood import (
    QuadratureRule,
    cond_density,
    subject_loglik,
    total_loglik,
)
from conmix.model import Dataset, ModelSpec, Params, build_designs, pack, unpack
from conmix.moments import (
    LOGIT_PROBIT_SCALE,
    correlation_grid,
    poisson_marginal_moment,
    probit_joint_prob,
)
from conmix.simulate import SimDesign, simulate
from conmix.special import std_normal_cdf


def _report(number: int, description: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {number:02d} {status} - {description}" + (f" ({detail})" if detail else ""), flush=True)
    assert ok, f"criterion {number}: {description} {detail}"


# ---------------------------------------------------------------------- 1


def test_criterion_01_correlation_extremes():
    spec = ModelSpec(
        family="poisson", fixed_effects=("intercept", "time"), random_effects=("intercept",)
    )
    t0 = time.perf_counter()
    grid = np.arange(1, 28)
    placebo = correlation_grid(
        spec,
        params_from_mapping(spec, {"intercept": 0.8179, "time": -0.0143, "d": 1.1568}),
        grid,
    )
    treated = correlation_grid(
        spec,
        params_from_mapping(spec, {"intercept": 0.6475, "time": -0.0120, "d": 1.1568}),
        grid,
    )
    elapsed = time.perf_counter() - t0
    tol = 2e-3
    ok = (
        abs(placebo.max_value - 0.8960) <= tol
        and abs(placebo.min_value - 0.8577) <= tol
        and placebo.max_pair == (1.0, 2.0)
        and placebo.min_pair == (26.0, 27.0)
        and abs(treated.max_value - 0.8794) <= tol
        and abs(treated.min_value - 0.8438) <= tol
        and treated.max_pair == (1.0, 2.0)
        and treated.min_pair == (26.0, 27.0)
        and elapsed < 1.0
    )
    _report(
        1,
        "correlation-function extremes from published random-intercept estimates",
        ok,
        f"placebo {placebo.max_value:.4f}/{placebo.min_value:.4f}, "
        f"treated {treated.max_value:.4f}/{treated.min_value:.4f}, {elapsed:.3f}s",
    )


# ---------------------------------------------------------------------- 2


def test_criterion_02_wald_arithmetic():
    z, p = wald_from_estimate(-0.0726, 0.0475)
    ok = abs(z - (-1.5283)) <= 5e-4 and abs(p - 0.1264) <= 1e-3
    _report(2, "Wald statistic/p-value from printed estimate-se pair", ok, f"Z={z:.4f}, p={p:.4f}")


# ---------------------------------------------------------------------- 3


def _theta_integrated_oracle(family, y, kappa, alpha, beta, rho=1.0, pi0=None):
    if family == "poisson":
        f = lambda t: stats.poisson.pmf(y, kappa * t) * stats.gamma.pdf(t, alpha, scale=beta)
        return quad(f, 0, np.inf, epsabs=1e-13, limit=200)[0]
    if family == "weibull":
        def f(t):
            r = kappa * t
            return r * rho * y ** (rho - 1.0) * math.exp(-r * y**rho) * stats.gamma.pdf(
                t, alpha, scale=beta
            )
        return quad(f, 0, np.inf, epsabs=1e-13, limit=200)[0]
    # binary families: kappa already on the probability scale
    f = lambda t: (t * kappa) ** y * (1 - t * kappa) ** (1 - y) * stats.beta.pdf(t, alpha, beta)
    return quad(f, 0, 1, epsabs=1e-13, limit=200)[0]


def test_criterion_03_conditional_densities_and_subject_loglik():
    rng = np.random.default_rng(2024)
    worst = 0.0
    count = 0
    # 50-point grid per family
    for family in ("poisson", "weibull", "bernoulli-logit", "bernoulli-probit"):
        spec = ModelSpec(
            family=family,
            fixed_effects=("intercept",),
            overdispersion="independent",
            weibull_shape_free=(family == "weibull"),
        )
        for _ in range(50):
            alpha = float(rng.uniform(0.5, 4.0))
            if family in ("poisson", "weibull"):
                beta = float(rng.uniform(0.2, 2.0))
                params = Params(xi=[0.0], alpha=alpha, beta=beta, rho=1.4 if family == "weibull" else None)
                kappa = float(rng.uniform(0.2, 3.0))
                y = int(rng.integers(0, 8)) if family == "poisson" else float(rng.uniform(0.05, 3.0))
                oracle = _theta_integrated_oracle(family, y, kappa, alpha, beta, rho=1.4)
            else:
                beta = float(rng.uniform(0.5, 4.0))
                params = Params(xi=[0.0], pi0=alpha / (alpha + beta))
                kappa = float(rng.uniform(0.05, 0.95))
                y = int(rng.integers(0, 2))
                oracle = _theta_integrated_oracle(family, y, kappa, alpha, beta)
            got = cond_density(spec, params, y, kappa)
            worst = max(worst, abs(got - oracle))
            count += 1
    ok_density = worst <= 1e-8

    # dense trapezoid over the random intercept, 20 random subjects
    worst_ll = 0.0
    spec = ModelSpec(
        family="poisson",
        fixed_effects=("intercept", "time"),
        random_effects=("intercept",),
        overdispersion="independent",
    )
    params = Params(xi=[0.6, -0.03], d_chol=[[math.sqrt(1.2)]], alpha=2.5, beta=0.4)
    ds = simulate(
        spec,
        params,
        SimDesign(n_subjects=20, occasions=6, covariates={"time": {"kind": "time"}}, seed=77),
    )
    d = params.D[0, 0]
    sd = math.sqrt(d)
    bs = np.linspace(-10 * sd, 10 * sd, 8001)
    for subj in build_designs(spec, ds):
        vals = np.empty_like(bs)
        for i, b in enumerate(bs):
            kap = np.exp(subj.X @ params.xi + subj.Z[:, 0] * b)
            pnb = 1.0 / (1.0 + kap * params.beta)
            ll = stats.nbinom.logpmf(subj.y, params.alpha, pnb).sum()
            vals[i] = ll + stats.norm.logpdf(b, 0.0, sd)
        m = vals.max()
        oracle = m + math.log(np.trapezoid(np.exp(vals - m), bs))
        got = subject_loglik(spec, params, subj, QuadratureRule(order=21))
        worst_ll = max(worst_ll, abs(got - oracle))
    ok = ok_density and worst_ll <= 1e-8
    _report(
        3,
        "conditional densities and subject log-likelihoods match integration oracles",
        ok,
        f"max density gap {worst:.2e} over {count} points, max loglik gap {worst_ll:.2e}",
    )


# ---------------------------------------------------------------------- 4


def test_criterion_04_collapse_suite():
    rng = np.random.default_rng(11)
    rows = []
    for i in range(8):
        b = rng.normal(0, 1.0)
        for j in range(1, 6):
            lam = math.exp(0.5 - 0.02 * j + b)
            rows.append({"id": i + 1, "occasion": j, "y": rng.poisson(lam), "time": float(j)})
    ds = Dataset(pd.DataFrame(rows))

    # (a) no overdispersion == plain mixed model under the same quadrature
    spec_none = ModelSpec(
        family="poisson", fixed_effects=("intercept", "time"), random_effects=("intercept",)
    )
    params_none = Params(xi=[0.5, -0.02], d_chol=[[1.0]])
    rule = QuadratureRule(order=25, adaptive=False)
    got = total_loglik(spec_none, params_none, ds, rule)
    from conmix.special import gh_nodes

    nodes, weights = gh_nodes(25)
    oracle = 0.0
    for subj in build_designs(spec_none, ds):
        acc = 0.0
        for u, w in zip(nodes, weights):
            lam = np.exp(subj.X @ params_none.xi + subj.Z[:, 0] * (math.sqrt(2.0) * u))
            acc += w / math.sqrt(math.pi) * float(np.prod(stats.poisson.pmf(subj.y, lam)))
        oracle += math.log(acc)
    ok_a = abs(got - oracle) <= 1e-12

    # (b) no normal effects: closed-form marginal likelihoods
    spec_nb = ModelSpec(
        family="poisson", fixed_effects=("intercept", "time"), overdispersion="independent"
    )
    params_nb = Params(xi=[0.5, -0.02], alpha=2.0, beta=0.6)
    kap = np.exp(0.5 - 0.02 * ds.column("time"))
    nb_oracle = stats.nbinom.logpmf(ds.column("y"), 2.0, 1.0 / (1.0 + kap * 0.6)).sum()
    ok_b1 = abs(total_loglik(spec_nb, params_nb, ds) - nb_oracle) <= 1e-8

    rows_bin = [
        {"id": i + 1, "occasion": j, "y": int(rng.random() < 0.4), "time": float(j)}
        for i in range(10)
        for j in range(1, 4)
    ]
    ds_bin = Dataset(pd.DataFrame(rows_bin))
    spec_bb = ModelSpec(
        family="bernoulli-logit", fixed_effects=("intercept",), overdispersion="independent"
    )
    params_bb = Params(xi=[0.2], pi0=0.7)
    kb = 1.0 / (1.0 + math.exp(-0.2))
    pr = 0.7 * kb
    bb_oracle = float(
        np.where(ds_bin.column("y") == 1, math.log(pr), math.log1p(-pr)).sum()
    )
    ok_b2 = abs(total_loglik(spec_bb, params_bb, ds_bin) - bb_oracle) <= 1e-8

    rows_w = [
        {"id": i + 1, "occasion": 1, "y": float(rng.exponential() + 0.05), "status": 1.0}
        for i in range(25)
    ]
    ds_w = Dataset(pd.DataFrame(rows_w))
    spec_w = ModelSpec(
        family="weibull", fixed_effects=("intercept",), overdispersion="independent",
        weibull_shape_free=True,
    )
    alpha_w, beta_w, rho_w, xi_w = 2.2, 0.5, 1.3, 0.4
    params_w = Params(xi=[xi_w], alpha=alpha_w, beta=beta_w, rho=rho_w)
    kw = math.exp(xi_w)
    yv = ds_w.column("y")
    w_oracle = float(
        np.log(
            kw * rho_w * yv ** (rho_w - 1.0) * alpha_w * beta_w
            / (1.0 + kw * beta_w * yv**rho_w) ** (alpha_w + 1.0)
        ).sum()
    )
    ok_b3 = abs(total_loglik(spec_w, params_w, ds_w) - w_oracle) <= 1e-8

    # (c) normal outcomes: exact multivariate-normal marginal
    rows_n = [
        {"id": i + 1, "occasion": j, "y": rng.normal(), "time": float(j)}
        for i in range(6)
        for j in range(1, 5)
    ]
    ds_n = Dataset(pd.DataFrame(rows_n))
    spec_n = ModelSpec(
        family="normal", fixed_effects=("intercept", "time"), random_effects=("intercept",)
    )
    params_n = Params(xi=[0.3, 0.1], d_chol=[[0.8]], sigma2=1.4)
    oracle_n = 0.0
    for subj in build_designs(spec_n, ds_n):
        mean = subj.X @ params_n.xi
        cov = 0.64 * np.ones((subj.n, subj.n)) + 1.4 * np.eye(subj.n)
        oracle_n += stats.multivariate_normal.logpdf(subj.y, mean=mean, cov=cov)
    ok_c = abs(total_loglik(spec_n, params_n, ds_n) - oracle_n) <= 1e-10

    ok = ok_a and ok_b1 and ok_b2 and ok_b3 and ok_c
    _report(
        4,
        "collapse suite: plain mixed model, closed-form marginals, exact normal",
        ok,
        f"glmm {ok_a}, nb {ok_b1}, beta-bernoulli {ok_b2}, weibull-gamma {ok_b3}, normal {ok_c}",
    )


# ---------------------------------------------------------------------- 5


def test_criterion_05_probit_closed_forms():
    # univariate collapse
    ok_uni = True
    for xb, d in [(-0.6, 0.5), (0.3, 1.2), (1.1, 2.0)]:
        got = probit_joint_prob([1], [xb], [[1.0]], [[d]], 1.0)
        ok_uni &= abs(got - std_normal_cdf(xb / math.sqrt(1 + d))) <= 1e-6

    # pattern probabilities sum to one
    rng = np.random.default_rng(5)
    ok_sum = True
    for n in (2, 3, 4):
        xb = rng.normal(size=n)
        total = sum(
            probit_joint_prob(list(p), xb, np.ones((n, 1)), [[0.9]], 0.8)
            for p in itertools.product([0, 1], repeat=n)
        )
        ok_sum &= abs(total - 1.0) <= n * 1e-6

    # n = 2 pattern probabilities vs 1e7-draw Monte Carlo
    d, alpha, beta = 1.0, 2.0, 0.5
    pi0 = alpha / (alpha + beta)
    xb = np.array([0.3, -0.2])
    n_total = 10_000_000
    chunk = 1_000_000
    counts = {p: 0 for p in itertools.product([0, 1], repeat=2)}
    rng = np.random.default_rng(314)
    for _ in range(n_total // chunk):
        b = rng.normal(0, math.sqrt(d), size=chunk)
        theta = rng.beta(alpha, beta, size=(chunk, 2))
        pr = theta * std_normal_cdf(xb[None, :] + b[:, None])
        y = rng.random((chunk, 2)) < pr
        for p in counts:
            counts[p] += int(np.all(y == np.array(p, dtype=bool), axis=1).sum())
    ok_mc = True
    details = []
    for p, c in counts.items():
        emp = c / n_total
        se = math.sqrt(max(emp * (1 - emp), 1e-12) / n_total)
        got = probit_joint_prob(list(p), xb, np.ones((2, 1)), [[d]], pi0)
        ok_mc &= abs(got - emp) <= 3 * se
        details.append(f"{p}: {got:.5f} vs {emp:.5f}")
    ok = ok_uni and ok_sum and ok_mc
    _report(5, "probit closed forms: collapse, total probability, Monte Carlo", ok, "; ".join(details[:2]))


# ---------------------------------------------------------------------- 6


def test_criterion_06_moment_fidelity():
    from conmix.families import get_pair, marginal_moments

    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    n = 1_000_000
    ok = True
    notes = []

    def check(name, sample, mean, var):
        nonlocal ok
        se_m = sample.std(ddof=1) / math.sqrt(sample.size)
        dev_m = abs(sample.mean() - mean)
        centered = (sample - sample.mean()) ** 2
        se_v = centered.std(ddof=1) / math.sqrt(sample.size)
        dev_v = abs(sample.var(ddof=1) - var)
        if not (dev_m <= 3 * se_m and dev_v <= 3 * se_v):
            ok = False
            notes.append(f"{name}: mean dev {dev_m:.3g} (3se {3*se_m:.3g}), var dev {dev_v:.3g} (3se {3*se_v:.3g})")

    # five settings per family
    nb_settings = [(0.8, 0.5), (1.5, 1.0), (2.0, 3.0), (4.0, 0.3), (0.6, 2.0)]
    for alpha, beta in nb_settings:
        theta = rng.gamma(alpha, scale=beta, size=n)
        y = rng.poisson(theta).astype(float)
        m, v = marginal_moments(get_pair("poisson-gamma"), alpha=alpha, beta=beta)
        check(f"nb({alpha},{beta})", y, m, v)

    bb_settings = [(1.0, 1.0), (2.0, 5.0), (0.5, 0.5), (3.0, 1.0), (1.5, 2.5)]
    for alpha, beta in bb_settings:
        theta = rng.beta(alpha, beta, size=n)
        y = (rng.random(n) < theta).astype(float)
        m, v = marginal_moments(get_pair("bernoulli-beta"), alpha=alpha, beta=beta)
        check(f"bb({alpha},{beta})", y, m, v)

    eg_settings = [(2.5, 0.5, 1.0), (3.0, 1.0, 0.7), (4.0, 0.4, 1.5), (5.0, 0.8, 1.0), (2.2, 1.2, 0.9)]
    for alpha, beta, rate in eg_settings:
        theta = rng.gamma(alpha, scale=beta, size=n)
        y = rng.exponential(size=n) / (rate * theta)
        m, v = marginal_moments(get_pair("exponential-gamma"), alpha=alpha, beta=beta, rate=rate)
        check(f"eg({alpha},{beta},{rate})", y, m, v)

    rho = 1.6
    wg_settings = [(2.0, 0.5), (2.5, 1.0), (3.0, 0.4), (4.0, 0.8), (2.2, 1.4)]
    for alpha, beta in wg_settings:
        theta = rng.gamma(alpha, scale=beta, size=n)
        y = (rng.exponential(size=n) / theta) ** (1.0 / rho)
        m, v = marginal_moments(get_pair("weibull-gamma", rho=rho), alpha=alpha, beta=beta, rate=1.0)
        check(f"wg({alpha},{beta})", y, m, v)

    nn_settings = [(0.0, 1.0, 0.5), (1.0, 0.5, 1.5), (-0.5, 2.0, 0.7), (0.3, 1.2, 1.2), (2.0, 0.8, 0.4)]
    for mu, dd, s2 in nn_settings:
        theta = rng.normal(mu, math.sqrt(dd), size=n)
        y = theta + rng.normal(0, math.sqrt(s2), size=n)
        m, v = marginal_moments(get_pair("normal-normal"), mu=mu, d=dd, sigma2=s2)
        check(f"nn({mu},{dd},{s2})", y, m, v)

    # Stirling-expansion marginal moments with both random effect sets
    st_settings = [
        (2.0, 0.5, 0.3, 0.4),
        (1.5, 1.0, 0.0, 0.6),
        (3.0, 0.4, 0.5, 0.2),
        (0.8, 1.5, -0.2, 0.5),
        (2.5, 0.6, 0.4, 0.3),
    ]
    n_big = 2_000_000
    for alpha, beta, xi0, dd in st_settings:
        theta = rng.gamma(alpha, scale=beta, size=n_big)
        b = rng.normal(0, math.sqrt(dd), size=n_big)
        y = rng.poisson(theta * np.exp(xi0 + b)).astype(float)
        for k in (1, 2, 3):
            got = poisson_marginal_moment(k, alpha, beta, [1.0], [xi0], [1.0], [[dd]])
            yk = y**k
            se = yk.std(ddof=1) / math.sqrt(n_big)
            if abs(yk.mean() - got) > 3 * se:
                ok = False
                notes.append(f"stirling k={k} ({alpha},{beta},{xi0},{dd}): {yk.mean():.4g} vs {got:.4g}")

    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 60.0
    _report(6, "closed-form moments match Monte Carlo across parameter settings", ok,
            f"{elapsed:.1f}s" + ("; " + "; ".join(notes[:3]) if notes else ""))


# ---------------------------------------------------------------------- 7


def _recovery_check(spec, params_true, truth, design, opts, quad=None):
    data = simulate(spec, params_true, design)
    res = fit(spec, data, quad or QuadratureRule(), opts)
    failures = []
    for name, val in truth.items():
        est, se = res.estimates[name], res.se[name]
        if abs(est - val) > 3.0 * se + 1e-9:
            failures.append(f"{name}: {est:.4f} vs {val} (se {se:.4f})")
    return res, failures


def test_criterion_07_parameter_recovery_and_coverage():
    # combined Poisson, N = 200, n = 10
    spec_p = ModelSpec(
        family="poisson",
        fixed_effects=("intercept", "time"),
        random_effects=("intercept",),
        overdispersion="independent",
    )
    alpha = 2.5
    params_p = Params(xi=[0.8, -0.02], d_chol=[[1.0]], alpha=alpha, beta=1.0 / alpha)
    design_p = SimDesign(
        n_subjects=200, occasions=10, covariates={"time": {"kind": "time"}}, seed=20240501
    )
    truth_p = {"intercept": 0.8, "time": -0.02, "d": 1.0, "alpha": 2.5}
    _, fail_p = _recovery_check(
        spec_p, params_p, truth_p, design_p, FitOptions(starts=2, gtol=1e-6, seed=1)
    )

    # combined Weibull, N = 300
    spec_w = ModelSpec(
        family="weibull",
        fixed_effects=("intercept", "treat"),
        random_effects=("intercept",),
        overdispersion="independent",
        weibull_shape_free=True,
    )
    aw = 3.0
    params_w = Params(xi=[0.5, -0.4], d_chol=[[math.sqrt(0.5)]], alpha=aw, beta=1.0 / aw, rho=1.3)
    design_w = SimDesign(
        n_subjects=300,
        occasions=5,
        covariates={"treat": {"kind": "bernoulli", "p": 0.5}},
        seed=20240502,
    )
    truth_w = {"intercept": 0.5, "treat": -0.4, "d": 0.5, "alpha": 3.0, "rho": 1.3}
    _, fail_w = _recovery_check(
        spec_w, params_w, truth_w, design_w, FitOptions(starts=2, gtol=1e-6, seed=2)
    )

    # combined logit, N = 300
    spec_l = ModelSpec(
        family="bernoulli-logit",
        fixed_effects=("intercept", "time"),
        random_effects=("intercept",),
        overdispersion="independent",
    )
    params_l = Params(xi=[0.2, 0.15], d_chol=[[1.0]], alpha=4.0, beta=1.0, pi0=0.8)
    design_l = SimDesign(
        n_subjects=300, occasions=8, covariates={"time": {"kind": "time"}}, seed=20240503
    )
    truth_l = {"intercept": 0.2, "time": 0.15, "d": 1.0, "pi0": 0.8}
    _, fail_l = _recovery_check(
        spec_l, params_l, truth_l, design_l, FitOptions(starts=2, gtol=1e-6, seed=3)
    )

    # Wald-interval coverage for the fixed effects over 100 replicates
    n_reps = 100
    covered = {"intercept": 0, "time": 0}
    opts = FitOptions(starts=1, gtol=1e-5, seed=0)
    quad = QuadratureRule(order=13)
    for rep in range(n_reps):
        design = SimDesign(
            n_subjects=200, occasions=10, covariates={"time": {"kind": "time"}},
            seed=100_000 + rep,
        )
        data = simulate(spec_p, params_p, design)
        res = fit(spec_p, data, quad, opts)
        for name, val in (("intercept", 0.8), ("time", -0.02)):
            lo = res.estimates[name] - 1.959964 * res.se[name]
            hi = res.estimates[name] + 1.959964 * res.se[name]
            covered[name] += int(lo <= val <= hi)
    cov_ok = all(90 <= covered[name] <= 100 for name in covered)

    ok = not fail_p and not fail_w and not fail_l and cov_ok
    _report(
        7,
        "parameter recovery within 3 se and 95% interval coverage within 5 points",
        ok,
        f"poisson {fail_p or 'ok'}; weibull {fail_w or 'ok'}; logit {fail_l or 'ok'}; "
        f"coverage {covered}",
    )


# ---------------------------------------------------------------------- 8


def test_criterion_08_boundary_test_calibration():
    spec_null = ModelSpec(family="poisson", fixed_effects=("intercept", "time"))
    spec_alt = ModelSpec(
        family="poisson", fixed_effects=("intercept", "time"), random_effects=("intercept",)
    )
    n_reps = 500
    rejections = 0
    quad = QuadratureRule(order=9)
    for rep in range(n_reps):
        rng = np.random.default_rng(7_000_000 + rep)
        time_col = np.tile(np.arange(1.0, 5.0), 120)
        ids = np.repeat(np.arange(1, 121), 4)
        lam = np.exp(0.6 - 0.04 * time_col)
        y = rng.poisson(lam)
        ds = Dataset(
            pd.DataFrame({"id": ids, "occasion": np.tile(np.arange(1, 5), 120), "y": y,
                          "time": time_col})
        )
        null_fit = fit(spec_null, ds, opts=FitOptions(starts=1, gtol=1e-6))
        init = Params(
            xi=null_fit.params.xi, d_chol=[[math.sqrt(0.05)]]
        )
        alt_fit = fit(
            spec_alt, ds, quad,
            FitOptions(starts=1, gtol=1e-5, init=init, max_iter=200),
        )
        _, p = boundary_variance_test(null_fit.loglik, alt_fit.loglik)
        rejections += int(p < 0.05)
    lo = int(stats.binom.ppf(0.005, n_reps, 0.05))
    hi = int(stats.binom.ppf(0.995, n_reps, 0.05))
    ok = lo <= rejections <= hi
    _report(
        8,
        "boundary variance test rejects at the nominal rate under the null",
        ok,
        f"{rejections}/{n_reps} rejections, 99% band [{lo}, {hi}]",
    )


# ---------------------------------------------------------------------- 9


def test_criterion_09_logit_probit_bridge():
    ok_const = abs(LOGIT_PROBIT_SCALE - 16.0 * math.sqrt(3.0) / (15.0 * math.pi)) <= 1e-12
    y = np.linspace(-8.0, 8.0, 400_001)
    gap = np.abs(1.0 / (1.0 + np.exp(-y)) - std_normal_cdf(LOGIT_PROBIT_SCALE * y)).max()
    ok = ok_const and gap <= 0.011
    _report(9, "logistic-normal CDF bridge: constant and worst-case gap", ok, f"gap {gap:.4f}")


# ---------------------------------------------------------------------- 10


def test_criterion_10_invariance_suite():
    rng = np.random.default_rng(1234)
    n_cases = 200

    # (a) pack/unpack round trips
    ok_pack = True
    specs = [
        ModelSpec(family="poisson", fixed_effects=("intercept", "time"),
                  random_effects=("intercept",), overdispersion="independent"),
        ModelSpec(family="weibull", fixed_effects=("intercept",),
                  random_effects=("intercept", "time"), overdispersion="independent",
                  weibull_shape_free=True),
        ModelSpec(family="bernoulli-logit", fixed_effects=("intercept",),
                  overdispersion="independent"),
        ModelSpec(family="normal", fixed_effects=("intercept", "time"),
                  random_effects=("intercept",)),
    ]
    from conmix.model import packed_names

    for _ in range(n_cases):
        spec = specs[rng.integers(0, len(specs))]
        v = rng.uniform(-2.5, 2.5, size=len(packed_names(spec)))
        v2 = pack(spec, unpack(v, spec))
        if not np.allclose(v, v2, rtol=1e-13, atol=1e-14):
            ok_pack = False

    # (b) subject permutation leaves the likelihood unchanged
    spec = ModelSpec(
        family="poisson", fixed_effects=("intercept", "time"), random_effects=("intercept",),
        overdispersion="independent",
    )
    ok_perm = True
    for case in range(n_cases):
        params = Params(
            xi=[rng.uniform(-0.5, 0.8), rng.uniform(-0.1, 0.1)],
            d_chol=[[rng.uniform(0.3, 1.2)]],
            alpha=rng.uniform(0.8, 4.0),
            beta=rng.uniform(0.3, 1.5),
        )
        ds = simulate(
            spec, params,
            SimDesign(n_subjects=6, occasions=3, covariates={"time": {"kind": "time"}},
                      seed=int(rng.integers(1 << 30))),
        )
        shuffled = Dataset(ds.frame.sample(frac=1.0, random_state=case))
        a = total_loglik(spec, params, ds)
        b = total_loglik(spec, params, shuffled)
        if abs(a - b) > 1e-12 * max(1.0, abs(a)):
            ok_perm = False

    # (c) duplicating every subject doubles the log-likelihood
    ok_dup = True
    for case in range(n_cases):
        params = Params(
            xi=[rng.uniform(-0.5, 0.8), rng.uniform(-0.1, 0.1)],
            d_chol=[[rng.uniform(0.3, 1.2)]],
            alpha=rng.uniform(0.8, 4.0),
            beta=rng.uniform(0.3, 1.5),
        )
        ds = simulate(
            spec, params,
            SimDesign(n_subjects=5, occasions=3, covariates={"time": {"kind": "time"}},
                      seed=int(rng.integers(1 << 30))),
        )
        df = ds.frame
        doubled = Dataset(pd.concat([df, df.assign(id=df["id"] + 1000)], ignore_index=True))
        a = total_loglik(spec, params, ds)
        b = total_loglik(spec, params, doubled)
        if abs(b - 2.0 * a) > 1e-10 * max(1.0, abs(a)):
            ok_dup = False

    # (d) covariate rescaling equivariance on one-stage fits
    spec_glm = ModelSpec(family="poisson", fixed_effects=("intercept", "x"))
    ok_scale = True
    for case in range(n_cases):
        m = 30
        x = rng.normal(size=m)
        yv = rng.poisson(np.exp(0.5 + 0.4 * x))
        df = pd.DataFrame({"id": np.arange(1, m + 1), "occasion": 1, "y": yv, "x": x})
        s = float(rng.uniform(0.25, 4.0))
        o = FitOptions(starts=1, gtol=1e-10)
        r1 = fit(spec_glm, Dataset(df), opts=o)
        r2 = fit(spec_glm, Dataset(df.assign(x=df["x"] * s)), opts=o)
        rel = abs(r2.estimates["x"] - r1.estimates["x"] / s) / max(abs(r1.estimates["x"] / s), 1e-8)
        if rel > 1e-6 or abs(r2.loglik - r1.loglik) > 1e-6:
            ok_scale = False

    ok = ok_pack and ok_perm and ok_dup and ok_scale
    _report(
        10,
        "invariance suite: round-trip, permutation, duplication, rescaling (200 cases each)",
        ok,
        f"pack {ok_pack}, perm {ok_perm}, dup {ok_dup}, scale {ok_scale}",
    )
