import math

import numpy as np
import pandas as pd
import pytest

from conmix.exceptions import DataError, DomainError
from conmix.model import ModelSpec, Params
from conmix.moments import bernoulli_beta_moments, correlation_grid, marginal_mean_rows
from conmix.simulate import SimDesign, simulate


class TestDeterminism:
    def test_same_seed_identical(self):
        spec = ModelSpec(
            family="poisson", fixed_effects=("intercept", "time"), random_effects=("intercept",),
            overdispersion="independent",
        )
        params = Params(xi=[0.5, -0.05], d_chol=[[0.8]], alpha=2.0, beta=0.5)
        design = SimDesign(n_subjects=20, occasions=4, covariates={"time": {"kind": "time"}}, seed=7)
        a = simulate(spec, params, design)
        b = simulate(spec, params, design)
        pd.testing.assert_frame_equal(a.frame, b.frame)

    def test_different_seed_differs(self):
        spec = ModelSpec(family="poisson", fixed_effects=("intercept",))
        params = Params(xi=[1.0])
        a = simulate(spec, params, SimDesign(n_subjects=30, occasions=3, seed=1))
        b = simulate(spec, params, SimDesign(n_subjects=30, occasions=3, seed=2))
        assert not a.frame["y"].equals(b.frame["y"])

    def test_prefix_stability(self):
        # per-subject streams: the first subjects are unchanged when more are added
        spec = ModelSpec(family="poisson", fixed_effects=("intercept",))
        params = Params(xi=[1.0])
        small = simulate(spec, params, SimDesign(n_subjects=5, occasions=2, seed=3))
        big = simulate(spec, params, SimDesign(n_subjects=9, occasions=2, seed=3))
        pd.testing.assert_frame_equal(
            small.frame, big.frame[big.frame["id"] <= 5].reset_index(drop=True)
        )


class TestDistributionalFidelity:
    def test_plain_poisson_mean(self):
        spec = ModelSpec(family="poisson", fixed_effects=("intercept",))
        params = Params(xi=[math.log(3.0)])
        n_subj, n_occ = 2000, 5
        ds = simulate(spec, params, SimDesign(n_subjects=n_subj, occasions=n_occ, seed=11))
        tol = 3.0 * math.sqrt(3.0 / (n_subj * n_occ))
        assert abs(ds.frame["y"].mean() - 3.0) < tol

    def test_poisson_combined_occasion_moments(self):
        spec = ModelSpec(
            family="poisson", fixed_effects=("intercept", "time"), random_effects=("intercept",),
            overdispersion="independent",
        )
        alpha = 2.5
        params = Params(xi=[0.4, -0.05], d_chol=[[math.sqrt(0.9)]], alpha=alpha, beta=1 / alpha)
        n_subj = 100_000
        ds = simulate(
            spec,
            params,
            SimDesign(n_subjects=n_subj, occasions=3, covariates={"time": {"kind": "time"}}, seed=5),
        )
        wide = ds.frame.pivot(index="id", columns="occasion", values="y").to_numpy()
        from conmix.moments import moment_set

        X = np.column_stack([np.ones(3), np.arange(1.0, 4.0)])
        Z = np.ones((3, 1))
        ms = moment_set(spec, params, X, Z)
        for j in range(3):
            se = wide[:, j].std(ddof=1) / math.sqrt(n_subj)
            assert abs(wide[:, j].mean() - ms.means[j]) < 3 * se
            v = wide[:, j].var(ddof=1)
            se_v = np.sqrt(np.var((wide[:, j] - wide[:, j].mean()) ** 2) / n_subj)
            assert abs(v - ms.variances[j]) < 3 * se_v

    def test_correlation_self_consistency(self):
        spec = ModelSpec(
            family="poisson", fixed_effects=("intercept",), random_effects=("intercept",),
            overdispersion="independent",
        )
        alpha = 2.5  # var_theta = 0.4
        params = Params(xi=[0.5], d_chol=[[1.0]], alpha=alpha, beta=1 / alpha)
        n_subj = 100_000
        ds = simulate(spec, params, SimDesign(n_subjects=n_subj, occasions=2, seed=13))
        wide = ds.frame.pivot(index="id", columns="occasion", values="y").to_numpy()
        emp = np.corrcoef(wide.T)[0, 1]
        closed = correlation_grid(spec, params, [1.0, 2.0]).values[0]
        se = (1 - emp**2) / math.sqrt(n_subj)  # Fisher-style, inflated below
        assert abs(emp - closed) < max(3 * se, 0.012)

    def test_bernoulli_beta_frequencies(self):
        spec = ModelSpec(
            family="bernoulli-logit", fixed_effects=("intercept",), overdispersion="independent"
        )
        alpha, beta = 2.0, 1.0
        params = Params(xi=[0.3], alpha=alpha, beta=beta)
        n_subj = 200_000
        ds = simulate(spec, params, SimDesign(n_subjects=n_subj, occasions=1, seed=17))
        kappa = 1.0 / (1.0 + math.exp(-0.3))
        ms = bernoulli_beta_moments([kappa], alpha, beta)
        emp = ds.frame["y"].mean()
        se = ds.frame["y"].std(ddof=1) / math.sqrt(n_subj)
        assert abs(emp - ms.means[0]) < 3 * se

    def test_weibull_mean_and_status(self):
        spec = ModelSpec(
            family="weibull",
            fixed_effects=("intercept",),
            random_effects=("intercept",),
            overdispersion="independent",
            weibull_shape_free=True,
        )
        alpha, d, rho = 3.0, 0.4, 1.5
        params = Params(xi=[0.2], d_chol=[[math.sqrt(d)]], alpha=alpha, beta=1 / alpha, rho=rho)
        n_subj = 150_000
        ds = simulate(spec, params, SimDesign(n_subjects=n_subj, occasions=1, seed=23))
        assert (ds.frame["status"] == 1.0).all()
        closed = marginal_mean_rows(spec, params, np.array([[1.0]]), np.ones((1, 1)))[0]
        se = ds.frame["y"].std(ddof=1) / math.sqrt(n_subj)
        assert abs(ds.frame["y"].mean() - closed) < 3 * se

    def test_probit_family(self):
        spec = ModelSpec(
            family="bernoulli-probit", fixed_effects=("intercept",), overdispersion="independent"
        )
        params = Params(xi=[0.4], alpha=4.0, beta=1.0)
        n_subj = 100_000
        ds = simulate(spec, params, SimDesign(n_subjects=n_subj, occasions=1, seed=29))
        from conmix.special import std_normal_cdf

        expected = 0.8 * std_normal_cdf(0.4)
        se = math.sqrt(expected * (1 - expected) / n_subj)
        assert abs(ds.frame["y"].mean() - expected) < 3 * se

    def test_normal_family(self):
        spec = ModelSpec(
            family="normal", fixed_effects=("intercept",), random_effects=("intercept",)
        )
        params = Params(xi=[1.5], d_chol=[[0.7]], sigma2=0.5)
        ds = simulate(spec, params, SimDesign(n_subjects=50_000, occasions=2, seed=31))
        assert ds.frame["y"].mean() == pytest.approx(1.5, abs=0.02)


class TestCovariateGenerators:
    def test_constant_time_bernoulli(self):
        spec = ModelSpec(family="poisson", fixed_effects=("intercept", "time", "treat", "dose"))
        params = Params(xi=[0.1, 0.0, 0.0, 0.0])
        design = SimDesign(
            n_subjects=200,
            occasions=[1.0, 2.5, 7.0],
            covariates={
                "time": {"kind": "time"},
                "treat": {"kind": "bernoulli", "p": 0.5},
                "dose": {"kind": "constant", "value": 2.0},
            },
            seed=3,
        )
        ds = simulate(spec, params, design)
        f = ds.frame
        assert sorted(f["time"].unique()) == [1.0, 2.5, 7.0]
        assert set(f["treat"].unique()) <= {0.0, 1.0}
        # subject-level: constant within subject
        assert (f.groupby("id")["treat"].nunique() == 1).all()
        frac = f.groupby("id")["treat"].first().mean()
        assert 0.35 < frac < 0.65
        assert (f["dose"] == 2.0).all()

    def test_column_file(self, tmp_path):
        path = tmp_path / "col.csv"
        vals = np.arange(12, dtype=float)
        pd.DataFrame({"x": vals}).to_csv(path, index=False)
        spec = ModelSpec(family="poisson", fixed_effects=("intercept", "x"))
        params = Params(xi=[0.5, 0.0])
        design = SimDesign(
            n_subjects=4, occasions=3, covariates={"x": {"kind": "column_file", "path": str(path)}},
            seed=1,
        )
        ds = simulate(spec, params, design)
        assert np.array_equal(np.sort(ds.frame["x"].to_numpy()), vals)

    def test_column_file_length_mismatch(self, tmp_path):
        path = tmp_path / "short.csv"
        pd.DataFrame({"x": [1.0, 2.0]}).to_csv(path, index=False)
        spec = ModelSpec(family="poisson", fixed_effects=("intercept", "x"))
        design = SimDesign(
            n_subjects=4, occasions=3, covariates={"x": {"kind": "column_file", "path": str(path)}}
        )
        with pytest.raises(DataError, match="column file"):
            simulate(spec, Params(xi=[0.5, 0.0]), design)

    def test_missing_generator(self):
        spec = ModelSpec(family="poisson", fixed_effects=("intercept", "time"))
        with pytest.raises(DataError, match="generator"):
            simulate(spec, Params(xi=[0.1, 0.0]), SimDesign(n_subjects=2, occasions=2))

    def test_unknown_kind(self):
        spec = ModelSpec(family="poisson", fixed_effects=("intercept", "x"))
        with pytest.raises(DomainError):
            simulate(
                spec,
                Params(xi=[0.1, 0.0]),
                SimDesign(n_subjects=2, occasions=2, covariates={"x": {"kind": "uniform"}}),
            )

    def test_beta_simulation_needs_full_pair(self):
        spec = ModelSpec(
            family="bernoulli-logit", fixed_effects=("intercept",), overdispersion="independent"
        )
        with pytest.raises(DomainError, match="alpha, beta"):
            simulate(spec, Params(xi=[0.0], pi0=0.7), SimDesign(n_subjects=2, occasions=2))
