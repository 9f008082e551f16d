import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from conmix.cli import run
from conmix.estimate import FitOptions, fit
from conmix.exceptions import DataError, DomainError
from conmix.io import (
    RunConfig,
    load_result,
    params_from_mapping,
    read_dataset,
    result_from_dict,
    result_to_dict,
    save_result,
    write_dataset,
)
from conmix.model import Dataset, ModelSpec, Params
from conmix.simulate import SimDesign, simulate


@pytest.fixture()
def poisson_csv(tmp_path):
    spec = ModelSpec(
        family="poisson", fixed_effects=("intercept", "time"), random_effects=("intercept",),
        overdispersion="independent",
    )
    params = Params(xi=[0.6, -0.04], d_chol=[[0.9]], alpha=2.0, beta=0.5)
    ds = simulate(
        spec, params,
        SimDesign(n_subjects=40, occasions=5, covariates={"time": {"kind": "time"}}, seed=42),
    )
    path = tmp_path / "counts.csv"
    write_dataset(ds, str(path))
    return str(path)


class TestReadDataset:
    def test_two_row_toy(self, tmp_path):
        p = tmp_path / "toy.csv"
        p.write_text("id,occasion,y\n1,1,0\n1,2,3\n")
        ds = read_dataset(str(p))
        assert ds.n_subjects == 1
        assert ds.n_obs == 2

    def test_duplicate_names_line(self, tmp_path):
        p = tmp_path / "dup.csv"
        p.write_text("id,occasion,y\n1,1,0\n1,1,3\n")
        with pytest.raises(DataError, match=r"dup\.csv:3"):
            read_dataset(str(p))

    def test_unparseable_cell_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("id,occasion,y\n1,1,0\n1,2,oops\n")
        with pytest.raises(DataError, match=r"bad\.csv:3.*oops"):
            read_dataset(str(p))

    def test_missing_column(self, tmp_path):
        p = tmp_path / "nocol.csv"
        p.write_text("id,y\n1,0\n")
        with pytest.raises(DataError, match="missing required"):
            read_dataset(str(p))

    def test_weibull_status_required(self, tmp_path):
        p = tmp_path / "surv.csv"
        p.write_text("id,occasion,y\n1,1,0.5\n")
        with pytest.raises(DataError, match="status"):
            read_dataset(str(p), family="weibull")

    def test_weibull_censoring_rejected(self, tmp_path):
        p = tmp_path / "cens.csv"
        p.write_text("id,occasion,y,status\n1,1,0.5,1\n1,2,0.7,0\n")
        with pytest.raises(DataError, match="[Cc]ensoring"):
            read_dataset(str(p), family="weibull")

    def test_support_check(self, tmp_path):
        p = tmp_path / "bin.csv"
        p.write_text("id,occasion,y\n1,1,2\n")
        with pytest.raises(DataError, match="0, 1"):
            read_dataset(str(p), family="logit")


class TestResultRoundTrip:
    def test_bit_exact(self, poisson_csv, tmp_path):
        spec = ModelSpec(
            family="poisson", fixed_effects=("intercept", "time"), random_effects=("intercept",),
            overdispersion="independent",
        )
        data = read_dataset(poisson_csv, family="poisson")
        res = fit(spec, data, opts=FitOptions(starts=1))
        path = tmp_path / "result.json"
        save_result(res, str(path))
        back = load_result(str(path))
        assert back.estimates == res.estimates  # bit-exact float round-trip
        assert back.se == res.se
        assert np.array_equal(back.packed, res.packed)
        assert back.loglik == res.loglik
        assert np.array_equal(back.vcov_packed, res.vcov_packed)
        assert back.spec == res.spec
        assert back.data_fingerprint == res.data_fingerprint

    def test_format_tag_checked(self):
        with pytest.raises(DataError, match="format"):
            result_from_dict({"2": 3})


class TestParamsFromMapping:
    def test_poisson_combined(self):
        spec = ModelSpec(
            family="poisson", fixed_effects=("intercept", "time"), random_effects=("intercept",),
            overdispersion="independent",
        )
        p = params_from_mapping(
            spec, {"intercept": 0.8179, "time": -0.0143, "d": 1.1568, "alpha": 2.464}
        )
        assert p.D[0, 0] == pytest.approx(1.1568, rel=1e-12)
        assert p.beta == pytest.approx(1 / 2.464, rel=1e-12)

    def test_bernoulli_ratio(self):
        spec = ModelSpec(
            family="bernoulli-logit", fixed_effects=("intercept",), overdispersion="independent"
        )
        p = params_from_mapping(spec, {"intercept": 0.1, "ratio": 3.0})
        assert p.pi0 == pytest.approx(0.75)

    def test_missing_values(self):
        spec = ModelSpec(family="poisson", fixed_effects=("intercept",), random_effects=("intercept",))
        with pytest.raises(DomainError, match="'d'"):
            params_from_mapping(spec, {"intercept": 0.0})


class TestRunConfig:
    def test_from_file(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "family": "poisson",
                    "fixed_effects": ["intercept", "time"],
                    "random_effects": ["intercept"],
                    "overdispersion": "independent",
                    "quad": {"order": 15, "adaptive": False},
                    "optimizer": {"starts": 2, "max_iter": 100, "tol": 1e-5},
                    "seed": 7,
                }
            )
        )
        cfg = RunConfig.from_file(str(cfg_path))
        assert cfg.spec().overdispersion == "independent"
        assert cfg.quad().order == 15 and not cfg.quad().adaptive
        assert cfg.fit_options().starts == 2

    def test_needs_family(self):
        with pytest.raises(DomainError):
            RunConfig.from_dict({"fixed_effects": ["intercept"]})


class TestCliFit:
    def test_fit_smoke(self, poisson_csv, tmp_path, capsys):
        out = tmp_path / "out"
        code = run(
            [
                "fit",
                "--data", poisson_csv,
                "--family", "poisson",
                "--fixed", "intercept,time",
                "--random", "intercept",
                "--overdispersion", "independent",
                "--starts", "1",
                "--out", str(out),
            ]
        )
        assert code == 0
        assert (out / "result.json").exists()
        assert (out / "estimates.txt").exists()
        text = capsys.readouterr().out
        assert "log-likelihood" in text
        res = load_result(str(out / "result.json"))
        assert res.converged

    def test_validation_exit_code(self, tmp_path):
        p = tmp_path / "bin.csv"
        p.write_text("id,occasion,y\n1,1,5\n")  # not binary
        code = run(
            ["fit", "--data", str(p), "--family", "logit", "--fixed", "intercept"]
        )
        assert code == 2

    def test_unknown_flag_usage(self, poisson_csv):
        code = run(["fit", "--data", poisson_csv, "--nope", "x"])
        assert code == 1

    def test_no_subcommand(self):
        assert run([]) == 1


class TestCliSimulate:
    def test_simulate_roundtrip(self, tmp_path):
        cfg = {
            "family": "poisson",
            "fixed_effects": ["intercept", "time"],
            "random_effects": ["intercept"],
            "overdispersion": "independent",
            "params": {"intercept": 0.5, "time": -0.02, "d": 0.8, "alpha": 2.0},
            "simulate": {
                "n_subjects": 25,
                "occasions": 4,
                "covariates": {"time": {"kind": "time"}},
            },
            "seed": 5,
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out_csv = tmp_path / "sim.csv"
        code = run(["simulate", "--config", str(cfg_path), "--out", str(out_csv)])
        assert code == 0
        ds = read_dataset(str(out_csv), family="poisson")
        assert ds.n_subjects == 25
        assert ds.n_obs == 100
        # stateless: same invocation, identical file
        out2 = tmp_path / "sim2.csv"
        run(["simulate", "--config", str(cfg_path), "--out", str(out2)])
        assert out_csv.read_text() == out2.read_text()


class TestCliCorrAndMoments:
    def test_corr_reproduces_published_extremes(self, capsys):
        code = run(
            [
                "corr",
                "--family", "poisson",
                "--fixed", "intercept,time",
                "--random", "intercept",
                "--params", '{"intercept": 0.8179, "time": -0.0143, "d": 1.1568}',
                "--grid", "1..27",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "largest  0.896" in out
        assert "at 1 & 2" in out
        assert "smallest 0.8577" in out
        assert "at 26 & 27" in out

    def test_moments_table(self, capsys):
        code = run(
            [
                "moments",
                "--family", "poisson",
                "--fixed", "intercept,time",
                "--random", "intercept",
                "--params", '{"intercept": 0.8179, "time": -0.0143, "d": 1.1568}',
                "--grid", "1,2",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "mean" in out and "variance" in out
        # mean at t=1: exp(xi0 + xi1 + d/2)
        expected = math.exp(0.8179 - 0.0143 + 1.1568 / 2)
        assert f"{expected:.4f}" in out

    def test_corr_from_result_file(self, poisson_csv, tmp_path, capsys):
        out = tmp_path / "out"
        run(
            [
                "fit", "--data", poisson_csv, "--family", "poisson",
                "--fixed", "intercept,time", "--random", "intercept",
                "--overdispersion", "independent", "--starts", "1", "--out", str(out),
            ]
        )
        capsys.readouterr()
        code = run(["corr", "--result", str(out / "result.json"), "--grid", "1..5"])
        assert code == 0
        assert "largest" in capsys.readouterr().out

    def test_bad_grid(self):
        code = run(
            [
                "corr", "--family", "poisson", "--fixed", "intercept,time",
                "--random", "intercept",
                "--params", '{"intercept": 0.8, "time": -0.01, "d": 1.0}',
                "--grid", "9..1",
            ]
        )
        assert code == 2


class TestCliCompare:
    def test_compare_table(self, poisson_csv, tmp_path, capsys):
        common = ["--data", poisson_csv, "--family", "poisson", "--fixed", "intercept,time",
                  "--starts", "1"]
        run(["fit", *common, "--out", str(tmp_path / "glm")])
        run(["fit", *common, "--random", "intercept", "--out", str(tmp_path / "glmm")])
        run(["fit", *common, "--random", "intercept", "--overdispersion", "independent",
             "--out", str(tmp_path / "comb")])
        capsys.readouterr()
        code = run(
            [
                "compare",
                "--results",
                str(tmp_path / "glm" / "result.json"),
                str(tmp_path / "glmm" / "result.json"),
                str(tmp_path / "comb" / "result.json"),
                "--labels", "poisson,poisson-normal,combined",
                "--nesting",
                "poisson:poisson-normal:lr_boundary",
                "poisson-normal:combined:lr_boundary",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "poisson-normal" in out
        assert out.count("\n") >= 3
