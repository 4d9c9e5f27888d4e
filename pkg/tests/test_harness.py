import csv
import json

import numpy as np
import pytest
from scipy import stats

from perfinf import model as mdl
from perfinf.errors import ConfigError, NumericalError
from perfinf.estimator import LambdaPolicy
from perfinf.harness import experiments as ex
from perfinf.harness.cli import main
from perfinf.harness.config import config_from_dict, load_config, default_config
from perfinf.harness.io import dumps_csv, dumps_json, write_atomic
from perfinf.inference import ScoreConfig


def small(**kw):
    base = dict(T=2, n_grid=[60], N=200, trials=12, lambda_policies=[LambdaPolicy.zero(), LambdaPolicy.greedy()])
    base.update(kw)
    return default_config(**base)


class TestConfig:
    def test_defaults(self):
        cfg = config_from_dict({})
        assert cfg.N == 2000 and cfg.delta == 0.1 and cfg.trials == 1000
        assert cfg.n_grid == [100, 250, 500, 1000, 2000]
        np.testing.assert_array_equal(cfg.theta0, mdl.DEFAULT_THETA0)

    def test_load(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"T": 3, "lambda_policies": ["zero", "fixed:1", "greedy"], "score": {"mode": "fitted"}}))
        cfg = load_config(path)
        assert cfg.T == 3 and [str(p) for p in cfg.lambda_policies] == ["zero", "fixed:1", "greedy"]
        assert cfg.score.mode == "fitted"

    @pytest.mark.parametrize(
        "data",
        [
            {"trials": 0},
            {"delta": 1.0},
            {"n_grid": [2]},
            {"bogus": 1},
            {"model": "other"},
            {"lambda_policies": ["best"]},
            {"score": {"mode": "x"}},
            {"score": {"etaa": 1}},
            {"theta0": [0.0]},
        ],
    )
    def test_invalid(self, data):
        with pytest.raises(ConfigError):
            config_from_dict(data)

    def test_unreadable(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(bad)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.json")


class TestIO:
    def test_atomic_leaves_nothing_on_failure(self, tmp_path):
        target = tmp_path / "out.csv"
        with pytest.raises(TypeError):
            write_atomic(target, 123)  # not text
        assert list(tmp_path.iterdir()) == []

    def test_json_non_finite(self):
        assert json.loads(dumps_json({"a": float("nan"), "b": [1.0, float("inf")]})) == {"a": None, "b": [1.0, None]}

    def test_csv_float_round_trip(self):
        text = dumps_csv([{"x": 0.1 + 0.2, "y": 3}], ["x", "y"])
        row = next(csv.DictReader(text.splitlines()))
        assert float(row["x"]) == 0.1 + 0.2 and row["y"] == "3"


class TestCoverage:
    def test_structure(self):
        summary = ex.run_coverage(small())
        assert len(summary.cells) == 2 * 1 * 2
        for c in summary.cells:
            assert 0 <= c.coverage_t <= 1 and 0 <= c.coverage_ps <= 1
            assert c.se == pytest.approx(ex.binomial_se(c.coverage_t, 12))
        assert summary.cell("zero", 60, 1).mean_lambda == 0.0
        with pytest.raises(KeyError):
            summary.cell("zero", 61, 1)

    def test_ps_dominates(self):
        summary = ex.run_coverage(small())
        assert all(c.coverage_ps >= c.coverage_t for c in summary.cells)

    def test_deterministic(self):
        a = ex.run_coverage(small(), keep_mahalanobis=True)
        b = ex.run_coverage(small(), keep_mahalanobis=True)
        assert dumps_json(a.to_dict(True)) == dumps_json(b.to_dict(True))

    def test_parallel_matches_serial(self):
        a = ex.run_coverage(small(trials=6))
        b = ex.run_coverage(small(trials=6, workers=2))
        assert a.rows() == b.rows()

    def test_trial_stream(self):
        a = ex.trial_stream(7, 3, 100).random(4)
        np.testing.assert_array_equal(a, np.random.default_rng([7 ^ 3, 7, 100]).random(4))
        assert not np.array_equal(a, ex.trial_stream(7, 4, 100).random(4))

    def test_seeds_give_distinct_runs(self):
        # with a bare XOR key, seeds 1 and 2 would draw the same trial set
        a = ex.run_coverage(small(seed=1, trials=8), keep_mahalanobis=True)
        b = ex.run_coverage(small(seed=2, trials=8), keep_mahalanobis=True)
        assert sorted(a.cells[0].mahalanobis) != sorted(b.cells[0].mahalanobis)


class TestQQ:
    def test_self_test_with_synthetic_draws(self):
        # theta_hat drawn exactly from N(theta_t, V / n)
        rng = np.random.default_rng(0)
        V = np.array([[0.5, 0.2], [0.2, 0.3]])
        n, theta = 1000, np.array([0.3, -0.1])
        draws = rng.multivariate_normal(theta, V / n, size=1000)
        m2 = [n * (d - theta) @ np.linalg.solve(V, d - theta) for d in draws]
        assert ex.ks_chi2(m2, 2) <= 0.04

    def test_plotting_positions(self):
        q = ex.chi2_plotting_positions(4, 2)
        np.testing.assert_allclose(q, stats.chi2.ppf([0.125, 0.375, 0.625, 0.875], 2))
        pairs = ex.qq_pairs([3.0, 1.0, 2.0, 0.5], 2)
        assert [p[0] for p in pairs] == [0.5, 1.0, 2.0, 3.0]

    def test_requires_trials(self):
        with pytest.raises(ValueError):
            ex.run_qq(small(trials=50))

    def test_mean_near_d(self):
        sample = ex.run_qq_sample(small(trials=300, T=2), n=500, t=2, policy=LambdaPolicy.zero())
        assert abs(sample.mean() - 2) <= 0.1 * 2 * 1.5


class TestScoreEval:
    def test_rows(self):
        cfg = small(T=3, n_grid=[500, 4000], trials=8, lambda_policies=[LambdaPolicy.zero()])
        rows = ex.run_score_eval(cfg)
        assert [(r.n, r.t) for r in rows] == [(500, 2), (500, 3), (4000, 2), (4000, 3)]
        assert all(r.J_psi < 0.05 for r in rows)
        by = {(r.n, r.t): r for r in rows}
        assert by[(4000, 3)].var_err < by[(500, 3)].var_err

    def test_no_performativity(self):
        cfg = small(
            model=mdl.default_setting(mu=[0.0, 0.0]), T=2, n_grid=[250, 4000], trials=20,
            lambda_policies=[LambdaPolicy.zero()],
        )
        rows = ex.run_score_eval(cfg)
        # sampling error of the sandwich block scales like n^-1/2
        ratio = rows[1].var_err / rows[0].var_err
        assert 0.1 <= ratio <= 0.5


class TestConvergence:
    def test_bound(self):
        cfg = small(T=10)
        rows = ex.run_convergence(cfg)
        rate = mdl.contraction_rate(cfg.model, cfg.theta_bound)
        assert rows[0].dist_to_ps == pytest.approx(rows[0].bound, rel=1e-15)
        assert all(r.dist_to_ps <= r.bound for r in rows)
        # past ~1e-15 the distance is round-off
        assert all(r.ratio <= rate for prev, r in zip(rows, rows[1:]) if prev.dist_to_ps > 1e-12)


class TestCli:
    def test_coverage_csv(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"T": 2, "n_grid": [60], "N": 200, "lambda_policies": ["zero", "greedy"]}))
        assert main(["coverage", "--config", str(cfg), "--trials", "5", "--out", str(tmp_path)]) == 0
        with open(tmp_path / "coverage.csv") as fh:
            reader = csv.reader(fh)
            assert next(reader) == [
                "policy", "n", "t", "coverage_t", "coverage_ps", "se", "mean_width", "mean_lambda",
            ]
            assert len(list(reader)) == 4

    def test_reruns_are_byte_identical(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"T": 2, "n_grid": [60], "N": 200}))
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["coverage", "--config", str(cfg), "--trials", "4", "--seed", "3", "--out", str(out), "--format", "json"]) == 0
            outs.append((out / "coverage.json").read_bytes())
        assert outs[0] == outs[1]

    def test_simulate(self, tmp_path):
        assert main(["simulate", "--seed", "5", "--n", "80", "--out", str(tmp_path), "--include-data"]) == 0
        payload = json.loads((tmp_path / "trajectory.json").read_text())
        assert payload["trajectory"]["seed"] == 5
        assert len(payload["regions"]) == payload["config"]["T"]
        assert len(payload["trajectory"]["steps"][0]["dataset"]["y"]) == 80

    def test_qq(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"T": 2, "n_grid": [100]}))
        assert main(["qq", "--config", str(cfg), "--trials", "100", "--out", str(tmp_path)]) == 0
        with open(tmp_path / "qq.csv") as fh:
            assert next(csv.reader(fh)) == ["rank", "observed_m2", "chi2_quantile"]

    def test_convergence(self, tmp_path):
        assert main(["convergence", "--out", str(tmp_path), "--format", "json"]) == 0
        rows = json.loads((tmp_path / "convergence.json").read_text())["rows"]
        assert rows[0]["ratio"] is None

    def test_config_error_exit(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"delta": 2}))
        out = tmp_path / "out"
        assert main(["coverage", "--config", str(bad), "--out", str(out)]) == 2
        assert not out.exists()

    def test_qq_trial_floor_is_config_error(self, tmp_path):
        assert main(["qq", "--trials", "10", "--out", str(tmp_path)]) == 2
        assert list(tmp_path.iterdir()) == []

    def test_conflicting_flags(self, tmp_path):
        assert main(["convergence", "--oracle-gradg", "--fitted-gradg", "--out", str(tmp_path)]) == 2

    def test_numerical_failure_exit(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise NumericalError("singular")

        monkeypatch.setattr(ex, "run_coverage", boom)
        assert main(["coverage", "--trials", "1", "--out", str(tmp_path)]) == 3
        assert list(tmp_path.iterdir()) == []

    def test_module_entry_point(self):
        import subprocess
        import sys

        proc = subprocess.run([sys.executable, "-m", "perfinf", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "coverage" in proc.stdout
