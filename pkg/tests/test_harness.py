"""Conjugacy certification harness: yhat search, recovery, reports."""

import json

import numpy as np
import pytest

from tcdl.errors import BelowX0Error, ConfigError, MarketError
from tcdl.market import binomial_market, market_to_dict
from tcdl import dual as du
from tcdl import harness as hn
from tcdl import primal as pr
from tcdl import utility as ut

LOG = ut.make_utility("log")


def test_yhat_frictionless_log():
    # complete market: E[z0 I(y z0)] = 1/y, so v'(y) + x = 0 at y = 1/x
    model = binomial_market(4.0, 8.0, 2.0, lam=0.0)
    for x in (0.5, 1.0, 2.0):
        assert hn.find_yhat(model, LOG, x) == pytest.approx(1.0 / x, rel=1e-9)


def test_yhat_constant_price_with_endowment():
    # constant S admits every density; v(y) = -ln y - 1 + c y, root y = 1/(x+c)
    model = binomial_market(4.0, 4.0, 4.0, lam=0.0, endowment=(0.5, 0.5))
    assert hn.find_yhat(model, LOG, 1.0) == pytest.approx(1.0 / 1.5, rel=1e-8)


def test_yhat_below_x0_raises():
    model = binomial_market(4.0, 8.0, 2.0, lam=0.1, endowment=(0.25, -0.5))
    x0 = du.compute_x0(model)
    with pytest.raises(BelowX0Error):
        hn.find_yhat(model, LOG, x0 - 1e-6)


def test_recovery_matches_primal():
    model = binomial_market(4.0, 8.0, 2.0, lam=0.1, endowment=(0.25, -0.5))
    x = 2.0
    rec = hn.recover_primal_from_dual(model, LOG, x)
    psol = pr.solve_primal(model, LOG, x)
    assert rec.attainable
    assert rec.attainability_slack <= 1e-7
    assert rec.primal.value == pytest.approx(psol.value, abs=1e-7)
    # strong duality at the recovered pair
    assert psol.value == pytest.approx(rec.dual.value + x * rec.yhat, abs=1e-6)


def test_recovery_slackness_identities():
    model = binomial_market(4.0, 8.0, 2.0, lam=0.2, endowment=(0.25, -0.5))
    rec = hn.recover_primal_from_dual(model, LOG, 1.5)
    slack = hn.slackness_check(model, rec.primal, rec.dual)
    assert slack.passed
    assert slack.r1 <= 1e-9
    assert slack.r2 <= 1e-9
    assert slack.r3 == pytest.approx(0.0, abs=1e-9)


def test_slackness_check_formula():
    model = binomial_market(4.0, 8.0, 2.0, lam=0.0)
    x = 1.0
    psol = pr.solve_primal(model, LOG, x)
    dsol = du.solve_dual(model, LOG, 1.0 / x)
    slack = hn.slackness_check(model, psol, dsol)
    p = model.tree.leaf_prob()
    z0 = np.array(dsol.optimizer.z0)[list(model.tree.leaves)]
    assert slack.r1 == pytest.approx(abs((p * z0) @ psol.ghat), abs=1e-12)
    assert slack.passed


def test_model_hash_stable_and_sensitive():
    a = binomial_market(4.0, 8.0, 2.0, lam=0.1)
    b = binomial_market(4.0, 8.0, 2.0, lam=0.1)
    c = binomial_market(4.0, 8.0, 2.0, lam=0.2)
    assert hn.model_hash(a) == hn.model_hash(b)
    assert hn.model_hash(a) != hn.model_hash(c)
    assert len(hn.model_hash(a)) == 64


def test_conjugacy_check_report():
    model = binomial_market(4.0, 8.0, 2.0, lam=0.1, endowment=(0.25, -0.5))
    x0 = du.compute_x0(model)
    y_grid = np.logspace(-1.5, 1.5, 13)
    report = hn.conjugacy_check(model, LOG, [x0 - 0.1, x0 + 0.5, x0 + 1.5], y_grid)
    assert report.passed
    assert report.x0 == pytest.approx(x0)
    below = report.x_records[0]
    assert below["status"] == "below-x0"
    assert below["u"] == "-inf"
    ok = [r for r in report.x_records if r["status"] == "ok"]
    assert len(ok) == 2
    for r in ok:
        assert r["rel_gap"] <= 1e-5
        assert r["recovery_attainable"]
    names = {c["name"] for c in report.checks}
    assert {"v_convex_midpoint", "v_prime_increasing", "strong_duality",
            "weak_duality_u_le_env", "recovery_attainable", "recovery_optimal",
            "slackness_r1", "slackness_r2", "marginal_equals_yhat",
            "weak_duality_v_ge_env"} <= names
    assert all(c["passed"] for c in report.checks)


def test_random_instance_deterministic():
    a = hn.random_instance(42, depth=3, branching=2, lam=0.3, rho=0.2)
    b = hn.random_instance(42, depth=3, branching=2, lam=0.3, rho=0.2)
    assert market_to_dict(a) == market_to_dict(b)
    other = hn.random_instance(43, depth=3, branching=2, lam=0.3, rho=0.2)
    assert market_to_dict(other) != market_to_dict(a)
    assert a.tree.n_nodes == 1 + 2 + 4 + 8
    assert a.rho <= 0.2


def test_random_instance_scale_guard():
    with pytest.raises(MarketError):
        hn.random_instance(1, depth=6, branching=2, lam=0.1, rho=0.0)
    with pytest.raises(MarketError):
        hn.random_instance(1, depth=3, branching=4, lam=0.1, rho=0.0)


def test_run_experiment_writes_files(tmp_path):
    config = {
        "seed": {"seed": 7, "depth": 2, "branching": 2, "lambda": 0.1, "rho": 0.2},
        "utility": "log",
        "y_grid": {"min": 0.05, "max": 20.0, "n": 9},
        "check_marginals": False,
    }
    report = hn.run_experiment(config, output_dir=str(tmp_path))
    assert report.passed
    subdirs = list(tmp_path.iterdir())
    assert len(subdirs) == 1
    assert subdirs[0].name.endswith("-seed7")
    names = {p.name for p in subdirs[0].iterdir()}
    assert names == {"report.json", "u_curve.csv", "v_curve.csv", "checks.csv"}
    with open(subdirs[0] / "report.json") as fh:
        blob = json.load(fh)
    assert blob["passed"] is True
    assert blob["metadata"]["model_hash"] == report.metadata["model_hash"]


def test_run_experiment_output_deterministic(tmp_path):
    config = {
        "seed": {"seed": 3, "depth": 2, "branching": 2, "lambda": 0.1, "rho": 0.2},
        "y_grid": {"min": 0.05, "max": 20.0, "n": 9},
        "check_marginals": False,
    }
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    hn.run_experiment(config, output_dir=str(out1))
    hn.run_experiment(config, output_dir=str(out2))
    (d1,) = list(out1.iterdir())
    (d2,) = list(out2.iterdir())
    for name in ("report.json", "u_curve.csv", "v_curve.csv", "checks.csv"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_run_experiment_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        hn.run_experiment({}, output_dir=str(tmp_path))
    with pytest.raises(ConfigError):
        hn.run_experiment({"seed": {"seed": 1}, "market": "x.json"},
                          output_dir=str(tmp_path))


def test_run_experiment_from_market_file(tmp_path):
    from tcdl.market import save_market
    model = binomial_market(4.0, 8.0, 2.0, lam=0.1)
    path = tmp_path / "binomial.json"
    save_market(model, str(path))
    report = hn.run_experiment({
        "market": str(path),
        "x_grid": [1.0, 2.0],
        "y_grid": [0.25, 0.5, 1.0, 2.0, 4.0],
        "check_marginals": False,
    }, output_dir=str(tmp_path / "out"))
    assert report.passed
    assert report.x0 == pytest.approx(0.0, abs=1e-10)


def test_selftest_two_seeds(tmp_path):
    results = hn.selftest([1, 2], str(tmp_path), jobs=1)
    assert results == {1: True, 2: True}
