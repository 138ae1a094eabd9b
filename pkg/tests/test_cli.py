"""CLI subcommands, output payloads, and exit codes."""

import json

import numpy as np
import pytest

from tcdl.cli import main
from tcdl.market import binomial_market, save_market


@pytest.fixture()
def market_path(tmp_path):
    model = binomial_market(4.0, 8.0, 2.0, lam=0.1, endowment=(0.25, -0.5))
    path = tmp_path / "market.json"
    save_market(model, str(path))
    return str(path)


@pytest.fixture()
def out(tmp_path):
    return str(tmp_path / "out")


def run_cli(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_price_command(tmp_path, capsys):
    model = binomial_market(4.0, 8.0, 2.0, lam=0.1)
    mpath = tmp_path / "m.json"
    save_market(model, str(mpath))
    ppath = tmp_path / "call.json"
    ppath.write_text(json.dumps({"up": 3.0, "down": 0.0}))
    code, out_text, err = run_cli(capsys, ["price", "--market", str(mpath),
                                           "--payoff", str(ppath)])
    assert code == 0
    assert err == ""
    payload = json.loads(out_text)
    assert payload["superreplication_price"] == pytest.approx(11.0 / 9.0, abs=1e-9)
    assert len(payload["model_hash"]) == 64


def test_primal_command(market_path, out, capsys):
    code, out_text, _ = run_cli(capsys, [
        "primal", "--market", market_path, "--utility", "log",
        "--x", "2.0", "--output", out])
    assert code == 0
    payload = json.loads(out_text)
    assert set(payload) == {"market", "utility", "x", "value",
                            "kkt_residual", "ghat"}
    assert set(payload["ghat"]) == {"up", "down"}
    with open(f"{out}/primal_leaves.csv") as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "leaf,prob,S_T,e_T,ghat,wealth"
    assert len(lines) == 3


def test_dual_command(market_path, out, capsys):
    code, out_text, _ = run_cli(capsys, [
        "dual", "--market", market_path, "--utility", "log",
        "--y", "1.0", "--output", out])
    assert code == 0
    payload = json.loads(out_text)
    assert payload["singular_mass"] == pytest.approx(0.0, abs=1e-9)
    d = payload["leaf_density"]
    assert 0.5 * d["up"] + 0.5 * d["down"] == pytest.approx(1.0, abs=1e-8)


def test_x0_command(market_path, out, capsys):
    code, out_text, _ = run_cli(capsys, ["x0", "--market", market_path,
                                         "--output", out])
    assert code == 0
    payload = json.loads(out_text)
    from tcdl.market import load_market
    from tcdl import dual as du
    assert payload["x0"] == pytest.approx(du.compute_x0(load_market(market_path)))


def test_report_command(tmp_path, out, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "seed": {"seed": 5, "depth": 2, "branching": 2, "lambda": 0.1, "rho": 0.2},
        "y_grid": {"min": 0.05, "max": 20.0, "n": 9},
        "check_marginals": False,
    }))
    code, out_text, _ = run_cli(capsys, ["report", "--config", str(cfg),
                                         "--output", out])
    assert code == 0
    payload = json.loads(out_text)
    assert payload["passed"] is True
    assert payload["failed"] == []
    assert payload["n_checks"] > 0


def test_report_market_flag_conflicts_with_seed(tmp_path, out, market_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": {"seed": 1}}))
    code, _, err = run_cli(capsys, ["report", "--config", str(cfg),
                                    "--market", market_path, "--output", out])
    assert code == 2
    assert "error:" in err


def test_selftest_command(out, capsys):
    code, out_text, _ = run_cli(capsys, ["selftest", "--seeds", "1,2",
                                         "--jobs", "1", "--output", out])
    assert code == 0
    payload = json.loads(out_text)
    assert payload == {"passed": True, "results": {"1": True, "2": True}}


def test_invalid_market_exits_2(tmp_path, out, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({
        "nodes": [{"id": "root", "parent": None, "time": 0},
                  {"id": "up", "parent": "root", "time": 1},
                  {"id": "down", "parent": "root", "time": 1}],
        "probabilities": {"up": 0.5, "down": 0.5},
        "prices": {"root": 4.0, "up": -8.0, "down": 2.0},
        "lambda": 0.1,
        "endowment": {},
    }))
    code, _, err = run_cli(capsys, ["x0", "--market", str(bad), "--output", out])
    assert code == 2
    assert "error:" in err
    with open(f"{out}/checks.csv") as fh:
        assert "input-error" in fh.read()


def test_missing_file_exits_2(out, capsys):
    code, _, err = run_cli(capsys, ["x0", "--market", "/no/such/file.json",
                                    "--output", out])
    assert code == 2


def test_bad_utility_exits_2(market_path, out, capsys):
    code, _, _ = run_cli(capsys, ["primal", "--market", market_path,
                                  "--utility", "exp", "--x", "1.0",
                                  "--output", out])
    assert code == 2


def test_below_x0_exits_1(market_path, out, capsys):
    code, _, err = run_cli(capsys, ["primal", "--market", market_path,
                                    "--utility", "log", "--x", "-5.0",
                                    "--output", out])
    assert code == 1
    with open(f"{out}/checks.csv") as fh:
        assert "below-x0" in fh.read()


def test_arbitrage_market_exits_3(tmp_path, out, capsys):
    model = binomial_market(4.0, 8.0, 6.0, lam=0.0)
    mpath = tmp_path / "arb.json"
    save_market(model, str(mpath))
    code, _, err = run_cli(capsys, ["dual", "--market", str(mpath),
                                    "--utility", "log", "--y", "1.0",
                                    "--output", out])
    assert code == 3
    with open(f"{out}/checks.csv") as fh:
        assert "solver-indeterminate" in fh.read()


def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2
    capsys.readouterr()


def test_missing_required_arg_exits_2(capsys):
    assert main(["price", "--market", "m.json"]) == 2
    capsys.readouterr()


def test_output_dir_from_environment(market_path, tmp_path, capsys, monkeypatch):
    env_out = tmp_path / "env_out"
    monkeypatch.setenv("TCDL_OUTPUT_DIR", str(env_out))
    code, _, _ = run_cli(capsys, ["primal", "--market", market_path,
                                  "--utility", "log", "--x", "2.0"])
    assert code == 0
    assert (env_out / "primal_leaves.csv").exists()


def test_cli_stdout_deterministic(market_path, out, capsys):
    argv = ["dual", "--market", market_path, "--utility", "log", "--y", "0.5",
            "--output", out]
    _, first, _ = run_cli(capsys, argv)
    _, second, _ = run_cli(capsys, argv)
    assert first == second
