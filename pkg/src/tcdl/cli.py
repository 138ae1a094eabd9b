"""Command-line interface.

Subcommands: price, primal, dual, x0, report, selftest.  Exit codes:
0 success and all checks passed, 1 check failure, 2 input error,
3 solver numerically indeterminate.  The output directory comes from
--output, or the TCDL_OUTPUT_DIR environment variable, or ./tcdl_out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dual as du
from . import primal as pr
from . import utility as ut
from .errors import (
    BelowX0Error, ConfigError, DomainError, MarketError,
    NoConsistentPriceSystemError, SolverIndeterminateError, TcdlError,
)
from .harness import (
    _fmt, model_hash, run_experiment, selftest, write_report_files,
)
from .market import load_market

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_INDETERMINATE = 3


def _output_dir(args) -> str:
    if getattr(args, "output", None):
        return args.output
    return os.environ.get("TCDL_OUTPUT_DIR", "tcdl_out")


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _parse_seed_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcdl",
                                description="Utility-maximization duality under "
                                            "proportional transaction costs on finite trees")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", help="output directory (default $TCDL_OUTPUT_DIR or ./tcdl_out)")

    sp = sub.add_parser("price", parents=[common], help="superreplication price of a payoff")
    sp.add_argument("--market", required=True)
    sp.add_argument("--payoff", required=True, help="JSON file: leaf id -> value")

    sp = sub.add_parser("primal", parents=[common], help="maximize expected utility from x")
    sp.add_argument("--market", required=True)
    sp.add_argument("--utility", required=True, help="log or power:<alpha>")
    sp.add_argument("--x", required=True, type=float)
    sp.add_argument("--tie-break", action="store_true",
                    help="minimal-turnover strategy among optimal payoffs")

    sp = sub.add_parser("dual", parents=[common], help="solve the dual problem at y")
    sp.add_argument("--market", required=True)
    sp.add_argument("--utility", required=True)
    sp.add_argument("--y", required=True, type=float)

    sp = sub.add_parser("x0", parents=[common], help="infeasibility threshold x0")
    sp.add_argument("--market", required=True)

    sp = sub.add_parser("report", parents=[common], help="full duality report from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--market", help="market file (conflicts with a seed in the config)")

    sp = sub.add_parser("selftest", parents=[common], help="seeded end-to-end self test")
    sp.add_argument("--seeds", required=True, help="range a..b or comma list")
    sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    return p


def _write_failure_record(out_dir: str, name: str, detail: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "checks.csv")
    new = not os.path.exists(path)
    with open(path, "a") as fh:
        if new:
            fh.write("name,location,value,tolerance,passed\n")
        detail = detail.replace(",", ";").replace("\n", " ")
        fh.write(f"{name},{detail},nan,0.0,False\n")


def _cmd_price(args) -> int:
    model = load_market(args.market)
    with open(args.payoff) as fh:
        payoff = pr.PayoffVector.from_leaf_dict(model, json.load(fh))
    price = du.superreplication_price(model, payoff.vector())
    _emit({"market": args.market, "model_hash": model_hash(model),
           "superreplication_price": price})
    return EXIT_OK


def _cmd_primal(args) -> int:
    model = load_market(args.market)
    spec = ut.parse_utility(args.utility)
    sol = pr.solve_primal(model, spec, args.x, tie_break=args.tie_break)
    tree = model.tree
    _emit({
        "market": args.market, "utility": spec.label(), "x": args.x,
        "value": sol.value, "kkt_residual": sol.kkt_residual,
        "ghat": {tree.node_ids[leaf]: float(sol.ghat[i])
                 for i, leaf in enumerate(tree.leaves)},
    })
    out = _output_dir(args)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "primal_leaves.csv")
    with open(path, "w") as fh:
        fh.write("leaf,prob,S_T,e_T,ghat,wealth\n")
        for i, leaf in enumerate(tree.leaves):
            row = [tree.node_ids[leaf], tree.prob[i], model.ask_price[leaf],
                   model.endowment[i], float(sol.ghat[i]), float(sol.wealth[i])]
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return EXIT_OK


def _cmd_dual(args) -> int:
    model = load_market(args.market)
    spec = ut.parse_utility(args.utility)
    sol = du.solve_dual(model, spec, args.y)
    tree = model.tree
    _emit({
        "market": args.market, "utility": spec.label(), "y": args.y,
        "value": sol.value, "v_prime": sol.derivative,
        "singular_mass": sol.singular_mass,
        "kkt_residual": sol.kkt_residual,
        "leaf_density": {tree.node_ids[leaf]: sol.optimizer.z0[leaf]
                         for leaf in tree.leaves},
    })
    return EXIT_OK


def _cmd_x0(args) -> int:
    model = load_market(args.market)
    _emit({"market": args.market, "x0": du.compute_x0(model)})
    return EXIT_OK


def _cmd_report(args) -> int:
    with open(args.config) as fh:
        config = json.load(fh)
    if args.market:
        if "seed" in config or "market" in config:
            raise ConfigError("--market conflicts with the market/seed named in the config")
        config["market"] = args.market
    out = _output_dir(args)
    report = run_experiment(config, output_dir=out)
    _emit({"passed": report.passed, "x0": report.x0,
           "n_checks": len(report.checks),
           "failed": [c for c in report.checks if not c["passed"]]})
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _cmd_selftest(args) -> int:
    out = _output_dir(args)
    seeds = _parse_seed_range(args.seeds)
    results = selftest(seeds, output_dir=out, jobs=args.jobs)
    _emit({"results": {str(k): v for k, v in results.items()},
           "passed": all(results.values())})
    return EXIT_OK if all(results.values()) else EXIT_CHECK_FAILED


_COMMANDS = {
    "price": _cmd_price,
    "primal": _cmd_primal,
    "dual": _cmd_dual,
    "x0": _cmd_x0,
    "report": _cmd_report,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT_ERROR if exc.code not in (0, None) else 0
    out_dir = _output_dir(args)
    try:
        return _COMMANDS[args.command](args)
    except (MarketError, DomainError, ConfigError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_failure_record(out_dir, "input-error", str(exc))
        return EXIT_INPUT_ERROR
    except (SolverIndeterminateError, NoConsistentPriceSystemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_failure_record(out_dir, "solver-indeterminate", str(exc))
        return EXIT_INDETERMINATE
    except BelowX0Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_failure_record(out_dir, "below-x0", str(exc))
        return EXIT_CHECK_FAILED
    except TcdlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_failure_record(out_dir, "check-failure", str(exc))
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
