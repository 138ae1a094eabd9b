"""End-to-end duality harness.

Couples the primal and dual sides: locates yhat with v'(yhat) + x = 0,
recovers the primal optimizer from the dual density, checks complementary
slackness, and assembles a full report (value grids, gaps, residuals) for a
market instance.  Also provides the seeded random-instance generator and the
selftest driver used by the CLI.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import dual as du
from . import primal as pr
from . import utility as ut
from .errors import BelowX0Error, MarketError, SolverIndeterminateError
from .market import MarketModel, build_market, market_to_dict

DEFAULT_X_OFFSETS = (0.5, 1.0, 2.0)
# Margin above x0 for automatic x grids; keeps yhat away from the blow-up.
X0_MARGIN_COEFF = 0.05

DEFAULT_TOLERANCES = {
    "strong_duality": 1e-5,
    "weak_duality": 1e-6,
    "recovery": 1e-6,
    "slackness": 1e-6,
    "marginal": 1e-3,
    "convexity": 1e-7,
    "x0_slope": 1e-2,
    "yhat_root": 1e-7,
}


def model_hash(model: MarketModel) -> str:
    blob = json.dumps(market_to_dict(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def find_yhat(model: MarketModel, spec: ut.UtilitySpec, x: float,
              polytope: du.CpsPolytope | None = None,
              x0: float | None = None) -> float:
    """Root of v'(y) + x = 0 by bracketed root search on the increasing v'."""
    yhat, _ = _find_yhat_solution(model, spec, x, polytope=polytope, x0=x0)
    return yhat


def _find_yhat_solution(model: MarketModel, spec: ut.UtilitySpec, x: float,
                        polytope: du.CpsPolytope | None = None,
                        x0: float | None = None) -> tuple[float, du.DualSolution]:
    poly = polytope or du.cps_polytope(model)
    if x0 is None:
        x0 = du.compute_x0(model, poly)
    if x <= x0:
        raise BelowX0Error(f"below-x0: x={x} <= x0={x0}, the infimum of v(y)+xy is -infinity")

    cache: dict[float, du.DualSolution] = {}

    def g(y: float) -> float:
        sol = cache.get(y)
        if sol is None:
            sol = du.solve_dual(model, spec, y, polytope=poly)
            cache[y] = sol
        return sol.derivative + x

    lo, hi = 1e-2, 1e2
    while g(lo) >= 0.0:
        lo /= 10.0
        if lo < 1e-8:
            raise SolverIndeterminateError("yhat bracket not found below 1e-8")
    while g(hi) <= 0.0:
        hi *= 10.0
        if hi > 1e8:
            raise SolverIndeterminateError("yhat bracket not found above 1e8")
    yhat = float(brentq(g, lo, hi, xtol=1e-14, rtol=1e-12))
    resid = g(yhat)
    if abs(resid) > DEFAULT_TOLERANCES["yhat_root"] * (1.0 + abs(x)):
        raise SolverIndeterminateError(f"yhat root residual {resid:.3e} too large")

    # Refine the dual solve at the root.  Near-degenerate polytopes leave flat
    # directions in the dual objective; the default solver tolerance pins the
    # leaf densities only loosely along them.
    coarse = cache[yhat]
    warm = (np.asarray(coarse.optimizer.z0) if poly.reduced
            else np.concatenate([coarse.optimizer.z0, coarse.optimizer.z1]))
    for tol in (1e-12, 3e-12, 1e-11, 1e-10):
        try:
            refined = du.solve_dual(model, spec, yhat, polytope=poly,
                                    start=0.9 * warm + 0.1 * poly.interior, tol=tol)
            return yhat, refined
        except SolverIndeterminateError:
            continue
    return yhat, coarse


@dataclass
class RecoveryResult:
    yhat: float
    dual: du.DualSolution
    primal: pr.PrimalSolution
    attainable: bool
    attainability_slack: float   # max_Q E[z0 ghat] over the polytope (should be <= 0 up to tol)


def recover_primal_from_dual(model: MarketModel, spec: ut.UtilitySpec, x: float,
                             polytope: du.CpsPolytope | None = None,
                             x0: float | None = None) -> RecoveryResult:
    """Reconstruct the primal optimizer ghat = I(yhat z0_T) - x - e_T from the dual."""
    poly = polytope or du.cps_polytope(model)
    yhat, dsol = _find_yhat_solution(model, spec, x, polytope=poly, x0=x0)
    tree = model.tree
    e = model.endowment_vector()
    p = tree.leaf_prob()
    z0_T = np.array(dsol.optimizer.z0)[list(tree.leaves)]
    # Correct yhat holding the leaf densities fixed: solve the scalar equation
    # E[z0 I(y z0)] = x + E[z0 e] exactly, so the recovered payoff satisfies
    # E[z0 ghat] = 0 by construction.  The dual derivative carries a small
    # flat-direction bias that would otherwise leak into the payoff.
    mask = z0_T > du.DENSITY_FLOOR
    target = x + float((p * z0_T) @ e)

    def resid(y: float) -> float:
        return float((p[mask] * z0_T[mask]) @ ut.i_eval(spec, y * z0_T[mask])) - target

    if resid(yhat) != 0.0:
        lo, hi = yhat, yhat
        while resid(lo) < 0.0:
            lo /= 2.0
            if lo < yhat * 2.0 ** -30:
                break
        while resid(hi) > 0.0:
            hi *= 2.0
            if hi > yhat * 2.0 ** 30:
                break
        if lo < hi and resid(lo) > 0.0 > resid(hi):
            yhat = float(brentq(resid, lo, hi, xtol=1e-15, rtol=1e-14))
    ghat = ut.i_eval(spec, yhat * z0_T) - x - e
    # The certificate tolerance matches the yhat root residual budget; the
    # recovered payoff sits exactly on the attainability boundary and lands
    # within root-finding error of it.
    attainable = pr.is_attainable(model, ghat, 0.0, tol=1e-6)
    price = du.superreplication_price(model, ghat, poly)
    # Materialize a generating strategy (minimal turnover dominating ghat).
    C, D = pr._trade_matrices(model)
    nv = C.shape[1]
    from .solver import LinearProgram, OPTIMAL, solve_lp
    lp = solve_lp(LinearProgram(
        c=np.ones(nv), A_ub=-C, b_ub=-ghat + 1e-9,
        A_eq=D, b_eq=np.zeros(D.shape[0]), lb=0.0,
    ))
    if lp.status == OPTIMAL:
        n = tree.n_nodes
        strategy = pr.strategy_from_trades(model, x, lp.z[:n], lp.z[n:])
    else:
        strategy = pr.strategy_from_trades(model, x, np.zeros(tree.n_nodes), np.zeros(tree.n_nodes))
    wealth = x + ghat + e
    psol = pr.PrimalSolution(
        x=float(x), strategy=strategy, ghat=ghat, wealth=wealth,
        value=float(p @ ut.u_eval(spec, wealth)), kkt_residual=float("nan"),
        marginal=yhat,
    )
    return RecoveryResult(yhat=yhat, dual=dsol, primal=psol,
                          attainable=attainable, attainability_slack=price)


@dataclass
class SlacknessResiduals:
    r1: float   # |E[z0_T ghat]|
    r2: float   # |E[z0_T (x + ghat)] - x|
    r3: float   # singular terms; identically zero on finite trees
    passed: bool


def slackness_check(model: MarketModel, primal_sol: pr.PrimalSolution,
                    dual_sol: du.DualSolution) -> SlacknessResiduals:
    tree = model.tree
    p = tree.leaf_prob()
    z0_T = np.array(dual_sol.optimizer.z0)[list(tree.leaves)]
    x = primal_sol.x
    r1 = abs(float((p * z0_T) @ primal_sol.ghat))
    r2 = abs(float((p * z0_T) @ (x + primal_sol.ghat)) - x)
    r3 = abs(dual_sol.singular_mass) * (1.0 + abs(x))
    tol = DEFAULT_TOLERANCES["slackness"]
    return SlacknessResiduals(r1=r1, r2=r2, r3=r3, passed=bool(r1 <= tol and r2 <= tol))


@dataclass
class DualityReport:
    metadata: dict
    x0: float
    x_records: list = field(default_factory=list)
    y_records: list = field(default_factory=list)
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "x0": self.x0,
            "x_records": self.x_records,
            "y_records": self.y_records,
            "checks": self.checks,
            "passed": self.passed,
        }

    def add_check(self, name: str, passed: bool, value: float, tolerance: float,
                  location: str = "") -> None:
        self.checks.append({
            "name": name, "passed": bool(passed), "value": float(value),
            "tolerance": float(tolerance), "location": location,
        })


def conjugacy_check(model: MarketModel, spec: ut.UtilitySpec,
                    x_grid, y_grid,
                    check_marginals: bool = True,
                    metadata: dict | None = None) -> DualityReport:
    """Run the full Main Theorem certification on the given grids."""
    tol = DEFAULT_TOLERANCES
    poly = du.cps_polytope(model)
    x0 = du.compute_x0(model, poly)
    report = DualityReport(metadata=dict(metadata or {}), x0=x0)
    report.metadata.setdefault("model_hash", model_hash(model))
    report.metadata.setdefault("utility", spec.label())
    report.metadata["lambda"] = model.lam
    report.metadata["rho"] = model.rho

    y_solutions = du.dual_grid(model, spec, y_grid, polytope=poly)
    for sol in y_solutions:
        report.y_records.append({
            "y": sol.y, "v": sol.value, "v_prime": sol.derivative,
            "singular_mass": sol.singular_mass, "kkt_residual": sol.kkt_residual,
        })

    # Convexity of v along the grid (midpoint test) and monotone v'.
    ys = np.array([s.y for s in y_solutions])
    vs = np.array([s.value for s in y_solutions])
    vps = np.array([s.derivative for s in y_solutions])
    worst = 0.0
    for i in range(len(ys) - 2):
        lamb = (ys[i + 1] - ys[i]) / (ys[i + 2] - ys[i])
        chord = (1 - lamb) * vs[i] + lamb * vs[i + 2]
        worst = max(worst, vs[i + 1] - chord)
    report.add_check("v_convex_midpoint", worst <= tol["convexity"], worst, tol["convexity"])
    mono = float(np.min(np.diff(vps))) if len(vps) > 1 else 0.0
    report.add_check("v_prime_increasing", mono >= -tol["convexity"], mono, tol["convexity"])
    if ys[-1] >= 1e3 - 1e-9:
        slope = (vs[-1] - vs[-2]) / (ys[-1] - ys[-2])
        err = abs(-slope - x0)
        report.add_check("x0_matches_large_y_slope", err <= tol["x0_slope"], err,
                         tol["x0_slope"], location=f"y={ys[-1]:g}")

    for x in x_grid:
        x = float(x)
        if x <= x0 + 1e-12:
            report.x_records.append({"x": x, "status": "below-x0", "u": "-inf"})
            continue
        try:
            psol = pr.solve_primal(model, spec, x)
            rec = recover_primal_from_dual(model, spec, x, polytope=poly, x0=x0)
        except (BelowX0Error, SolverIndeterminateError) as exc:
            report.add_check("pipeline", False, float("nan"), 0.0,
                             location=f"x={x:g}: {exc}")
            report.x_records.append({"x": x, "status": "failed", "error": str(exc)})
            continue
        yhat, dsol = rec.yhat, rec.dual
        u_val = psol.value
        gap = u_val - (dsol.value + x * yhat)
        rel_gap = abs(gap) / (1.0 + abs(u_val))
        slack = slackness_check(model, rec.primal, dsol)

        record = {
            "x": x, "status": "ok", "u": u_val, "yhat": yhat,
            "v_at_yhat": dsol.value, "gap": gap, "rel_gap": rel_gap,
            "recovery_value": rec.primal.value,
            "recovery_attainable": rec.attainable,
            "slackness": {"r1": slack.r1, "r2": slack.r2, "r3": slack.r3},
        }
        report.add_check("strong_duality", rel_gap <= tol["strong_duality"],
                         rel_gap, tol["strong_duality"], location=f"x={x:g}")
        # Weak duality against every grid y.
        min_env = float(np.min(vs + x * ys))
        report.add_check("weak_duality_u_le_env",
                         u_val <= min_env + tol["weak_duality"],
                         u_val - min_env, tol["weak_duality"], location=f"x={x:g}")
        report.add_check("recovery_attainable", rec.attainable,
                         rec.attainability_slack, 1e-8, location=f"x={x:g}")
        report.add_check("recovery_optimal",
                         rec.primal.value >= u_val - tol["recovery"],
                         rec.primal.value - u_val, tol["recovery"], location=f"x={x:g}")
        report.add_check("slackness_r1", slack.r1 <= tol["slackness"], slack.r1,
                         tol["slackness"], location=f"x={x:g}")
        report.add_check("slackness_r2", slack.r2 <= tol["slackness"], slack.r2,
                         tol["slackness"], location=f"x={x:g}")
        if check_marginals:
            marg = pr.primal_marginal(model, spec, x)
            record["marginal"] = marg
            report.add_check("marginal_equals_yhat",
                             abs(marg - yhat) <= tol["marginal"] * (1.0 + yhat),
                             abs(marg - yhat), tol["marginal"] * (1.0 + yhat),
                             location=f"x={x:g}")
        report.x_records.append(record)

    # v(y) >= sup_x {u(x) - x y} - tol on the computed grid.
    solved = [(r["x"], r["u"]) for r in report.x_records if r.get("status") == "ok"]
    if solved:
        for yrec in report.y_records:
            y = yrec["y"]
            env = max(u - x * y for x, u in solved)
            report.add_check("weak_duality_v_ge_env",
                             yrec["v"] >= env - tol["strong_duality"],
                             env - yrec["v"], tol["strong_duality"],
                             location=f"y={y:g}")
    return report


def random_instance(seed: int, depth: int, branching: int, lam: float,
                    rho: float, max_attempts: int = 100,
                    return_attempts: bool = False):
    """Seeded random market on a full (branching)^depth tree.

    Prices start at 1 and move by uniform multiplicative shocks in [0.5, 2];
    conditional probabilities are uniform-normalized with a 0.05 floor; the
    endowment is uniform in [-rho, rho].  Regenerates until the CPS polytope
    has a strictly interior point.
    """
    if depth > 5 or branching > 3:
        raise MarketError("random_instance is desk scale: depth <= 5, branching <= 3")
    rng = np.random.default_rng(seed)
    for attempt in range(1, max_attempts + 1):
        nodes = [{"id": "r", "parent": None, "time": 0}]
        prices = {"r": 1.0}
        cond: dict[str, dict[str, float]] = {}
        frontier = ["r"]
        for t in range(1, depth + 1):
            nxt = []
            for nid in frontier:
                w = rng.uniform(size=branching)
                ps = 0.05 + (1.0 - 0.05 * branching) * w / w.sum()
                row = {}
                for j in range(branching):
                    cid = f"{nid}{j}"
                    nodes.append({"id": cid, "parent": nid, "time": t})
                    prices[cid] = prices[nid] * rng.uniform(0.5, 2.0)
                    row[cid] = float(ps[j])
                    nxt.append(cid)
                cond[nid] = row
            frontier = nxt
        endow = {nid: float(rng.uniform(-rho, rho)) if rho > 0 else 0.0 for nid in frontier}
        model = build_market({
            "nodes": nodes, "cond_prob": cond, "prices": prices,
            "lambda": lam, "endowment": endow,
        })
        poly = du.cps_polytope(model)
        if poly.nonempty and poly.interior is not None:
            return (model, attempt) if return_attempts else model
    raise MarketError(f"no CPS-feasible instance after {max_attempts} attempts (seed {seed})")


# ---------------------------------------------------------------------------
# Experiment driver and report files


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_report_files(report: DualityReport, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "report": os.path.join(out_dir, "report.json"),
        "u_curve": os.path.join(out_dir, "u_curve.csv"),
        "v_curve": os.path.join(out_dir, "v_curve.csv"),
        "checks": os.path.join(out_dir, "checks.csv"),
    }
    with open(paths["report"], "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(paths["u_curve"],
               ["x", "status", "u", "yhat", "gap", "marginal"],
               [[r["x"], r.get("status", ""), r.get("u", ""),
                 r.get("yhat", ""), r.get("gap", ""), r.get("marginal", "")]
                for r in report.x_records])
    _write_csv(paths["v_curve"],
               ["y", "v", "v_prime", "singular_mass"],
               [[r["y"], r["v"], r["v_prime"], r["singular_mass"]]
                for r in report.y_records])
    _write_csv(paths["checks"],
               ["name", "location", "value", "tolerance", "passed"],
               [[c["name"], c["location"], c["value"], c["tolerance"], c["passed"]]
                for c in report.checks])
    return paths


def run_experiment(config: dict, output_dir: str | None = None) -> DualityReport:
    """Full pipeline on a configured instance; writes report files.

    The config supplies either ``market`` (path to a market JSON file) or
    ``seed`` ({seed, depth, branching, lambda, rho}), plus optional
    ``utility`` (default log), ``x_grid`` or ``x_offsets``, ``y_grid``
    ({min, max, n} or a list), and ``check_marginals``.
    """
    from .errors import ConfigError

    has_market = "market" in config
    has_seed = "seed" in config
    if has_market == has_seed:
        raise ConfigError("config must name exactly one of 'market' or 'seed'")

    meta: dict = {}
    if has_market:
        with open(config["market"]) as fh:
            model = build_market(json.load(fh))
        meta["source"] = {"market": config["market"]}
    else:
        sd = dict(config["seed"])
        model, attempts = random_instance(
            seed=int(sd["seed"]), depth=int(sd.get("depth", 3)),
            branching=int(sd.get("branching", 2)),
            lam=float(sd.get("lambda", 0.1)), rho=float(sd.get("rho", 0.2)),
            return_attempts=True,
        )
        meta["source"] = {"seed": sd, "attempts": attempts}

    spec = ut.parse_utility(config.get("utility", "log"))

    yg = config.get("y_grid")
    if yg is None:
        y_grid = du.default_y_grid()
    elif isinstance(yg, dict):
        y_grid = np.logspace(np.log10(float(yg["min"])), np.log10(float(yg["max"])),
                             int(yg["n"]))
    else:
        y_grid = np.array([float(y) for y in yg])

    if "x_grid" in config:
        x_grid = [float(x) for x in config["x_grid"]]
    else:
        poly = du.cps_polytope(model)
        x0 = du.compute_x0(model, poly)
        margin = X0_MARGIN_COEFF * (1.0 + abs(x0))
        offsets = config.get("x_offsets", DEFAULT_X_OFFSETS)
        x_grid = [x0 + margin + float(o) for o in offsets]

    report = conjugacy_check(model, spec, x_grid, y_grid,
                             check_marginals=bool(config.get("check_marginals", True)),
                             metadata=meta)
    if output_dir is not None:
        label = (f"seed{config['seed']['seed']}" if has_seed
                 else os.path.splitext(os.path.basename(config["market"]))[0])
        sub = os.path.join(output_dir, f"{report.metadata['model_hash'][:12]}-{label}")
        write_report_files(report, sub)
    return report


def _selftest_one(args) -> tuple[int, bool]:
    seed, output_dir, config = args
    cfg = dict(config)
    cfg["seed"] = dict(cfg.get("seed", {}), seed=seed)
    report = run_experiment(cfg, output_dir=output_dir)
    return seed, report.passed


def selftest(seeds, output_dir: str, jobs: int = 1,
             config: dict | None = None) -> dict:
    """Run the experiment pipeline over a seed range; returns per-seed pass flags."""
    base = config or {"seed": {"depth": 3, "branching": 2, "lambda": 0.3, "rho": 0.2},
                      "utility": "log"}
    tasks = [(int(s), output_dir, base) for s in seeds]
    results: list[tuple[int, bool]] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_selftest_one, tasks))
    else:
        results = [_selftest_one(t) for t in tasks]
    return {seed: ok for seed, ok in results}
