"""Trading strategies, attainable payoffs, and the primal utility problem.

A strategy trades once per node at that node's ask/bid.  The decision
variables are the nonnegative per-node buy/sell amounts; bond holdings
follow from the self-financing ledger and the stock position must be flat
at every leaf.  Attainability of a payoff is a pure LP feasibility question
(free disposal turns domination into membership); the utility maximization
itself is a smooth concave program handled by the interior-point solver,
with the wealth-positivity constraint enforced implicitly by the utility
domain.

Admissibility is automatic on a finite tree (finitely many nodes, finite
liquidation values), so the optimization never imposes the surrogate bound
M = x + rho + 1; the bound is only checked when validating a given strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import utility as ut
from .errors import BelowX0Error, DomainError, MarketError
from .market import MarketModel
from .solver import (
    OPTIMAL, UNBOUNDED,
    ConvexProgram, ConvexResult, LinearProgram,
    require_optimal, solve_convex, solve_lp,
)

SF_TOL = 1e-10


@dataclass(frozen=True)
class TradingStrategy:
    """Post-trade holdings and the buy/sell split, per node."""

    x: float                     # initial capital (pre-trade holdings (x, 0))
    phi0: tuple[float, ...]
    phi1: tuple[float, ...]
    buy: tuple[float, ...]
    sell: tuple[float, ...]


@dataclass(frozen=True)
class PayoffVector:
    """Terminal payoff per leaf, aligned with tree.leaves."""

    values: tuple[float, ...]

    @property
    def lower_bound(self) -> float:
        return float(min(self.values))

    def vector(self) -> np.ndarray:
        return np.array(self.values)

    @staticmethod
    def from_leaf_dict(model: MarketModel, mapping) -> "PayoffVector":
        tree = model.tree
        vals = {str(k): float(v) for k, v in mapping.items()}
        missing = [tree.node_ids[leaf] for leaf in tree.leaves if tree.node_ids[leaf] not in vals]
        if missing:
            raise MarketError(f"payoff file missing leaves {missing}")
        return PayoffVector(tuple(vals[tree.node_ids[leaf]] for leaf in tree.leaves))


@dataclass
class PrimalSolution:
    x: float
    strategy: TradingStrategy
    ghat: np.ndarray             # terminal phi0 minus x, per leaf
    wealth: np.ndarray           # x + ghat + e_T per leaf
    value: float
    kkt_residual: float
    marginal: float | None = None


def _trade_matrices(model: MarketModel):
    """Cash map C and position map D from (buy, sell) stacked as [b; s].

    Leaf wealth is x + e + C u; the flat-at-leaf constraint reads D u = 0.
    """
    tree = model.tree
    n = tree.n_nodes
    s = model.ask()
    L = len(tree.leaves)
    C = np.zeros((L, 2 * n))
    D = np.zeros((L, 2 * n))
    for i, leaf in enumerate(tree.leaves):
        for m in tree.path(leaf):
            C[i, m] = -s[m]
            C[i, m + n] = (1.0 - model.lam) * s[m]
            D[i, m] = 1.0
            D[i, m + n] = -1.0
    return C, D


def strategy_from_trades(model: MarketModel, x: float,
                         buy: np.ndarray, sell: np.ndarray) -> TradingStrategy:
    """Assemble holdings from per-node trades using the binding self-financing ledger."""
    tree = model.tree
    n = tree.n_nodes
    s = model.ask()
    phi0 = np.zeros(n)
    phi1 = np.zeros(n)
    for k in range(n):
        par = tree.parent[k]
        base0 = x if par < 0 else phi0[par]
        base1 = 0.0 if par < 0 else phi1[par]
        phi1[k] = base1 + buy[k] - sell[k]
        phi0[k] = base0 - s[k] * buy[k] + (1.0 - model.lam) * s[k] * sell[k]
    return TradingStrategy(
        x=float(x),
        phi0=tuple(float(v) for v in phi0),
        phi1=tuple(float(v) for v in phi1),
        buy=tuple(float(v) for v in buy),
        sell=tuple(float(v) for v in sell),
    )


def liquidation_value(model: MarketModel, strategy: TradingStrategy, node: int) -> float:
    """phi0 + (phi1)^+ at the bid - (phi1)^- at the ask."""
    if not 0 <= node < model.tree.n_nodes:
        raise MarketError(f"unknown node index {node}")
    s = model.ask_price[node]
    p1 = strategy.phi1[node]
    return strategy.phi0[node] + max(p1, 0.0) * (1.0 - model.lam) * s - max(-p1, 0.0) * s


def check_self_financing(model: MarketModel, strategy: TradingStrategy) -> list[str]:
    """Violations of the per-node trading constraints, all within SF_TOL.

    Covers the buy/sell split, the position recursion, the self-financing
    inequality, leaf liquidation, and the surrogate admissibility bound
    M = x + rho + 1.
    """
    tree = model.tree
    s = model.ask()
    out: list[str] = []
    M = strategy.x + model.rho + 1.0
    for k in range(tree.n_nodes):
        nid = tree.node_ids[k]
        b, sl = strategy.buy[k], strategy.sell[k]
        if b < -SF_TOL or sl < -SF_TOL:
            out.append(f"negative buy/sell at node {nid!r}")
        par = tree.parent[k]
        base0 = strategy.x if par < 0 else strategy.phi0[par]
        base1 = 0.0 if par < 0 else strategy.phi1[par]
        if abs(strategy.phi1[k] - base1 - (b - sl)) > SF_TOL:
            out.append(f"position change != buy - sell at node {nid!r}")
        cash = -s[k] * b + (1.0 - model.lam) * s[k] * sl
        if strategy.phi0[k] - base0 > cash + SF_TOL:
            out.append(f"self-financing violated at node {nid!r}")
        if liquidation_value(model, strategy, k) < -M - SF_TOL:
            out.append(f"admissibility bound -{M} violated at node {nid!r}")
        if tree.is_leaf(k) and abs(strategy.phi1[k]) > SF_TOL:
            out.append(f"stock not liquidated at leaf {nid!r}")
    return out


def is_attainable(model: MarketModel, g, x: float, tol: float = 1e-8) -> bool:
    """Whether g is dominated by the terminal cash of some strategy from x.

    Decided through the quantitative margin max_u min_leaf (x + C u - g),
    which by LP duality equals x minus the superreplication price of g; the
    sign test with a small boundary tolerance is then numerically stable even
    when g sits exactly on the attainability boundary.
    """
    margin = attainability_margin(model, g, x)
    return margin >= -tol


def attainability_margin(model: MarketModel, g, x: float) -> float:
    """max over strategies from x of min_leaf (terminal cash - g); >= 0 iff attainable."""
    g = np.asarray(g, dtype=float)
    C, D = _trade_matrices(model)
    nu = C.shape[1]
    A_ub = np.hstack([-C, np.ones((C.shape[0], 1))])
    A_eq = np.hstack([D, np.zeros((D.shape[0], 1))])
    lb = np.zeros(nu + 1)
    lb[-1] = -np.inf
    res = solve_lp(LinearProgram(
        c=np.concatenate([np.zeros(nu), [1.0]]),
        A_ub=A_ub, b_ub=x - g, A_eq=A_eq, b_eq=np.zeros(D.shape[0]),
        lb=lb, sense="max",
    ))
    if res.status == UNBOUNDED:
        raise MarketError("attainability LP unbounded: the market admits arbitrage")
    require_optimal(res, "attainability LP")
    return float(res.value)


def max_min_wealth(model: MarketModel, x: float) -> tuple[float, np.ndarray]:
    """LP value sup over attainable g of min_leaf (x + g + e), and an argmax.

    Positive iff x is strictly above x0; doubles as the phase-1 problem for
    the utility maximization and as the below-x0 infeasibility certificate.
    """
    tree = model.tree
    e = model.endowment_vector()
    C, D = _trade_matrices(model)
    nu = C.shape[1]
    # Variables [u; t]: maximize t subject to t - (C u)_l <= x + e_l.
    A_ub = np.hstack([-C, np.ones((C.shape[0], 1))])
    b_ub = x + e
    A_eq = np.hstack([D, np.zeros((D.shape[0], 1))])
    lb = np.zeros(nu + 1)
    lb[-1] = -np.inf
    res = solve_lp(LinearProgram(
        c=np.concatenate([np.zeros(nu), [1.0]]),
        A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.zeros(D.shape[0]),
        lb=lb, sense="max",
    ))
    if res.status == UNBOUNDED:
        raise MarketError("max-min wealth LP unbounded: the market admits arbitrage")
    require_optimal(res, "max-min wealth LP")
    return float(res.value), res.z[:nu].copy()


def solve_primal(model: MarketModel, spec: ut.UtilitySpec, x: float,
                 tie_break: bool = False, tol: float = 1e-9) -> PrimalSolution:
    """Maximize expected utility of terminal liquidation wealth from capital x."""
    tree = model.tree
    n = tree.n_nodes
    p = tree.leaf_prob()
    e = model.endowment_vector()
    C, D = _trade_matrices(model)
    nu = 2 * n

    t_star, u_feas = max_min_wealth(model, x)
    if t_star <= 1e-12:
        raise BelowX0Error(
            f"infeasible-below-x0: no strategy keeps terminal wealth positive from x={x}"
            f" (max-min wealth {t_star:.3e})")

    def wealth(u: np.ndarray) -> np.ndarray:
        return x + e + C @ u

    def objective(u: np.ndarray) -> float:
        w = wealth(u)
        if w.min() <= 0:
            return np.inf
        return -float(p @ ut.u_eval(spec, w))

    def gradient(u: np.ndarray) -> np.ndarray:
        w = wealth(u)
        return -C.T @ (p * ut.u_prime(spec, w))

    def hessian(u: np.ndarray) -> np.ndarray:
        w = wealth(u)
        d = -p * ut.u_double_prime(spec, w)
        return C.T @ (d[:, None] * C)

    # Shift the phase-1 vertex into the strict interior of u >= 0; equal
    # buy/sell increments keep D u = 0 and cost only the spread.
    s = model.ask()
    max_path_cost = max(
        model.lam * sum(s[m] for m in tree.path(leaf)) for leaf in tree.leaves
    )
    delta = min(1e-3, t_star / (2.0 * (max_path_cost + 1.0)))
    start = u_feas + delta

    # Near-degenerate instances (offsetting trades blowing up while a leaf
    # wealth approaches zero) can stall the iteration; restarting from the
    # stalled iterate re-centers the barrier duals and resumes progress.
    z_start = start
    res = None
    for _ in range(8):
        cp = ConvexProgram(objective, gradient, hessian, n=nu,
                           G=-np.eye(nu), h=np.zeros(nu),
                           A=D, b=np.zeros(D.shape[0]), start=z_start)
        cur = solve_convex(cp, tol=tol)
        if res is None or cur.status == OPTIMAL or (
                res.status != OPTIMAL
                and cur.kkt_residual is not None
                and res.kkt_residual is not None
                and cur.kkt_residual < res.kkt_residual):
            res = cur
        if res.status == OPTIMAL or (
                res.kkt_residual is not None
                and res.kkt_residual <= 1e-6 * (1.0 + abs(res.value))):
            break
        z_start = (1.0 - 1e-3) * cur.z + 1e-3 * start
    # Accept a stalled iterate when the certified suboptimality is still far
    # inside the tolerances anything downstream relies on.
    if (res.status != OPTIMAL and res.kkt_residual is not None
            and res.kkt_residual <= 1e-6 * (1.0 + abs(res.value))):
        res = ConvexResult(status=OPTIMAL, z=res.z, value=res.value,
                           kkt_residual=res.kkt_residual,
                           ineq_duals=res.ineq_duals, eq_duals=res.eq_duals,
                           iterations=res.iterations)
    require_optimal(res, f"primal solve at x={x}")
    u_opt = res.z
    kkt = float(res.kkt_residual)

    if tie_break:
        # Minimal turnover among strategies dominating the optimal payoff.
        ghat = C @ u_opt
        lp = solve_lp(LinearProgram(
            c=np.ones(nu),
            A_ub=-C, b_ub=-ghat + 1e-10,
            A_eq=D, b_eq=np.zeros(D.shape[0]),
            lb=0.0,
        ))
        if lp.status == OPTIMAL:
            u_opt = lp.z

    ghat = C @ u_opt
    w = wealth(u_opt)
    strategy = strategy_from_trades(model, x, u_opt[:n], u_opt[n:])
    return PrimalSolution(
        x=float(x),
        strategy=strategy,
        ghat=ghat,
        wealth=w,
        value=float(p @ ut.u_eval(spec, w)),
        kkt_residual=kkt,
    )


def primal_marginal(model: MarketModel, spec: ut.UtilitySpec, x: float,
                    h: float | None = None) -> float:
    """Central finite difference of the primal value function at x."""
    if h is None:
        h = 1e-4 * max(1.0, abs(x))
    if h <= 0:
        raise DomainError("primal_marginal requires h > 0")
    hi = solve_primal(model, spec, x + h)
    lo = solve_primal(model, spec, x - h)
    return (hi.value - lo.value) / (2.0 * h)
