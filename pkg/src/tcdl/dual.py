"""Consistent price systems, superreplication pricing, and the dual problem.

On a finite tree the dual domain is the closed polytope of nonnegative
martingale pairs (Z0, Z1) with Z0 at the root normalized to one and the
ratio Z1/Z0 confined to the bid-ask spread (stated multiplicatively, so the
constraint is linear and valid at Z0 = 0).  Superreplication prices and the
infeasibility threshold x0 are linear programs over this polytope; the dual
value function v(y) is a smooth convex minimization over it.

On a finite probability space every finitely additive measure in the
abstract dual domain is countably additive, so the singular mass is a
reported diagnostic that always comes out zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import utility as ut
from .errors import DomainError, NoConsistentPriceSystemError, SolverIndeterminateError
from .market import MarketModel
from .solver import (
    INFEASIBLE, OPTIMAL,
    ConvexProgram, LinearProgram,
    require_optimal, solve_convex, solve_lp,
)

CPS_TOL = 1e-10
# Leaves with density below this are excluded from the v' formula; the
# excluded probability mass is reported alongside.
DENSITY_FLOOR = 1e-12


@dataclass(frozen=True)
class CpsElement:
    """Martingale pair (Z0, Z1) per node; a point of the dual polytope."""

    z0: tuple[float, ...]
    z1: tuple[float, ...]

    def shadow_price(self) -> np.ndarray:
        """Z1/Z0 where defined (nan at zero-density nodes)."""
        z0 = np.array(self.z0)
        z1 = np.array(self.z1)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(z0 > 0, z1 / np.where(z0 > 0, z0, 1.0), np.nan)


def cps_check(model: MarketModel, element: CpsElement, strict: bool = False) -> list[str]:
    """Violation list for martingale, spread, and normalization constraints."""
    tree = model.tree
    z0 = np.array(element.z0)
    z1 = np.array(element.z1)
    s = model.ask()
    out: list[str] = []
    if abs(z0[tree.root] - 1.0) > CPS_TOL:
        out.append(f"z0 at root is {z0[tree.root]}, not 1")
    if z0.min() < -CPS_TOL or z1.min() < -CPS_TOL:
        out.append("negative component in (z0, z1)")
    for k in range(tree.n_nodes):
        ch = tree.children[k]
        if ch:
            cp = np.array(tree.cond_prob[k])
            for name, z in (("z0", z0), ("z1", z1)):
                gap = z[k] - float(cp @ z[list(ch)])
                if abs(gap) > CPS_TOL * max(1.0, abs(z[k])):
                    out.append(f"martingale violation in {name} at node {tree.node_ids[k]!r} ({gap:.3e})")
        lo = (1.0 - model.lam) * s[k] * z0[k]
        hi = s[k] * z0[k]
        if z1[k] < lo - CPS_TOL * max(1.0, hi) or z1[k] > hi + CPS_TOL * max(1.0, hi):
            out.append(f"spread violation at node {tree.node_ids[k]!r}")
    if strict and z0.min() <= 0:
        out.append("not strictly positive (z0 hits 0)")
    return out


@dataclass(frozen=True)
class CpsPolytope:
    """Linear description of the closed dual polytope.

    For lam > 0 the variables are [z0 (n), z1 (n)]; for lam = 0 the spread
    pins z1 = S z0, so the description is reduced to z0 alone and z1 is
    reconstructed on demand.
    """

    model: MarketModel
    n_vars: int
    reduced: bool                 # True when lam = 0 (z1 eliminated)
    G: np.ndarray
    h: np.ndarray
    A: np.ndarray
    b: np.ndarray
    nonempty: bool
    interior: np.ndarray | None   # strictly feasible point, None if the
                                  # polytope has an empty relative interior
    interior_margin: float

    def leaf_density(self, z: np.ndarray) -> np.ndarray:
        n = self.model.tree.n_nodes
        return z[:n][list(self.model.tree.leaves)]

    def element(self, z: np.ndarray) -> CpsElement:
        n = self.model.tree.n_nodes
        z0 = z[:n]
        z1 = self.model.ask() * z0 if self.reduced else z[n:2 * n]
        return CpsElement(tuple(float(v) for v in z0), tuple(float(v) for v in z1))


def cps_polytope(model: MarketModel) -> CpsPolytope:
    """Build the polytope and probe it: emptiness flag plus a strict interior point."""
    tree = model.tree
    n = tree.n_nodes
    s = model.ask()
    lam = model.lam
    reduced = lam == 0.0

    eq_rows: list[np.ndarray] = []
    eq_rhs: list[float] = []
    nv = n if reduced else 2 * n

    def row() -> np.ndarray:
        return np.zeros(nv)

    r = row()
    r[tree.root] = 1.0
    eq_rows.append(r)
    eq_rhs.append(1.0)
    for k in range(n):
        ch = list(tree.children[k])
        if not ch:
            continue
        cp = np.array(tree.cond_prob[k])
        r = row()
        r[k] = 1.0
        r[ch] = -cp
        eq_rows.append(r)
        eq_rhs.append(0.0)
        r = row()
        if reduced:
            # Shadow-price martingale: S_k z0_k = sum_c cp_c S_c z0_c.
            r[k] = s[k]
            r[ch] = -cp * s[list(ch)]
        else:
            r[np.array(ch) + n] = -cp
            r[k + n] = 1.0
        eq_rows.append(r)
        eq_rhs.append(0.0)
    A = np.vstack(eq_rows)
    b = np.array(eq_rhs)

    ineq_rows: list[np.ndarray] = []
    ineq_rhs: list[float] = []
    scales: list[float] = []
    for k in range(n):
        r = row()
        r[k] = -1.0
        ineq_rows.append(r)
        ineq_rhs.append(0.0)
        scales.append(1.0)
        if not reduced:
            r = row()
            r[k + n] = -1.0
            ineq_rows.append(r)
            ineq_rhs.append(0.0)
            scales.append(1.0)
            r = row()
            r[k] = (1.0 - lam) * s[k]
            r[k + n] = -1.0
            ineq_rows.append(r)
            ineq_rhs.append(0.0)
            scales.append(s[k])
            r = row()
            r[k] = -s[k]
            r[k + n] = 1.0
            ineq_rows.append(r)
            ineq_rhs.append(0.0)
            scales.append(s[k])
    G = np.vstack(ineq_rows)
    h = np.array(ineq_rhs)

    # Phase 1: maximize the scaled slack margin over the polytope.
    G1 = np.hstack([G, np.array(scales)[:, None]])
    A1 = np.hstack([A, np.zeros((A.shape[0], 1))])
    c1 = np.zeros(nv + 1)
    c1[-1] = 1.0
    lb = np.full(nv + 1, -np.inf)
    lb[-1] = -1.0
    ub = np.full(nv + 1, np.inf)
    ub[-1] = 0.1
    res = solve_lp(LinearProgram(c=c1, A_ub=G1, b_ub=h, A_eq=A1, b_eq=b,
                                 lb=lb, ub=ub, sense="max"))
    if res.status == INFEASIBLE:
        return CpsPolytope(model, nv, reduced, G, h, A, b,
                           nonempty=False, interior=None, interior_margin=-np.inf)
    require_optimal(res, "CPS polytope phase-1 LP")
    margin = float(res.z[-1])
    nonempty = margin >= -1e-11
    interior = res.z[:-1].copy() if margin > 1e-9 else None
    return CpsPolytope(model, nv, reduced, G, h, A, b,
                       nonempty=nonempty, interior=interior, interior_margin=margin)


def _require_nonempty(poly: CpsPolytope):
    if not poly.nonempty:
        raise NoConsistentPriceSystemError(
            "market admits no consistent price system (arbitrage)")


def superreplication_price(model: MarketModel, g, polytope: CpsPolytope | None = None) -> float:
    """Cheapest superreplication capital: sup of E[Z0_T g] over the polytope."""
    poly = polytope or cps_polytope(model)
    _require_nonempty(poly)
    tree = model.tree
    g = np.asarray(g, dtype=float)
    if g.shape != (len(tree.leaves),):
        raise DomainError(f"payoff has {g.shape} entries, expected {len(tree.leaves)}")
    c = np.zeros(poly.n_vars)
    c[list(tree.leaves)] = tree.leaf_prob() * g
    res = solve_lp(LinearProgram(c=c, A_ub=poly.G, b_ub=poly.h,
                                 A_eq=poly.A, b_eq=poly.b, lb=None, sense="max"))
    require_optimal(res, "superreplication LP")
    return float(res.value)


def compute_x0(model: MarketModel, polytope: CpsPolytope | None = None) -> float:
    """Infeasibility threshold x0 = sup E[Z0_T (-e_T)] over the polytope."""
    return superreplication_price(model, -model.endowment_vector(), polytope)


@dataclass
class DualSolution:
    y: float
    optimizer: CpsElement
    value: float
    v_term: float            # E[V(y z0_T)]
    endow_term: float        # y E[z0_T e_T]
    singular_mass: float     # 1 - E[z0_T]; identically 0 at finite scale
    kkt_residual: float
    derivative: float | None = None


def solve_dual(model: MarketModel, spec: ut.UtilitySpec, y: float,
               polytope: CpsPolytope | None = None,
               start: np.ndarray | None = None,
               tol: float = 1e-9) -> DualSolution:
    """Minimize E[V(y Z0_T)] + y E[Z0_T e_T] over the dual polytope."""
    if y <= 0:
        raise DomainError("solve_dual requires y > 0")
    poly = polytope or cps_polytope(model)
    _require_nonempty(poly)
    if poly.interior is None:
        raise SolverIndeterminateError(
            "dual polytope has empty relative interior; cannot run the interior-point solve")
    tree = model.tree
    p = tree.leaf_prob()
    e = model.endowment_vector()
    leaves = np.array(tree.leaves)
    nv = poly.n_vars

    def solve_at(y_cur: float, z_start: np.ndarray):
        def raw_gradient(z: np.ndarray) -> np.ndarray:
            d = z[leaves]
            g = np.zeros(nv)
            g[leaves] = p * y_cur * (-ut.i_eval(spec, y_cur * d)) + y_cur * p * e
            return g

        # Normalize by the gradient scale at the start so the solver tolerance
        # acts relatively; extreme y values otherwise push the objective far
        # from unit scale and stall the iteration at machine precision.
        scale = max(1.0, float(np.abs(raw_gradient(z_start)).max()))

        def objective(z: np.ndarray) -> float:
            d = z[leaves]
            if d.min() <= 0:
                return np.inf
            return float(p @ ut.v_eval(spec, y_cur * d) + y_cur * (p * d) @ e) / scale

        def gradient(z: np.ndarray) -> np.ndarray:
            return raw_gradient(z) / scale

        def hessian(z: np.ndarray) -> np.ndarray:
            d = z[leaves]
            H = np.zeros((nv, nv))
            H[leaves, leaves] = p * y_cur * y_cur * ut.v_double_prime(spec, y_cur * d)
            return H / scale

        cp = ConvexProgram(objective, gradient, hessian, n=nv,
                           G=poly.G, h=poly.h, A=poly.A, b=poly.b, start=z_start)
        return solve_convex(cp, tol=tol)

    z0_start = poly.interior if start is None else start
    res = solve_at(y, z0_start)
    if res.status != OPTIMAL and start is None:
        # Extreme y values can stall the interior-point solve from the generic
        # start; walk there geometrically from y = 1, warm-starting each step
        # from the previous optimizer nudged strictly inside the polytope.
        y_ref = 1.0
        steps = max(1, int(math.ceil(abs(math.log(y / y_ref)) / math.log(2.0))))
        z_warm = poly.interior
        for k in range(1, steps + 1):
            y_k = y_ref * (y / y_ref) ** (k / steps)
            res_k = solve_at(y_k, z_warm)
            if res_k.status != OPTIMAL:
                break
            z_warm = 0.9 * res_k.z + 0.1 * poly.interior
        else:
            res = res_k
    require_optimal(res, f"dual solve at y={y}")
    elem = poly.element(res.z)
    d = poly.leaf_density(res.z)
    v_term = float(p @ ut.v_eval(spec, y * d))
    endow_term = float(y * (p * d) @ e)
    sol = DualSolution(
        y=float(y), optimizer=elem,
        value=v_term + endow_term,
        v_term=v_term, endow_term=endow_term,
        singular_mass=float(1.0 - p @ d),
        kkt_residual=float(res.kkt_residual),
    )
    sol.derivative = dual_derivative(model, spec, sol)
    return sol


def dual_derivative(model: MarketModel, spec: ut.UtilitySpec, solution: DualSolution) -> float:
    """Envelope derivative v'(y) = -E[Z0_T I(y Z0_T)] + E[Z0_T e_T].

    Evaluated on {z0 > floor}; the excluded probability mass is zero for the
    shipped utilities because V'(0+) = -infinity pushes densities interior.
    """
    tree = model.tree
    p = tree.leaf_prob()
    e = model.endowment_vector()
    d = np.array(solution.optimizer.z0)[list(tree.leaves)]
    mask = d > DENSITY_FLOOR
    y = solution.y
    term = float((p[mask] * d[mask]) @ ut.i_eval(spec, y * d[mask]))
    return -term + float((p * d) @ e)


def dual_grid(model: MarketModel, spec: ut.UtilitySpec, y_grid,
              polytope: CpsPolytope | None = None) -> list[DualSolution]:
    """Solve the dual along a sorted positive grid, warm-starting along the way."""
    poly = polytope or cps_polytope(model)
    _require_nonempty(poly)
    out: list[DualSolution] = []
    for y in y_grid:
        out.append(solve_dual(model, spec, float(y), polytope=poly))
    return out


def default_y_grid() -> np.ndarray:
    return np.logspace(-3, 3, 41)
