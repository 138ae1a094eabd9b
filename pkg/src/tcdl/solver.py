"""Small dense LP and smooth convex solvers.

``solve_lp`` wraps scipy's HiGHS backend behind a plain dataclass contract and
re-certifies feasibility, complementary slackness, and the duality gap before
reporting "optimal"; anything less becomes "numerically-indeterminate" rather
than a wrong answer.

``solve_convex`` is a primal-dual interior-point method for

    minimize f(z)  subject to  G z <= h,  A z = b,

with f smooth and convex on an open domain (f returns +inf outside, the line
search backtracks into the domain).  Problems here are desk scale (a few
hundred variables), so everything is dense and each step solves one reduced
KKT system.  The method polishes to KKT residuals around 1e-9, which the
duality checks downstream rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from .errors import DomainError, SolverIndeterminateError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
INDETERMINATE = "numerically-indeterminate"


@dataclass
class LinearProgram:
    """min/max c.z  s.t.  A_ub z <= b_ub, A_eq z = b_eq, z >= lb (None = free)."""

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | float | None = 0.0
    ub: np.ndarray | float | None = None
    sense: str = "min"


@dataclass
class LpResult:
    status: str
    z: np.ndarray | None = None
    value: float | None = None
    # Multipliers for the minimization form: c + A_ub' lam + A_eq' nu - mu_lb = 0,
    # lam >= 0.  For sense="max" they refer to the internal min(-c) problem.
    ineq_duals: np.ndarray | None = None
    eq_duals: np.ndarray | None = None
    residuals: dict = field(default_factory=dict)


def _bounds_list(lp: LinearProgram, n: int):
    def expand(v, default):
        if v is None:
            return [default] * n
        arr = np.broadcast_to(np.asarray(v, dtype=float), (n,))
        return list(arr)
    lbs = expand(lp.lb, -np.inf) if lp.lb is not None else [-np.inf] * n
    ubs = expand(lp.ub, np.inf) if lp.ub is not None else [np.inf] * n
    return list(zip(lbs, ubs))


def solve_lp(lp: LinearProgram) -> LpResult:
    c = np.asarray(lp.c, dtype=float)
    n = c.size
    if not np.all(np.isfinite(c)):
        raise DomainError("LP objective has non-finite entries")
    sign = -1.0 if lp.sense == "max" else 1.0
    res = linprog(
        sign * c,
        A_ub=lp.A_ub, b_ub=lp.b_ub,
        A_eq=lp.A_eq, b_eq=lp.b_eq,
        bounds=_bounds_list(lp, n),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10,
                 "dual_feasibility_tolerance": 1e-10},
    )
    if res.status == 2:
        return LpResult(status=INFEASIBLE)
    if res.status == 3:
        return LpResult(status=UNBOUNDED)
    if res.status != 0:
        return LpResult(status=INDETERMINATE)

    z = np.asarray(res.x)
    value = sign * res.fun
    lam = -np.asarray(res.ineqlin.marginals) if lp.A_ub is not None else None
    nu = -np.asarray(res.eqlin.marginals) if lp.A_eq is not None else None

    # Re-certify before claiming optimality.
    residuals = {}
    feas = 0.0
    if lp.A_ub is not None:
        slack = np.asarray(lp.b_ub) - lp.A_ub @ z
        feas = max(feas, float(max(0.0, -slack.min(initial=0.0))))
        if lam is not None:
            residuals["comp_slack"] = float(np.max(np.abs(lam * slack), initial=0.0))
    if lp.A_eq is not None:
        feas = max(feas, float(np.max(np.abs(lp.A_eq @ z - lp.b_eq), initial=0.0)))
    residuals["primal_feasibility"] = feas
    # HiGHS returns matched primal/dual basic solutions; the marginal-based
    # objective bound certifies the gap.
    dual_obj = 0.0
    if lp.b_ub is not None and lam is not None:
        dual_obj -= float(lam @ np.asarray(lp.b_ub))
    if lp.b_eq is not None and nu is not None:
        dual_obj -= float(nu @ np.asarray(lp.b_eq))
    lower = res.lower
    if lower is not None and lower.marginals is not None:
        bl = np.array([b[0] for b in _bounds_list(lp, n)])
        finite = np.isfinite(bl)
        dual_obj += float(np.asarray(lower.marginals)[finite] @ bl[finite])
    upper = res.upper
    if upper is not None and upper.marginals is not None:
        bu = np.array([b[1] for b in _bounds_list(lp, n)])
        finite = np.isfinite(bu)
        dual_obj += float(np.asarray(upper.marginals)[finite] @ bu[finite])
    gap = abs(sign * value - dual_obj) / (1.0 + abs(value))
    residuals["duality_gap"] = float(gap)

    ok = (feas <= 1e-9
          and residuals.get("comp_slack", 0.0) <= 1e-8 * (1.0 + float(np.abs(z).max(initial=0.0)))
          and gap <= 1e-8)
    return LpResult(
        status=OPTIMAL if ok else INDETERMINATE,
        z=z, value=float(value),
        ineq_duals=lam, eq_duals=nu,
        residuals=residuals,
    )


@dataclass
class ConvexProgram:
    """Smooth convex objective with linear constraints and a strict start.

    ``objective`` must return +inf outside its open domain; ``start`` must be
    strictly feasible for the inequalities and inside the domain.
    """

    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    n: int
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    start: np.ndarray | None = None


@dataclass
class ConvexResult:
    status: str
    z: np.ndarray | None = None
    value: float | None = None
    kkt_residual: float | None = None
    ineq_duals: np.ndarray | None = None
    eq_duals: np.ndarray | None = None
    iterations: int = 0


def _drop_dependent_rows(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Remove linearly dependent equality rows (QR with column pivoting on A')."""
    if A.shape[0] <= 1:
        return A, b
    from scipy.linalg import qr
    _, r, piv = qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(A.shape) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    rank = int((diag > tol).sum())
    keep = sorted(piv[:rank])
    return A[keep], b[keep]


def solve_convex(cp: ConvexProgram, tol: float = 1e-8,
                 max_iter: int = 1000, mu: float = 10.0) -> ConvexResult:
    """Primal-dual interior-point solve; see module docstring for the problem form."""
    n = cp.n
    G = np.zeros((0, n)) if cp.G is None else np.asarray(cp.G, dtype=float)
    h = np.zeros(0) if cp.h is None else np.asarray(cp.h, dtype=float)
    A = np.zeros((0, n)) if cp.A is None else np.asarray(cp.A, dtype=float)
    b = np.zeros(0) if cp.b is None else np.asarray(cp.b, dtype=float)
    if A.shape[0]:
        A, b = _drop_dependent_rows(A, b)
    m, p = G.shape[0], A.shape[0]

    if cp.start is None:
        raise DomainError("solve_convex requires a strictly feasible start point")
    z = np.asarray(cp.start, dtype=float).copy()
    s = h - G @ z if m else np.zeros(0)
    if m and s.min() <= 0:
        raise DomainError("start point is not strictly feasible for the inequalities")
    if not np.isfinite(cp.objective(z)):
        raise DomainError("start point is outside the objective domain")

    lam = 1.0 / np.maximum(s, 1e-12) if m else np.zeros(0)
    nu = np.zeros(p)
    no_progress = 0

    def residuals(z, lam, nu, inv_t):
        s = h - G @ z if m else np.zeros(0)
        r_dual = cp.gradient(z)
        if m:
            r_dual = r_dual + G.T @ lam
        if p:
            r_dual = r_dual + A.T @ nu
        r_cent = lam * s - inv_t if m else np.zeros(0)
        r_pri = A @ z - b if p else np.zeros(0)
        return r_dual, r_cent, r_pri, s

    for it in range(1, max_iter + 1):
        s = h - G @ z if m else np.zeros(0)
        eta = float(s @ lam) if m else 0.0
        inv_t = eta / (mu * m) if m else 0.0
        r_dual, r_cent, r_pri, s = residuals(z, lam, nu, inv_t)

        res_inf = max(
            float(np.abs(r_dual).max(initial=0.0)),
            float(np.abs(r_pri).max(initial=0.0)),
        )
        if eta <= tol and res_inf <= tol:
            kkt = max(res_inf, float(np.abs(lam * s).max(initial=0.0)) if m else 0.0)
            return ConvexResult(
                status=OPTIMAL, z=z, value=float(cp.objective(z)),
                kkt_residual=kkt, ineq_duals=lam.copy(), eq_duals=nu.copy(),
                iterations=it,
            )

        H = cp.hessian(z)
        if m:
            H = H + G.T @ ((lam / s)[:, None] * G)
        rhs_z = -r_dual
        if m:
            rhs_z = rhs_z + G.T @ (r_cent / s)
        if p:
            K = np.zeros((n + p, n + p))
            K[:n, :n] = H
            K[:n, n:] = A.T
            K[n:, :n] = A
            rhs = np.concatenate([rhs_z, -r_pri])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            dz, dnu = sol[:n], sol[n:]
        else:
            try:
                dz = np.linalg.solve(H, rhs_z)
            except np.linalg.LinAlgError:
                dz = np.linalg.lstsq(H, rhs_z, rcond=None)[0]
            dnu = np.zeros(0)
        if m:
            # d(lam*s): s dlam + lam ds = -r_cent with ds = -G dz.
            dlam = (-r_cent + lam * (G @ dz)) / s
        else:
            dlam = np.zeros(0)

        # Longest step keeping lam > 0 and s > 0.
        alpha = 1.0
        if m:
            neg = dlam < 0
            if neg.any():
                alpha = min(alpha, float((-lam[neg] / dlam[neg]).min()))
            Gdz = G @ dz
            pos = Gdz > 0
            if pos.any():
                alpha = min(alpha, float((s[pos] / Gdz[pos]).min()))
            alpha *= 0.99
        norm0 = np.sqrt(float(r_dual @ r_dual + r_cent @ r_cent + r_pri @ r_pri))
        accepted = False
        for _ in range(60):
            z_n = z + alpha * dz
            lam_n = lam + alpha * dlam
            nu_n = nu + alpha * dnu
            if np.isfinite(cp.objective(z_n)):
                rd, rc, rp, s_n = residuals(z_n, lam_n, nu_n, inv_t)
                if (not m or s_n.min() > 0):
                    norm1 = np.sqrt(float(rd @ rd + rc @ rc + rp @ rp))
                    if norm1 <= (1.0 - 0.01 * alpha) * norm0 + 1e-16:
                        accepted = True
                        break
            alpha *= 0.5
        if accepted and norm1 > (1.0 - 1e-10) * norm0:
            # Accepted in name only; at machine precision nothing moved.
            no_progress += 1
            accepted = no_progress < 20
        elif accepted:
            no_progress = 0
        if not accepted:
            # Stalled: report honestly with the certified gap.
            kkt = max(res_inf, eta)
            return ConvexResult(status=INDETERMINATE, z=z,
                                value=float(cp.objective(z)),
                                kkt_residual=kkt, ineq_duals=lam.copy(),
                                eq_duals=nu.copy(), iterations=it)
        z, lam, nu = z_n, lam_n, nu_n

    s = h - G @ z if m else np.zeros(0)
    eta = float(s @ lam) if m else 0.0
    r_dual, _, r_pri, _ = residuals(z, lam, nu, 0.0)
    kkt = max(eta,
              float(np.abs(r_dual).max(initial=0.0)),
              float(np.abs(r_pri).max(initial=0.0)))
    return ConvexResult(status=INDETERMINATE, z=z,
                        value=float(cp.objective(z)),
                        kkt_residual=kkt, ineq_duals=lam.copy(),
                        eq_duals=nu.copy(), iterations=max_iter)


def require_optimal(result, what: str):
    """Raise if an LP/convex result is not certified optimal."""
    if result.status != OPTIMAL:
        raise SolverIndeterminateError(f"{what}: solver status {result.status}")
    return result
