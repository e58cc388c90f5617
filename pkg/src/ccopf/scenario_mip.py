"""Exact k-of-S scenario selection by branch-and-bound over convex QPs.

The master problem: minimize a convex quadratic cost subject to a base
linear system that always holds plus at least k of S scenario blocks
A_j x <= b_j.  Indicator semantics are handled combinatorially — each
branch-and-bound node partitions scenarios into (Enforced, Relaxed,
Undecided) and bounds the node by the QP over base plus Enforced blocks —
so no big-M constant is ever materialized.

The continuous engine is a dense primal active-set method (null-space
steps, PSD and singular Hessians supported, equalities pinned in the
working set).  Phase-1 feasibility, Farkas infeasibility certificates, and
the exactly-linear-cost case are delegated to scipy's HiGHS linprog.
All tie-breaks are by lowest index so results are reproducible.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

OPTIMAL = "OPTIMAL"
INFEASIBLE = "INFEASIBLE"
UNBOUNDED = "UNBOUNDED"
NUMERICAL_FAILURE = "NUMERICAL_FAILURE"
GAP_LIMIT = "GAP_LIMIT"

_FEAS_TOL = 1e-7  # absolute residual tolerance on constraint rows


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """value(x) = 0.5 x'Hx + g'x + c0 with H symmetric PSD."""

    h: np.ndarray
    g: np.ndarray
    c0: float = 0.0

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        g = np.asarray(self.g, dtype=float)
        if h.shape != (g.size, g.size):
            raise ValueError("H must be n x n for g of length n")
        if not np.allclose(h, h.T, atol=1e-10):
            raise ValueError("H must be symmetric")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "g", g)

    @property
    def n(self):
        return self.g.size

    def value(self, x):
        return float(0.5 * x @ self.h @ x + self.g @ x + self.c0)


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Inequalities a_ineq x <= b_ineq plus equalities a_eq x = b_eq."""

    a_ineq: np.ndarray
    b_ineq: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray

    @classmethod
    def make(cls, a_ineq=None, b_ineq=None, a_eq=None, b_eq=None, n=None):
        def shape2(a, b, what, width):
            if a is None:
                if width is None:
                    raise ValueError(f"need n to build empty {what}")
                return np.zeros((0, width)), np.zeros(0)
            a = np.atleast_2d(np.asarray(a, dtype=float))
            b = np.atleast_1d(np.asarray(b, dtype=float))
            if a.shape[0] != b.size:
                raise ValueError(f"{what}: {a.shape[0]} rows vs {b.size} rhs")
            return a, b

        if n is None:
            for a in (a_ineq, a_eq):
                if a is not None:
                    n = np.atleast_2d(np.asarray(a)).shape[1]
                    break
        ai, bi = shape2(a_ineq, b_ineq, "inequalities", n)
        ae, be = shape2(a_eq, b_eq, "equalities", n)
        if ai.shape[1] != ae.shape[1]:
            raise ValueError("inconsistent variable counts")
        return cls(ai, bi, ae, be)

    @property
    def n(self):
        return self.a_ineq.shape[1] if self.a_ineq.size else self.a_eq.shape[1]


@dataclass
class QpSubproblemResult:
    """Certified outcome of one continuous subproblem.

    status OPTIMAL carries x/value/duals and kkt_residual (max over
    stationarity, primal/dual feasibility, complementarity).  status
    INFEASIBLE carries a Farkas certificate (y_ineq >= 0, y_eq) with
    y'A = 0 and y'b < 0.  UNBOUNDED and NUMERICAL_FAILURE are reported
    distinctly; neither carries a point.
    """

    status: str
    x: np.ndarray | None = None
    value: float = np.nan
    duals_ineq: np.ndarray | None = None
    duals_eq: np.ndarray | None = None
    kkt_residual: float = np.nan
    certificate: dict | None = None
    message: str = ""


def _lp_solve(g, system, c0):
    """Pure-LP path via HiGHS; converts marginals to our dual convention."""
    res = linprog(
        g,
        A_ub=system.a_ineq if system.a_ineq.size else None,
        b_ub=system.b_ineq if system.a_ineq.size else None,
        A_eq=system.a_eq if system.a_eq.size else None,
        b_eq=system.b_eq if system.a_eq.size else None,
        bounds=[(None, None)] * g.size,
        method="highs",
    )
    if res.status == 0:
        lam = (-res.ineqlin.marginals if system.a_ineq.size
               else np.zeros(0))
        mu = -res.eqlin.marginals if system.a_eq.size else np.zeros(0)
        x = res.x
        kkt = _kkt_residual(np.zeros((g.size, g.size)), g, system, x,
                            np.maximum(lam, 0.0), mu)
        return QpSubproblemResult(
            status=OPTIMAL, x=x, value=float(res.fun) + c0,
            duals_ineq=np.maximum(lam, 0.0), duals_eq=mu, kkt_residual=kkt,
        )
    if res.status == 2:
        return _infeasibility_certificate(system)
    if res.status == 3:
        return QpSubproblemResult(status=UNBOUNDED,
                                  message="objective unbounded below")
    return QpSubproblemResult(status=NUMERICAL_FAILURE, message=res.message)


def _infeasibility_certificate(system):
    """Farkas combination from the elastic feasibility LP's duals."""
    m, n = system.a_ineq.shape
    p = system.a_eq.shape[0]
    # min 1's  s.t.  A x - s <= b, s >= 0, E x = f
    a_ub = np.block([[system.a_ineq, -np.eye(m)],
                     [np.zeros((m, n)), -np.eye(m)]]) if m else None
    b_ub = np.concatenate([system.b_ineq, np.zeros(m)]) if m else None
    res = linprog(
        np.concatenate([np.zeros(n), np.ones(m)]),
        A_ub=a_ub, b_ub=b_ub,
        A_eq=np.hstack([system.a_eq, np.zeros((p, m))]) if p else None,
        b_eq=system.b_eq if p else None,
        bounds=[(None, None)] * n + [(0, None)] * m,
        method="highs",
    )
    cert = None
    if res.status == 0 and res.fun > 1e-9:
        y_ineq = np.maximum(-res.ineqlin.marginals[:m], 0.0) if m else np.zeros(0)
        y_eq = -res.eqlin.marginals if p else np.zeros(0)
        combo = y_ineq @ system.a_ineq + (y_eq @ system.a_eq if p else 0.0)
        rhs = y_ineq @ system.b_ineq + (y_eq @ system.b_eq if p else 0.0)
        if np.max(np.abs(combo)) < 1e-6 * max(1.0, np.max(np.abs(y_ineq), initial=1.0)) and rhs < 0:
            cert = {"y_ineq": y_ineq, "y_eq": y_eq, "combined_rhs": float(rhs)}
    return QpSubproblemResult(status=INFEASIBLE, certificate=cert,
                              message="constraints are inconsistent")


def _kkt_residual(h, g, system, x, lam, mu):
    stat = h @ x + g
    if lam.size:
        stat = stat + system.a_ineq.T @ lam
    if mu.size:
        stat = stat + system.a_eq.T @ mu
    r = float(np.max(np.abs(stat), initial=0.0))
    if system.a_ineq.size:
        resid = system.a_ineq @ x - system.b_ineq
        r = max(r, float(np.max(resid, initial=0.0)))
        r = max(r, float(np.max(np.abs(lam * resid), initial=0.0)))
    if lam.size:
        r = max(r, float(np.max(-lam, initial=0.0)))
    if system.a_eq.size:
        r = max(r, float(np.max(np.abs(system.a_eq @ x - system.b_eq),
                                initial=0.0)))
    return r


def _phase1_point(system):
    """Feasible point via the elastic LP, or an INFEASIBLE result."""
    m, n = system.a_ineq.shape
    if m == 0:
        if system.a_eq.shape[0]:
            x0, *_ = np.linalg.lstsq(system.a_eq, system.b_eq, rcond=None)
            if np.max(np.abs(system.a_eq @ x0 - system.b_eq),
                      initial=0.0) > 1e-8:
                return None, _infeasibility_certificate(system)
            return x0, None
        return np.zeros(n), None
    res = linprog(
        np.concatenate([np.zeros(n), np.ones(m)]),
        A_ub=np.block([[system.a_ineq, -np.eye(m)],
                       [np.zeros((m, n)), -np.eye(m)]]),
        b_ub=np.concatenate([system.b_ineq, np.zeros(m)]),
        A_eq=(np.hstack([system.a_eq, np.zeros((system.a_eq.shape[0], m))])
              if system.a_eq.shape[0] else None),
        b_eq=system.b_eq if system.a_eq.shape[0] else None,
        bounds=[(None, None)] * n + [(0, None)] * m,
        method="highs",
    )
    if res.status != 0:
        return None, QpSubproblemResult(
            status=NUMERICAL_FAILURE,
            message=f"phase-1 LP failed: {res.message}")
    if res.fun > 1e-9:
        return None, _infeasibility_certificate(system)
    return res.x[:n], None


def _acceptable_start(system, x):
    """True when x satisfies the system to phase-1 accuracy."""
    if x is None or x.size != system.n or not np.all(np.isfinite(x)):
        return False
    if system.a_ineq.size and float(
            np.max(system.a_ineq @ x - system.b_ineq, initial=0.0)) > 1e-9:
        return False
    if system.a_eq.size and float(
            np.max(np.abs(system.a_eq @ x - system.b_eq),
                   initial=0.0)) > 1e-9:
        return False
    return True


def _independent_active(system, x):
    """Inequality rows active at x that are independent given the
    equalities, chosen greedily in ascending row order (reproducible)."""
    a_ineq, b_ineq, a_eq = system.a_ineq, system.b_ineq, system.a_eq
    if not a_ineq.size:
        return []
    resid = b_ineq - a_ineq @ x
    active = np.flatnonzero(resid <= 1e-9)
    if not active.size:
        return []
    n = a_ineq.shape[1]
    basis = np.zeros((0, n))
    if a_eq.shape[0]:
        q = np.linalg.qr(a_eq.T)[0]
        basis = q.T
    working = []
    for j in active:
        row = a_ineq[j]
        row_norm = np.linalg.norm(row)
        if row_norm <= 0.0:
            continue
        rem = row - basis.T @ (basis @ row)
        rem_norm = np.linalg.norm(rem)
        if rem_norm > 1e-8 * row_norm:
            working.append(int(j))
            basis = np.vstack([basis, rem / rem_norm])
            if basis.shape[0] >= n:
                break
    return working


def qp_solve(cost, system, *, max_iter=None, warm_start=None):
    """Minimize a convex QP over a linear system with a KKT certificate.

    Dense primal active-set method: equalities stay in the working set,
    inequality rows enter on blocking and leave on negative multipliers
    (most negative first, lowest index on ties).  Singular reduced
    Hessians are handled by least-squares steps plus explicit descent
    rays, so purely linear pieces of the cost are fine; an exactly-zero
    Hessian short-circuits to the LP path.

    warm_start is an optional point; when it already satisfies the system
    it replaces the phase-1 LP and seeds the working set with the
    independent rows active there, which is where branch-and-bound spends
    its time.  An infeasible warm point is ignored.
    """
    system = _as_system(system, cost.n)
    h, g, c0 = cost.h, cost.g, cost.c0
    n = cost.n
    if not np.any(h):
        return _lp_solve(g, system, c0)

    # Normalize the cost so all tolerances are O(1) regardless of $ scale.
    scale = max(1.0, float(np.max(np.abs(h))), float(np.max(np.abs(g))))
    h = h / scale
    g = g / scale

    x = None
    if warm_start is not None:
        cand = np.asarray(warm_start, dtype=float).ravel()
        if _acceptable_start(system, cand):
            x = cand.copy()
    if x is None:
        x, fail = _phase1_point(system)
        if fail is not None:
            return fail

    a_ineq, b_ineq = system.a_ineq, system.b_ineq
    a_eq, b_eq = system.a_eq, system.b_eq
    m = a_ineq.shape[0]
    if a_eq.shape[0]:
        # Project the starting point exactly onto the equalities.
        corr, *_ = np.linalg.lstsq(a_eq, b_eq - a_eq @ x, rcond=None)
        x = x + corr

    working = _independent_active(system, x)
    if max_iter is None:
        max_iter = 50 * (n + m + 10)

    for _ in range(max_iter):
        rows = [a_eq] if a_eq.shape[0] else []
        if working:
            rows.append(a_ineq[working])
        a_w = np.vstack(rows) if rows else np.zeros((0, n))
        z = null_space(a_w) if a_w.shape[0] else np.eye(n)

        grad = h @ x + g
        step = np.zeros(n)
        ray = None
        if z.shape[1]:
            hz = z.T @ h @ z
            gz = z.T @ grad
            pz, *_ = np.linalg.lstsq(hz, -gz, rcond=None)
            resid = hz @ pz + gz
            if np.max(np.abs(resid), initial=0.0) > 1e-9:
                # gz has a component in the null space of hz: a direction of
                # linear, unblocked descent.
                ray = z @ (-resid)
            else:
                step = z @ pz

        if ray is not None:
            alpha, j_enter = _blocking_step(a_ineq, b_ineq, x, ray, working)
            if j_enter is None:
                return QpSubproblemResult(
                    status=UNBOUNDED, message="descent ray never blocked")
            x = x + alpha * ray
            working = sorted(working + [j_enter])
            continue

        if np.max(np.abs(step), initial=0.0) <= 1e-11 * (1.0 + np.max(np.abs(x))):
            # Stationary on the working set: check multipliers.
            if a_w.shape[0]:
                y, *_ = np.linalg.lstsq(a_w.T, -grad, rcond=None)
            else:
                y = np.zeros(0)
            n_eq = a_eq.shape[0]
            lam_w = y[n_eq:]
            if lam_w.size == 0 or np.min(lam_w) >= -1e-9:
                lam = np.zeros(m)
                for idx, j in enumerate(working):
                    lam[j] = max(lam_w[idx], 0.0)
                mu = y[:n_eq]
                kkt = _kkt_residual(h * scale, g * scale, system, x,
                                    lam * scale, mu * scale)
                return QpSubproblemResult(
                    status=OPTIMAL, x=x,
                    value=float(0.5 * x @ (h * scale) @ x
                                + (g * scale) @ x + c0),
                    duals_ineq=lam * scale, duals_eq=mu * scale,
                    kkt_residual=kkt)
            worst = int(np.argmin(lam_w))  # ties: argmin takes the first
            working.pop(worst)
            continue

        alpha, j_enter = _blocking_step(a_ineq, b_ineq, x, step, working)
        if j_enter is not None and alpha < 1.0:
            x = x + alpha * step
            working = sorted(working + [j_enter])
        else:
            x = x + step
    return QpSubproblemResult(
        status=NUMERICAL_FAILURE,
        message=f"active-set iteration cap {max_iter} reached")


def _blocking_step(a_ineq, b_ineq, x, direction, working):
    """First inequality row blocking a move along direction.

    Returns (alpha, row) for the smallest step ratio (lowest row index on
    ties), or (inf, None) when no row outside the working set blocks.
    """
    m = a_ineq.shape[0]
    if not m:
        return np.inf, None
    denom = a_ineq @ direction
    mask = denom > 1e-12
    if working:
        mask[working] = False
    rows = np.flatnonzero(mask)
    if not rows.size:
        return np.inf, None
    resid = b_ineq[rows] - a_ineq[rows] @ x
    ratios = np.maximum(resid, 0.0) / denom[rows]
    alpha = float(ratios.min())
    j_enter = int(rows[np.flatnonzero(ratios <= alpha + 1e-12)[0]])
    return alpha, j_enter


def _as_system(system, n):
    if isinstance(system, LinearSystem):
        return system
    raise TypeError("system must be a LinearSystem")


@dataclass(frozen=True, eq=False)
class SelectionProblem:
    """k-of-S selection instance.

    blocks is a tuple of (A_j, b_j) pairs; base always holds.  When every
    block shares one LHS matrix (the chance-constraint construction —
    blocks differ only through the scenario shift on the RHS), nodes are
    bounded by a single QP whose block rows take the rowwise minimum RHS
    over enforced scenarios.
    """

    cost: QuadraticCost
    base: LinearSystem
    blocks: tuple
    k: int

    def __post_init__(self):
        if not (1 <= self.k <= len(self.blocks)):
            raise ValueError(
                f"k={self.k} outside [1, {len(self.blocks)}]")
        n = self.cost.n
        for j, (a, b) in enumerate(self.blocks):
            if a.shape != (b.size, n):
                raise ValueError(f"block {j}: shape mismatch")

    @property
    def n_scenarios(self):
        return len(self.blocks)

    def shared_lhs(self):
        """The common LHS matrix if all blocks share one, else None."""
        first = self.blocks[0][0]
        for a, _ in self.blocks[1:]:
            if a is not first and not np.array_equal(a, first):
                return None
        return first


@dataclass
class SolverOptions:
    feas_tol: float = _FEAS_TOL
    node_limit: int | None = None
    time_limit: float | None = None
    rel_gap: float = 0.0
    workers: int = 1  # accepted for interface stability; this build is
    # single-threaded so node order and tie resolution are reproducible


@dataclass
class SelectionSolution:
    x_star: np.ndarray | None
    z_star: np.ndarray | None  # z_j = 1 iff scenario j is relaxed
    objective: float
    enforced_set: tuple
    status: str
    nodes: int = 0
    qp_count: int = 0
    wall_time: float = 0.0
    gap: float = np.nan
    duals_ineq: np.ndarray | None = None
    duals_eq: np.ndarray | None = None


def _node_system(problem, enforced, shared, *, undecided=None, budget=None,
                 b_stack=None):
    """Constraint system bounding a node from below.

    Base rows plus the enforced blocks, row-wise aggregated when all
    blocks share one LHS.  When the undecided index list and remaining
    relaxation budget r are supplied (shared LHS only), each row is
    additionally capped by the (r+1)-th smallest undecided RHS: any
    completion may discard at most r undecided blocks, so at least one
    of the r+1 tightest per row survives.  That keeps the system a valid
    relaxation of every completion while being far tighter than the
    enforced rows alone.
    """
    base = problem.base
    if shared is not None:
        b_min = None
        if enforced:
            b_min = problem.blocks[enforced[0]][1].copy()
            for j in enforced[1:]:
                np.minimum(b_min, problem.blocks[j][1], out=b_min)
        if undecided is not None and len(undecided) > budget:
            rows = b_stack[undecided]
            if budget == 0:
                stat = rows.min(axis=0)
            else:
                stat = np.partition(rows, budget, axis=0)[budget]
            b_min = stat if b_min is None else np.minimum(b_min, stat)
        if b_min is None:
            a, b = base.a_ineq, base.b_ineq
        else:
            a = np.vstack([base.a_ineq, shared])
            b = np.concatenate([base.b_ineq, b_min])
        return LinearSystem(a, b, base.a_eq, base.b_eq)
    parts_a = [base.a_ineq] + [problem.blocks[j][0] for j in enforced]
    parts_b = [base.b_ineq] + [problem.blocks[j][1] for j in enforced]
    return LinearSystem(np.vstack(parts_a), np.concatenate(parts_b),
                        base.a_eq, base.b_eq)


def _block_violation(problem, x, j):
    a, b = problem.blocks[j]
    if not b.size:
        return 0.0
    return float(np.max(a @ x - b))


def _scenario_dual_weights(problem, enforced, shared, result):
    """Aggregate dual weight per enforced scenario at a node optimum.

    With a shared LHS the node carries one row set; each row's dual is
    attributed to the enforced scenario attaining that row's minimum RHS
    (lowest index on ties).
    """
    weights = {j: 0.0 for j in enforced}
    n_base = problem.base.a_ineq.shape[0]
    if shared is not None:
        duals = result.duals_ineq[n_base:]
        if not enforced:
            return weights
        b_stack = np.stack([problem.blocks[j][1] for j in enforced])
        owner = np.argmin(b_stack, axis=0)  # first minimum = lowest index
        for row, lam in enumerate(duals):
            if lam > 0.0:
                weights[enforced[int(owner[row])]] += float(lam)
        return weights
    offset = n_base
    for j in enforced:
        rows = problem.blocks[j][1].size
        weights[j] = float(np.sum(result.duals_ineq[offset:offset + rows]))
        offset += rows
    return weights


def greedy_incumbent(problem, options=None, *, _all_enforced=None):
    """Feasible warm start: repeatedly relax the enforced scenario with the
    largest aggregate dual weight, S - k times.

    Returns (x, z, value) or None when even the all-enforced problem fails.
    _all_enforced lets the caller pass an already-solved all-enforced
    result so the work is not repeated.
    """
    options = options or SolverOptions()
    shared = problem.shared_lhs()
    s = problem.n_scenarios
    enforced = list(range(s))
    best = None
    result = _all_enforced
    if result is None:
        result = qp_solve(problem.cost,
                          _node_system(problem, enforced, shared))
    if result.status != OPTIMAL:
        return None
    best = (result.x, enforced.copy(), result.value)
    for _ in range(s - problem.k):
        weights = _scenario_dual_weights(problem, enforced, shared, result)
        # max weight, ties to the lowest scenario index
        drop = max(enforced, key=lambda j: (weights[j], -j))
        trial = [j for j in enforced if j != drop]
        # dropping a block only loosens the system, so the current point
        # stays feasible and warm-starts the trial
        trial_result = qp_solve(problem.cost,
                                _node_system(problem, trial, shared),
                                warm_start=result.x)
        if trial_result.status != OPTIMAL:
            break  # fall back to the last feasible iterate
        enforced, result = trial, trial_result
        best = (result.x, enforced.copy(), result.value)
    x, enforced, value = best
    z = np.ones(s, dtype=int)
    z[enforced] = 0
    return x, z, value


def solve_selection(problem, options=None):
    """Globally optimal k-of-S selection by best-bound branch-and-bound.

    Nodes are (Enforced, Relaxed, Undecided) partitions bounded by the QP
    of _node_system: enforced row minima capped per row by the (r+1)-th
    smallest undecided RHS for the remaining relaxation budget r — a valid
    relaxation of every completion that tightens monotonically down the
    tree.  Children inherit the parent bound as a placeholder and are
    solved lazily when popped, re-queued if the refined bound is no longer
    best.  A node whose relaxation already satisfies enough Undecided
    blocks to reach k yields an incumbent and is fathomed by optimality.
    Branching takes the Undecided scenario with the largest violation at
    the node solution (lowest index on ties); children enforce or relax
    it.  Every node QP warm-starts from the all-enforced optimum, which
    stays feasible under any aggregation.
    """
    options = options or SolverOptions()
    t0 = time.perf_counter()
    s = problem.n_scenarios
    shared = problem.shared_lhs()
    feas_tol = options.feas_tol
    stats = {"nodes": 0, "qp": 0}
    anchor = {"x": None}  # all-enforced optimum: feasible for every node
    budget = s - problem.k
    b_stack = (np.stack([b for _, b in problem.blocks])
               if shared is not None else None)

    def finish(status, x=None, z=None, value=np.nan, enforced=(), gap=np.nan,
               duals=None):
        return SelectionSolution(
            x_star=x, z_star=z, objective=value, enforced_set=tuple(enforced),
            status=status, nodes=stats["nodes"], qp_count=stats["qp"],
            wall_time=time.perf_counter() - t0, gap=gap,
            duals_ineq=duals[0] if duals else None,
            duals_eq=duals[1] if duals else None)

    def solve_node(enforced, undecided=None, relaxed_count=0):
        stats["qp"] += 1
        system = _node_system(
            problem, sorted(enforced), shared, undecided=undecided,
            budget=budget - relaxed_count, b_stack=b_stack)
        return qp_solve(problem.cost, system, warm_start=anchor["x"])

    if problem.k == s:
        result = solve_node(list(range(s)))
        if result.status != OPTIMAL:
            return finish(result.status)
        z = np.zeros(s, dtype=int)
        return finish(OPTIMAL, result.x, z, result.value, range(s), 0.0,
                      (result.duals_ineq, result.duals_eq))

    incumbent = None  # (value, x, z, enforced)
    all_enforced = solve_node(range(s))
    if all_enforced.status == OPTIMAL:
        anchor["x"] = all_enforced.x
    warm = greedy_incumbent(problem, options, _all_enforced=all_enforced)
    if warm is not None:
        x_w, z_w, v_w = warm
        incumbent = (v_w, x_w, z_w, tuple(np.flatnonzero(z_w == 0)))

    counter = 0
    heap = []

    def push(bound, enforced, relaxed, result):
        nonlocal counter
        counter += 1
        heapq.heappush(heap, (bound, counter, enforced, relaxed, result))

    push(-np.inf, frozenset(), frozenset(), None)

    def prune_eps(v):
        return 1e-9 * max(1.0, abs(v)) + options.rel_gap * abs(v)

    limit_hit = False
    while heap:
        bound, _, enforced, relaxed, result = heapq.heappop(heap)
        if incumbent is not None and bound >= incumbent[0] - prune_eps(incumbent[0]):
            # Best-bound order: every remaining node is at least as bad.
            break
        if (options.node_limit is not None
                and stats["nodes"] >= options.node_limit) or \
           (options.time_limit is not None
                and time.perf_counter() - t0 > options.time_limit):
            push(bound, enforced, relaxed, result)  # keep it in the gap
            limit_hit = True
            break

        undecided = [j for j in range(s)
                     if j not in enforced and j not in relaxed]
        if result is None:
            stats["nodes"] += 1
            result = solve_node(enforced, undecided, len(relaxed))
            if result.status == INFEASIBLE:
                # The aggregation relaxes every completion of this node, so
                # all of them are infeasible too.
                continue
            if result.status == NUMERICAL_FAILURE:
                return finish(NUMERICAL_FAILURE)
            if result.status == OPTIMAL:
                bound = result.value
                if incumbent is not None and \
                        bound >= incumbent[0] - prune_eps(incumbent[0]):
                    continue
                if heap and bound > heap[0][0] + 1e-12:
                    # No longer the best bound: re-queue, solved.
                    push(bound, enforced, relaxed, result)
                    continue
            else:  # UNBOUNDED relaxation: keep exploring below
                bound = -np.inf

        if not undecided and result.status != OPTIMAL:
            # Fully decided node (>= k enforced) whose QP had no finite
            # optimum: the master itself is unbounded on this selection.
            return finish(result.status)
        if result.status == OPTIMAL:
            x = result.x
            if shared is not None and undecided:
                viol = (shared @ x)[None, :] - b_stack[undecided]
                viol = viol.max(axis=1) if viol.size else np.zeros(
                    len(undecided))
                violations = dict(zip(undecided, viol))
            else:
                violations = {j: _block_violation(problem, x, j)
                              for j in undecided}
            satisfied = [j for j in undecided if violations[j] <= feas_tol]
            if len(enforced) + len(satisfied) >= problem.k:
                if incumbent is None or result.value < incumbent[0] - 1e-12 * max(
                        1.0, abs(incumbent[0])):
                    keep = sorted(enforced | set(satisfied))
                    z = np.ones(s, dtype=int)
                    z[keep] = 0
                    incumbent = (result.value, x, z, tuple(keep))
                continue  # fathomed by optimality at this node
            branch = max(undecided,
                         key=lambda j: (violations[j], -j))
        else:
            # Unbounded node relaxation: no point to branch on; take the
            # lowest-index undecided scenario.
            branch = undecided[0]

        # Children inherit this node's bound and are solved at pop.
        push(bound, frozenset(enforced | {branch}), relaxed, None)
        child_rel = frozenset(relaxed | {branch})
        if s - len(child_rel) >= problem.k:
            push(bound, enforced, child_rel, None)

    if incumbent is None:
        return finish(GAP_LIMIT if limit_hit else INFEASIBLE)
    value, x, z, keep = incumbent
    gap = 0.0
    status = OPTIMAL
    if limit_hit or (heap and heap[0][0] < value - prune_eps(value)):
        remaining = min((entry[0] for entry in heap), default=value)
        gap = max(0.0, (value - remaining) / max(1.0, abs(value)))
        status = GAP_LIMIT if gap > options.rel_gap + 1e-15 else OPTIMAL
    return finish(status, x, z, value, keep, gap)


def build_selection_from_ccopf(cc, xi, cost, k, *, equalities=None):
    """Selection instance from chance-constraint rows and scenario errors.

    cc provides affine row values base_lin @ x + base_const with error
    sensitivity sens and bounds rhs; scenario block j is
    base_lin @ x <= rhs - base_const - sens @ xi_j.  The base system is the
    deterministic block (xi = 0) plus the supplied equalities (power
    balance).  Rows with infinite bounds are dropped once, here.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    finite = np.isfinite(cc.rhs)
    a = np.ascontiguousarray(cc.base_lin[finite])
    r0 = cc.rhs[finite] - cc.base_const[finite]
    sens = cc.sens[finite]
    if equalities is not None:
        a_eq, b_eq = equalities
    else:
        a_eq, b_eq = None, None
    base = LinearSystem.make(a_ineq=a, b_ineq=r0, a_eq=a_eq, b_eq=b_eq,
                             n=cost.n)
    blocks = tuple((a, r0 - sens @ xi_j) for xi_j in xi)
    return SelectionProblem(cost=cost, base=base, blocks=blocks, k=k)
