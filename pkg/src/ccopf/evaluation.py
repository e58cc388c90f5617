"""Out-of-sample evaluation, robust baseline, and k-sweep orchestration.

A dispatch is judged on fresh scenarios exactly the way it was optimized:
every chance-constraint row is re-evaluated per scenario and the *joint*
event — any row exceeding its bound by more than 1e-7 — is counted.  The
robust baseline enforces every training scenario (zero relaxation budget);
relative-entropy solutions at any k on the same training set can only be
cheaper, and the deterministic dispatch cheaper still, so the three
objectives nest.  Sweeps export one CSV row per k plus a three-panel SVG.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from . import svg_plot
from .ambiguity import AmbiguityParams
from .dc_model import (
    assemble_cc_system,
    balance_equality,
    make_cost,
    solve_deterministic_dc,
)
from .scenario_mip import (
    INFEASIBLE,
    OPTIMAL,
    LinearSystem,
    SelectionSolution,
    SolverOptions,
    build_selection_from_ccopf,
    qp_solve,
    solve_selection,
)

VIOLATION_TOL = 1e-7

CSV_COLUMNS = ("k", "epsilon_star", "bound", "cost", "cost_vs_ro",
               "joint_violation", "time_s", "status")


@dataclass
class EvalReport:
    """Out-of-sample scorecard for one solved dispatch."""

    joint_violation_rate: float
    per_row_rates: np.ndarray
    row_names: tuple
    cost: float = np.nan
    cost_vs_ro: float = np.nan
    solve_stats: dict | None = None
    seeds: dict | None = None
    config_digest: str = ""

    def __post_init__(self):
        assert -1e-12 <= self.joint_violation_rate <= 1 + 1e-12
        # A joint violation happens whenever any row violates, so the joint
        # rate dominates each row's rate and the union bound caps it.
        if self.per_row_rates.size:
            assert self.joint_violation_rate >= np.max(
                self.per_row_rates) - 1e-12
            assert self.joint_violation_rate <= np.sum(
                self.per_row_rates) + 1e-12


class DcEvaluator:
    """Exact row evaluation of a dispatch over a scenario batch."""

    def __init__(self, cc):
        self.cc = cc
        self.finite = np.isfinite(cc.rhs)
        self.row_names = tuple(
            n for n, f in zip(cc.row_names, self.finite) if f)

    def check(self, dispatch, xi):
        """(joint violation mask over scenarios, per-row violation rates)."""
        margins = self.cc.margins(np.asarray(dispatch, dtype=float), xi)
        margins = np.atleast_2d(margins)[:, self.finite]
        violated = margins < -VIOLATION_TOL
        return violated.any(axis=1), violated.mean(axis=0)


def violation_frequency(solution, test_set, model, **report_fields):
    """Score a solution on a test set through a model evaluator.

    model is any object with check(solution, xi) -> (joint mask, row rates)
    and row_names; the DC evaluator checks rows exactly, the AC one re-runs
    the nonlinear response per scenario (failures count as violations).
    """
    joint, per_row = model.check(solution, test_set.xi)
    return EvalReport(
        joint_violation_rate=float(np.mean(joint)),
        per_row_rates=per_row,
        row_names=model.row_names,
        **report_fields,
    )


def solve_dc_selection(case, fleet, training_set, k, *, cc=None,
                       options=None, include_slack_rows=False):
    """End-to-end k-of-S dispatch on the linearized model.

    Returns (solution, cc) so callers can evaluate the same row system
    out of sample.
    """
    if cc is None:
        cc = assemble_cc_system(case, fleet,
                                include_slack_rows=include_slack_rows)
    problem = build_selection_from_ccopf(
        cc, training_set.xi, make_cost(case), k,
        equalities=balance_equality(case, fleet))
    return solve_selection(problem, options), cc


def ro_baseline(case, fleet, training_set, *, cc=None,
                include_slack_rows=False):
    """Robust dispatch: every training scenario enforced (k = S).

    Solved as the single QP over all blocks; infeasibility names the
    scenarios owning the conflicting aggregated rows.
    """
    if cc is None:
        cc = assemble_cc_system(case, fleet,
                                include_slack_rows=include_slack_rows)
    s = training_set.s
    problem = build_selection_from_ccopf(
        cc, training_set.xi, make_cost(case), s,
        equalities=balance_equality(case, fleet))
    shared = problem.shared_lhs()
    b_stack = np.stack([b for _, b in problem.blocks])
    b_min = b_stack.min(axis=0)
    system = LinearSystem(
        np.vstack([problem.base.a_ineq, shared]),
        np.concatenate([problem.base.b_ineq, b_min]),
        problem.base.a_eq, problem.base.b_eq)
    t0 = time.perf_counter()
    result = qp_solve(problem.cost, system)
    if result.status == INFEASIBLE:
        detail = ""
        if result.certificate is not None:
            y = result.certificate["y_ineq"]
            n_base = problem.base.a_ineq.shape[0]
            owners = np.argmin(b_stack, axis=0)
            weights = np.zeros(s)
            for row, w in enumerate(y[n_base:]):
                if w > 0:
                    weights[owners[row]] += w
            offenders = np.flatnonzero(weights > 0)
            detail = (" scenarios driving the conflict: "
                      f"{offenders.tolist()}")
        raise ValueError("robust baseline infeasible:" + detail)
    if result.status != OPTIMAL:
        raise RuntimeError(f"robust baseline failed: {result.status} "
                           f"{result.message}")
    return SelectionSolution(
        x_star=result.x, z_star=np.zeros(s, dtype=int),
        objective=result.value, enforced_set=tuple(range(s)),
        status=OPTIMAL, nodes=0, qp_count=1,
        wall_time=time.perf_counter() - t0, gap=0.0,
        duals_ineq=result.duals_ineq, duals_eq=result.duals_eq)


def config_digest(**parts):
    """Stable digest of the inputs that determine a result file."""
    canon = ";".join(f"{k}={parts[k]!r}" for k in sorted(parts))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def sweep_k(case, fleet, training_set, test_set, k_values, model="dc", *,
            ro_set=None, options=None, include_slack_rows=False,
            record_time=True, csv_path=None, svg_path=None,
            case_name="case"):
    """Solve the k-of-S problem for each k and score it out of sample.

    Rows are emitted in ascending epsilon* (descending k).  ro_set chooses
    the normalization baseline: by default the training set itself; pass a
    larger independent set to normalize against the sampled robust proxy.
    With record_time=False the time column is written as zero so repeated
    runs produce byte-identical files.
    """
    if model not in ("dc", "ac"):
        raise ValueError(f"unknown model {model!r}")
    if model == "ac":
        from .ac_model import AcSweepDriver
        driver = AcSweepDriver(case, fleet, options=options)
    else:
        driver = DcSweepDriver(case, fleet,
                               include_slack_rows=include_slack_rows,
                               options=options)
    k_values = sorted(set(int(k) for k in k_values))
    s = training_set.s
    if not k_values:
        raise ValueError("empty k list")
    if k_values[0] < 1 or k_values[-1] > s:
        raise ValueError(f"k values must lie in [1, {s}]")

    baseline_set = ro_set if ro_set is not None else training_set
    ro_sol = driver.robust(baseline_set)
    rows = []
    for k in k_values:
        params = AmbiguityParams.from_k(k, s)
        row = {"k": k, "epsilon_star": params.epsilon,
               "bound": params.bound, "cost": np.nan, "cost_vs_ro": np.nan,
               "joint_violation": np.nan, "time_s": 0.0, "status": ""}
        try:
            sol = driver.solve(training_set, k)
        except Exception as exc:  # row-level failure, sweep continues
            row["status"] = f"ERROR:{type(exc).__name__}"
            rows.append(row)
            continue
        row["status"] = sol.status
        if record_time:
            row["time_s"] = sol.wall_time
        if sol.status == OPTIMAL:
            report = violation_frequency(sol.x_star, test_set,
                                         driver.evaluator(sol))
            row["cost"] = sol.objective
            row["cost_vs_ro"] = sol.objective / ro_sol.objective
            row["joint_violation"] = report.joint_violation_rate
        rows.append(row)
    rows.sort(key=lambda r: r["epsilon_star"])

    digest = config_digest(
        case=case_name, s=s, k_values=tuple(k_values), model=model,
        train_digest=training_set.spec_digest, train_seed=training_set.seed,
        test_digest=test_set.spec_digest, test_seed=test_set.seed,
        ro="training" if ro_set is None else "external",
        include_slack_rows=include_slack_rows)
    if csv_path is not None:
        write_sweep_csv(rows, csv_path, digest)
    if svg_path is not None:
        write_sweep_svg(rows, svg_path, case_name)
    return rows, digest


class DcSweepDriver:
    """Per-k solve plus evaluation hooks on the linearized model."""

    def __init__(self, case, fleet, *, include_slack_rows=False,
                 options=None):
        self.case = case
        self.fleet = fleet
        self.options = options or SolverOptions()
        self.cc = assemble_cc_system(case, fleet,
                                     include_slack_rows=include_slack_rows)
        self._eval = DcEvaluator(self.cc)

    def solve(self, training_set, k):
        sol, _ = solve_dc_selection(self.case, self.fleet, training_set, k,
                                    cc=self.cc, options=self.options)
        return sol

    def robust(self, baseline_set):
        return ro_baseline(self.case, self.fleet, baseline_set, cc=self.cc)

    def evaluator(self, solution):
        return self._eval


def write_sweep_csv(rows, path, digest):
    lines = [f"# config={digest}", ",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join([
            str(row["k"]),
            f"{row['epsilon_star']:.17g}",
            f"{row['bound']:.17g}",
            f"{row['cost']:.17g}",
            f"{row['cost_vs_ro']:.17g}",
            f"{row['joint_violation']:.17g}",
            f"{row['time_s']:.6f}",
            row["status"],
        ]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sweep_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("k,"):
                continue
            cells = line.split(",")
            rows.append({
                "k": int(cells[0]),
                "epsilon_star": float(cells[1]),
                "bound": float(cells[2]),
                "cost": float(cells[3]),
                "cost_vs_ro": float(cells[4]),
                "joint_violation": float(cells[5]),
                "time_s": float(cells[6]),
                "status": cells[7],
            })
    return rows


def write_sweep_svg(rows, path, case_name):
    ok = [r for r in rows if r["status"] == OPTIMAL]
    eps = [r["epsilon_star"] for r in ok]
    Panel = svg_plot.Panel
    p1 = Panel("Joint satisfaction", "epsilon*", "1 - violation rate")
    p1.add("observed", eps, [1.0 - r["joint_violation"] for r in ok])
    p1.add("1 - eps", eps, [1.0 - e for e in eps], dashed=True)
    p2 = Panel("Cost vs robust", "epsilon*", "cost / RO cost")
    p2.add("", eps, [r["cost_vs_ro"] for r in ok])
    p3 = Panel("Solve time", "epsilon*", "seconds")
    p3.add("", eps, [r["time_s"] for r in ok])
    svg_plot.render([p1, p2, p3], path,
                    figure_title=f"k-sweep on {case_name}")
