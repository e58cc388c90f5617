"""Linearized network model: PTDF, affine forecast-error response, and the
chance-constraint row system.

Everything downstream of this module sees the grid as one affine map: for
dispatch x (generator outputs, p.u.) and forecast-error vector xi (one entry
per renewable bus), every monitored quantity is

    row_values(x, xi) = base_lin @ x + base_const + sens @ xi <= rhs.

The response model: errors enter at their buses, the aggregate imbalance
sum(xi) is absorbed by generators in proportion to their participation
factors, so net bus injections shift by M @ xi with M = E_vre - omega 1'
(column j of E_vre picks renewable bus j).  Generator outputs shift by
-omega_g * sum(xi) and branch flows by (Phi M) @ xi.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .case_io import build_fleet
from .scenario_mip import (
    INFEASIBLE,
    OPTIMAL,
    LinearSystem,
    QuadraticCost,
    qp_solve,
)


@dataclass(frozen=True, eq=False)
class PtdfMatrix:
    """Branch-flow sensitivities: flows = phi @ injections for balanced
    injection vectors.  The slack column is identically zero."""

    phi: np.ndarray  # (n_branch, n_bus)
    slack: int

    @property
    def n_branch(self):
        return self.phi.shape[0]


def incidence_matrix(case):
    """Oriented branch-bus incidence: +1 at the from bus, -1 at the to bus."""
    a = np.zeros((case.n_branch, case.n_bus))
    rows = np.arange(case.n_branch)
    a[rows, case.br_from] = 1.0
    a[rows, case.br_to] = -1.0
    return a


def build_ptdf(case):
    """Power transfer distribution factors from series reactances.

    Factorizes the reduced nodal susceptance matrix once (Cholesky) and
    back-solves for all branches; a singular reduction means the network
    is not connected through in-service branches.
    """
    a = incidence_matrix(case)
    b_series = 1.0 / case.br_x
    b_bus = a.T @ (b_series[:, None] * a)
    keep = np.arange(case.n_bus) != case.slack
    try:
        factor = cho_factor(b_bus[np.ix_(keep, keep)])
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "susceptance matrix is singular: the network is not connected "
            "through in-service branches") from exc
    weighted = b_series[:, None] * a[:, keep]  # (L, n-1)
    phi = np.zeros((case.n_branch, case.n_bus))
    phi[:, keep] = cho_solve(factor, weighted.T).T
    phi.setflags(write=False)
    return PtdfMatrix(phi=phi, slack=case.slack)


@dataclass(frozen=True, eq=False)
class DcResponse:
    """Affine response of injections, generators, and flows to errors."""

    m_matrix: np.ndarray  # (n_bus, n_vre): injection shift per unit error
    gen_sens: np.ndarray  # (n_gen, n_vre): output shift per unit error
    flow_sens: np.ndarray  # (n_branch, n_vre)


def dc_response(case, fleet, ptdf=None):
    """Sensitivities of bus injections, generator outputs, and flows to
    the forecast-error vector under proportional balancing."""
    if ptdf is None:
        ptdf = build_ptdf(case)
    n_vre = fleet.n_vre
    m = -np.tile(fleet.participation[:, None], (1, n_vre))
    m[fleet.vre_buses, np.arange(n_vre)] += 1.0
    gen_sens = -np.outer(fleet.gen_participation, np.ones(n_vre))
    return DcResponse(m_matrix=m, gen_sens=gen_sens,
                      flow_sens=ptdf.phi @ m)


@dataclass(frozen=True, eq=False)
class CcSystem:
    """Stacked one-sided rows base_lin @ x + base_const + sens @ xi <= rhs.

    Row order: generator upper bounds, generator lower bounds (negated),
    branch upper limits, branch lower limits (negated).  Rows with an
    infinite bound are kept so indices line up with the network; consumers
    that build optimization problems drop them.
    """

    row_names: tuple
    base_lin: np.ndarray  # (n_rows, n_gen)
    base_const: np.ndarray
    sens: np.ndarray  # (n_rows, n_vre)
    rhs: np.ndarray

    @property
    def n_rows(self):
        return self.rhs.size

    def row_values(self, x, xi):
        """Row left-hand sides at a dispatch and an error vector (or a
        batch of error vectors, one per row of xi)."""
        base = self.base_lin @ x + self.base_const
        xi = np.asarray(xi, dtype=float)
        if xi.ndim == 1:
            return base + self.sens @ xi
        return base[None, :] + xi @ self.sens.T

    def margins(self, x, xi):
        """rhs - row_values; negative entries are violations."""
        return self.rhs - self.row_values(x, xi)


def assemble_cc_system(case, fleet, ptdf=None, *, include_slack_rows=False):
    """Chance-constraint rows for generator limits and branch limits.

    Generators at the slack bus are left out by default: the balancing
    reserve is assumed to live there, and the columns would otherwise make
    every instance infeasible whenever the slack machine is at its limit
    in the nominal dispatch.  Pass include_slack_rows=True to monitor them
    anyway (diagnostics, sensitivity studies).
    """
    if ptdf is None:
        ptdf = build_ptdf(case)
    response = dc_response(case, fleet, ptdf)
    n_gen, n_vre = case.n_gen, fleet.n_vre

    cg = np.zeros((case.n_bus, n_gen))
    cg[case.gen_bus, np.arange(n_gen)] = 1.0
    inj_const = -case.p_load.copy()
    np.add.at(inj_const, fleet.vre_buses, fleet.forecasts)
    flow_lin = ptdf.phi @ cg
    flow_const = ptdf.phi @ inj_const

    slack_mask = case.slack_gen_mask()
    gens = [g for g in range(n_gen)
            if include_slack_rows or not slack_mask[g]]

    names, lin, const, sens, rhs = [], [], [], [], []
    for g in gens:
        e = np.zeros(n_gen)
        e[g] = 1.0
        names.append(f"gen{g}_hi@bus{case.bus_ids[case.gen_bus[g]]}")
        lin.append(e)
        const.append(0.0)
        sens.append(response.gen_sens[g])
        rhs.append(case.p_max[g])
    for g in gens:
        e = np.zeros(n_gen)
        e[g] = -1.0
        names.append(f"gen{g}_lo@bus{case.bus_ids[case.gen_bus[g]]}")
        lin.append(e)
        const.append(0.0)
        sens.append(-response.gen_sens[g])
        rhs.append(-case.p_min[g])
    for sign, tag in ((1.0, "hi"), (-1.0, "lo")):
        for l in range(case.n_branch):
            names.append(
                f"flow{l}_{tag}:{case.bus_ids[case.br_from[l]]}-"
                f"{case.bus_ids[case.br_to[l]]}")
            lin.append(sign * flow_lin[l])
            const.append(sign * flow_const[l])
            sens.append(sign * response.flow_sens[l])
            rhs.append(case.br_limit[l])

    cc = CcSystem(
        row_names=tuple(names),
        base_lin=np.array(lin),
        base_const=np.array(const),
        sens=np.array(sens).reshape(len(names), n_vre),
        rhs=np.array(rhs),
    )
    for arr in (cc.base_lin, cc.base_const, cc.sens, cc.rhs):
        arr.setflags(write=False)
    return cc


def make_cost(case):
    """Dispatch cost as a standard-form quadratic, all in p.u. and $/h."""
    return QuadraticCost(h=np.diag(2.0 * case.cost_c2), g=case.cost_c1.copy(),
                         c0=float(np.sum(case.cost_c0)))


def balance_equality(case, fleet=None):
    """Single power-balance row: sum of outputs = load net of forecasts."""
    rhs = float(np.sum(case.p_load))
    if fleet is not None:
        rhs -= float(np.sum(fleet.forecasts))
    return np.ones((1, case.n_gen)), np.array([rhs])


@dataclass
class DcSolution:
    dispatch: np.ndarray | None
    cost: float
    status: str
    message: str = ""
    qp: object = None


def solve_deterministic_dc(case, fleet=None, cc=None, *,
                           include_slack_rows=False):
    """Nominal-forecast economic dispatch over the linearized network.

    Solves the cost QP subject to power balance and the chance-constraint
    rows evaluated at xi = 0 — exactly the base system the robust variants
    use, so their objectives nest: deterministic <= k-of-S <= all-S.  With
    no fleet, a zero-error fleet on the slack bus is synthesized so the
    same row assembly applies.
    """
    if fleet is None:
        fleet = _zero_forecast(build_fleet(case, [case.slack], [1.0], 0.0))
    if cc is None:
        cc = assemble_cc_system(case, fleet,
                                include_slack_rows=include_slack_rows)
    finite = np.isfinite(cc.rhs)
    a_eq, b_eq = balance_equality(case, fleet)
    system = LinearSystem.make(
        a_ineq=cc.base_lin[finite],
        b_ineq=cc.rhs[finite] - cc.base_const[finite],
        a_eq=a_eq, b_eq=b_eq)
    result = qp_solve(make_cost(case), system)
    if result.status != OPTIMAL:
        message = result.message
        if result.status == INFEASIBLE and result.certificate is not None:
            finite_names = [n for n, f in zip(cc.row_names, finite) if f]
            y = result.certificate["y_ineq"]
            worst = int(np.argmax(y))
            message = (f"no dispatch satisfies the limits; tightest "
                       f"conflicting row: {finite_names[worst]}")
        return DcSolution(dispatch=None, cost=np.nan, status=result.status,
                          message=message, qp=result)
    return DcSolution(dispatch=result.x, cost=result.value,
                      status=OPTIMAL, qp=result)


def _zero_forecast(fleet):
    forecasts = np.zeros_like(fleet.forecasts)
    forecasts.setflags(write=False)
    return replace(fleet, forecasts=forecasts)
