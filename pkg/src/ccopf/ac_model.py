"""Nonlinear AC network machinery.

Four layers, bottom up: a polar Newton-Raphson power flow over the
series-impedance branch model; a rectangular quadratic-form restatement of
the same equations used as an independent cross-check; response
sensitivities of every monitored quantity to forecast errors and to
dispatch, obtained from the implicit-function rule on the factorized
power-flow Jacobian; and an alternating loop that linearizes the monitored
quantities around the latest operating point, solves the scenario-selection
program on those rows, and re-projects onto the power-flow manifold until
the operating point settles.

Conventions: voltage magnitudes are carried squared (p.u.^2), matching the
squared bounds of the bus-voltage rows; branch flows are directed active
powers, from-side block first; the slack machine absorbs balancing power
and losses, so its rows are left out of the monitored set by default
(mirroring the DC row schema).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .ambiguity import AmbiguityParams
from .case_io import PQ, SLACK
from .dc_model import CcSystem, make_cost
from .evaluation import VIOLATION_TOL
from .scenario_mip import (
    OPTIMAL,
    LinearSystem,
    QuadraticCost,
    SolverOptions,
    build_selection_from_ccopf,
    qp_solve,
    solve_selection,
)

NEWTON_TOL = 1e-10
MAX_NEWTON_ITER = 30
MAX_STEP_HALVINGS = 5

INNER_STEP_TOL = 1e-6
MAX_INNER_PASSES = 20
OUTER_TOL = 1e-4
MAX_OUTER_ITER = 10
PROXIMAL_WEIGHT = 1e-6


class NewtonError(RuntimeError):
    """A power-flow solve failed where a solved state is required."""


class FixedPointError(RuntimeError):
    """The alternating solve did not settle; carries the distance trail."""

    def __init__(self, message, d_history=()):
        super().__init__(message)
        self.d_history = tuple(d_history)


@dataclass(frozen=True, eq=False)
class AcState:
    """Operating point (P, Q, v, theta, ell) with solve metadata.

    p/q are net bus injections (p.u.), v squared magnitudes (p.u.^2),
    theta angles (rad, slack pinned to zero), ell directed branch active
    flows stacked [from-side; to-side].  mismatch is the final inf-norm of
    the power-flow equations; solved means it is at or below the Newton
    tolerance.
    """

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    ell: np.ndarray
    solved: bool
    iterations: int
    mismatch: float
    message: str = ""


@dataclass(frozen=True, eq=False)
class _Network:
    """Dense admittance data shared by every evaluation at one case."""

    ybus: np.ndarray  # (n, n) complex
    y_series: np.ndarray  # (L,) complex branch admittances
    f: np.ndarray  # (L,) from-bus indices
    t: np.ndarray  # (L,) to-bus indices


def _network(case):
    n = case.n_bus
    y = 1.0 / (case.br_r + 1j * case.br_x)
    ybus = np.zeros((n, n), dtype=complex)
    f, t = case.br_from, case.br_to
    np.add.at(ybus, (f, f), y)
    np.add.at(ybus, (t, t), y)
    np.add.at(ybus, (f, t), -y)
    np.add.at(ybus, (t, f), -y)
    return _Network(ybus=ybus, y_series=y, f=f, t=t)


def _polar_eval(net, vmag, theta):
    """Complex voltages plus bus and directed-branch power injections."""
    v = vmag * np.exp(1j * theta)
    s_bus = v * np.conj(net.ybus @ v)
    vf, vt = v[net.f], v[net.t]
    i_from = net.y_series * (vf - vt)
    i_to = net.y_series * (vt - vf)
    s_from = vf * np.conj(i_from)
    s_to = vt * np.conj(i_to)
    return v, s_bus, s_from, s_to


def _make_state(net, vmag, theta, solved, iterations, mismatch, message=""):
    _, s_bus, s_from, s_to = _polar_eval(net, vmag, theta)
    state = AcState(
        p=s_bus.real.copy(),
        q=s_bus.imag.copy(),
        v=vmag**2,
        theta=theta.copy(),
        ell=np.concatenate([s_from.real, s_to.real]),
        solved=solved,
        iterations=iterations,
        mismatch=mismatch,
        message=message,
    )
    for arr in (state.p, state.q, state.v, state.theta, state.ell):
        arr.setflags(write=False)
    return state


def _ds_bus(net, v):
    """Partial derivatives of complex bus injections w.r.t. angles and
    magnitudes, both (n, n) complex."""
    i_bus = net.ybus @ v
    u = v / np.abs(v)
    ds_dva = 1j * v[:, None] * (np.diag(np.conj(i_bus))
                                - np.conj(net.ybus * v[None, :]))
    ds_dvm = (np.diag(u * np.conj(i_bus))
              + v[:, None] * np.conj(net.ybus * u[None, :]))
    return ds_dva, ds_dvm


def _ds_branch(net, v):
    """Partials of directed complex branch powers [from; to], (2L, n)."""
    n = v.size
    ll = net.f.size
    u = v / np.abs(v)
    rows = np.arange(ll)
    out_va = np.zeros((2 * ll, n), dtype=complex)
    out_vm = np.zeros((2 * ll, n), dtype=complex)
    for block, (a, b) in enumerate(((net.f, net.t), (net.t, net.f))):
        va_, vb_ = v[a], v[b]
        y = net.y_series
        i_dir = y * (va_ - vb_)
        base = block * ll
        # d S / d theta: own-end and far-end columns.
        out_va[base + rows, a] = 1j * (va_ * np.conj(i_dir)
                                       - np.conj(y) * np.abs(va_) ** 2)
        out_va[base + rows, b] += 1j * np.conj(y) * va_ * np.conj(vb_)
        # d S / d vmag.
        out_vm[base + rows, a] = (u[a] * np.conj(i_dir)
                                  + np.conj(y) * va_ * np.conj(u[a]))
        out_vm[base + rows, b] += -np.conj(y) * va_ * np.conj(u[b])
    return out_va, out_vm


def _bus_groups(case):
    ns = np.flatnonzero(case.bus_kind != SLACK)
    pq = np.flatnonzero(case.bus_kind == PQ)
    return ns, pq


def _pf_jacobian(net, v, ns, pq):
    ds_dva, ds_dvm = _ds_bus(net, v)
    j11 = ds_dva.real[np.ix_(ns, ns)]
    j12 = ds_dvm.real[np.ix_(ns, pq)]
    j21 = ds_dva.imag[np.ix_(pq, ns)]
    j22 = ds_dvm.imag[np.ix_(pq, pq)]
    return np.block([[j11, j12], [j21, j22]])


def pf_solve(case, p_set, q_set, *, v_set2=None, theta0=None, vmag0=None,
             tol=NEWTON_TOL, max_iter=MAX_NEWTON_ITER):
    """Polar Newton-Raphson power flow.

    p_set / q_set are target net bus injections; the active targets bind
    at every non-slack bus, the reactive ones at PQ buses.  v_set2 gives
    squared magnitude setpoints for PV and slack buses (defaults to the
    case profile).  The start is flat (angles zero, unknown magnitudes
    one) unless warm-start vectors are supplied.  Steps are halved up to
    five times whenever the mismatch norm grows or a magnitude would leave
    the positive domain; non-convergence is reported on the returned
    state, never raised.
    """
    net = _network(case)
    n = case.n_bus
    p_set = np.asarray(p_set, dtype=float)
    q_set = np.asarray(q_set, dtype=float)
    if p_set.shape != (n,) or q_set.shape != (n,):
        raise ValueError("setpoint vectors must have one entry per bus")
    v_set2 = case.v_set2 if v_set2 is None else np.asarray(v_set2, float)
    if np.any(v_set2 <= 0):
        raise ValueError("squared voltage setpoints must be positive")
    ns, pq = _bus_groups(case)
    pinned = np.setdiff1d(np.arange(n), pq)

    theta = np.zeros(n) if theta0 is None else np.array(theta0, float)
    vmag = np.ones(n) if vmag0 is None else np.array(vmag0, float)
    theta[case.slack] = 0.0
    vmag[pinned] = np.sqrt(v_set2[pinned])

    def mismatch(vm, va):
        _, s_bus, _, _ = _polar_eval(net, vm, va)
        return np.concatenate([s_bus.real[ns] - p_set[ns],
                               s_bus.imag[pq] - q_set[pq]])

    f_val = mismatch(vmag, theta)
    norm = float(np.abs(f_val).max()) if f_val.size else 0.0
    iterations = 0
    message = ""
    for _ in range(max_iter):
        if norm <= tol:
            break
        v = vmag * np.exp(1j * theta)
        jac = _pf_jacobian(net, v, ns, pq)
        try:
            du = np.linalg.solve(jac, -f_val)
        except np.linalg.LinAlgError:
            message = f"singular power-flow system (mismatch {norm:.3e})"
            break
        alpha = 1.0
        accepted = False
        for halving in range(MAX_STEP_HALVINGS + 1):
            theta_new = theta.copy()
            vmag_new = vmag.copy()
            theta_new[ns] += alpha * du[:ns.size]
            vmag_new[pq] += alpha * du[ns.size:]
            if np.all(vmag_new[pq] > 0):
                f_new = mismatch(vmag_new, theta_new)
                norm_new = float(np.abs(f_new).max())
                if norm_new < norm or halving == MAX_STEP_HALVINGS:
                    theta, vmag = theta_new, vmag_new
                    f_val, norm = f_new, norm_new
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            message = f"step rejected at mismatch {norm:.3e}"
            break
        iterations += 1
    solved = norm <= tol
    if not solved and not message:
        message = (f"no convergence in {max_iter} iterations "
                   f"(mismatch {norm:.3e})")
    return _make_state(net, vmag, theta, solved, iterations, norm, message)


def state_at(case, vmag, theta):
    """Consistent operating point synthesized from given voltages.

    All power quantities are evaluated from (vmag, theta); the state lies
    on the power-flow manifold by construction but is not marked solved
    (it answers to no setpoints).
    """
    vmag = np.asarray(vmag, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(vmag <= 0):
        raise ValueError("voltage magnitudes must be positive")
    return _make_state(_network(case), vmag, theta, False, 0, np.inf,
                       "synthesized from voltages")


def _require_solved(state, what):
    if not state.solved:
        raise NewtonError(f"{what}: {state.message}")
    return state


def injection_setpoints(case, fleet, dispatch):
    """Net bus injection targets for a dispatch at zero forecast error."""
    dispatch = np.asarray(dispatch, dtype=float)
    p_set = -case.p_load.copy()
    np.add.at(p_set, case.gen_bus, dispatch)
    p_set[fleet.vre_buses] += fleet.forecasts
    q_set = -case.q_load.copy()
    return p_set, q_set


def solve_operating_point(case, fleet, dispatch, **pf_kwargs):
    """Power flow at a dispatch with zero forecast error."""
    p_set, q_set = injection_setpoints(case, fleet, dispatch)
    return pf_solve(case, p_set, q_set, **pf_kwargs)


def respond(case, fleet, state, xi):
    """Re-solve the network with a forecast-error vector applied.

    Active targets at every non-slack bus shift by the direct error at
    that bus minus its participation share of the total error; reactive
    targets shift by gamma * xi at PQ-typed error buses (at PV-typed ones
    the local machine absorbs the reactive swing, which only moves its own
    output accounting).  Magnitudes stay pinned at PV and slack; Newton
    starts from the given state.  Failures are reported on the returned
    state so callers can score the scenario accordingly.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (fleet.n_vre,):
        raise ValueError("error vector length must match the fleet")
    p_set = state.p.copy()
    q_set = state.q.copy()
    p_set -= fleet.participation * xi.sum()
    p_set[fleet.vre_buses] += xi
    at_pq = case.bus_kind[fleet.vre_buses] == PQ
    q_set[fleet.vre_buses[at_pq]] += fleet.gamma * xi[at_pq]
    return pf_solve(case, p_set, q_set, v_set2=state.v,
                    theta0=state.theta, vmag0=np.sqrt(state.v))


# --- quadratic-form cross-check -------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadraticFormModel:
    """Rectangular-coordinate quadratic forms of every state quantity.

    With X = [e; f] the stacked real/imaginary bus voltages, active
    injections are X' y_p[k] X, reactive X' y_q[k] X, squared magnitudes
    X' m_v[k] X, and directed branch flows X' y_br[row] X.  Dense (one
    (2n, 2n) matrix per quantity), intended as a reference model for small
    networks.
    """

    y_p: np.ndarray
    y_q: np.ndarray
    m_v: np.ndarray
    y_br: np.ndarray


def _re_form(h):
    """Symmetric 2n-form of Re{V^H h V} on X = [e; f]."""
    q = np.block([[h.real, -h.imag], [h.imag, h.real]])
    return 0.5 * (q + q.T)


def _im_form(h):
    """Symmetric 2n-form of Im{V^H h V} on X = [e; f]."""
    q = np.block([[h.imag, h.real], [-h.real, h.imag]])
    return 0.5 * (q + q.T)


def build_quadratic_model(case):
    net = _network(case)
    n = case.n_bus
    ll = net.f.size
    y_p = np.empty((n, 2 * n, 2 * n))
    y_q = np.empty((n, 2 * n, 2 * n))
    m_v = np.empty((n, 2 * n, 2 * n))
    for k in range(n):
        h = np.zeros((n, n), dtype=complex)
        h[:, k] = np.conj(net.ybus[k, :])
        y_p[k] = _re_form(h)
        y_q[k] = _im_form(h)
        sel = np.zeros((n, n))
        sel[k, k] = 1.0
        m_v[k] = _re_form(sel.astype(complex))
    y_br = np.empty((2 * ll, 2 * n, 2 * n))
    for row in range(2 * ll):
        l = row % ll
        a, b = ((net.f[l], net.t[l]) if row < ll
                else (net.t[l], net.f[l]))
        h = np.zeros((n, n), dtype=complex)
        h[a, a] = np.conj(net.y_series[l])
        h[b, a] = -np.conj(net.y_series[l])
        y_br[row] = _re_form(h)
    return QuadraticFormModel(y_p=y_p, y_q=y_q, m_v=m_v, y_br=y_br)


def state_x(state):
    """Rectangular voltage vector [e; f] of a state."""
    vmag = np.sqrt(state.v)
    return np.concatenate([vmag * np.cos(state.theta),
                           vmag * np.sin(state.theta)])


def quadratic_residuals(model, state):
    """Quadratic-form values minus the state's stored quantities.

    Stacked [active; reactive; squared magnitude; directed flows]; zero
    exactly when the state is internally consistent.
    """
    x = state_x(state)
    p_form = np.einsum("i,rij,j->r", x, model.y_p, x)
    q_form = np.einsum("i,rij,j->r", x, model.y_q, x)
    v_form = np.einsum("i,rij,j->r", x, model.m_v, x)
    l_form = np.einsum("i,rij,j->r", x, model.y_br, x)
    return np.concatenate([p_form - state.p, q_form - state.q,
                           v_form - state.v, l_form - state.ell])


# --- monitored quantities and their sensitivities -------------------------


@dataclass(frozen=True, eq=False)
class AcRowSet:
    """Monitored quantities with two-sided bounds.

    kinds: 'pgen' (machine active output, index = generator), 'qbus'
    (aggregate machine reactive output at a generator bus, index = bus),
    'v' (squared magnitude at a PQ bus, index = bus), 'flow' (directed
    branch active power, index = row into the stacked [from; to] flows,
    upper bound only).
    """

    kinds: tuple
    indices: tuple
    names: tuple
    lo: np.ndarray
    hi: np.ndarray

    @property
    def n_rows(self):
        return len(self.kinds)


def ac_row_set(case, fleet, *, include_slack_rows=False):
    """The default monitored set: non-slack machine P, per-gen-bus
    aggregate machine Q, PQ-bus squared voltages, directed flows.

    Slack-machine rows (P and Q) are the balancing reserve and enter only
    with include_slack_rows=True, mirroring the DC schema.
    """
    kinds, indices, names = [], [], []
    lo, hi = [], []
    slack_mask = case.slack_gen_mask()
    for g in range(case.n_gen):
        if slack_mask[g] and not include_slack_rows:
            continue
        kinds.append("pgen")
        indices.append(g)
        names.append(f"gen{g}@bus{case.bus_ids[case.gen_bus[g]]}")
        lo.append(case.p_min[g])
        hi.append(case.p_max[g])
    for b in sorted(set(int(b) for b in case.gen_bus)):
        if case.bus_kind[b] == PQ:
            raise ValueError(
                f"generator at PQ bus {case.bus_ids[b]} is not supported "
                "by the nonlinear model (bus must hold voltage)")
        if b == case.slack and not include_slack_rows:
            continue
        at_b = case.gen_bus == b
        kinds.append("qbus")
        indices.append(b)
        names.append(f"qgen@bus{case.bus_ids[b]}")
        lo.append(float(case.q_min[at_b].sum()))
        hi.append(float(case.q_max[at_b].sum()))
    for b in np.flatnonzero(case.bus_kind == PQ):
        kinds.append("v")
        indices.append(int(b))
        names.append(f"v@bus{case.bus_ids[b]}")
        lo.append(case.v_min2[b])
        hi.append(case.v_max2[b])
    for row in range(2 * case.n_branch):
        l = row % case.n_branch
        tag = "fwd" if row < case.n_branch else "rev"
        names.append(f"flow{l}_{tag}:{case.bus_ids[case.br_from[l]]}-"
                     f"{case.bus_ids[case.br_to[l]]}")
        kinds.append("flow")
        indices.append(row)
        lo.append(-np.inf)
        hi.append(case.br_limit[l])
    rows = AcRowSet(kinds=tuple(kinds), indices=tuple(indices),
                    names=tuple(names), lo=np.array(lo), hi=np.array(hi))
    rows.lo.setflags(write=False)
    rows.hi.setflags(write=False)
    return rows


def _slack_gen_shares(case):
    """Within-slack-bus split of the bus requirement across machines."""
    at_slack = case.slack_gen_mask()
    caps = case.p_max[at_slack]
    total = caps.sum()
    if total <= 0:
        return np.full(caps.size, 1.0 / max(caps.size, 1))
    return caps / total


def quantity_values(case, fleet, rows, state, dispatch, xi=None):
    """Exact monitored-quantity values at a responded operating point.

    Machine active outputs follow the dispatch plus participation response
    directly (the power flow realizes exactly that rule); everything else
    is read off the state.  xi defaults to zero.
    """
    dispatch = np.asarray(dispatch, dtype=float)
    xi = np.zeros(fleet.n_vre) if xi is None else np.asarray(xi, float)
    total = xi.sum()
    direct = np.zeros(case.n_bus)
    direct[fleet.vre_buses] = xi
    slack_share = _slack_gen_shares(case)
    slack_total = (state.p[case.slack] + case.p_load[case.slack]
                   - (fleet.forecasts[fleet.vre_buses == case.slack].sum()
                      if np.any(fleet.vre_buses == case.slack) else 0.0)
                   - direct[case.slack])
    slack_pos = np.cumsum(case.slack_gen_mask()) - 1

    values = np.empty(rows.n_rows)
    for r, (kind, idx) in enumerate(zip(rows.kinds, rows.indices)):
        if kind == "pgen":
            if case.slack_gen_mask()[idx]:
                values[r] = slack_total * slack_share[slack_pos[idx]]
            else:
                values[r] = dispatch[idx] - fleet.gen_participation[idx] * total
        elif kind == "qbus":
            values[r] = (state.q[idx] + case.q_load[idx]
                         - fleet.gamma * direct[idx])
        elif kind == "v":
            values[r] = state.v[idx]
        else:
            values[r] = state.ell[idx]
    return values


@dataclass(frozen=True, eq=False)
class ResponseJacobian:
    """Sensitivity of every monitored quantity to the forecast errors."""

    row_names: tuple
    j_matrix: np.ndarray  # (n_rows, n_vre)


class _Sensitivity:
    """Factorized power-flow system and state partials at a solved state."""

    def __init__(self, case, state):
        self.case = case
        self.net = _network(case)
        self.ns, self.pq = _bus_groups(case)
        v = np.sqrt(state.v) * np.exp(1j * state.theta)
        self.vmag = np.sqrt(state.v)
        jac = _pf_jacobian(self.net, v, self.ns, self.pq)
        self.lu = scipy.linalg.lu_factor(jac)
        ds_dva, ds_dvm = _ds_bus(self.net, v)
        self.dp_du = np.hstack([ds_dva.real[:, self.ns],
                                ds_dvm.real[:, self.pq]])
        self.dq_du = np.hstack([ds_dva.imag[:, self.ns],
                                ds_dvm.imag[:, self.pq]])
        dl_dva, dl_dvm = _ds_branch(self.net, v)
        self.dl_du = np.hstack([dl_dva.real[:, self.ns],
                                dl_dvm.real[:, self.pq]])
        n = case.n_bus
        self.p_row = np.full(n, -1)
        self.p_row[self.ns] = np.arange(self.ns.size)
        self.q_row = np.full(n, -1)
        self.q_row[self.pq] = self.ns.size + np.arange(self.pq.size)
        self.n_u = self.ns.size + self.pq.size

    def du_d_setpoint(self, rhs):
        """State shift per unit setpoint shift, rhs one column per input."""
        return scipy.linalg.lu_solve(self.lu, rhs)

    def gen_columns(self):
        """Setpoint selectors for each machine's dispatch (slack: zero)."""
        rhs = np.zeros((self.n_u, self.case.n_gen))
        for g, b in enumerate(self.case.gen_bus):
            if self.p_row[b] >= 0:
                rhs[self.p_row[b], g] = 1.0
        return rhs

    def xi_columns(self, fleet):
        """Setpoint selectors for each forecast-error component."""
        rhs = np.zeros((self.n_u, fleet.n_vre))
        rhs[:self.ns.size, :] -= fleet.participation[self.ns][:, None]
        for j, b in enumerate(fleet.vre_buses):
            if self.p_row[b] >= 0:
                rhs[self.p_row[b], j] += 1.0
            if self.q_row[b] >= 0:
                rhs[self.q_row[b], j] += fleet.gamma
        return rhs

    def quantity_partials(self, rows):
        """d(quantity)/d(state unknowns) for every monitored row."""
        out = np.zeros((rows.n_rows, self.n_u))
        pq_pos = {int(b): i for i, b in enumerate(self.pq)}
        for r, (kind, idx) in enumerate(zip(rows.kinds, rows.indices)):
            if kind == "pgen":
                if self.case.slack_gen_mask()[idx]:
                    share = _slack_gen_shares(self.case)
                    pos = np.cumsum(self.case.slack_gen_mask())[idx] - 1
                    out[r] = share[pos] * self.dp_du[self.case.slack]
                # non-slack machine output does not move with the state
            elif kind == "qbus":
                out[r] = self.dq_du[idx]
            elif kind == "v":
                if idx in pq_pos:
                    out[r, self.ns.size + pq_pos[idx]] = 2.0 * self.vmag[idx]
                # pinned bus: squared magnitude is constant
            else:
                out[r] = self.dl_du[idx]
        return out


def _direct_xi_terms(case, fleet, rows):
    """d(quantity)/d(xi) holding the network state fixed."""
    direct = np.zeros((rows.n_rows, fleet.n_vre))
    bus_col = {int(b): j for j, b in enumerate(fleet.vre_buses)}
    slack_mask = case.slack_gen_mask()
    for r, (kind, idx) in enumerate(zip(rows.kinds, rows.indices)):
        if kind == "pgen":
            if slack_mask[idx]:
                share = _slack_gen_shares(case)
                pos = np.cumsum(slack_mask)[idx] - 1
                if case.slack in bus_col:
                    direct[r, bus_col[case.slack]] -= share[pos]
            else:
                direct[r, :] = -fleet.gen_participation[idx]
        elif kind == "qbus" and idx in bus_col:
            direct[r, bus_col[idx]] = -fleet.gamma
    return direct


def response_jacobian(case, fleet, state, *, include_slack_rows=False,
                      rows=None):
    """First-order response of every monitored quantity to the errors.

    Assembled from the implicit-function rule on the factorized power-flow
    system plus the direct participation terms; machine active rows come
    out exactly minus the participation factors.
    """
    _require_solved(state, "response sensitivities need a solved state")
    rows = rows if rows is not None else ac_row_set(
        case, fleet, include_slack_rows=include_slack_rows)
    sens = _Sensitivity(case, state)
    du = sens.du_d_setpoint(sens.xi_columns(fleet))
    j = sens.quantity_partials(rows) @ du + _direct_xi_terms(
        case, fleet, rows)
    j.setflags(write=False)
    return ResponseJacobian(row_names=rows.names, j_matrix=j)


def _signed_layout(rows):
    """Two-sided row expansion: per kind, upper block then lower block;
    flow rows are upper-only."""
    q_idx, signs, names, rhs = [], [], [], []
    for kind in ("pgen", "qbus", "v"):
        members = [r for r, k in enumerate(rows.kinds) if k == kind]
        for r in members:
            q_idx.append(r)
            signs.append(1.0)
            names.append(f"{rows.names[r]}_hi")
            rhs.append(rows.hi[r])
        for r in members:
            q_idx.append(r)
            signs.append(-1.0)
            names.append(f"{rows.names[r]}_lo")
            rhs.append(-rows.lo[r])
    for r, k in enumerate(rows.kinds):
        if k == "flow":
            q_idx.append(r)
            signs.append(1.0)
            names.append(rows.names[r])
            rhs.append(rows.hi[r])
    return (np.array(q_idx, dtype=int), np.array(signs),
            tuple(names), np.array(rhs))


def linearize_cc_system(case, fleet, state, dispatch, *, sens_rows=None,
                        include_slack_rows=False, rows=None):
    """Affine restatement of the monitored rows around an operating point.

    Produces the same row schema as the DC assembly: base_lin @ x +
    base_const + sens @ xi <= rhs, exact at (dispatch, xi=0) up to the
    power-flow tolerance.  sens_rows carries frozen error sensitivities
    from an earlier state; by default they are computed here.
    """
    _require_solved(state, "linearization needs a solved state")
    rows = rows if rows is not None else ac_row_set(
        case, fleet, include_slack_rows=include_slack_rows)
    dispatch = np.asarray(dispatch, dtype=float)
    sens = _Sensitivity(case, state)
    partials = sens.quantity_partials(rows)
    du_x = sens.du_d_setpoint(sens.gen_columns())
    lin = partials @ du_x
    for r, (kind, idx) in enumerate(zip(rows.kinds, rows.indices)):
        if kind == "pgen" and not case.slack_gen_mask()[idx]:
            lin[r, idx] += 1.0
    values = quantity_values(case, fleet, rows, state, dispatch)
    const = values - lin @ dispatch
    if sens_rows is None:
        du_xi = sens.du_d_setpoint(sens.xi_columns(fleet))
        j = partials @ du_xi + _direct_xi_terms(case, fleet, rows)
    else:
        j = sens_rows
    q_idx, signs, names, rhs = _signed_layout(rows)
    cc = CcSystem(
        row_names=names,
        base_lin=signs[:, None] * lin[q_idx],
        base_const=signs * const[q_idx],
        sens=signs[:, None] * j[q_idx],
        rhs=rhs,
    )
    for arr in (cc.base_lin, cc.base_const, cc.sens, cc.rhs):
        arr.setflags(write=False)
    return cc


def loss_balance_equality(case, fleet, state, dispatch, sens=None):
    """Total-generation equality with losses linearized at the state.

    sum(x) = total load - total forecast + L(x), with L replaced by its
    first-order model around the current dispatch; the loss gradient comes
    from the slack-injection sensitivity columns.
    """
    _require_solved(state, "loss linearization needs a solved state")
    dispatch = np.asarray(dispatch, dtype=float)
    sens = sens if sens is not None else _Sensitivity(case, state)
    du_x = sens.du_d_setpoint(sens.gen_columns())
    grad = sens.dp_du[case.slack] @ du_x
    grad[~case.slack_gen_mask()] += 1.0
    grad[case.slack_gen_mask()] = 0.0
    losses = float(state.p.sum())
    total = float(case.p_load.sum() - fleet.forecasts.sum())
    a_eq = (1.0 - grad)[None, :]
    b_eq = np.array([total + losses - grad @ dispatch])
    return a_eq, b_eq


# --- the alternating dispatch/selection loop ------------------------------


@dataclass(frozen=True, eq=False)
class FixedPointResult:
    """Converged operating point, final selection, and the distance trail.

    obj_history holds the selection objective after each outer iteration,
    aligned with d_history.
    """

    state: AcState
    selection: object
    outer_iterations: int
    d_history: tuple
    obj_history: tuple = ()

    @property
    def dispatch(self):
        return self.selection.x_star


def _initial_dispatch(case, fleet):
    net_demand = float(case.p_load.sum() - fleet.forecasts.sum())
    x = fleet.gen_participation * net_demand
    return np.clip(x, case.p_min, case.p_max)


def _proximal_cost(cost, center, weight=PROXIMAL_WEIGHT):
    n = cost.n
    return QuadraticCost(
        h=cost.h + 2.0 * weight * np.eye(n),
        g=cost.g - 2.0 * weight * center,
        c0=cost.c0 + weight * float(center @ center),
    )


def _det_system(cc, equalities):
    finite = np.isfinite(cc.rhs)
    a_eq, b_eq = equalities
    return LinearSystem.make(
        a_ineq=np.ascontiguousarray(cc.base_lin[finite]),
        b_ineq=cc.rhs[finite] - cc.base_const[finite],
        a_eq=a_eq, b_eq=b_eq, n=cc.base_lin.shape[1])


def _infeasible_hint(cc, result):
    cert = result.certificate or {}
    weights = np.asarray(cert.get("y_ineq", ()), dtype=float)
    if weights.size:
        finite_names = [n for n, f in zip(cc.row_names,
                                          np.isfinite(cc.rhs)) if f]
        worst = int(np.argmax(weights))
        if worst < len(finite_names):
            return f" (most conflicted row: {finite_names[worst]})"
    return ""


def _inner_slp(case, fleet, cost, rows, x_start, w_start, *,
               xi=None, k=None, frozen_j=None, options=None,
               include_slack_rows=False):
    """Linearize, solve, re-project until the dispatch settles.

    With xi=None this is the deterministic stage (single QP per pass);
    otherwise the full selection program runs per pass with the frozen
    error sensitivities.  Returns (dispatch, state, selection-or-None).
    """
    x_cur, w_cur = np.asarray(x_start, float), w_start
    if xi is None and frozen_j is None:
        frozen_j = np.zeros((rows.n_rows, fleet.n_vre))
    sel = None
    for _ in range(MAX_INNER_PASSES):
        cc = linearize_cc_system(case, fleet, w_cur, x_cur,
                                 sens_rows=frozen_j, rows=rows,
                                 include_slack_rows=include_slack_rows)
        equalities = loss_balance_equality(case, fleet, w_cur, x_cur)
        prox = _proximal_cost(cost, x_cur)
        if xi is None:
            result = qp_solve(prox, _det_system(cc, equalities))
            if result.status != OPTIMAL:
                hint = (_infeasible_hint(cc, result)
                        if result.status == "INFEASIBLE" else "")
                raise FixedPointError(
                    f"deterministic stage: {result.status}{hint}")
            x_new = result.x
        else:
            problem = build_selection_from_ccopf(cc, xi, prox, k,
                                                 equalities=equalities)
            sel = solve_selection(problem, options)
            if sel.status != OPTIMAL:
                raise FixedPointError(f"selection stage: {sel.status}")
            x_new = sel.x_star
        step = float(np.abs(x_new - x_cur).max())
        w_new = _require_solved(
            solve_operating_point(case, fleet, x_new,
                                  theta0=w_cur.theta,
                                  vmag0=np.sqrt(w_cur.v)),
            "re-projection power flow")
        x_cur, w_cur = x_new, w_new
        if step <= INNER_STEP_TOL:
            return x_cur, w_cur, sel
    raise FixedPointError(
        f"linearization loop still moving after {MAX_INNER_PASSES} passes "
        f"(last step {step:.3e})")


def _state_distance(case, w_new, w_old):
    """2-norm over [squared magnitudes at slack and PV, P at PV]."""
    pinned = np.flatnonzero(case.bus_kind != PQ)
    pv = np.flatnonzero((case.bus_kind != PQ)
                        & (np.arange(case.n_bus) != case.slack))
    diff = np.concatenate([w_new.v[pinned] - w_old.v[pinned],
                           w_new.p[pv] - w_old.p[pv]])
    return float(np.linalg.norm(diff))


def fixed_point_solve(case, fleet, scenarios, params, options=None, *,
                      include_slack_rows=False, eta=OUTER_TOL,
                      max_outer=MAX_OUTER_ITER):
    """Alternate between error-sensitivity freezing and selection solves.

    Stage zero solves the deterministic problem (no scenario blocks); each
    outer iteration then freezes the error sensitivities at the incumbent
    operating point, solves the k-of-S selection program (inner
    linearization loop included), and measures the distance between
    consecutive operating points over the controlled subvector.  Stops
    when the distance falls to eta; raises FixedPointError with the full
    distance trail otherwise.
    """
    xi = np.atleast_2d(np.asarray(getattr(scenarios, "xi", scenarios),
                                  dtype=float))
    if xi.shape[1] != fleet.n_vre:
        raise ValueError("scenario width must match the fleet")
    if params.s != xi.shape[0]:
        raise ValueError(
            f"ambiguity tuple is for S={params.s}, got {xi.shape[0]} "
            "scenarios")
    options = options or SolverOptions()
    rows = ac_row_set(case, fleet, include_slack_rows=include_slack_rows)
    cost = make_cost(case)

    x0 = _initial_dispatch(case, fleet)
    w0 = _require_solved(solve_operating_point(case, fleet, x0),
                         "starting-point power flow")
    x_t, w_t, _ = _inner_slp(case, fleet, cost, rows, x0, w0,
                             include_slack_rows=include_slack_rows)
    d_history = []
    obj_history = []
    for t in range(1, max_outer + 1):
        frozen = response_jacobian(case, fleet, w_t, rows=rows)
        x_new, w_new, sel = _inner_slp(
            case, fleet, cost, rows, x_t, w_t, xi=xi, k=params.k,
            frozen_j=frozen.j_matrix, options=options,
            include_slack_rows=include_slack_rows)
        d = _state_distance(case, w_new, w_t)
        d_history.append(d)
        obj_history.append(sel.objective)
        x_t, w_t = x_new, w_new
        if d <= eta:
            return FixedPointResult(state=w_t, selection=sel,
                                    outer_iterations=t,
                                    d_history=tuple(d_history),
                                    obj_history=tuple(obj_history))
    raise FixedPointError(
        "operating point still moving after "
        f"{max_outer} outer iterations: distances "
        + ", ".join(f"{d:.3e}" for d in d_history),
        d_history=d_history)


# --- evaluation hooks ------------------------------------------------------


class AcEvaluator:
    """Out-of-sample scoring by full nonlinear re-solve per scenario.

    Every scenario is responded to with Newton from the nominal point and
    the monitored quantities are checked against their bounds; a response
    that fails to solve scores as a joint violation under the synthetic
    'newton_failure' row.
    """

    def __init__(self, case, fleet, dispatch, *, include_slack_rows=False):
        self.case = case
        self.fleet = fleet
        self.dispatch = np.asarray(dispatch, dtype=float)
        self.rows = ac_row_set(case, fleet,
                               include_slack_rows=include_slack_rows)
        self.state = _require_solved(
            solve_operating_point(case, fleet, self.dispatch),
            "nominal power flow for evaluation")
        q_idx, signs, names, rhs = _signed_layout(self.rows)
        finite = np.isfinite(rhs)
        self._q_idx = q_idx[finite]
        self._signs = signs[finite]
        self._rhs = rhs[finite]
        self.row_names = tuple(
            n for n, f in zip(names, finite) if f) + ("newton_failure",)

    def check(self, dispatch, xi):
        """(joint violation mask over scenarios, per-row violation rates)."""
        dispatch = np.asarray(dispatch, dtype=float)
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        n_signed = self._rhs.size
        violated = np.zeros((xi.shape[0], n_signed + 1), dtype=bool)
        for j, xi_j in enumerate(xi):
            responded = respond(self.case, self.fleet, self.state, xi_j)
            if not responded.solved:
                violated[j, -1] = True
                continue
            values = quantity_values(self.case, self.fleet, self.rows,
                                     responded, dispatch, xi_j)
            margins = self._rhs - self._signs * values[self._q_idx]
            violated[j, :-1] = margins < -VIOLATION_TOL
        return violated.any(axis=1), violated.mean(axis=0)


class AcSweepDriver:
    """Per-k solve plus evaluation hooks on the nonlinear model."""

    def __init__(self, case, fleet, *, options=None,
                 include_slack_rows=False):
        self.case = case
        self.fleet = fleet
        self.options = options or SolverOptions()
        self.include_slack_rows = include_slack_rows

    def _run(self, training_set, k):
        params = AmbiguityParams.from_k(k, training_set.s)
        start = time.perf_counter()
        result = fixed_point_solve(
            self.case, self.fleet, training_set, params, self.options,
            include_slack_rows=self.include_slack_rows)
        sel = replace(result.selection)
        sel.wall_time = time.perf_counter() - start
        return sel

    def solve(self, training_set, k):
        return self._run(training_set, k)

    def robust(self, baseline_set):
        return self._run(baseline_set, baseline_set.s)

    def evaluator(self, solution):
        return AcEvaluator(self.case, self.fleet, solution.x_star,
                           include_slack_rows=self.include_slack_rows)
