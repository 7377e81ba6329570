"""Local inverter control and exact power flow for head-to-head runs.

Three pieces: a per-node volt/VAR policy that sees only local
quantities, a backward/forward sweep solver for the exact nonlinear
branch-flow equations on a tree, and out-of-sample evaluation of a
fixed first stage (policy metrics on fresh scenarios, or a full
second-stage re-solve with the elastic demand pinned).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .admm import SolverConfig, solve
from .errors import BadParameter, InjectionExceedsNameplate, ZeroResistance
from .network import Network, build_network
from .program import (
    Solution,
    StochasticProgram,
    assemble,
    feasibility_audit,
    objective_terms,
)
from .scenario import Scenario, ScenarioSet, make_scenario_set

__all__ = [
    "PowerFlowResult",
    "PolicyMetrics",
    "OnlineReport",
    "local_policy_qw",
    "radial_powerflow",
    "max_voltage_deviation",
    "evaluate_policy",
    "online_second_stage",
]


@dataclass(frozen=True)
class PowerFlowResult:
    """Exact branch-flow operating point, physical units.

    ``p_mw`` and ``q_mvar`` hold receiving-end line flows keyed by node;
    the root entries carry the substation injection. ``l_ka2`` has no
    root entry. ``max_residual`` is the worst per-unit equation
    violation at the returned iterate, so callers can judge a
    non-converged result.
    """

    p_mw: dict[int, float]
    q_mvar: dict[int, float]
    v_kv2: dict[int, float]
    l_ka2: dict[int, float]
    converged: bool
    iterations: int
    max_residual: float


def local_policy_qw(r: float, x: float, w: float, p_cons: float,
                    q_cons: float, k: float, qw_max: float) -> float:
    """Blended volt/VAR setpoint from node-local data only.

    Mixes a load-compensation term (cancel the local reactive demand)
    with a voltage-flattening term (cancel the local r*P + x*Q drop),
    weighted k and 1 - k; every stage is clipped to the inverter's
    remaining capability. Unit-agnostic as long as all powers share one
    system. r and x are the impedance of the line feeding the node.
    """
    if qw_max < 0.0:
        raise BadParameter(f"qw_max must be >= 0, got {qw_max}")
    if not math.isfinite(k):
        raise BadParameter(f"blending weight must be finite, got {k}")
    if r == 0.0:
        raise ZeroResistance("voltage-flattening term needs r > 0")
    f_load = min(max(q_cons, -qw_max), qw_max)
    f_volt = min(max(q_cons + x * (p_cons - w) / r, -qw_max), qw_max)
    return float(min(max(k * f_load + (1.0 - k) * f_volt, -qw_max), qw_max))


def radial_powerflow(network: Network, pc: dict[int, float],
                     qw: dict[int, float], w: dict[int, float],
                     tol: float = 1e-10, max_iters: int = 200) -> PowerFlowResult:
    """Solve the nonlinear branch-flow equations by sweep iteration.

    Inputs are physical node maps (MW / MVAr, missing entries read as
    zero). Backward pass aggregates flows and currents at the latest
    voltages, forward pass re-propagates voltages from the fixed root;
    convergence is declared when the voltage update falls below ``tol``
    (per unit). Never raises on non-convergence: the flag and the
    residual on the result tell the story.
    """
    arr = network.arrays
    n = network.n_nodes
    s = network.s_base_mva
    pc_pu = np.zeros(n)
    qw_pu = np.zeros(n)
    w_pu = np.zeros(n)
    for pos, nid in enumerate(arr.ids):
        pc_pu[pos] = pc.get(int(nid), 0.0) / s
        qw_pu[pos] = qw.get(int(nid), 0.0) / s
        w_pu[pos] = w.get(int(nid), 0.0) / s
    p_net = arr.p_l + pc_pu - w_pu
    q_net = arr.q_l + arr.kappa * pc_pu - qw_pu

    v = np.ones(n)
    l = np.zeros(n)
    p = np.zeros(n)
    q = np.zeros(n)
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        for pos in reversed(range(n)):
            ps = p_net[pos]
            qs = q_net[pos] - arr.q_s[pos] * v[pos]
            for c in arr.children_pos[pos]:
                ps += p[c] + arr.r[c] * l[c]
                qs += q[c] + arr.x[c] * l[c]
            p[pos] = ps
            q[pos] = qs
            if pos > 0:
                l[pos] = (ps * ps + qs * qs) / v[pos]
        dv = 0.0
        for pos in range(1, n):
            anc = arr.ancestor_pos[pos]
            vk = (v[anc] - 2.0 * (arr.r[pos] * p[pos] + arr.x[pos] * q[pos])
                  - (arr.r[pos] ** 2 + arr.x[pos] ** 2) * l[pos])
            dv = max(dv, abs(vk - v[pos]))
            v[pos] = vk
        if not np.all(v > 0.0):
            break  # voltage collapse, no physical fixed point from here
        if dv < tol:
            converged = True
            break

    res = 0.0
    for pos in range(n):
        ps = p_net[pos]
        qs = q_net[pos] - arr.q_s[pos] * v[pos]
        for c in arr.children_pos[pos]:
            ps += p[c] + arr.r[c] * l[c]
            qs += q[c] + arr.x[c] * l[c]
        res = max(res, abs(p[pos] - ps), abs(q[pos] - qs))
    for pos in range(1, n):
        anc = arr.ancestor_pos[pos]
        res = max(res, abs(v[anc] - v[pos]
                           - 2.0 * (arr.r[pos] * p[pos] + arr.x[pos] * q[pos])
                           - (arr.r[pos] ** 2 + arr.x[pos] ** 2) * l[pos]))
        res = max(res, abs(v[pos] * l[pos] - p[pos] ** 2 - q[pos] ** 2))

    v_base = network.v_base_sq
    i_base2 = network.i_base_ka ** 2
    ids = [int(nid) for nid in arr.ids]
    return PowerFlowResult(
        p_mw={nid: float(p[pos]) * s for pos, nid in enumerate(ids)},
        q_mvar={nid: float(q[pos]) * s for pos, nid in enumerate(ids)},
        v_kv2={nid: float(v[pos]) * v_base for pos, nid in enumerate(ids)},
        l_ka2={nid: float(l[pos]) * i_base2
               for pos, nid in enumerate(ids) if pos > 0},
        converged=converged,
        iterations=iterations,
        max_residual=float(res),
    )


def max_voltage_deviation(network: Network, v_kv2: dict[int, float]) -> float:
    """Largest |V - V0| / V0 over non-root nodes, from squared voltages."""
    v_base = network.v_base_sq
    worst = 0.0
    for nid in network.order:
        if nid == network.root:
            continue
        worst = max(worst, abs(math.sqrt(v_kv2[nid] / v_base) - 1.0))
    return worst


@dataclass(frozen=True)
class PolicyMetrics:
    """Out-of-sample performance of a fixed first stage.

    ``deviations`` is aligned with the test scenario order; scenarios
    whose power flow failed hold NaN and are excluded from the scalar
    metrics and the CDF (probabilities are not renormalized).
    """

    k: float
    expected_loss_mw: float
    max_deviation: float
    deviations: tuple[float, ...]
    cdf: tuple[tuple[float, float], ...]
    n_scenarios: int
    n_failed: int


def _empirical_cdf(values: list[float]) -> tuple[tuple[float, float], ...]:
    vals = sorted(values)
    n = len(vals)
    points = []
    for i, val in enumerate(vals):
        if i + 1 < n and vals[i + 1] == val:
            continue
        points.append((float(val), (i + 1) / n))
    return tuple(points)


def evaluate_policy(program: StochasticProgram, pc_fixed: dict[int, float],
                    k: float, test_scenarios: ScenarioSet,
                    tol: float = 1e-10, max_iters: int = 200) -> PolicyMetrics:
    """Run the local policy plus exact power flow over a test set.

    For each scenario every inverter picks qw from its own (w, pc, line
    impedance) via ``local_policy_qw``, capped by the capability left at
    that injection; the resulting operating point comes from
    ``radial_powerflow``. Reports pi-weighted expected losses (MW), the
    worst relative voltage deviation, and the per-scenario deviation
    CDF.
    """
    net = program.network
    arr = net.arrays
    n = net.n_nodes
    s = net.s_base_mva
    pi = test_scenarios.probabilities
    deviations: list[float] = []
    losses: list[float] = []
    n_failed = 0
    for sc in test_scenarios.scenarios:
        qw_map: dict[int, float] = {}
        for pos in range(1, n):
            nid = int(arr.ids[pos])
            w_node = sc.w.get(nid, 0.0) / s
            if w_node > arr.s_w[pos] + 1e-12:
                raise InjectionExceedsNameplate(
                    f"node {nid}: injection {w_node * s} MW exceeds "
                    f"nameplate {arr.s_w[pos] * s} MVA"
                )
            qmax = math.sqrt(max(arr.s_w[pos] ** 2 - w_node ** 2, 0.0))
            if qmax == 0.0:
                continue
            pc_node = pc_fixed.get(nid, 0.0) / s
            qw_map[nid] = s * local_policy_qw(
                float(arr.r[pos]), float(arr.x[pos]), w_node,
                float(arr.p_l[pos]) + pc_node,
                float(arr.q_l[pos]) + float(arr.kappa[pos]) * pc_node,
                k, qmax,
            )
        flow = radial_powerflow(net, pc_fixed, qw_map, sc.w,
                                tol=tol, max_iters=max_iters)
        if not flow.converged:
            n_failed += 1
            deviations.append(math.nan)
            losses.append(math.nan)
            continue
        deviations.append(max_voltage_deviation(net, flow.v_kv2))
        losses.append(math.fsum(
            net.lines[nid].r_ohm * flow.l_ka2[nid]
            for nid in net.order if nid != net.root
        ))
    good = [d for d in deviations if not math.isnan(d)]
    expected_loss = math.fsum(
        float(pi[m]) * losses[m]
        for m in range(len(losses)) if not math.isnan(losses[m])
    )
    return PolicyMetrics(
        k=float(k),
        expected_loss_mw=expected_loss,
        max_deviation=max(good) if good else math.nan,
        deviations=tuple(deviations),
        cdf=_empirical_cdf(good),
        n_scenarios=len(deviations),
        n_failed=n_failed,
    )


@dataclass(frozen=True)
class OnlineReport:
    """Second-stage re-solve of a fixed first stage on fresh scenarios."""

    solution: Solution
    infeasible: tuple[int, ...]
    converged: tuple[bool, ...]
    iterations: tuple[int, ...]
    qw_free: bool
    objective_terms: dict[str, float]
    note: str


_INFEASIBLE_NOTE = (
    "a scenario counts as infeasible when its solve fails the feasibility "
    "audit at 1e-4 after converging, or stops at the iteration cap"
)


def _powerflow_solution(network: Network, flow: PowerFlowResult,
                        pc_mw: dict[int, float],
                        qw_mvar: dict[int, float]) -> Solution:
    root = network.root
    pc = {nid: (0.0 if nid == root else float(pc_mw.get(nid, 0.0)))
          for nid in network.order}
    qw = {nid: float(qw_mvar.get(nid, 0.0)) for nid in network.order}
    p0 = flow.p_mw[root]
    return Solution(
        pc=pc, qw=(qw,),
        p=(dict(flow.p_mw),), q=(dict(flow.q_mvar),),
        v=(dict(flow.v_kv2),), l=(dict(flow.l_ka2),),
        p0_plus=(max(p0, 0.0),), p0_minus=(max(-p0, 0.0),),
    )


def online_second_stage(program: StochasticProgram, pc_fixed: dict[int, float],
                        test_scenarios: ScenarioSet, config: SolverConfig,
                        qw_free: bool = True) -> OnlineReport:
    """Re-optimize the second stage scenario by scenario, first stage pinned.

    With ``qw_free`` the consensus solver runs per scenario on a copy of
    the network whose consumption box collapses to the fixed pc, which
    is how the pinning is enforced. With ``qw_free=False`` there is
    nothing left to optimize: every inverter holds qw = 0 and the exact
    power flow decides feasibility alone. Either way the merged solution
    covers the whole test set and each scenario is classified against
    the feasibility audit.
    """
    net = program.network
    root = net.root
    pinned_pc: dict[int, float] = {}
    for nid in net.order:
        if nid == root:
            continue
        node = net.nodes[nid]
        val = float(pc_fixed.get(nid, 0.0))
        if val < node.pc_min_mw - 1e-9 or val > node.pc_max_mw + 1e-9:
            raise BadParameter(
                f"pc_fixed[{nid}] = {val} outside "
                f"[{node.pc_min_mw}, {node.pc_max_mw}]"
            )
        pinned_pc[nid] = min(max(val, node.pc_min_mw), node.pc_max_mw)

    objective = program.objective
    per_solution: list[Solution] = []
    infeasible: list[int] = []
    converged: list[bool] = []
    iterations: list[int] = []

    if qw_free:
        pinned_net = build_network(
            [node if node.id == root else dataclasses.replace(
                node, pc_min_mw=pinned_pc[node.id], pc_max_mw=pinned_pc[node.id])
             for node in net.nodes.values()],
            list(net.lines.values()),
            v0_kv=net.v0_kv, s_base_mva=net.s_base_mva, epsilon=net.epsilon,
        )
        for idx, sc in enumerate(test_scenarios.scenarios):
            sset = make_scenario_set([Scenario(w=dict(sc.w), pi=1.0)],
                                     seed=test_scenarios.seed)
            prog_m = assemble(pinned_net, sset, objective)
            report = solve(prog_m, config)
            audit = feasibility_audit(prog_m, report.solution, tol=1e-4)
            if not report.converged or not audit.ok:
                infeasible.append(idx)
            converged.append(report.converged)
            iterations.append(report.iterations)
            per_solution.append(report.solution)
    else:
        for idx, sc in enumerate(test_scenarios.scenarios):
            flow = radial_powerflow(net, pinned_pc, {}, sc.w)
            sset = make_scenario_set([Scenario(w=dict(sc.w), pi=1.0)],
                                     seed=test_scenarios.seed)
            prog_m = assemble(net, sset, objective)
            sol_m = _powerflow_solution(net, flow, pinned_pc, {})
            audit = feasibility_audit(prog_m, sol_m, tol=1e-4)
            if not flow.converged or not audit.ok:
                infeasible.append(idx)
            converged.append(flow.converged)
            iterations.append(flow.iterations)
            per_solution.append(sol_m)

    merged = Solution(
        pc={nid: (0.0 if nid == root else pinned_pc[nid]) for nid in net.order},
        qw=tuple(s.qw[0] for s in per_solution),
        p=tuple(s.p[0] for s in per_solution),
        q=tuple(s.q[0] for s in per_solution),
        v=tuple(s.v[0] for s in per_solution),
        l=tuple(s.l[0] for s in per_solution),
        p0_plus=tuple(s.p0_plus[0] for s in per_solution),
        p0_minus=tuple(s.p0_minus[0] for s in per_solution),
    )
    test_program = assemble(net, test_scenarios, objective)
    return OnlineReport(
        solution=merged,
        infeasible=tuple(infeasible),
        converged=tuple(converged),
        iterations=tuple(iterations),
        qw_free=qw_free,
        objective_terms=objective_terms(test_program, merged),
        note=_INFEASIBLE_NOTE,
    )
