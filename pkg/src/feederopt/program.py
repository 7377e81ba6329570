"""Stochastic OPF instance assembly and solution evaluation.

Couples a validated radial network with a scenario set and price data
into one immutable :class:`StochasticProgram`, and evaluates candidate
solutions: objective value, per-constraint-family feasibility audit,
and the root import/export complementarity check.

Solutions carry physical units (MW, MVar, kV^2, kA^2); evaluation
converts to per unit internally so residual families are comparable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    BadParameter,
    InjectionExceedsNameplate,
    ScenarioNetworkMismatch,
)
from .network import Network
from .scenario import ScenarioSet

__all__ = [
    "ObjectiveConfig",
    "Solution",
    "StochasticProgram",
    "AuditReport",
    "assemble",
    "objective_value",
    "feasibility_audit",
    "complementarity_check",
    "solution_to_dict",
    "solution_from_dict",
    "save_solution",
    "load_solution",
    "audit_report_to_dict",
]


@dataclass(frozen=True)
class ObjectiveConfig:
    """Price and weight data for the two-stage objective.

    ``a`` and ``b`` are the import and export price slopes at the root
    (monetary per MW) with a > b >= 0 so the piecewise-linear root cost
    stays convex. ``k_loss`` weights expected ohmic losses. ``root_cost``
    optionally replaces the a/b split with a user-supplied differentiable
    convex cost of the net root import in MW; when set, the solver keeps
    a single root flow variable instead of the plus/minus pair.
    """

    a: float
    b: float
    k_loss: float = 0.0
    root_cost: Callable[[float], float] | None = None

    def __post_init__(self):
        if not (self.a > self.b >= 0.0):
            raise BadParameter(
                f"price slopes must satisfy a > b >= 0, got a={self.a}, b={self.b}"
            )
        if self.k_loss < 0.0:
            raise BadParameter(f"k_loss must be >= 0, got {self.k_loss}")
        if self.root_cost is not None and not callable(self.root_cost):
            raise BadParameter("root_cost must be callable or None")


@dataclass(frozen=True)
class Solution:
    """Candidate first+second stage decision in physical units.

    ``pc``: node -> MW, all nodes (root entry 0). Per scenario, in the
    scenario order of the program: ``qw`` node -> MVar; ``p``/``q``
    node -> MW/MVar line flow at the receiving end, with the root entry
    holding the substation injection; ``v`` node -> kV^2; ``l`` non-root
    node -> kA^2; ``p0_plus``/``p0_minus`` the root import/export split
    in MW.
    """

    pc: dict[int, float]
    qw: tuple[dict[int, float], ...]
    p: tuple[dict[int, float], ...]
    q: tuple[dict[int, float], ...]
    v: tuple[dict[int, float], ...]
    l: tuple[dict[int, float], ...]
    p0_plus: tuple[float, ...]
    p0_minus: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class StochasticProgram:
    """Immutable solver-ready instance.

    Derived constants are per unit, laid out in the network's
    topological node order: ``w[m, pos]`` PV real injections and
    ``qw_max[m, pos]`` inverter reactive headroom sqrt(s_w^2 - w^2).
    """

    network: Network
    scenarios: ScenarioSet
    objective: ObjectiveConfig
    pi: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    qw_max: np.ndarray = field(repr=False)

    @property
    def n_scenarios(self) -> int:
        return self.pi.size

    @property
    def n_nodes(self) -> int:
        return self.network.n_nodes

    @property
    def first_stage_size(self) -> int:
        """One elastic-demand setpoint per non-root node."""
        return self.n_nodes - 1

    @property
    def second_stage_size(self) -> int:
        """Per-scenario count of local variables across all node blocks.

        Non-root blocks hold (P, Q, v, l, v_hat, pc copy, qw) plus three
        flow copies per child; the root block holds the import/export
        pair plus three copies per child (one net-flow variable when a
        custom root cost is installed).
        """
        net = self.network
        total = 0
        for nid in net.order:
            n_child = len(net.children[nid])
            if nid == net.root:
                total += (1 if self.objective.root_cost else 2) + 3 * n_child
            else:
                total += 7 + 3 * n_child
        return total


def assemble(network: Network, scenarios: ScenarioSet,
             objective: ObjectiveConfig) -> StochasticProgram:
    """Bind network, scenarios, and prices; precompute per-unit constants.

    Requires the scenario node domain to equal the network's node set and
    every injection to respect its inverter nameplate (w <= s_w).
    """
    domain = set(scenarios.node_ids)
    net_ids = set(network.order)
    if domain != net_ids:
        extra = sorted(domain - net_ids)
        missing = sorted(net_ids - domain)
        raise ScenarioNetworkMismatch(
            f"scenario nodes differ from network nodes "
            f"(extra {extra}, missing {missing})"
        )
    arr = network.arrays
    m_count = len(scenarios.scenarios)
    n = network.n_nodes
    w_mw = np.zeros((m_count, n))
    for m, sc in enumerate(scenarios.scenarios):
        for nid, val in sc.w.items():
            w_mw[m, arr.pos_of[nid]] = val
    s_w_mw = arr.s_w * network.s_base_mva
    bad = np.argwhere(w_mw > s_w_mw[None, :])
    if bad.size:
        m, pos = bad[0]
        raise InjectionExceedsNameplate(
            f"scenario {m} node {arr.ids[pos]}: injection "
            f"{w_mw[m, pos]} MW exceeds nameplate {s_w_mw[pos]} MVA"
        )
    w_pu = w_mw / network.s_base_mva
    qw_max = np.sqrt(np.maximum(arr.s_w[None, :] ** 2 - w_pu**2, 0.0))
    pi = np.array(scenarios.probabilities, dtype=float)
    return StochasticProgram(
        network=network, scenarios=scenarios, objective=objective,
        pi=pi, w=w_pu, qw_max=qw_max,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def objective_value(program: StochasticProgram, solution: Solution) -> float:
    """Total cost in the instance's raw mixed units.

    Negative utility sum + expected root energy cost + weighted expected
    losses. The loss term uses physical r*l per line, which is MW.
    """
    return objective_terms(program, solution)["total"]


def objective_terms(program: StochasticProgram, solution: Solution) -> dict[str, float]:
    """The three objective components, reported separately.

    The combined number mixes monetary and MW units by construction, so
    downstream reports should prefer the per-term breakdown.
    """
    net = program.network
    obj = program.objective
    utility = math.fsum(
        net.nodes[nid].k_u * (solution.pc[nid] - net.nodes[nid].pc_max_mw) ** 2
        for nid in net.order if nid != net.root
    )
    pi = program.pi
    if obj.root_cost is not None:
        root = math.fsum(
            pi[m] * obj.root_cost(solution.p0_plus[m] - solution.p0_minus[m])
            for m in range(program.n_scenarios)
        )
    else:
        root = math.fsum(
            pi[m] * (obj.a * solution.p0_plus[m] - obj.b * solution.p0_minus[m])
            for m in range(program.n_scenarios)
        )
    losses_mw = math.fsum(
        pi[m] * net.lines[nid].r_ohm * solution.l[m][nid]
        for m in range(program.n_scenarios)
        for nid in net.order if nid != net.root
    )
    return {
        "negative_utility": utility,
        "root_energy": root,
        "expected_loss_mw": losses_mw,
        "weighted_loss": obj.k_loss * losses_mw,
        "total": utility + root + obj.k_loss * losses_mw,
    }


@dataclass(frozen=True)
class AuditReport:
    """Worst per-unit violation per constraint family, plus the cone gap.

    ``families`` holds nonnegative violation magnitudes; ``socp_gap`` is
    max over nodes/scenarios of v*l - P^2 - Q^2 in (pu)^2, the relaxation
    looseness (not a feasibility defect, so it never affects ``ok``).
    """

    families: dict[str, float]
    socp_gap: float
    tol: float
    ok: bool


def _solution_arrays(program: StochasticProgram, solution: Solution):
    """Stack solution maps into per-unit arrays in topological order."""
    net = program.network
    arr = net.arrays
    n = net.n_nodes
    m_count = program.n_scenarios
    s = net.s_base_mva
    v_base = net.v_base_sq
    i_base2 = net.i_base_ka**2
    pc = np.array([solution.pc.get(nid, 0.0) for nid in arr.ids]) / s
    p = np.empty((m_count, n))
    q = np.empty((m_count, n))
    v = np.empty((m_count, n))
    l = np.zeros((m_count, n))
    qw = np.zeros((m_count, n))
    for m in range(m_count):
        for k, nid in enumerate(arr.ids):
            p[m, k] = solution.p[m][nid] / s
            q[m, k] = solution.q[m][nid] / s
            v[m, k] = solution.v[m][nid] / v_base
            qw[m, k] = solution.qw[m].get(nid, 0.0) / s
            if k > 0:
                l[m, k] = solution.l[m][nid] / i_base2
    return pc, p, q, v, l, qw


def feasibility_audit(program: StochasticProgram, solution: Solution,
                      tol: float = 1e-6) -> AuditReport:
    """Check every constraint family; report worst violations in per unit.

    Families: real/reactive balance and the voltage recursion (equality
    residuals), cone feasibility, voltage band incl. the root pin,
    current caps incl. l >= 0, the pc and qw boxes, root split
    consistency P0 = P0+ - P0-, and nonnegativity of the split.
    """
    net = program.network
    arr = net.arrays
    pc, p, q, v, l, qw = _solution_arrays(program, solution)
    m_count = program.n_scenarios
    n = net.n_nodes
    w = program.w
    eps = net.epsilon

    child_flow_p = np.zeros((m_count, n))
    child_flow_q = np.zeros((m_count, n))
    for k in range(n):
        for c in arr.children_pos[k]:
            child_flow_p[:, k] += p[:, c] + arr.r[c] * l[:, c]
            child_flow_q[:, k] += q[:, c] + arr.x[c] * l[:, c]

    real_res = p - child_flow_p - arr.p_l[None, :] - pc[None, :] + w
    reactive_res = (q - child_flow_q - arr.q_l[None, :]
                    - (arr.kappa * pc)[None, :] + qw + arr.q_s[None, :] * v)
    fam = {}
    fam["real_balance"] = float(np.max(np.abs(real_res)))
    fam["reactive_balance"] = float(np.max(np.abs(reactive_res)))

    drop = np.zeros((m_count, n))
    for k in range(1, n):
        a_pos = arr.ancestor_pos[k]
        drop[:, k] = (v[:, a_pos] - v[:, k]
                      - 2.0 * (arr.r[k] * p[:, k] + arr.x[k] * q[:, k])
                      - (arr.r[k] ** 2 + arr.x[k] ** 2) * l[:, k])
    fam["voltage_drop"] = float(np.max(np.abs(drop))) if n > 1 else 0.0

    cone_expr = v[:, 1:] * l[:, 1:] - p[:, 1:] ** 2 - q[:, 1:] ** 2
    fam["cone"] = float(np.max(np.maximum(-cone_expr, 0.0))) if n > 1 else 0.0
    socp_gap = float(np.max(cone_expr)) if n > 1 else 0.0

    lo, hi = (1.0 - eps) ** 2, (1.0 + eps) ** 2
    band = np.maximum(lo - v[:, 1:], 0.0) if n > 1 else np.zeros((m_count, 0))
    band_hi = np.maximum(v[:, 1:] - hi, 0.0) if n > 1 else np.zeros((m_count, 0))
    root_pin = np.abs(v[:, 0] - 1.0)
    fam["voltage_band"] = float(max(
        band.max() if band.size else 0.0,
        band_hi.max() if band_hi.size else 0.0,
        root_pin.max(),
    ))

    if n > 1:
        cap = np.maximum(l[:, 1:] - arr.l_max[None, 1:], 0.0)
        fam["current_cap"] = float(max(cap.max(), np.maximum(-l[:, 1:], 0.0).max()))
    else:
        fam["current_cap"] = 0.0

    fam["pc_box"] = float(np.max(np.maximum(
        np.maximum(arr.pc_min - pc, pc - arr.pc_max), 0.0)))
    fam["qw_box"] = float(np.max(np.maximum(np.abs(qw) - program.qw_max, 0.0)))

    s = net.s_base_mva
    p0p = np.array(solution.p0_plus, dtype=float) / s
    p0m = np.array(solution.p0_minus, dtype=float) / s
    fam["root_split"] = float(np.max(np.abs(p[:, 0] - (p0p - p0m))))
    fam["root_sign"] = float(np.max(np.maximum(np.maximum(-p0p, -p0m), 0.0)))

    ok = all(val <= tol for val in fam.values())
    return AuditReport(families=fam, socp_gap=socp_gap, tol=tol, ok=ok)


def complementarity_check(solution: Solution) -> float:
    """Worst simultaneous import/export: max over scenarios of min(P0+, P0-)."""
    return max(
        min(pp, pm) for pp, pm in zip(solution.p0_plus, solution.p0_minus)
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def solution_to_dict(solution: Solution) -> dict:
    def keyed(d):
        return {str(k): d[k] for k in sorted(d)}

    return {
        "pc_mw": keyed(solution.pc),
        "scenarios": [
            {
                "qw_mvar": keyed(solution.qw[m]),
                "p_mw": keyed(solution.p[m]),
                "q_mvar": keyed(solution.q[m]),
                "v_kv2": keyed(solution.v[m]),
                "l_ka2": keyed(solution.l[m]),
                "p0_plus_mw": solution.p0_plus[m],
                "p0_minus_mw": solution.p0_minus[m],
            }
            for m in range(len(solution.p))
        ],
    }


def solution_from_dict(data: dict) -> Solution:
    def unkeyed(d):
        return {int(k): float(v) for k, v in d.items()}

    try:
        pc = unkeyed(data["pc_mw"])
        blocks = data["scenarios"]
        qw, p, q, v, l, p0p, p0m = [], [], [], [], [], [], []
        for blk in blocks:
            qw.append(unkeyed(blk["qw_mvar"]))
            p.append(unkeyed(blk["p_mw"]))
            q.append(unkeyed(blk["q_mvar"]))
            v.append(unkeyed(blk["v_kv2"]))
            l.append(unkeyed(blk["l_ka2"]))
            p0p.append(float(blk["p0_plus_mw"]))
            p0m.append(float(blk["p0_minus_mw"]))
    except KeyError as exc:
        raise BadParameter(f"solution JSON missing field {exc}") from None
    return Solution(pc=pc, qw=tuple(qw), p=tuple(p), q=tuple(q),
                    v=tuple(v), l=tuple(l),
                    p0_plus=tuple(p0p), p0_minus=tuple(p0m))


def save_solution(solution: Solution, path) -> None:
    with open(path, "w") as fh:
        json.dump(solution_to_dict(solution), fh, indent=1)


def load_solution(path) -> Solution:
    with open(path) as fh:
        return solution_from_dict(json.load(fh))


def audit_report_to_dict(report: AuditReport) -> dict:
    return {
        "families": dict(report.families),
        "socp_gap_pu2": report.socp_gap,
        "tol": report.tol,
        "ok": report.ok,
    }
