"""A-priori certificate that the cone relaxation is tight.

Evaluates a product-positivity condition along every root-to-leaf path
at the lowest-consumption corner: elastic demand at its floor and every
inverter injecting its full reactive nameplate. Passing it guarantees a
zero relaxation gap for a modified problem (see ``SCOPE``); the checker
only evaluates the condition, it never re-solves anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import Network, path_to_root
from .program import StochasticProgram

__all__ = [
    "SCOPE",
    "LinDistFlowSolution",
    "ExactnessVerdict",
    "lindistflow",
    "check_exactness",
]

SCOPE = (
    "certificate scope: modified problem with a strictly increasing root "
    "energy cost, no current-magnitude caps, shunt injections fixed at "
    "their nominal-voltage value (folded in here as q_s * 1 pu per node), "
    "zero loss penalty, and a linearized surrogate for the upper voltage "
    "bound"
)


@dataclass(frozen=True)
class LinDistFlowSolution:
    """Lossless linearized flows, physical units.

    ``p_mw``/``q_mvar`` map each non-root node to the flow on its
    feeding line (sum of net consumptions over its subtree); ``v_kv2``
    maps every node to the squared voltage, root pinned at its base.
    """

    p_mw: dict[int, float]
    q_mvar: dict[int, float]
    v_kv2: dict[int, float]


def _flows_pu(network: Network, pc: dict[int, float], qw: dict[int, float],
              w: dict[int, float]) -> tuple[np.ndarray, np.ndarray]:
    """Subtree sums of per-unit net consumptions, by topological position."""
    arr = network.arrays
    n = network.n_nodes
    p = np.zeros(n)
    q = np.zeros(n)
    for pos, nid in enumerate(arr.ids):
        pc_j = pc.get(int(nid), 0.0)
        p[pos] = arr.p_l[pos] + pc_j - w.get(int(nid), 0.0)
        q[pos] = arr.q_l[pos] + arr.kappa[pos] * pc_j - qw.get(int(nid), 0.0)
    for pos in reversed(range(n)):
        for c in arr.children_pos[pos]:
            p[pos] += p[c]
            q[pos] += q[c]
    return p, q


def lindistflow(network: Network, pc: dict[int, float], qw: dict[int, float],
                w: dict[int, float]) -> LinDistFlowSolution:
    """Evaluate the linearized power flow at given MW / MVAr node maps.

    Net consumption at node j is (p_l + pc - w, q_l + kappa*pc - qw);
    line flows aggregate subtrees with no loss terms, and squared
    voltages drop by 2*(r*P + x*Q) along each line (ohm times MW is
    kV^2, so no base conversion appears). Missing map entries read as
    zero. Linear in all three arguments.
    """
    arr = network.arrays
    n = network.n_nodes
    s = network.s_base_mva
    p, q = _flows_pu(network,
                     {k: val / s for k, val in pc.items()},
                     {k: val / s for k, val in qw.items()},
                     {k: val / s for k, val in w.items()})
    v = np.ones(n)
    for pos in range(1, n):
        anc = arr.ancestor_pos[pos]
        v[pos] = v[anc] - 2.0 * (arr.r[pos] * p[pos] + arr.x[pos] * q[pos])
    ids = [int(nid) for nid in arr.ids]
    v_base = network.v_base_sq
    return LinDistFlowSolution(
        p_mw={nid: float(p[pos]) * s for pos, nid in enumerate(ids) if pos > 0},
        q_mvar={nid: float(q[pos]) * s for pos, nid in enumerate(ids) if pos > 0},
        v_kv2={nid: float(v[pos]) * v_base for pos, nid in enumerate(ids)},
    )


@dataclass(frozen=True)
class ExactnessVerdict:
    """Outcome of the path-product condition.

    ``margins`` carry the smallest product component seen per scenario
    (infinity when there was nothing to check), so near-failures stay
    visible; ``worst_case`` locates that minimum as (leaf, t, s): the
    product over path nodes s+1..t-1 applied to line t's impedance,
    indices counted from the root along the leaf's path.
    ``m_independent`` is the single stricter test that replaces each
    node's injection with its scenario maximum. ``vacuous`` marks
    networks whose every leaf sits one line from the root, where the
    condition quantifies over an empty range.
    """

    per_scenario: tuple[bool, ...]
    margins: tuple[float, ...]
    worst_case: tuple[int, int, int] | None
    m_independent: bool
    m_independent_margin: float
    m_independent_worst: tuple[int, int, int] | None
    vacuous: bool
    tol: float
    scope: str = SCOPE

    @property
    def all_scenarios(self) -> bool:
        return all(self.per_scenario)


def _condition(network: Network, pc_min: dict[int, float],
               qw_full: dict[int, float], w: dict[int, float],
               coef: float, tol: float):
    """One evaluation of the path-product condition.

    Returns (pass, margin, worst) with worst = (leaf, t, s) locating the
    smallest product component, or None when nothing was checked.
    """
    p_flow, q_flow = _flows_pu(network, pc_min, qw_full, w)
    arr = network.arrays
    a_mats: dict[int, np.ndarray] = {}
    rx: dict[int, np.ndarray] = {}
    for pos in range(1, network.n_nodes):
        nid = int(arr.ids[pos])
        rx[nid] = np.array([arr.r[pos], arr.x[pos]])
        a_mats[nid] = np.eye(2) + coef * np.outer(
            rx[nid], [min(p_flow[pos], 0.0), min(q_flow[pos], 0.0)]
        )

    memo: dict[tuple[int, int], np.ndarray] = {}

    def product(first: int, last: int) -> np.ndarray:
        # matrix chain along the unique path, shallowest factor leftmost
        key = (first, last)
        got = memo.get(key)
        if got is None:
            if first == last:
                got = a_mats[last]
            else:
                got = product(first, network.ancestor_of(last)) @ a_mats[last]
            memo[key] = got
        return got

    ok = True
    margin = math.inf
    worst = None
    for leaf in network.leaves:
        seq = path_to_root(network, leaf, include_root=False)
        depth = len(seq)
        for t in range(2, depth + 1):
            target = rx[seq[t - 1]]
            for s in range(t - 1):
                low = float((product(seq[s], seq[t - 2]) @ target).min())
                if low < margin:
                    margin = low
                    worst = (leaf, t, s)
                if low <= tol:
                    ok = False
    return ok, margin, worst


def check_exactness(program: StochasticProgram,
                    tol: float = 1e-12) -> ExactnessVerdict:
    """Check the path-product condition for every scenario of a program.

    Strict positivity is tested componentwise against ``tol``. Along
    with the per-scenario answers, the stricter injection-maximum
    variant is evaluated once; it implies all of them when it passes.
    """
    net = program.network
    arr = net.arrays
    n = net.n_nodes
    coef = 2.0 / (1.0 - net.epsilon) ** 2
    ids = {pos: int(arr.ids[pos]) for pos in range(1, n)}
    pc_min = {nid: float(arr.pc_min[pos]) for pos, nid in ids.items()}
    qw_full = {nid: float(arr.s_w[pos] + arr.q_s[pos]) for pos, nid in ids.items()}
    vacuous = all(
        len(path_to_root(net, leaf, include_root=False)) < 2
        for leaf in net.leaves
    )
    per_scenario = []
    margins = []
    worst_margin = math.inf
    worst_case = None
    for m in range(program.n_scenarios):
        w_m = {nid: float(program.w[m, pos]) for pos, nid in ids.items()}
        ok, margin, worst = _condition(net, pc_min, qw_full, w_m, coef, tol)
        per_scenario.append(ok)
        margins.append(margin)
        if margin < worst_margin:
            worst_margin = margin
            worst_case = worst
    w_max = {nid: float(program.w[:, pos].max()) for pos, nid in ids.items()}
    mi_ok, mi_margin, mi_worst = _condition(net, pc_min, qw_full, w_max,
                                            coef, tol)
    return ExactnessVerdict(
        per_scenario=tuple(per_scenario),
        margins=tuple(margins),
        worst_case=worst_case,
        m_independent=mi_ok,
        m_independent_margin=mi_margin,
        m_independent_worst=mi_worst,
        vacuous=vacuous,
        tol=tol,
    )
