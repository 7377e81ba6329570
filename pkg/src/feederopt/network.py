"""Radial feeder data model.

Tree topology rooted at the substation (node 0), line impedances, loads,
PV inverter nameplates, shunt capacitors, and per-unit conversion. The
network is immutable after construction and safe to share across worker
threads.

Conventions
-----------
Node ids are non-negative integers; the substation is always node 0 and
carries no load, elastic demand, or PV. The line feeding node ``i`` from
its ancestor is labeled ``i``, so every non-root node owns exactly one
line. Physical units at the boundary are MW, MVar, kV, Ohm and (kA)^2;
solver math runs in per-unit with ``S_base`` and ``V_base = V0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadParameter,
    CycleDetected,
    DisconnectedNode,
    MissingLine,
    UnknownNode,
)

__all__ = [
    "NodeParams",
    "LineParams",
    "Network",
    "build_network",
    "path_to_root",
    "make_feeder",
    "network_to_dict",
    "network_from_dict",
    "load_network",
    "save_network",
    "reactive_slope",
]


def reactive_slope(pf: float) -> float:
    """Slope sqrt(1/PF^2 - 1) mapping real power to reactive at power factor PF."""
    if not 0.0 < pf <= 1.0:
        raise BadParameter(f"power factor must lie in (0, 1], got {pf}")
    return math.sqrt(1.0 / (pf * pf) - 1.0)


@dataclass(frozen=True)
class NodeParams:
    """Static per-node data in physical units.

    Parameters
    ----------
    id : int
        Node identifier, non-negative; 0 is the substation.
    ancestor : int or None
        Ancestor node id; None only for the root.
    p_l_mw, q_l_mvar : float
        Non-elastic load.
    pf : float
        Power factor of the elastic load, in (0, 1].
    pc_min_mw, pc_max_mw : float
        Elastic-load bounds, 0 <= pc_min <= pc_max.
    s_w_mva : float
        PV inverter apparent capacity; 0 means no PV.
    q_s : float
        Shunt coefficient in MVar per (kV)^2; its reactive injection is
        q_s * v with v the squared voltage magnitude.
    k_u : float
        Utility weight of the quadratic elastic-load utility.
    """

    id: int
    ancestor: int | None = None
    p_l_mw: float = 0.0
    q_l_mvar: float = 0.0
    pf: float = 1.0
    pc_min_mw: float = 0.0
    pc_max_mw: float = 0.0
    s_w_mva: float = 0.0
    q_s: float = 0.0
    k_u: float = 1.0


@dataclass(frozen=True)
class LineParams:
    """Line feeding ``node`` from its ancestor, physical units."""

    node: int
    r_ohm: float
    x_ohm: float
    l_max_ka2: float


# quantity kinds understood by the per-unit converters
_PU_KINDS = ("power", "voltage_sq", "impedance", "current_sq", "shunt")


@dataclass(frozen=True)
class Network:
    """Validated radial feeder.

    Holds the original physical-unit parameters plus derived structure
    (children sets, topological order) and per-unit arrays laid out in
    topological order, root first. Instances come from
    :func:`build_network`; do not construct directly.
    """

    nodes: dict[int, NodeParams]
    lines: dict[int, LineParams]
    v0_kv: float
    s_base_mva: float
    epsilon: float
    # derived structure, filled by build_network
    children: dict[int, tuple[int, ...]] = field(repr=False, default_factory=dict)
    order: tuple[int, ...] = field(repr=False, default=())

    # ---- structure helpers -------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> int:
        return 0

    def index(self, node: int) -> int:
        """Position of ``node`` in topological order."""
        try:
            return self._index[node]
        except KeyError:
            raise UnknownNode(f"node {node} not in network") from None

    @property
    def _index(self) -> dict[int, int]:
        # cached lazily on the instance; frozen dataclass so go through __dict__
        cached = self.__dict__.get("_index_cache")
        if cached is None:
            cached = {nid: k for k, nid in enumerate(self.order)}
            self.__dict__["_index_cache"] = cached
        return cached

    def ancestor_of(self, node: int) -> int | None:
        if node not in self.nodes:
            raise UnknownNode(f"node {node} not in network")
        return self.nodes[node].ancestor

    @property
    def leaves(self) -> tuple[int, ...]:
        return tuple(i for i in self.order if not self.children[i])

    # ---- per-unit bases ----------------------------------------------------

    @property
    def v_base_sq(self) -> float:
        """Voltage-squared base, (kV)^2."""
        return self.v0_kv * self.v0_kv

    @property
    def z_base_ohm(self) -> float:
        return self.v0_kv * self.v0_kv / self.s_base_mva

    @property
    def i_base_ka(self) -> float:
        return self.s_base_mva / self.v0_kv

    def to_per_unit(self, value, kind: str):
        """Normalize a physical quantity. ``kind`` selects the base."""
        if kind == "power":
            return value / self.s_base_mva
        if kind == "voltage_sq":
            return value / self.v_base_sq
        if kind == "impedance":
            return value / self.z_base_ohm
        if kind == "current_sq":
            return value / (self.i_base_ka * self.i_base_ka)
        if kind == "shunt":
            # MVar per (kV)^2 times v_base^2, per S_base
            return value * self.v_base_sq / self.s_base_mva
        raise BadParameter(f"unknown per-unit kind {kind!r}, expected one of {_PU_KINDS}")

    def from_per_unit(self, value, kind: str):
        """Inverse of :meth:`to_per_unit`."""
        if kind == "power":
            return value * self.s_base_mva
        if kind == "voltage_sq":
            return value * self.v_base_sq
        if kind == "impedance":
            return value * self.z_base_ohm
        if kind == "current_sq":
            return value * (self.i_base_ka * self.i_base_ka)
        if kind == "shunt":
            return value * self.s_base_mva / self.v_base_sq
        raise BadParameter(f"unknown per-unit kind {kind!r}, expected one of {_PU_KINDS}")

    # ---- per-unit arrays in topological order ------------------------------

    @property
    def arrays(self) -> "NetworkArrays":
        cached = self.__dict__.get("_arrays_cache")
        if cached is None:
            cached = NetworkArrays._build(self)
            self.__dict__["_arrays_cache"] = cached
        return cached


class NetworkArrays:
    """Per-unit numpy views of a network, indexed by topological position.

    Root sits at position 0. Line quantities at the root position are 0
    (r, x) and +inf (l_max) and must never be read by solver code.
    """

    __slots__ = (
        "ids", "pos_of", "ancestor_pos", "children_pos",
        "p_l", "q_l", "kappa", "pc_min", "pc_max", "s_w", "q_s", "k_u",
        "r", "x", "l_max",
    )

    @classmethod
    def _build(cls, net: Network) -> "NetworkArrays":
        self = cls.__new__(cls)
        n = net.n_nodes
        self.ids = np.array(net.order, dtype=np.int64)
        self.pos_of = {nid: k for k, nid in enumerate(net.order)}
        self.ancestor_pos = np.full(n, -1, dtype=np.int64)
        self.children_pos = []
        self.p_l = np.zeros(n)
        self.q_l = np.zeros(n)
        self.kappa = np.zeros(n)
        self.pc_min = np.zeros(n)
        self.pc_max = np.zeros(n)
        self.s_w = np.zeros(n)
        self.q_s = np.zeros(n)
        self.k_u = np.zeros(n)
        self.r = np.zeros(n)
        self.x = np.zeros(n)
        self.l_max = np.full(n, np.inf)
        for k, nid in enumerate(net.order):
            node = net.nodes[nid]
            if node.ancestor is not None:
                self.ancestor_pos[k] = self.pos_of[node.ancestor]
                line = net.lines[nid]
                self.r[k] = net.to_per_unit(line.r_ohm, "impedance")
                self.x[k] = net.to_per_unit(line.x_ohm, "impedance")
                self.l_max[k] = net.to_per_unit(line.l_max_ka2, "current_sq")
            self.p_l[k] = net.to_per_unit(node.p_l_mw, "power")
            self.q_l[k] = net.to_per_unit(node.q_l_mvar, "power")
            self.kappa[k] = reactive_slope(node.pf)
            self.pc_min[k] = net.to_per_unit(node.pc_min_mw, "power")
            self.pc_max[k] = net.to_per_unit(node.pc_max_mw, "power")
            self.s_w[k] = net.to_per_unit(node.s_w_mva, "power")
            self.q_s[k] = net.to_per_unit(node.q_s, "shunt")
            self.k_u[k] = node.k_u
        for nid in net.order:
            self.children_pos.append(tuple(self.pos_of[c] for c in net.children[nid]))
        return self


def _check_node_params(node: NodeParams) -> None:
    i = node.id
    if not isinstance(i, int) or isinstance(i, bool) or i < 0:
        raise BadParameter(f"node id must be a non-negative integer, got {i!r}")
    if not (0.0 < node.pf <= 1.0):
        raise BadParameter(f"pf of node {i} must lie in (0, 1], got {node.pf}")
    if node.pc_min_mw < 0.0 or node.pc_min_mw > node.pc_max_mw:
        raise BadParameter(
            f"pc bounds of node {i} must satisfy 0 <= pc_min <= pc_max, "
            f"got [{node.pc_min_mw}, {node.pc_max_mw}]"
        )
    if node.s_w_mva < 0.0:
        raise BadParameter(f"s_w of node {i} must be >= 0, got {node.s_w_mva}")
    if node.p_l_mw < 0.0:
        raise BadParameter(f"p_l of node {i} must be >= 0, got {node.p_l_mw}")
    if node.q_s < 0.0:
        raise BadParameter(f"q_s of node {i} must be >= 0, got {node.q_s}")
    if node.k_u < 0.0:
        raise BadParameter(f"k_u of node {i} must be >= 0, got {node.k_u}")


def _check_line_params(line: LineParams) -> None:
    i = line.node
    if line.r_ohm < 0.0 or line.x_ohm < 0.0:
        raise BadParameter(f"line {i} impedance must be non-negative, got r={line.r_ohm}, x={line.x_ohm}")
    if line.r_ohm == 0.0 and line.x_ohm == 0.0:
        raise BadParameter(f"line {i} must have r > 0 or x > 0")
    if not line.l_max_ka2 > 0.0:
        raise BadParameter(f"line {i} l_max must be > 0, got {line.l_max_ka2}")


def build_network(
    nodes: list[NodeParams] | tuple[NodeParams, ...],
    lines: list[LineParams] | tuple[LineParams, ...],
    *,
    v0_kv: float,
    s_base_mva: float,
    epsilon: float,
) -> Network:
    """Validate and assemble a radial feeder.

    Raises
    ------
    BadParameter
        Out-of-range scalar parameters (the message names field and node).
    DisconnectedNode
        A non-root node without an ancestor, or an ancestor outside the
        node set.
    CycleDetected
        The ancestor relation contains a cycle.
    MissingLine
        A non-root node lacks its line.
    """
    if not v0_kv > 0.0:
        raise BadParameter(f"v0_kv must be > 0, got {v0_kv}")
    if not s_base_mva > 0.0:
        raise BadParameter(f"s_base_mva must be > 0, got {s_base_mva}")
    if not (0.0 < epsilon < 1.0):
        raise BadParameter(f"epsilon must lie in (0, 1), got {epsilon}")

    node_map: dict[int, NodeParams] = {}
    for node in nodes:
        _check_node_params(node)
        if node.id in node_map:
            raise BadParameter(f"duplicate node id {node.id}")
        node_map[node.id] = node
    if 0 not in node_map:
        raise DisconnectedNode("root node 0 is missing")
    root = node_map[0]
    if root.ancestor is not None:
        raise BadParameter("root node 0 must not have an ancestor")
    if root.p_l_mw or root.q_l_mvar or root.pc_max_mw or root.s_w_mva:
        raise BadParameter("root node 0 must have zero load, elastic demand, and PV")

    for node in node_map.values():
        if node.id == 0:
            continue
        if node.ancestor is None:
            raise DisconnectedNode(f"node {node.id} has no ancestor and is not the root")
        if node.ancestor not in node_map:
            raise DisconnectedNode(f"node {node.id} references unknown ancestor {node.ancestor}")
        if node.ancestor == node.id:
            raise CycleDetected(f"node {node.id} is its own ancestor")

    # walk each node's ancestor chain; a revisit inside the current walk is a cycle
    state: dict[int, int] = {}  # 0 = in progress, 1 = reaches root
    for start in node_map:
        chain = []
        cur = start
        while cur != 0 and state.get(cur) != 1:
            if state.get(cur) == 0:
                raise CycleDetected(f"cycle through node {cur}")
            state[cur] = 0
            chain.append(cur)
            cur = node_map[cur].ancestor  # type: ignore[assignment]
        for visited in chain:
            state[visited] = 1

    line_map: dict[int, LineParams] = {}
    for line in lines:
        _check_line_params(line)
        if line.node in line_map:
            raise BadParameter(f"duplicate line for node {line.node}")
        if line.node not in node_map:
            raise BadParameter(f"line references unknown node {line.node}")
        if line.node == 0:
            raise BadParameter("root node 0 has no incident line")
        line_map[line.node] = line
    for nid in node_map:
        if nid != 0 and nid not in line_map:
            raise MissingLine(f"node {nid} has no line")

    children: dict[int, list[int]] = {nid: [] for nid in node_map}
    for nid, node in node_map.items():
        if node.ancestor is not None:
            children[node.ancestor].append(nid)
    for nid in children:
        children[nid].sort()

    # breadth-first topological order, root first, children in id order
    order: list[int] = [0]
    head = 0
    while head < len(order):
        order.extend(children[order[head]])
        head += 1
    if len(order) != len(node_map):  # unreachable after the checks above
        raise DisconnectedNode("tree walk did not reach every node")

    return Network(
        nodes=node_map,
        lines=line_map,
        v0_kv=float(v0_kv),
        s_base_mva=float(s_base_mva),
        epsilon=float(epsilon),
        children={nid: tuple(kids) for nid, kids in children.items()},
        order=tuple(order),
    )


def path_to_root(network: Network, node: int, include_root: bool = True) -> list[int]:
    """Ordered node list from the root down to ``node`` (inclusive).

    With ``include_root=False`` the root is dropped, giving the strict
    downstream path.
    """
    if node not in network.nodes:
        raise UnknownNode(f"node {node} not in network")
    path = []
    cur: int | None = node
    while cur is not None:
        path.append(cur)
        cur = network.nodes[cur].ancestor
    path.reverse()
    return path if include_root else path[1:]


def make_feeder(
    trunk_len: int,
    laterals: tuple[tuple[int, int], ...] | list[tuple[int, int]] = (),
    *,
    spacing_km: float = 0.2,
    r_ohm_per_km: float = 0.33,
    x_ohm_per_km: float = 0.38,
    v0_kv: float = 7.2,
    s_base_mva: float = 1.0,
    epsilon: float = 0.05,
    p_l_mw: float = 0.1,
    q_l_mvar: float | None = None,
    pf: float = 0.94,
    pc_min_mw: float = 0.0,
    pc_max_mw: float = 0.05,
    l_max_ka2: float = 0.5,
    s_w_default_mva: float = 0.1,
    pv_nodes: list[int] | tuple[int, ...] | None = None,
    s_w_overrides: dict[int, float] | None = None,
    q_s: float = 0.0,
    k_u: float = 1.0,
) -> Network:
    """Build the parametric test feeders: a trunk plus optional laterals.

    Trunk nodes are 1..trunk_len chained from the substation; each lateral
    ``(attach, length)`` contributes ``length`` nodes numbered consecutively
    after all previous nodes, branching off ``attach``. Every line has the
    same impedance ``(r + jx) * spacing``. All user nodes carry the same
    load and elastic-demand parameters.

    ``pv_nodes=None`` puts a PV inverter of ``s_w_default_mva`` on every
    user node; otherwise only on the listed nodes. ``s_w_overrides``
    adjusts individual nameplates afterwards.
    """
    if trunk_len < 1:
        raise BadParameter(f"trunk_len must be >= 1, got {trunk_len}")
    if q_l_mvar is None:
        q_l_mvar = p_l_mw * reactive_slope(pf)
    r_line = r_ohm_per_km * spacing_km
    x_line = x_ohm_per_km * spacing_km

    ancestors: dict[int, int] = {}
    next_id = 1
    for _ in range(trunk_len):
        ancestors[next_id] = next_id - 1
        next_id += 1
    for attach, length in laterals:
        if attach not in ancestors and attach != 0:
            raise BadParameter(f"lateral attaches at unknown node {attach}")
        prev = attach
        for _ in range(length):
            ancestors[next_id] = prev
            prev = next_id
            next_id += 1

    pv_set = set(pv_nodes) if pv_nodes is not None else set(ancestors)
    overrides = dict(s_w_overrides or {})
    nodes = [NodeParams(id=0)]
    lines = []
    for nid, anc in ancestors.items():
        s_w = s_w_default_mva if nid in pv_set else 0.0
        s_w = overrides.get(nid, s_w)
        nodes.append(
            NodeParams(
                id=nid,
                ancestor=anc,
                p_l_mw=p_l_mw,
                q_l_mvar=q_l_mvar,
                pf=pf,
                pc_min_mw=pc_min_mw,
                pc_max_mw=pc_max_mw,
                s_w_mva=s_w,
                q_s=q_s,
                k_u=k_u,
            )
        )
        lines.append(LineParams(node=nid, r_ohm=r_line, x_ohm=x_line, l_max_ka2=l_max_ka2))
    return build_network(nodes, lines, v0_kv=v0_kv, s_base_mva=s_base_mva, epsilon=epsilon)


# ---- JSON serialization ----------------------------------------------------

def network_to_dict(network: Network) -> dict:
    return {
        "v0_kv": network.v0_kv,
        "s_base_mva": network.s_base_mva,
        "epsilon": network.epsilon,
        "nodes": [
            {
                "id": n.id,
                "ancestor": n.ancestor,
                "p_l_mw": n.p_l_mw,
                "q_l_mvar": n.q_l_mvar,
                "pf": n.pf,
                "pc_min_mw": n.pc_min_mw,
                "pc_max_mw": n.pc_max_mw,
                "s_w_mva": n.s_w_mva,
                "q_s": n.q_s,
                "k_u": n.k_u,
            }
            for n in (network.nodes[i] for i in network.order)
        ],
        "lines": [
            {
                "node": ln.node,
                "r_ohm": ln.r_ohm,
                "x_ohm": ln.x_ohm,
                "l_max_ka2": ln.l_max_ka2,
            }
            for ln in (network.lines[i] for i in network.order if i != 0)
        ],
    }


def network_from_dict(data: dict) -> Network:
    try:
        nodes = [
            NodeParams(
                id=entry["id"],
                ancestor=entry.get("ancestor"),
                p_l_mw=entry.get("p_l_mw", 0.0),
                q_l_mvar=entry.get("q_l_mvar", 0.0),
                pf=entry.get("pf", 1.0),
                pc_min_mw=entry.get("pc_min_mw", 0.0),
                pc_max_mw=entry.get("pc_max_mw", 0.0),
                s_w_mva=entry.get("s_w_mva", 0.0),
                q_s=entry.get("q_s", 0.0),
                k_u=entry.get("k_u", 1.0),
            )
            for entry in data["nodes"]
        ]
        lines = [
            LineParams(
                node=entry["node"],
                r_ohm=entry["r_ohm"],
                x_ohm=entry["x_ohm"],
                l_max_ka2=entry["l_max_ka2"],
            )
            for entry in data["lines"]
        ]
        return build_network(
            nodes,
            lines,
            v0_kv=data["v0_kv"],
            s_base_mva=data["s_base_mva"],
            epsilon=data["epsilon"],
        )
    except KeyError as exc:
        raise BadParameter(f"network JSON missing field {exc}") from None


def load_network(path) -> Network:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def save_network(network: Network, path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(network), fh, indent=2)
        fh.write("\n")
