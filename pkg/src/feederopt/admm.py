"""Decentralized consensus solver for the stochastic OPF.

Each node runs the same three-phase loop: solve a small equality-
constrained QP over its local flow block (x phase), project the shared
copies onto the cone-box/box sets (z phase), then integrate the
multipliers of every coupling it owns. Phases are synchronous with
barriers in between; within a phase all (node, scenario) subproblems
are independent, so they can run on a thread pool without changing any
result (all reductions happen afterwards in fixed node order).

Internally everything is per unit; the solution is scaled back to
physical units at extraction.

Per-node variable rows, non-root: P, Q, v, l, v_hat, pc, qw, then
(P_hat, Q_hat, l_hat) per child. Root: P0+, P0- (or a single P0 when a
custom root cost is installed), then the child copies.
"""

from __future__ import annotations

import time
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .closedform import (
    ScaledIdentityQp,
    box_project,
    project_cone_box,
    scaled_cone_instance,
    update_pc_tilde,
    voltage_from_z3,
)
from .errors import BadParameter, NoKktCase, SingularSchur
from .program import Solution, StochasticProgram
from .seeding import derived_seed

__all__ = [
    "SolverConfig",
    "SolveReport",
    "AdmmState",
    "ZBlock",
    "RootZBlock",
    "MultiplierBlock",
    "RootMultiplierBlock",
    "init_state",
    "x_update",
    "z_update",
    "multiplier_update",
    "residuals",
    "adapt_rho",
    "snapshot_z",
    "solve",
    "extract_solution",
]

# row layout of non-root x blocks; child copies start at HAT_BASE
P_ROW, Q_ROW, V_ROW, L_ROW, VHAT_ROW, PC_ROW, QW_ROW = range(7)
HAT_BASE = 7


@dataclass(frozen=True)
class SolverConfig:
    """Penalty, stopping, and initialization knobs.

    ``rho_policy`` "adaptive" doubles rho when the primal residual
    exceeds 10x the dual one and halves it in the mirror case;
    multipliers are never rescaled. ``init_policy`` "random" draws all
    z variables and multipliers uniform [0,1) from the seed; "zeros"
    starts cold. ``workers`` sizes the per-phase thread pool; results
    are identical for any worker count.
    """

    rho: float = 100.0
    rho_policy: str = "adaptive"
    eps_primal: float = 1e-5
    eps_dual: float = 1e-5
    socp_gap_tol: float = 1e-3
    max_iters: int = 20000
    init_policy: str = "random"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.rho <= 0.0:
            raise BadParameter(f"rho must be > 0, got {self.rho}")
        if self.rho_policy not in ("fixed", "adaptive"):
            raise BadParameter(f"rho_policy must be fixed|adaptive, got {self.rho_policy!r}")
        if min(self.eps_primal, self.eps_dual, self.socp_gap_tol) <= 0.0:
            raise BadParameter("tolerances must be > 0")
        if self.max_iters < 1:
            raise BadParameter("max_iters must be >= 1")
        if self.init_policy not in ("zeros", "random"):
            raise BadParameter(f"init_policy must be zeros|random, got {self.init_policy!r}")
        if self.workers < 1:
            raise BadParameter("workers must be >= 1")


@dataclass
class ZBlock:
    """Consensus copies of a non-root node: per-scenario flow/voltage/
    current/reactive tilde variables plus the scenario-independent
    elastic-demand tilde."""

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    l: np.ndarray
    qw: np.ndarray
    pc: float

    def copy(self) -> "ZBlock":
        return ZBlock(self.p.copy(), self.q.copy(), self.v.copy(),
                      self.l.copy(), self.qw.copy(), self.pc)


@dataclass
class RootZBlock:
    """Root consensus copies: nonnegative import/export pair, or the
    net import when a custom root cost replaces the split."""

    p0_plus: np.ndarray | None = None
    p0_minus: np.ndarray | None = None
    p0: np.ndarray | None = None

    def copy(self) -> "RootZBlock":
        cp = lambda a: None if a is None else a.copy()
        return RootZBlock(cp(self.p0_plus), cp(self.p0_minus), cp(self.p0))


@dataclass
class MultiplierBlock:
    """Multipliers owned by a non-root node: one per coupling whose x
    variable lives in this node's block. ``*_hat`` rows follow the
    node's sorted child order."""

    lam: np.ndarray
    mu: np.ndarray
    gam: np.ndarray
    om: np.ndarray
    om_hat: np.ndarray
    eta: np.ndarray
    theta: np.ndarray
    lam_hat: np.ndarray
    mu_hat: np.ndarray
    gam_hat: np.ndarray


@dataclass
class RootMultiplierBlock:
    lam_hat: np.ndarray
    mu_hat: np.ndarray
    gam_hat: np.ndarray
    zeta_plus: np.ndarray | None = None
    zeta_minus: np.ndarray | None = None
    zeta: np.ndarray | None = None


@dataclass
class AdmmState:
    """Full solver state: per-node x matrices (rows per the module
    layout, one column per scenario), z blocks, multiplier blocks, and
    the current penalty."""

    program: StochasticProgram
    x: dict[int, np.ndarray]
    z: dict[int, ZBlock | RootZBlock]
    y: dict[int, MultiplierBlock | RootMultiplierBlock]
    rho: float


@dataclass
class SolveReport:
    solution: Solution
    traces: dict[str, list[float]]
    iterations: int
    converged: bool
    phase_seconds: dict[str, float]


# ---------------------------------------------------------------------------
# static per-node workspace (constraint matrices, cone geometry)
# ---------------------------------------------------------------------------

@dataclass
class _NodeWs:
    nid: int
    pos: int
    is_root: bool
    child_ids: tuple[int, ...]
    qp: ScaledIdentityQp
    d: np.ndarray                      # (rows, M) static right-hand sides
    n_vars: int
    hat_base: int
    # non-root extras
    r_pu: float = 0.0
    x_pu: float = 0.0
    kappa: float = 0.0
    q_s: float = 0.0
    k_u_eff: float = 0.0
    pc_min: float = 0.0
    pc_max: float = 0.0
    l_max: float = 0.0
    qw_max: np.ndarray | None = None   # (M,)
    anc_is_root: bool = False
    anc_id: int = -1
    anc_slot: int = -1                 # index in the ancestor's child order


@dataclass
class _Workspace:
    nodes: dict[int, _NodeWs]
    order: tuple[int, ...]
    pi: np.ndarray
    a_eff: float
    b_eff: float
    k_loss_eff: float
    v_lo: float
    v_hi: float
    root_cost_pu: object | None       # callable(z_pu) -> monetary, or None
    m_count: int


_WS_CACHE: "weakref.WeakKeyDictionary[StochasticProgram, _Workspace]" = (
    weakref.WeakKeyDictionary()
)


def _build_node_ws(program: StochasticProgram, nid: int) -> _NodeWs:
    net = program.network
    arr = net.arrays
    pos = arr.pos_of[nid]
    children = net.children[nid]
    c = len(children)
    m_count = program.n_scenarios
    hook = program.objective.root_cost is not None

    if nid == net.root:
        head = 1 if hook else 2
        nv = head + 3 * c
        c_mat = np.zeros((1, nv))
        if hook:
            c_mat[0, 0] = 1.0
        else:
            c_mat[0, 0] = 1.0
            c_mat[0, 1] = -1.0
        for t, j in enumerate(children):
            jp = arr.pos_of[j]
            c_mat[0, head + 3 * t] = -1.0
            c_mat[0, head + 3 * t + 2] = -arr.r[jp]
        d = (arr.p_l[pos] - program.w[:, pos]).reshape(1, m_count)
        try:
            qp = ScaledIdentityQp(c_mat)
        except SingularSchur as exc:
            raise SingularSchur(f"node {nid}: {exc}") from None
        return _NodeWs(nid=nid, pos=pos, is_root=True, child_ids=children,
                       qp=qp, d=d, n_vars=nv, hat_base=head)

    nv = HAT_BASE + 3 * c
    r_i = float(arr.r[pos])
    x_i = float(arr.x[pos])
    c_mat = np.zeros((3, nv))
    c_mat[0, P_ROW] = 1.0
    c_mat[0, PC_ROW] = -1.0
    c_mat[1, Q_ROW] = 1.0
    c_mat[1, V_ROW] = float(arr.q_s[pos])
    c_mat[1, QW_ROW] = 1.0
    c_mat[1, PC_ROW] = -float(arr.kappa[pos])
    c_mat[2, VHAT_ROW] = 1.0
    c_mat[2, V_ROW] = -1.0
    c_mat[2, P_ROW] = -2.0 * r_i
    c_mat[2, Q_ROW] = -2.0 * x_i
    c_mat[2, L_ROW] = -(r_i * r_i + x_i * x_i)
    for t, j in enumerate(children):
        jp = arr.pos_of[j]
        c_mat[0, HAT_BASE + 3 * t] = -1.0
        c_mat[0, HAT_BASE + 3 * t + 2] = -arr.r[jp]
        c_mat[1, HAT_BASE + 3 * t + 1] = -1.0
        c_mat[1, HAT_BASE + 3 * t + 2] = -arr.x[jp]
    d = np.empty((3, m_count))
    d[0] = arr.p_l[pos] - program.w[:, pos]
    d[1] = arr.q_l[pos]
    d[2] = 0.0
    try:
        qp = ScaledIdentityQp(c_mat)
    except SingularSchur as exc:
        raise SingularSchur(f"node {nid}: {exc}") from None

    net_anc = net.nodes[nid].ancestor
    s2 = net.s_base_mva**2
    return _NodeWs(
        nid=nid, pos=pos, is_root=False, child_ids=children, qp=qp, d=d,
        n_vars=nv, hat_base=HAT_BASE,
        r_pu=r_i, x_pu=x_i, kappa=float(arr.kappa[pos]),
        q_s=float(arr.q_s[pos]),
        k_u_eff=float(arr.k_u[pos]) * s2,
        pc_min=float(arr.pc_min[pos]), pc_max=float(arr.pc_max[pos]),
        l_max=float(arr.l_max[pos]),
        qw_max=program.qw_max[:, pos].copy(),
        anc_is_root=(net_anc == net.root), anc_id=net_anc,
        anc_slot=net.children[net_anc].index(nid),
    )


def _workspace(program: StochasticProgram) -> _Workspace:
    ws = _WS_CACHE.get(program)
    if ws is not None:
        return ws
    net = program.network
    s = net.s_base_mva
    eps = net.epsilon
    obj = program.objective
    hook = obj.root_cost
    root_cost_pu = None
    if hook is not None:
        root_cost_pu = lambda z: hook(z * s)
    ws = _Workspace(
        nodes={nid: _build_node_ws(program, nid) for nid in net.order},
        order=net.order,
        pi=program.pi,
        a_eff=obj.a * s,
        b_eff=obj.b * s,
        k_loss_eff=obj.k_loss * s,
        v_lo=(1.0 - eps) ** 2,
        v_hi=(1.0 + eps) ** 2,
        root_cost_pu=root_cost_pu,
        m_count=program.n_scenarios,
    )
    _WS_CACHE[program] = ws
    return ws


# ---------------------------------------------------------------------------
# state setup
# ---------------------------------------------------------------------------

def init_state(program: StochasticProgram, config: SolverConfig) -> AdmmState:
    """Allocate x blocks (zeros) and set z/multipliers per the policy.

    Random draws happen in topological node order with a fixed field
    order inside each block, so a given seed always produces the same
    state regardless of later parallelism.
    """
    ws = _workspace(program)
    m_count = ws.m_count
    hook = ws.root_cost_pu is not None
    rng = np.random.default_rng(derived_seed(config.seed, "admm-init"))
    rand = config.init_policy == "random"

    def draw(shape):
        if rand:
            return rng.uniform(size=shape)
        return np.zeros(shape)

    x = {}
    z = {}
    for nid in ws.order:
        nws = ws.nodes[nid]
        x[nid] = np.zeros((nws.n_vars, m_count))
        if nws.is_root:
            if hook:
                z[nid] = RootZBlock(p0=draw(m_count))
            else:
                z[nid] = RootZBlock(p0_plus=draw(m_count), p0_minus=draw(m_count))
        else:
            z[nid] = ZBlock(p=draw(m_count), q=draw(m_count), v=draw(m_count),
                            l=draw(m_count), qw=draw(m_count),
                            pc=float(draw(())) if rand else 0.0)
    y = {}
    for nid in ws.order:
        nws = ws.nodes[nid]
        c = len(nws.child_ids)
        if nws.is_root:
            if hook:
                y[nid] = RootMultiplierBlock(
                    zeta=draw(m_count),
                    lam_hat=draw((c, m_count)), mu_hat=draw((c, m_count)),
                    gam_hat=draw((c, m_count)))
            else:
                y[nid] = RootMultiplierBlock(
                    zeta_plus=draw(m_count), zeta_minus=draw(m_count),
                    lam_hat=draw((c, m_count)), mu_hat=draw((c, m_count)),
                    gam_hat=draw((c, m_count)))
        else:
            y[nid] = MultiplierBlock(
                lam=draw(m_count), mu=draw(m_count), gam=draw(m_count),
                om=draw(m_count), om_hat=draw(m_count),
                eta=draw(m_count), theta=draw(m_count),
                lam_hat=draw((c, m_count)), mu_hat=draw((c, m_count)),
                gam_hat=draw((c, m_count)))
    return AdmmState(program=program, x=x, z=z, y=y, rho=config.rho)


# ---------------------------------------------------------------------------
# x phase
# ---------------------------------------------------------------------------

def _x_block(nid: int, state: AdmmState, ws: _Workspace) -> np.ndarray:
    """Batched x-update of one node over all scenarios: assemble the
    linear terms from the owned couplings and solve the equality QP."""
    nws = ws.nodes[nid]
    rho = state.rho
    m_count = ws.m_count
    y = state.y[nid]
    b = np.empty((nws.n_vars, m_count))
    if nws.is_root:
        zr = state.z[nid]
        if ws.root_cost_pu is not None:
            b[0] = y.zeta - rho * zr.p0
        else:
            b[0] = ws.pi * ws.a_eff + y.zeta_plus - rho * zr.p0_plus
            b[1] = -ws.pi * ws.b_eff + y.zeta_minus - rho * zr.p0_minus
    else:
        zi = state.z[nid]
        b[P_ROW] = y.lam - rho * zi.p
        b[Q_ROW] = y.mu - rho * zi.q
        b[V_ROW] = y.om - rho * zi.v
        b[L_ROW] = y.gam - rho * zi.l + ws.k_loss_eff * nws.r_pu * ws.pi
        if nws.anc_is_root:
            b[VHAT_ROW] = y.om_hat - rho * 1.0
        else:
            b[VHAT_ROW] = y.om_hat - rho * state.z[nws.anc_id].v
        b[PC_ROW] = y.eta - rho * zi.pc
        b[QW_ROW] = y.theta - rho * zi.qw
    base = nws.hat_base
    for t, j in enumerate(nws.child_ids):
        zj = state.z[j]
        b[base + 3 * t] = y.lam_hat[t] - rho * zj.p
        b[base + 3 * t + 1] = y.mu_hat[t] - rho * zj.q
        b[base + 3 * t + 2] = y.gam_hat[t] - rho * zj.l
    return nws.qp.solve(rho, b, nws.d)


def x_update(node: int, scenario: int, state: AdmmState,
             program: StochasticProgram) -> np.ndarray:
    """One node's x variables for one scenario (rows per module layout)."""
    ws = _workspace(program)
    return _x_block(node, state, ws)[:, scenario]


# ---------------------------------------------------------------------------
# z phase
# ---------------------------------------------------------------------------

def _hat_rows(ws: _Workspace, nws: _NodeWs) -> tuple[int, int, int]:
    """Row indices of this node's copies inside its ancestor's block."""
    anc_ws = ws.nodes[nws.anc_id]
    base = anc_ws.hat_base + 3 * nws.anc_slot
    return base, base + 1, base + 2


def _z_block(nid: int, state: AdmmState, ws: _Workspace):
    nws = ws.nodes[nid]
    rho = state.rho
    if nws.is_root:
        y = state.y[nid]
        xr = state.x[nid]
        if ws.root_cost_pu is not None:
            cost = ws.root_cost_pu
            pi = ws.pi
            out = np.empty(ws.m_count)
            for m in range(ws.m_count):
                p0, zeta, pim = xr[0, m], y.zeta[m], pi[m]

                def g(zv):
                    return (pim * cost(zv) - zeta * zv
                            + 0.5 * rho * (p0 - zv) ** 2)

                center = p0 + zeta / rho
                h = max(1.0, abs(center))
                res = scipy.optimize.minimize_scalar(
                    g, bracket=(center - h, center + h),
                    method="brent", options={"xtol": 1e-12})
                out[m] = res.x
            return RootZBlock(p0=out)
        p0p = np.maximum(xr[0] + y.zeta_plus / rho, 0.0)
        p0m = np.maximum(xr[1] + y.zeta_minus / rho, 0.0)
        return RootZBlock(p0_plus=p0p, p0_minus=p0m)

    x_i = state.x[nid]
    y_i = state.y[nid]
    y_anc = state.y[nws.anc_id]
    x_anc = state.x[nws.anc_id]
    pr, qr, lr = _hat_rows(ws, nws)
    t = nws.anc_slot

    c1 = -(x_i[P_ROW] + x_anc[pr] + (y_i.lam + y_anc.lam_hat[t]) / rho)
    c2 = -(x_i[Q_ROW] + x_anc[qr] + (y_i.mu + y_anc.mu_hat[t]) / rho)
    c4 = -(x_i[L_ROW] + x_anc[lr] + (y_i.gam + y_anc.gam_hat[t]) / rho)
    v_sum = x_i[V_ROW].copy()
    om_sum = y_i.om.copy()
    for j in nws.child_ids:
        v_sum = v_sum + state.x[j][VHAT_ROW]
        om_sum = om_sum + state.y[j].om_hat
    v_coeff = -(v_sum + om_sum / rho)

    n_child = len(nws.child_ids)
    m_count = ws.m_count
    p_t = np.empty(m_count)
    q_t = np.empty(m_count)
    v_t = np.empty(m_count)
    l_t = np.empty(m_count)
    for m in range(m_count):
        inst = scaled_cone_instance(
            p_coeff=float(c1[m]), q_coeff=float(c2[m]),
            v_coeff=float(v_coeff[m]), l_coeff=float(c4[m]),
            n_children=n_child, v_lo=ws.v_lo, v_hi=ws.v_hi,
            l_max=nws.l_max,
        )
        try:
            z1, z2, z3, z4 = project_cone_box(inst)
        except NoKktCase as exc:
            raise NoKktCase(f"node {nid} scenario {m}: {exc}") from None
        p_t[m] = z1
        q_t[m] = z2
        v_t[m] = voltage_from_z3(z3, n_child)
        l_t[m] = z4

    qw_t = np.clip(x_i[QW_ROW] + y_i.theta / rho, -nws.qw_max, nws.qw_max)
    pc_t = update_pc_tilde(nws.k_u_eff, nws.pc_max, nws.pc_min,
                           y_i.eta, x_i[PC_ROW], rho)
    return ZBlock(p=p_t, q=q_t, v=v_t, l=l_t, qw=qw_t, pc=pc_t)


def z_update(node: int, state: AdmmState, program: StochasticProgram):
    """One node's consensus block across all scenarios."""
    return _z_block(node, state, _workspace(program))


# ---------------------------------------------------------------------------
# multipliers and residuals
# ---------------------------------------------------------------------------

def multiplier_update(state: AdmmState, rho: float) -> AdmmState:
    """Integrate every owned coupling residual: y += rho*(x - z)."""
    ws = _workspace(state.program)
    for nid in ws.order:
        nws = ws.nodes[nid]
        y = state.y[nid]
        x = state.x[nid]
        if nws.is_root:
            zr = state.z[nid]
            if ws.root_cost_pu is not None:
                y.zeta += rho * (x[0] - zr.p0)
            else:
                y.zeta_plus += rho * (x[0] - zr.p0_plus)
                y.zeta_minus += rho * (x[1] - zr.p0_minus)
        else:
            zi = state.z[nid]
            y.lam += rho * (x[P_ROW] - zi.p)
            y.mu += rho * (x[Q_ROW] - zi.q)
            y.gam += rho * (x[L_ROW] - zi.l)
            y.om += rho * (x[V_ROW] - zi.v)
            if nws.anc_is_root:
                y.om_hat += rho * (x[VHAT_ROW] - 1.0)
            else:
                y.om_hat += rho * (x[VHAT_ROW] - state.z[nws.anc_id].v)
            y.eta += rho * (x[PC_ROW] - zi.pc)
            y.theta += rho * (x[QW_ROW] - zi.qw)
        base = nws.hat_base
        for t, j in enumerate(nws.child_ids):
            zj = state.z[j]
            y.lam_hat[t] += rho * (x[base + 3 * t] - zj.p)
            y.mu_hat[t] += rho * (x[base + 3 * t + 1] - zj.q)
            y.gam_hat[t] += rho * (x[base + 3 * t + 2] - zj.l)
    return state


def snapshot_z(state: AdmmState) -> dict:
    """Copy of all z blocks, for the dual residual of the next sweep."""
    return {nid: blk.copy() for nid, blk in state.z.items()}


def residuals(state: AdmmState, prev_z: dict, rho: float) -> tuple[float, float]:
    """Primal r = norm of all coupling gaps; dual s = rho * norm of the
    structural A'B(z - z_prev), each z delta weighted by the number of
    couplings its variable appears in."""
    ws = _workspace(state.program)
    r_parts = []
    s_parts = []
    sqrt2 = np.sqrt(2.0)
    sqrt_m = np.sqrt(float(ws.m_count))
    for nid in ws.order:
        nws = ws.nodes[nid]
        x = state.x[nid]
        znew = state.z[nid]
        zold = prev_z[nid]
        if nws.is_root:
            if ws.root_cost_pu is not None:
                r_parts.append(x[0] - znew.p0)
                s_parts.append(znew.p0 - zold.p0)
            else:
                r_parts.append(x[0] - znew.p0_plus)
                r_parts.append(x[1] - znew.p0_minus)
                s_parts.append(znew.p0_plus - zold.p0_plus)
                s_parts.append(znew.p0_minus - zold.p0_minus)
        else:
            r_parts.append(x[P_ROW] - znew.p)
            r_parts.append(x[Q_ROW] - znew.q)
            r_parts.append(x[L_ROW] - znew.l)
            r_parts.append(x[V_ROW] - znew.v)
            if nws.anc_is_root:
                r_parts.append(x[VHAT_ROW] - 1.0)
            else:
                r_parts.append(x[VHAT_ROW] - state.z[nws.anc_id].v)
            r_parts.append(x[PC_ROW] - znew.pc)
            r_parts.append(x[QW_ROW] - znew.qw)
            c = len(nws.child_ids)
            s_parts.append(sqrt2 * (znew.p - zold.p))
            s_parts.append(sqrt2 * (znew.q - zold.q))
            s_parts.append(sqrt2 * (znew.l - zold.l))
            s_parts.append(np.sqrt(1.0 + c) * (znew.v - zold.v))
            s_parts.append(znew.qw - zold.qw)
            s_parts.append(np.array([sqrt_m * (znew.pc - zold.pc)]))
        base = nws.hat_base
        for t, j in enumerate(nws.child_ids):
            zj = state.z[j]
            r_parts.append(x[base + 3 * t] - zj.p)
            r_parts.append(x[base + 3 * t + 1] - zj.q)
            r_parts.append(x[base + 3 * t + 2] - zj.l)
    r_vec = np.concatenate(r_parts) if r_parts else np.zeros(1)
    s_vec = np.concatenate(s_parts) if s_parts else np.zeros(1)
    return float(np.sqrt(r_vec @ r_vec)), float(rho * np.sqrt(s_vec @ s_vec))


def adapt_rho(rho: float, r: float, s: float) -> float:
    """Double on primal dominance, halve on dual dominance (factor-10
    threshold). No multiplier rescaling anywhere."""
    if r > 10.0 * s:
        return 2.0 * rho
    if s > 10.0 * r:
        return 0.5 * rho
    return rho


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _socp_gap(state: AdmmState, ws: _Workspace) -> float:
    worst = -np.inf
    for nid in ws.order:
        if ws.nodes[nid].is_root:
            continue
        x = state.x[nid]
        expr = x[V_ROW] * x[L_ROW] - x[P_ROW] ** 2 - x[Q_ROW] ** 2
        worst = max(worst, float(expr.max()))
    return worst if np.isfinite(worst) else 0.0


def _objective_trace(state: AdmmState, ws: _Workspace) -> float:
    util = 0.0
    loss = 0.0
    for nid in ws.order:
        nws = ws.nodes[nid]
        if nws.is_root:
            continue
        z = state.z[nid]
        util += nws.k_u_eff * (z.pc - nws.pc_max) ** 2
        loss += float(ws.pi @ state.x[nid][L_ROW]) * nws.r_pu
    zr = state.z[state.program.network.root]
    if ws.root_cost_pu is not None:
        root = float(np.sum(ws.pi * np.array([ws.root_cost_pu(v) for v in zr.p0])))
    else:
        root = float(np.sum(ws.pi * (ws.a_eff * zr.p0_plus - ws.b_eff * zr.p0_minus)))
    return util + root + ws.k_loss_eff * loss


def extract_solution(state: AdmmState, program: StochasticProgram) -> Solution:
    """Physical-unit solution: first stage from the z side, flows and
    voltages from the x side (they satisfy the balance rows exactly),
    root split from the z side (nonnegative by construction)."""
    net = program.network
    ws = _workspace(program)
    arr = net.arrays
    s = net.s_base_mva
    v_base = net.v_base_sq
    i_base2 = net.i_base_ka**2
    m_count = ws.m_count
    root = net.root

    pc = {root: 0.0}
    for nid in net.order:
        if nid == root:
            continue
        pc[nid] = state.z[nid].pc * s

    qw, p, q, v, l = [], [], [], [], []
    zr = state.z[root]
    xr = state.x[root]
    rws = ws.nodes[root]
    if ws.root_cost_pu is not None:
        p0p = np.maximum(zr.p0, 0.0) * s
        p0m = np.maximum(-zr.p0, 0.0) * s
        p0_net = xr[0]
    else:
        p0p = zr.p0_plus * s
        p0m = zr.p0_minus * s
        p0_net = xr[0] - xr[1]
    for m in range(m_count):
        qw_m = {root: 0.0}
        p_m = {}
        q_m = {}
        v_m = {root: v_base * 1.0}
        l_m = {}
        q0 = arr.q_l[0] - arr.q_s[0] * 1.0
        for t in range(len(rws.child_ids)):
            jp = arr.pos_of[rws.child_ids[t]]
            base = rws.hat_base + 3 * t
            q0 += xr[base + 1, m] + arr.x[jp] * xr[base + 2, m]
        p_m[root] = float(p0_net[m]) * s
        q_m[root] = float(q0) * s
        for nid in net.order:
            if nid == root:
                continue
            x = state.x[nid]
            qw_m[nid] = float(x[QW_ROW, m]) * s
            p_m[nid] = float(x[P_ROW, m]) * s
            q_m[nid] = float(x[Q_ROW, m]) * s
            v_m[nid] = float(x[V_ROW, m]) * v_base
            l_m[nid] = float(x[L_ROW, m]) * i_base2
        qw.append(qw_m)
        p.append(p_m)
        q.append(q_m)
        v.append(v_m)
        l.append(l_m)
    return Solution(pc=pc, qw=tuple(qw), p=tuple(p), q=tuple(q),
                    v=tuple(v), l=tuple(l),
                    p0_plus=tuple(float(x) for x in p0p),
                    p0_minus=tuple(float(x) for x in p0m))


def solve(program: StochasticProgram, config: SolverConfig) -> SolveReport:
    """Run synchronous rounds until both residuals and the cone gap meet
    their tolerances, or the iteration cap. Never raises on
    non-convergence; the report carries the flag."""
    ws = _workspace(program)
    state = init_state(program, config)
    traces = {"r": [], "s": [], "objective": [], "gap": [], "rho": []}
    phase_seconds = {"x": 0.0, "z": 0.0, "multiplier": 0.0, "residuals": 0.0}
    converged = False
    iterations = 0

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for _ in range(config.max_iters):
            iterations += 1

            t0 = time.perf_counter()
            if pool is None:
                for nid in ws.order:
                    state.x[nid] = _x_block(nid, state, ws)
            else:
                results = pool.map(lambda n: (n, _x_block(n, state, ws)), ws.order)
                for nid, blk in results:
                    state.x[nid] = blk
            t1 = time.perf_counter()
            phase_seconds["x"] += t1 - t0

            prev_z = snapshot_z(state)
            if pool is None:
                for nid in ws.order:
                    state.z[nid] = _z_block(nid, state, ws)
            else:
                new_z = dict(pool.map(lambda n: (n, _z_block(n, state, ws)), ws.order))
                for nid in ws.order:
                    state.z[nid] = new_z[nid]
            t2 = time.perf_counter()
            phase_seconds["z"] += t2 - t1

            multiplier_update(state, state.rho)
            t3 = time.perf_counter()
            phase_seconds["multiplier"] += t3 - t2

            r, s = residuals(state, prev_z, state.rho)
            gap = _socp_gap(state, ws)
            traces["r"].append(r)
            traces["s"].append(s)
            traces["objective"].append(_objective_trace(state, ws))
            traces["gap"].append(gap)
            traces["rho"].append(state.rho)
            t4 = time.perf_counter()
            phase_seconds["residuals"] += t4 - t3

            if r <= config.eps_primal and s <= config.eps_dual and gap <= config.socp_gap_tol:
                converged = True
                break
            if config.rho_policy == "adaptive":
                state.rho = adapt_rho(state.rho, r, s)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    return SolveReport(
        solution=extract_solution(state, program),
        traces=traces,
        iterations=iterations,
        converged=converged,
        phase_seconds=phase_seconds,
    )
