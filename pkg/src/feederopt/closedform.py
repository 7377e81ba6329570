"""Closed-form solvers used inside the decentralized OPF iteration.

Three building blocks:

* equality-constrained QPs with positive diagonal Hessian (the per-node
  flow update),
* the 4-variable cone-box projection behind the consensus update of
  (P, Q, v, l) triples (minimize sum z_i^2 + c_i z_i subject to a box on
  z3, the rotated cone (z1^2 + z2^2)/z3 <= k2*z4, and a cap on z4),
* scalar box updates for consensus copies of elastic demand and inverter
  reactive output.

All functions are pure and reentrant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import BadBounds, BadParameter, NoKktCase, RankDeficient, SingularSchur

__all__ = [
    "EqQpInstance",
    "solve_equality_qp",
    "ScaledIdentityQp",
    "ConeBoxInstance",
    "ConeBoxResult",
    "project_cone_box",
    "project_cone_box_info",
    "scaled_cone_instance",
    "voltage_from_z3",
    "update_pc_tilde",
    "box_project",
    "positive_part",
]


# ---------------------------------------------------------------------------
# Equality-constrained QP:  min 1/2 x' diag(a) x + b' x  s.t.  C x = d
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EqQpInstance:
    """Diagonal-Hessian QP with independent equality rows."""

    a_diag: np.ndarray
    b: np.ndarray
    c_mat: np.ndarray
    d: np.ndarray


def solve_equality_qp(instance: EqQpInstance) -> np.ndarray:
    """Exact minimizer via the Schur complement of the KKT system.

    With A = diag(a) positive, the KKT system reduces to
    F = (C A^-1 C')^-1 (d + C A^-1 b) and x = A^-1 (C' F - b).
    """
    a = np.asarray(instance.a_diag, dtype=float)
    b = np.asarray(instance.b, dtype=float)
    c_mat = np.atleast_2d(np.asarray(instance.c_mat, dtype=float))
    d = np.atleast_1d(np.asarray(instance.d, dtype=float))
    if a.ndim != 1 or np.any(a <= 0.0):
        raise BadParameter("a_diag must be a strictly positive vector")
    if c_mat.shape[1] != a.size or c_mat.shape[0] != d.size:
        raise BadParameter(
            f"shape mismatch: a_diag {a.size}, C {c_mat.shape}, d {d.size}"
        )
    if np.linalg.matrix_rank(c_mat) < c_mat.shape[0]:
        raise RankDeficient(
            f"equality rows are linearly dependent (rank < {c_mat.shape[0]})"
        )
    ainv = 1.0 / a
    schur = (c_mat * ainv) @ c_mat.T
    try:
        factor = scipy.linalg.cho_factor(schur)
    except scipy.linalg.LinAlgError:
        raise SingularSchur(
            f"Schur complement not positive definite, cond={np.linalg.cond(schur):.3e}"
        ) from None
    f_vec = scipy.linalg.cho_solve(factor, d + (c_mat * ainv) @ b)
    return ainv * (c_mat.T @ f_vec - b)


class ScaledIdentityQp:
    """Prefactored QP solver for A = rho * I with a fixed constraint matrix.

    The Schur complement of C C' does not depend on rho, so one Cholesky
    factorization serves every penalty value and every right-hand side.
    Solves are batched over columns of b and d.
    """

    def __init__(self, c_mat: np.ndarray):
        c_mat = np.atleast_2d(np.asarray(c_mat, dtype=float))
        self.c_mat = c_mat
        if np.linalg.matrix_rank(c_mat) < c_mat.shape[0]:
            raise RankDeficient("constraint rows are linearly dependent")
        gram = c_mat @ c_mat.T
        try:
            self._factor = scipy.linalg.cho_factor(gram)
        except scipy.linalg.LinAlgError:
            raise SingularSchur(
                f"constraint Gram matrix not positive definite, cond={np.linalg.cond(gram):.3e}"
            ) from None

    def solve(self, rho: float, b: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Minimize rho/2 ||x||^2 + b.x s.t. Cx = d, columnwise.

        ``b`` has shape (n, m) and ``d`` shape (p, m); returns (n, m).
        """
        f_vec = scipy.linalg.cho_solve(self._factor, rho * d + self.c_mat @ b)
        return (self.c_mat.T @ f_vec - b) / rho


# ---------------------------------------------------------------------------
# Cone-box projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConeBoxInstance:
    """min sum(z_i^2 + c_i z_i) s.t. z3 in [z3_min, z3_max],
    (z1^2 + z2^2)/z3 <= k2*z4, z4 <= z4_max.

    k2 is the cone scale (the squared reparameterization factor); bounds
    live in the scaled z3 coordinate. Note z4 >= 0 is implied by the cone.
    """

    c1: float
    c2: float
    c3: float
    c4: float
    k2: float
    z3_min: float
    z3_max: float
    z4_max: float


@dataclass(frozen=True)
class ConeBoxResult:
    z1: float
    z2: float
    z3: float
    z4: float
    branch: str
    mu: float
    gamma: float
    objective: float


def scaled_cone_instance(
    p_coeff: float,
    q_coeff: float,
    v_coeff: float,
    l_coeff: float,
    n_children: int,
    v_lo: float,
    v_hi: float,
    l_max: float,
) -> ConeBoxInstance:
    """Build the scaled instance from unscaled consensus coefficients.

    The voltage variable of a node with c children appears in 1 + c
    couplings; substituting z3 = sqrt((c+1)/2) * v normalizes its
    quadratic weight. Callers pass the raw linear coefficient of v and
    unscaled voltage bounds; the scaling lives entirely in here.
    """
    if n_children < 0:
        raise BadParameter(f"n_children must be >= 0, got {n_children}")
    scale = math.sqrt((n_children + 1) / 2.0)
    k2 = 1.0 / scale
    return ConeBoxInstance(
        c1=p_coeff,
        c2=q_coeff,
        c3=k2 * v_coeff,
        c4=l_coeff,
        k2=k2,
        z3_min=scale * v_lo,
        z3_max=scale * v_hi,
        z4_max=l_max,
    )


def voltage_from_z3(z3: float, n_children: int) -> float:
    """Strip the z3 scaling back to the voltage coordinate."""
    return z3 * math.sqrt(2.0 / (n_children + 1))


def _bisect_newton(f, df, lo, hi, flo, fhi, iters=120):
    # safeguarded scalar root finder: keep a sign-change bracket, take
    # Newton steps when they stay inside it, bisect otherwise
    x = 0.5 * (lo + hi)
    for _ in range(iters):
        fx = f(x)
        if fx == 0.0:
            return x
        if (fx > 0.0) == (flo > 0.0):
            lo, flo = x, fx
        else:
            hi, fhi = x, fx
        dfx = df(x)
        if dfx != 0.0:
            xn = x - fx / dfx
            if not (lo < xn < hi):
                xn = 0.5 * (lo + hi)
        else:
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= 1e-15 * (1.0 + abs(x)):
            return xn
        x = xn
    return x


def _enumerate_cone_box(c1, c2, c3, c4, k2, z3lo, z3hi, z4max):
    """KKT enumeration in a rotated frame.

    Coordinates: t >= 0 is the magnitude of (z1, z2) along -(c1, c2), so
    the objective reads t^2 - n*t + z3^2 + c3 z3 + z4^2 + c4 z4 with
    n = ||(c1, c2)||. mu is the cone multiplier, gamma the z4-cap
    multiplier. Returns (t, z3, z4, branch, mu, gamma) of the winner.
    """
    ncn = math.hypot(c1, c2)
    sc = max(1.0, abs(c1), abs(c2), abs(c3), abs(c4), z3hi, z4max if math.isfinite(z4max) else 1.0)
    dtol = 1e-9 * sc
    ptol = 1e-9 * sc

    def clip3(v):
        return min(max(v, z3lo), z3hi)

    if ncn == 0.0:
        # t = 0 is optimal and the problem separates into two box clips
        z3 = clip3(-0.5 * c3)
        z4 = min(max(-0.5 * c4, 0.0), z4max)
        mu = max(0.0, (2.0 * z4 + c4) / k2) if z4 == 0.0 else 0.0
        gamma = max(0.0, -c4 - 2.0 * z4max) if z4 == z4max else 0.0
        return 0.0, z3, z4, "separable", mu, gamma

    candidates = []  # (objective, t, z3, z4, branch, mu, gamma)

    def objective(t, z3, z4):
        return t * t - ncn * t + z3 * z3 + c3 * z3 + z4 * z4 + c4 * z4

    def push(t, z3, z4, branch, mu, gamma):
        # snap onto the feasible set, then record
        z3 = clip3(z3)
        z4 = min(max(z4, 0.0), z4max)
        rad = k2 * z3 * z4
        if t * t > rad:
            t = math.sqrt(rad) if rad > 0.0 else 0.0
        candidates.append((objective(t, z3, z4), t, z3, z4, branch, mu, gamma))

    # --- cone inactive (mu = 0) -------------------------------------------
    t_free = 0.5 * ncn
    z3_free = clip3(-0.5 * c3)
    z4_free = -0.5 * c4
    if 0.0 <= z4_free <= z4max and t_free * t_free <= k2 * z3_free * z4_free:
        # the box-relaxation minimizer satisfies the cone outright, so it
        # attains the relaxation bound: no other branch can beat it
        return t_free, z3_free, z4_free, "free", 0.0, 0.0
    if -ptol <= z4_free <= z4max + ptol:
        if t_free * t_free <= k2 * z3_free * max(z4_free, 0.0) + ptol * sc:
            push(t_free, z3_free, z4_free, "free", 0.0, 0.0)
    gamma_cap = -c4 - 2.0 * z4max
    if gamma_cap >= -dtol:
        if t_free * t_free <= k2 * z3_free * z4max + ptol * sc:
            push(t_free, z3_free, z4max, "cap", 0.0, max(gamma_cap, 0.0))

    # --- z4 at the floor ----------------------------------------------------
    # The cone pins t = 0 there and z3 separates. Never strictly optimal
    # for n > 0, but it is the limit the stationarity branches approach
    # as n -> 0 with c4 > 0, where their roots fall below resolution;
    # keeping it as a candidate bounds that error by the corner gap.
    push(0.0, clip3(-0.5 * c3), 0.0, "floor", 0.0, 0.0)

    # --- cone active, z4 below cap (gamma = 0) -----------------------------
    # z4-stationarity gives z4 = (k2*mu - c4)/2; the cone is tight with
    # t = n*z3 / (2(z3 + mu)).
    bounds = (z3lo, z3hi) if z3lo < z3hi else (z3lo,)
    for z3b in bounds:
        # single monotone equation in mu:
        #   n^2 z3b / (4 (z3b+mu)^2) = k2 (k2 mu - c4) / 2
        def f_mu(mu, z3b=z3b):
            return ncn * ncn * z3b / (4.0 * (z3b + mu) ** 2) - 0.5 * k2 * (k2 * mu - c4)

        def df_mu(mu, z3b=z3b):
            return -ncn * ncn * z3b / (2.0 * (z3b + mu) ** 3) - 0.5 * k2 * k2

        f0 = f_mu(0.0)
        if f0 > 0.0:
            hi_mu = max(1.0, z3b, ncn, abs(c4) / k2)
            fhi = f_mu(hi_mu)
            grow = 0
            while fhi > 0.0 and grow < 200:
                hi_mu *= 4.0
                fhi = f_mu(hi_mu)
                grow += 1
            if fhi <= 0.0:
                mu = _bisect_newton(f_mu, df_mu, 0.0, hi_mu, f0, fhi)
                z4 = 0.5 * (k2 * mu - c4)
                if mu > dtol and z4 <= z4max + ptol:
                    t = ncn * z3b / (2.0 * (z3b + mu))
                    # sign of the z3 bound multiplier must match the bound
                    lam = 2.0 * z3b + c3 - mu * ncn * ncn / (4.0 * (z3b + mu) ** 2)
                    ok = lam >= -dtol if z3b == z3lo else lam <= dtol
                    if z3lo == z3hi:
                        ok = True  # degenerate box, either sign acceptable
                    if ok:
                        which = "lo" if z3b == z3lo else "hi"
                        push(t, z3b, z4, f"cone-bound-{which}", mu, 0.0)

    if z3lo < z3hi:
        # interior z3: with beta = 2 z3 + c3 > 0 and the cone tight,
        # mu solves E1: k2^2 mu^2 - k2 c4 mu - 2 z3 beta = 0 and the
        # z3-stationarity is E2: 4 beta (z3+mu)^2 - mu n^2 = 0. Both are
        # quadratics in mu, so eliminating mu (their resultant) leaves a
        # single polynomial in z3 whose real roots inside the box are
        # the only interior candidates. A grid scan is not reliable
        # here: near beta = 0 the stationarity value is a difference of
        # two like-sized tiny terms and its sign drowns in rounding.
        # The z3 = 0 and beta = 0 factors of the resultant are divided
        # out analytically; keeping them would park a spurious root
        # right next to genuine ones near beta = 0 and wreck the
        # companion-matrix accuracy. What is left is a quartic, expanded
        # here into direct coefficients.
        kk = k2 * k2
        n2 = ncn * ncn
        g = k2 * c4
        quart = np.array([
            16.0 * (kk - 4.0) ** 2,
            8.0 * (kk - 4.0) * (c3 * (kk - 12.0) + 4.0 * g),
            32.0 * c3 * c3 * (6.0 - kk) + 16.0 * g * c3 * (kk - 8.0)
            + 16.0 * g * g + 32.0 * kk * n2,
            32.0 * c3 ** 3 + 16.0 * kk * c3 * n2 + 8.0 * g * n2
            - 32.0 * g * c3 * c3 + 8.0 * g * g * c3 - 2.0 * kk * g * n2,
            4.0 * g * c3 * n2 - kk * n2 * n2,
        ])
        lo_eff = max(z3lo, -0.5 * c3)

        def mu_ratio(z3):
            # mu from the tight-cone quadratic, rationalized so that
            # neither beta -> 0 nor c4 -> 0 cancels; ratio = mu / beta
            beta = 2.0 * z3 + c3
            root_d = math.sqrt(max(c4 * c4 + 8.0 * z3 * beta, 0.0))
            if c4 <= 0.0:
                denom = k2 * (root_d - c4)
                if denom <= 0.0:
                    return 0.0, math.inf
                ratio = 4.0 * z3 / denom
                return ratio * beta, ratio
            mu = (c4 + root_d) / (2.0 * k2)
            if beta <= 0.0:
                return mu, math.inf
            return mu, mu / beta

        def stat(z3):
            mu, ratio = mu_ratio(z3)
            if not math.isfinite(ratio):
                return -math.inf
            return 4.0 * (z3 + mu) ** 2 - ratio * n2

        lead = np.max(np.abs(quart))
        roots = np.roots(quart) if lead > 0.0 else []
        for z3r in roots:
            if abs(z3r.imag) > 1e-7 * max(1.0, abs(z3r.real)):
                continue
            z3 = clip3(float(z3r.real))
            if z3 < lo_eff - ptol or 2.0 * z3 + c3 <= 0.0:
                continue
            # polish: the eigenvalue root carries O(cond * eps) error,
            # which the mu recovery amplifies when beta is small
            step = 1e-12 * max(1.0, abs(z3))
            while step < 1e-5:
                a_x = max(z3 - step, lo_eff)
                b_x = min(z3 + step, z3hi)
                fa, fb = stat(a_x), stat(b_x)
                if math.isfinite(fa) and fa * fb <= 0.0:
                    for _ in range(90):
                        mid = 0.5 * (a_x + b_x)
                        fm = stat(mid)
                        if fa * fm <= 0.0:
                            b_x, fb = mid, fm
                        else:
                            a_x, fa = mid, fm
                        if b_x - a_x <= 1e-17 * max(1.0, abs(b_x)):
                            break
                    z3 = b_x if abs(fb) < abs(fa) else a_x
                    break
                step *= 8.0
            # wrong-branch roots fall through unpolished; their snapped
            # candidates compete on objective and lose
            mu, _ratio = mu_ratio(z3)
            if not (mu > 0.0):
                continue
            z4 = 0.5 * (k2 * mu - c4)
            if z4 <= z4max + ptol:
                t = ncn * z3 / (2.0 * (z3 + mu))
                push(t, z3, z4, "cone-interior", mu, 0.0)

    # --- cone active and z4 at its cap (gamma > 0) --------------------------
    if math.isfinite(z4max):
        cap = k2 * z4max
        kappa = math.sqrt(cap)
        for z3b in bounds:
            mu = ncn * math.sqrt(z3b) / (2.0 * kappa) - z3b
            if mu > dtol:
                gamma = k2 * mu - c4 - 2.0 * z4max
                lam = 2.0 * z3b + c3 - mu * cap / z3b
                ok = lam >= -dtol if z3b == z3lo else lam <= dtol
                if z3lo == z3hi:
                    ok = True
                if gamma >= -dtol and ok:
                    t = kappa * math.sqrt(z3b)
                    which = "lo" if z3b == z3lo else "hi"
                    push(t, z3b, z4max, f"cap-cone-bound-{which}", mu, max(gamma, 0.0))
        if z3lo < z3hi and ncn > 0.0:
            # interior z3 with the cap tight reduces to a cubic in y = sqrt(z3):
            #   2 y^3 + (c3 + cap) y - kappa n / 2 = 0
            roots = np.roots([2.0, 0.0, c3 + cap, -0.5 * kappa * ncn])
            for y in roots:
                if abs(y.imag) > 1e-9 * max(1.0, abs(y.real)):
                    continue
                y = float(y.real)
                if y <= 0.0:
                    continue
                z3 = y * y
                if not (z3lo - ptol <= z3 <= z3hi + ptol):
                    continue
                mu = ncn * y / (2.0 * kappa) - z3
                gamma = k2 * mu - c4 - 2.0 * z4max
                if mu > dtol and gamma >= -dtol:
                    push(kappa * y, z3, z4max, "cap-cone-interior", mu, max(gamma, 0.0))

    if not candidates:
        return None
    best = min(candidates, key=lambda c: (c[0], c[2]))
    # prefer smaller z3 among near-ties in objective
    for cand in candidates:
        if cand[0] <= best[0] + 1e-12 * sc and cand[2] < best[2]:
            best = cand
    obj, t, z3, z4, branch, mu, gamma = best
    return t, z3, z4, branch, mu, gamma


def _validate_cone_instance(inst: ConeBoxInstance) -> None:
    if not (0.0 < inst.z3_min <= inst.z3_max):
        raise BadParameter(f"need 0 < z3_min <= z3_max, got [{inst.z3_min}, {inst.z3_max}]")
    if not inst.z4_max > 0.0:
        raise BadParameter(f"z4_max must be > 0, got {inst.z4_max}")
    if not inst.k2 > 0.0:
        raise BadParameter(f"k2 must be > 0, got {inst.k2}")


def project_cone_box(instance: ConeBoxInstance) -> tuple[float, float, float, float]:
    """Exact minimizer of the cone-box problem; see ConeBoxInstance."""
    _validate_cone_instance(instance)
    out = _enumerate_cone_box(
        instance.c1, instance.c2, instance.c3, instance.c4,
        instance.k2, instance.z3_min, instance.z3_max, instance.z4_max,
    )
    if out is None:
        raise NoKktCase(
            "no KKT-consistent candidate; instance: "
            + json.dumps(instance.__dict__, sort_keys=True)
        )
    t, z3, z4, _branch, _mu, _gamma = out
    ncn = math.hypot(instance.c1, instance.c2)
    if ncn > 0.0:
        z1 = -t * instance.c1 / ncn
        z2 = -t * instance.c2 / ncn
    else:
        z1 = z2 = 0.0
    return z1, z2, z3, z4


def project_cone_box_info(instance: ConeBoxInstance) -> ConeBoxResult:
    """Like project_cone_box but reporting the winning KKT branch."""
    _validate_cone_instance(instance)
    out = _enumerate_cone_box(
        instance.c1, instance.c2, instance.c3, instance.c4,
        instance.k2, instance.z3_min, instance.z3_max, instance.z4_max,
    )
    if out is None:
        raise NoKktCase(
            "no KKT-consistent candidate; instance: "
            + json.dumps(instance.__dict__, sort_keys=True)
        )
    t, z3, z4, branch, mu, gamma = out
    ncn = math.hypot(instance.c1, instance.c2)
    if ncn > 0.0:
        z1, z2 = -t * instance.c1 / ncn, -t * instance.c2 / ncn
    else:
        z1 = z2 = 0.0
    obj = (
        z1 * z1 + instance.c1 * z1 + z2 * z2 + instance.c2 * z2
        + z3 * z3 + instance.c3 * z3 + z4 * z4 + instance.c4 * z4
    )
    return ConeBoxResult(z1=z1, z2=z2, z3=z3, z4=z4, branch=branch, mu=mu, gamma=gamma, objective=obj)


# ---------------------------------------------------------------------------
# Scalar updates
# ---------------------------------------------------------------------------

def box_project(value: float, lo: float, hi: float) -> float:
    if lo > hi:
        raise BadBounds(f"box bounds inverted: [{lo}, {hi}]")
    return min(max(value, lo), hi)


def positive_part(value: float) -> float:
    return value if value > 0.0 else 0.0


def update_pc_tilde(k_u, pc_max, pc_min, eta, pc_m, rho) -> float:
    """Consensus update of the first-stage elastic demand.

    Minimizes K_u (p - pc_max)^2 + sum_m [eta_m (pc_m - p) + rho/2 (pc_m - p)^2]
    over p in [pc_min, pc_max]; the quadratic utility enters negated.
    """
    if not rho > 0.0:
        raise BadParameter(f"rho must be > 0, got {rho}")
    eta = np.asarray(eta, dtype=float)
    pc_m = np.asarray(pc_m, dtype=float)
    if eta.shape != pc_m.shape:
        raise BadParameter("eta and pc_m must have the same length")
    m = eta.size
    num = 2.0 * k_u * pc_max + float(np.sum(eta + rho * pc_m))
    den = 2.0 * k_u + rho * m
    return box_project(num / den, pc_min, pc_max)
