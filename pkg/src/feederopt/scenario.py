"""PV-output scenarios: beta-model generation and fast-forward reduction.

Scenario values are real-power injections in MW keyed by node id. The
generation model draws each node's output ratio from a beta law whose
mean/std relation follows the day-type fit sigma/w_max = 0.2*mean + 0.21,
scaled to [0, w_max] with w_max = s_w / 1.1. Reduction is the greedy
fast-forward rule under the Kantorovich distance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import BadCardinality, BadParameter, EmptyKeptSet, OutOfRange
from .network import Network

__all__ = [
    "Scenario",
    "ScenarioSet",
    "make_scenario_set",
    "beta_params_from_mean",
    "sample_scenarios",
    "kantorovich_distance",
    "fast_forward_reduce",
    "scenario_set_to_dict",
    "scenario_set_from_dict",
    "load_scenarios",
    "save_scenarios",
]


@dataclass(frozen=True)
class Scenario:
    """One joint realization of PV injections (MW) with probability pi."""

    w: dict[int, float]
    pi: float


@dataclass(frozen=True)
class ScenarioSet:
    """Ordered scenario collection; seed 0 marks hand-built sets."""

    scenarios: tuple[Scenario, ...]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.scenarios)

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.scenarios[0].w)) if self.scenarios else ()

    def matrix(self) -> np.ndarray:
        """Stacked injections, shape (scenario count, node count), MW."""
        ids = self.node_ids
        return np.array([[s.w[i] for i in ids] for s in self.scenarios])

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([s.pi for s in self.scenarios])


def make_scenario_set(scenarios, seed: int = 0) -> ScenarioSet:
    """Validate and freeze a scenario collection.

    Checks probabilities (non-negative, summing to 1 within 1e-9) and
    identical node-id domains across scenarios.
    """
    scenarios = tuple(scenarios)
    if not scenarios:
        raise BadParameter("scenario set must not be empty")
    domain = set(scenarios[0].w)
    for k, s in enumerate(scenarios):
        if s.pi < 0.0:
            raise BadParameter(f"scenario {k} has negative probability {s.pi}")
        if set(s.w) != domain:
            raise BadParameter(f"scenario {k} has a different node domain")
        for nid, val in s.w.items():
            if val < 0.0:
                raise BadParameter(f"scenario {k} has negative injection {val} at node {nid}")
    total = math.fsum(s.pi for s in scenarios)
    if abs(total - 1.0) > 1e-9:
        raise BadParameter(f"scenario probabilities sum to {total!r}, expected 1")
    return ScenarioSet(scenarios=scenarios, seed=seed)


def beta_params_from_mean(mean_ratio: float) -> tuple[float, float]:
    """Moment-matched beta parameters for a given mean output ratio.

    The standard deviation follows sigma = 0.2*mean + 0.21 (ratio units).
    When that variance is infeasible for a beta law (mean above roughly
    0.77) it is clamped to 0.99*mean*(1-mean), preserving the mean.
    """
    if not (0.0 < mean_ratio < 1.0):
        raise OutOfRange(f"mean_ratio must lie in (0, 1), got {mean_ratio}")
    sigma = 0.2 * mean_ratio + 0.21
    var = sigma * sigma
    cap = mean_ratio * (1.0 - mean_ratio)
    if var >= cap:
        var = 0.99 * cap
    s = cap / var - 1.0
    return mean_ratio * s, (1.0 - mean_ratio) * s


def w_max_mw(s_w_mva: float) -> float:
    """Maximum real PV output for a nameplate: w_max = s_w / 1.1."""
    return s_w_mva / 1.1


def sample_scenarios(
    network: Network,
    mean_ratio,
    count: int,
    seed: int,
    mode: str = "independent",
) -> ScenarioSet:
    """Draw ``count`` equiprobable scenarios for every PV node.

    ``mean_ratio`` is a scalar applied to all PV nodes or a node-id map.
    ``mode="independent"`` draws each node independently;
    ``mode="common"`` draws a single ratio per scenario shared by all PV
    nodes (spatially correlated outputs), requiring a scalar mean_ratio.
    Deterministic for a fixed seed.
    """
    if count < 1:
        raise BadParameter(f"count must be >= 1, got {count}")
    if mode not in ("independent", "common"):
        raise BadParameter(f"mode must be 'independent' or 'common', got {mode!r}")
    rng = np.random.default_rng(seed)
    pv_nodes = [nid for nid in network.order if network.nodes[nid].s_w_mva > 0.0]

    def ratio_for(nid: int) -> float:
        if isinstance(mean_ratio, dict):
            if nid not in mean_ratio:
                raise BadParameter(f"mean_ratio map missing PV node {nid}")
            return mean_ratio[nid]
        return float(mean_ratio)

    draws: dict[int, np.ndarray] = {}
    if mode == "common":
        if isinstance(mean_ratio, dict):
            raise BadParameter("common mode requires a scalar mean_ratio")
        alpha, beta = beta_params_from_mean(float(mean_ratio))
        shared = rng.beta(alpha, beta, size=count)
        for nid in pv_nodes:
            draws[nid] = shared
    else:
        for nid in pv_nodes:  # fixed network order keeps the stream deterministic
            alpha, beta = beta_params_from_mean(ratio_for(nid))
            draws[nid] = rng.beta(alpha, beta, size=count)

    pi = 1.0 / count
    scenarios = []
    for m in range(count):
        w = {nid: 0.0 for nid in network.order}
        for nid in pv_nodes:
            w[nid] = w_max_mw(network.nodes[nid].s_w_mva) * float(draws[nid][m])
        scenarios.append(Scenario(w=w, pi=pi))
    return ScenarioSet(scenarios=tuple(scenarios), seed=seed)


def _distance_matrix(mat: np.ndarray, metric: str) -> np.ndarray:
    if metric == "l2":
        diff = mat[:, None, :] - mat[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=2))
    if metric == "l1":
        return np.sum(np.abs(mat[:, None, :] - mat[None, :, :]), axis=2)
    raise BadParameter(f"metric must be 'l2' or 'l1', got {metric!r}")


def kantorovich_distance(full: ScenarioSet, kept, metric: str = "l2") -> float:
    """Transport distance from the full set onto the kept subset.

    Sum over dropped scenarios of pi times the distance to the nearest
    kept scenario.
    """
    kept = sorted(set(kept))
    if not kept:
        raise EmptyKeptSet("kept index set must not be empty")
    n = len(full)
    for k in kept:
        if not (0 <= k < n):
            raise OutOfRange(f"kept index {k} outside [0, {n})")
    mat = full.matrix()
    dist = _distance_matrix(mat, metric)
    mind = dist[:, kept].min(axis=1)
    pi = full.probabilities
    dropped = [m for m in range(n) if m not in set(kept)]
    return math.fsum(pi[m] * mind[m] for m in dropped)


def fast_forward_reduce(full: ScenarioSet, target: int, metric: str = "l2") -> ScenarioSet:
    """Greedy fast-forward reduction to ``target`` scenarios.

    Each round keeps the scenario whose addition minimizes the
    Kantorovich distance of the kept set; ties break to the lowest
    scenario index. Probabilities of dropped scenarios are aggregated
    onto their nearest kept scenario. Kept injections are returned
    bit-identical; kept scenarios appear in original order.
    """
    n = len(full)
    if not (1 <= target <= n):
        raise BadCardinality(f"target must lie in [1, {n}], got {target}")
    if target == n:
        return ScenarioSet(scenarios=full.scenarios, seed=full.seed)

    mat = full.matrix()
    dist = _distance_matrix(mat, metric)
    pi = full.probabilities
    kept: list[int] = []
    mind = np.full(n, np.inf)
    for _ in range(target):
        best_cost = np.inf
        best_u = -1
        for u in range(n):
            if u in kept:
                continue
            cost = float(pi @ np.minimum(mind, dist[:, u]))
            if cost < best_cost - 0.0:  # strict improvement; first index wins ties
                best_cost = cost
                best_u = u
        kept.append(best_u)
        mind = np.minimum(mind, dist[:, best_u])

    kept_sorted = sorted(kept)
    cols = dist[:, kept_sorted]
    nearest = np.argmin(cols, axis=1)  # first minimum = lowest kept index
    groups: dict[int, list[float]] = {k: [] for k in kept_sorted}
    for m in range(n):
        groups[kept_sorted[int(nearest[m])]].append(float(pi[m]))
    reduced = tuple(
        Scenario(w=full.scenarios[k].w, pi=math.fsum(groups[k])) for k in kept_sorted
    )
    return ScenarioSet(scenarios=reduced, seed=full.seed)


# ---- JSON serialization ----------------------------------------------------

def scenario_set_to_dict(sset: ScenarioSet) -> dict:
    return {
        "seed": sset.seed,
        "scenarios": [
            {"pi": s.pi, "w_mw": {str(nid): val for nid, val in sorted(s.w.items())}}
            for s in sset.scenarios
        ],
    }


def scenario_set_from_dict(data: dict) -> ScenarioSet:
    try:
        scenarios = [
            Scenario(
                w={int(nid): float(val) for nid, val in entry["w_mw"].items()},
                pi=float(entry["pi"]),
            )
            for entry in data["scenarios"]
        ]
        return make_scenario_set(scenarios, seed=int(data.get("seed", 0)))
    except KeyError as exc:
        raise BadParameter(f"scenario JSON missing field {exc}") from None


def load_scenarios(path) -> ScenarioSet:
    with open(path) as fh:
        return scenario_set_from_dict(json.load(fh))


def save_scenarios(sset: ScenarioSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_set_to_dict(sset), fh, indent=2)
        fh.write("\n")
