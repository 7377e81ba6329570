"""Command-line front end: file I/O, orchestration, experiment harness.

Each subcommand writes a manifest next to its outputs holding the
resolved parameters, a hash of them, the root seed, input file digests,
and package versions, which is enough to reproduce the files (timing
data lives under dedicated "timing" keys and is the only thing allowed
to differ between reruns).

Exit codes: 0 success, 2 bad input or parameters, 3 solver hit its
iteration cap, 4 converged solution failed the feasibility audit.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import math
import sys
from importlib import metadata
from pathlib import Path

import click
import numpy as np
import scipy

from .admm import SolverConfig, solve
from .baseline import (
    evaluate_policy,
    max_voltage_deviation,
    online_second_stage,
)
from .errors import BadParameter, ValidationError
from .exactness import check_exactness
from .network import load_network, make_feeder, save_network
from .program import (
    ObjectiveConfig,
    assemble,
    audit_report_to_dict,
    complementarity_check,
    feasibility_audit,
    objective_terms,
    solution_to_dict,
)
from .scenario import (
    fast_forward_reduce,
    kantorovich_distance,
    load_scenarios,
    sample_scenarios,
    save_scenarios,
)

EXIT_VALIDATION = 2
EXIT_NOT_CONVERGED = 3
EXIT_INFEASIBLE = 4


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def derived_seed(root_seed: int, label: str) -> int:
    """Stable stage seed from the root seed and a stage label."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _versions() -> dict:
    return {
        "python": sys.version.split()[0],
        "feederopt": metadata.version("feederopt"),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "click": metadata.version("click"),
    }


def _finite(value):
    """Map non-finite floats to None so the JSON stays standard."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def _dump_json(data, path) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest_path(out) -> Path:
    out = Path(out)
    if out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.stem + ".manifest.json")


def _write_manifest(out, command: str, params: dict, seed=None,
                    inputs=()) -> None:
    params = dict(sorted(params.items()))
    blob = json.dumps(params, sort_keys=True, default=str)
    _dump_json(
        {
            "command": command,
            "parameters": params,
            "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
            "seed": seed,
            "inputs": {str(p): _file_sha256(p) for p in inputs},
            "versions": _versions(),
        },
        _manifest_path(out),
    )


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            _fail(EXIT_VALIDATION, str(exc))
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
            _fail(EXIT_VALIDATION, f"cannot read {exc.filename}: {exc.strerror}")
        except json.JSONDecodeError as exc:
            _fail(EXIT_VALIDATION, f"malformed JSON: {exc}")

    return wrapper


def _load_pc(path) -> dict[int, float]:
    """First-stage map from a bare node map, a solution, or a solve report."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        if isinstance(data.get("solution"), dict):
            data = data["solution"]
        if isinstance(data.get("pc_mw"), dict):
            data = data["pc_mw"]
        try:
            return {int(k): float(v) for k, v in data.items()}
        except (TypeError, ValueError):
            pass
    raise BadParameter(f"{path} is not a first-stage consumption map")


def _objective(a: float, b: float, k_loss: float,
               zero_root_cost: bool) -> ObjectiveConfig:
    if zero_root_cost:
        return ObjectiveConfig(a=1.0, b=0.0, k_loss=k_loss,
                               root_cost=lambda _p0: 0.0)
    return ObjectiveConfig(a=a, b=b, k_loss=k_loss)


def _write_trace_csv(traces: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "r", "s", "objective", "gap", "rho"])
        for i in range(len(traces["r"])):
            writer.writerow([
                i + 1,
                traces["r"][i],
                traces["s"][i],
                traces["objective"][i],
                traces["gap"][i],
                traces["rho"][i],
            ])


def _write_cdf_csv(cdf, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["deviation", "cumulative_probability"])
        for dev, prob in cdf:
            writer.writerow([dev, prob])


def _sig4(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float) and not math.isfinite(value):
        return "n/a"
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def _render_table(headers: list[str], rows: list[list]) -> str:
    cells = [[_sig4(c) for c in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    def fmt(row):
        return "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in cells)
    return "\n".join(lines)


def _solver_options(fn):
    opts = [
        click.option("--rho", type=float, default=100.0, show_default=True,
                     help="initial consensus penalty"),
        click.option("--rho-policy", type=click.Choice(["fixed", "adaptive"]),
                     default="adaptive", show_default=True),
        click.option("--eps", type=float, default=1e-5, show_default=True,
                     help="primal and dual residual tolerance"),
        click.option("--gap-tol", type=float, default=1e-3, show_default=True,
                     help="cone relaxation gap tolerance, (pu)^2"),
        click.option("--max-iters", type=int, default=20000, show_default=True),
        click.option("--init", "init_policy",
                     type=click.Choice(["zeros", "random"]),
                     default="random", show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--workers", type=int, default=1, show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _objective_options(fn):
    opts = [
        click.option("--a", type=float, default=1.0, show_default=True,
                     help="root import price slope"),
        click.option("--b", type=float, default=0.5, show_default=True,
                     help="root export price slope"),
        click.option("--k-loss", type=float, default=0.0, show_default=True,
                     help="weight of expected ohmic losses"),
        click.option("--zero-root-cost", is_flag=True,
                     help="replace the priced import/export split with a "
                          "zero cost of root power"),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _solver_config(rho, rho_policy, eps, gap_tol, max_iters, init_policy,
                   seed, workers) -> SolverConfig:
    return SolverConfig(
        rho=rho, rho_policy=rho_policy,
        eps_primal=eps, eps_dual=eps, socp_gap_tol=gap_tol,
        max_iters=max_iters, init_policy=init_policy,
        seed=seed, workers=workers,
    )


def _solve_doc(prog, report, eps: float) -> tuple[dict, object]:
    # a solve stopped at eps carries balance mismatches of that order,
    # so the audit certifies to the accuracy that was actually requested
    audit = feasibility_audit(prog, report.solution,
                              tol=max(1e-4, 10.0 * eps))
    traces = report.traces
    doc = {
        "converged": report.converged,
        "iterations": report.iterations,
        "final_rho": traces["rho"][-1],
        "residuals": {
            "primal": traces["r"][-1],
            "dual": traces["s"][-1],
            "socp_gap_pu2": traces["gap"][-1],
        },
        "objective": objective_terms(prog, report.solution),
        "complementarity": complementarity_check(report.solution),
        "audit": audit_report_to_dict(audit),
        "solution": solution_to_dict(report.solution),
        "timing": dict(report.phase_seconds),
    }
    return doc, audit


def _kept_indices(full, reduced) -> list[int]:
    # kept scenarios are bit-identical to originals, so match on values
    taken: list[int] = []
    for kept in reduced.scenarios:
        for idx, sc in enumerate(full.scenarios):
            if idx not in taken and sc.w == kept.w:
                taken.append(idx)
                break
    return taken


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@click.group()
@click.version_option(metadata.version("feederopt"), prog_name="feederopt")
def main():
    """Stochastic SOCP optimal power flow on radial feeders, solved by a
    fully decentralized ADMM with closed-form updates."""


@main.command("build-network")
@click.option("--trunk", type=int, required=True,
              help="number of trunk nodes below the substation")
@click.option("--lateral", "laterals", multiple=True, metavar="ATTACH:COUNT",
              help="lateral of COUNT nodes branching at trunk node ATTACH; "
                   "repeatable")
@click.option("--spacing-km", type=float, default=0.2, show_default=True)
@click.option("--r-ohm-per-km", type=float, default=0.33, show_default=True)
@click.option("--x-ohm-per-km", type=float, default=0.38, show_default=True)
@click.option("--v0-kv", type=float, default=7.2, show_default=True)
@click.option("--s-base-mva", type=float, default=1.0, show_default=True)
@click.option("--epsilon", type=float, default=0.05, show_default=True)
@click.option("--p-l-mw", type=float, default=0.1, show_default=True)
@click.option("--q-l-mvar", type=float, default=None,
              help="defaults to p_l at the node power factor")
@click.option("--pf", type=float, default=0.94, show_default=True)
@click.option("--pc-min-mw", type=float, default=0.0, show_default=True)
@click.option("--pc-max-mw", type=float, default=0.05, show_default=True)
@click.option("--l-max-ka2", type=float, default=0.5, show_default=True)
@click.option("--s-w-mva", type=float, default=0.1, show_default=True,
              help="default inverter nameplate for PV nodes")
@click.option("--pv-nodes", default="all", show_default=True,
              help="'all', 'none', or comma-separated node ids")
@click.option("--s-w-override", "s_w_overrides", multiple=True,
              metavar="NODE:MVA", help="per-node nameplate; repeatable")
@click.option("--q-s", type=float, default=0.0, show_default=True,
              help="shunt coefficient, MVAr per kV^2")
@click.option("--k-u", type=float, default=1.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_guarded
def build_network_cmd(trunk, laterals, spacing_km, r_ohm_per_km, x_ohm_per_km,
                      v0_kv, s_base_mva, epsilon, p_l_mw, q_l_mvar, pf,
                      pc_min_mw, pc_max_mw, l_max_ka2, s_w_mva, pv_nodes,
                      s_w_overrides, q_s, k_u, out):
    """Generate a parametric trunk-and-laterals feeder as network JSON."""
    lat_specs = []
    for spec in laterals:
        attach, _, count = spec.partition(":")
        try:
            lat_specs.append((int(attach), int(count)))
        except ValueError:
            raise BadParameter(f"lateral spec must be ATTACH:COUNT, got {spec!r}")
    if pv_nodes == "all":
        pv = None
    elif pv_nodes == "none":
        pv = []
    else:
        try:
            pv = [int(tok) for tok in pv_nodes.split(",") if tok.strip()]
        except ValueError:
            raise BadParameter(f"pv-nodes must be 'all', 'none', or ids, got {pv_nodes!r}")
    overrides = {}
    for spec in s_w_overrides:
        nid, _, mva = spec.partition(":")
        try:
            overrides[int(nid)] = float(mva)
        except ValueError:
            raise BadParameter(f"override must be NODE:MVA, got {spec!r}")
    net = make_feeder(
        trunk, tuple(lat_specs), spacing_km=spacing_km,
        r_ohm_per_km=r_ohm_per_km, x_ohm_per_km=x_ohm_per_km,
        v0_kv=v0_kv, s_base_mva=s_base_mva, epsilon=epsilon,
        p_l_mw=p_l_mw, q_l_mvar=q_l_mvar, pf=pf,
        pc_min_mw=pc_min_mw, pc_max_mw=pc_max_mw, l_max_ka2=l_max_ka2,
        s_w_default_mva=s_w_mva, pv_nodes=pv,
        s_w_overrides=overrides or None, q_s=q_s, k_u=k_u,
    )
    save_network(net, out)
    _write_manifest(out, "build-network", {
        "trunk": trunk, "laterals": list(laterals),
        "spacing_km": spacing_km, "r_ohm_per_km": r_ohm_per_km,
        "x_ohm_per_km": x_ohm_per_km, "v0_kv": v0_kv,
        "s_base_mva": s_base_mva, "epsilon": epsilon,
        "p_l_mw": p_l_mw, "q_l_mvar": q_l_mvar, "pf": pf,
        "pc_min_mw": pc_min_mw, "pc_max_mw": pc_max_mw,
        "l_max_ka2": l_max_ka2, "s_w_mva": s_w_mva,
        "pv_nodes": pv_nodes, "s_w_overrides": list(s_w_overrides),
        "q_s": q_s, "k_u": k_u, "out": str(out),
    })
    n_pv = sum(1 for nid in net.order if net.nodes[nid].s_w_mva > 0.0)
    click.echo(f"wrote {out}: {net.n_nodes} nodes, "
               f"{net.n_nodes - 1} lines, {n_pv} PV inverters")


@main.command("generate-scenarios")
@click.option("--network", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--mean-ratio", type=float, default=None,
              help="mean injection as a fraction of each node's maximum")
@click.option("--mean-ratio-node", "per_node", multiple=True,
              metavar="NODE:RATIO",
              help="per-node mean ratio; repeat to cover every PV node")
@click.option("--count", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--mode", type=click.Choice(["independent", "common"]),
              default="independent", show_default=True,
              help="'common' draws one shared ratio per scenario")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_guarded
def generate_scenarios_cmd(network, mean_ratio, per_node, count, seed, mode, out):
    """Draw equiprobable PV injection scenarios from the beta model."""
    net = load_network(network)
    if per_node:
        ratios = {}
        for spec in per_node:
            nid, _, val = spec.partition(":")
            try:
                ratios[int(nid)] = float(val)
            except ValueError:
                raise BadParameter(f"expected NODE:RATIO, got {spec!r}")
        mean = ratios
    elif mean_ratio is not None:
        mean = mean_ratio
    else:
        raise BadParameter("one of --mean-ratio or --mean-ratio-node is required")
    sset = sample_scenarios(net, mean, count, seed, mode=mode)
    save_scenarios(sset, out)
    _write_manifest(out, "generate-scenarios", {
        "network": str(network), "mean_ratio": mean_ratio,
        "mean_ratio_node": list(per_node), "count": count,
        "mode": mode, "out": str(out),
    }, seed=seed, inputs=[network])
    click.echo(f"wrote {out}: {count} scenarios over "
               f"{len(sset.node_ids)} nodes (seed {seed})")


@main.command("reduce")
@click.option("--scenarios", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--to", "target", type=int, required=True,
              help="number of scenarios to keep")
@click.option("--metric", type=click.Choice(["l2", "l1"]), default="l2",
              show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_guarded
def reduce_cmd(scenarios, target, metric, out):
    """Fast-forward reduction minimizing the transport distance greedily."""
    full = load_scenarios(scenarios)
    reduced = fast_forward_reduce(full, target, metric=metric)
    save_scenarios(reduced, out)
    kept = _kept_indices(full, reduced)
    distance = kantorovich_distance(full, kept, metric=metric)
    min_pi = min(s.pi for s in reduced.scenarios)
    _write_manifest(out, "reduce", {
        "scenarios": str(scenarios), "to": target, "metric": metric,
        "out": str(out),
        "result": {"kept_indices": kept, "kantorovich_distance": distance,
                   "min_probability": min_pi},
    }, seed=full.seed, inputs=[scenarios])
    click.echo(f"kept {target} of {len(full)} scenarios: "
               f"distance {distance:.6g}, smallest probability {min_pi:.6g}")


@main.command("solve")
@click.option("--network", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--scenarios", type=click.Path(exists=True, dir_okay=False),
              required=True)
@_objective_options
@_solver_options
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="solve report JSON")
@click.option("--trace", type=click.Path(dir_okay=False), default=None,
              help="residual trace CSV (default: <out stem>_trace.csv)")
@_guarded
def solve_cmd(network, scenarios, a, b, k_loss, zero_root_cost,
              rho, rho_policy, eps, gap_tol, max_iters, init_policy,
              seed, workers, out, trace):
    """Solve the two-stage program with the consensus ADMM."""
    net = load_network(network)
    scens = load_scenarios(scenarios)
    prog = assemble(net, scens, _objective(a, b, k_loss, zero_root_cost))
    cfg = _solver_config(rho, rho_policy, eps, gap_tol, max_iters,
                         init_policy, seed, workers)
    report = solve(prog, cfg)
    doc, audit = _solve_doc(prog, report, eps)
    _dump_json(doc, out)
    trace_path = trace or Path(out).with_name(Path(out).stem + "_trace.csv")
    _write_trace_csv(report.traces, trace_path)
    _write_manifest(out, "solve", {
        "network": str(network), "scenarios": str(scenarios),
        "a": a, "b": b, "k_loss": k_loss, "zero_root_cost": zero_root_cost,
        "rho": rho, "rho_policy": rho_policy, "eps": eps,
        "gap_tol": gap_tol, "max_iters": max_iters, "init": init_policy,
        "workers": workers, "out": str(out), "trace": str(trace_path),
    }, seed=seed, inputs=[network, scenarios])
    res = doc["residuals"]
    status = "converged" if report.converged else "stopped"
    click.echo(f"{status} after {report.iterations} iterations: "
               f"r={res['primal']:.3g} s={res['dual']:.3g} "
               f"gap={res['socp_gap_pu2']:.3g} rho={doc['final_rho']:.4g}")
    if not report.converged:
        _fail(EXIT_NOT_CONVERGED,
              f"no convergence within {max_iters} iterations "
              f"(report written to {out})")
    if not audit.ok:
        worst = max(audit.families.values())
        _fail(EXIT_INFEASIBLE,
              f"feasibility audit failed: worst violation {worst:.3g} "
              f"(report written to {out})")


@main.command("check-exactness")
@click.option("--network", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--scenarios", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--m-independent", "m_independent_only", is_flag=True,
              help="report only the scenario-independent variant")
@click.option("--tol", type=float, default=1e-12, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="write the verdict here instead of stdout")
@_guarded
def check_exactness_cmd(network, scenarios, m_independent_only, tol, out):
    """Evaluate the reverse-flow sufficient condition for cone tightness."""
    net = load_network(network)
    scens = load_scenarios(scenarios)
    prog = assemble(net, scens, ObjectiveConfig(a=1.0, b=0.0))
    verdict = check_exactness(prog, tol=tol)
    doc = {
        "vacuous": verdict.vacuous,
        "tol": verdict.tol,
        "m_independent": verdict.m_independent,
        "m_independent_margin": verdict.m_independent_margin,
        "m_independent_worst": verdict.m_independent_worst,
    }
    if not m_independent_only:
        doc.update({
            "per_scenario": list(verdict.per_scenario),
            "all_scenarios": verdict.all_scenarios,
            "margins": list(verdict.margins),
            "worst_case": verdict.worst_case,
        })
    doc = _finite(doc)
    if out:
        _dump_json(doc, out)
        _write_manifest(out, "check-exactness", {
            "network": str(network), "scenarios": str(scenarios),
            "m_independent": m_independent_only, "tol": tol,
            "out": str(out),
        }, inputs=[network, scenarios])
        click.echo(f"wrote {out}")
    else:
        click.echo(json.dumps(doc, indent=2))


@main.command("baseline")
@click.option("--network", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--pc", "pc_path", type=click.Path(exists=True, dir_okay=False),
              default=None,
              help="first-stage consumption JSON; omitted means zeros")
@click.option("--k", "k_values", type=float, multiple=True, default=(1.3,),
              show_default=True, help="blend weight; repeatable")
@click.option("--test-scenarios", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_guarded
def baseline_cmd(network, pc_path, k_values, test_scenarios, out):
    """Run the local volt/VAR policy plus exact power flow over a test set."""
    net = load_network(network)
    test = load_scenarios(test_scenarios)
    prog = assemble(net, test, ObjectiveConfig(a=1.0, b=0.0))
    pc = _load_pc(pc_path) if pc_path else {}
    rows = []
    policies = []
    out_path = Path(out)
    for k in k_values:
        metrics = evaluate_policy(prog, pc, k, test)
        cdf_path = out_path.with_name(out_path.stem + f"_cdf_k{k:g}.csv")
        _write_cdf_csv(metrics.cdf, cdf_path)
        policies.append({
            "k": metrics.k,
            "expected_loss_mw": metrics.expected_loss_mw,
            "max_deviation": metrics.max_deviation,
            "deviations": list(metrics.deviations),
            "n_scenarios": metrics.n_scenarios,
            "n_failed": metrics.n_failed,
            "cdf_csv": str(cdf_path),
        })
        rows.append([k, metrics.expected_loss_mw, metrics.max_deviation,
                     metrics.n_failed])
    _dump_json(_finite({"policies": policies}), out)
    inputs = [network, test_scenarios] + ([pc_path] if pc_path else [])
    _write_manifest(out, "baseline", {
        "network": str(network), "pc": str(pc_path),
        "k": list(k_values), "test_scenarios": str(test_scenarios),
        "out": str(out),
    }, inputs=inputs)
    click.echo(_render_table(
        ["K", "loss (MW)", "max deviation", "failed"], rows))


@main.command("online-eval")
@click.option("--network", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--pc", "pc_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="first-stage consumption to pin")
@click.option("--test-scenarios", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--qw-free/--qw-zero", default=True, show_default=True,
              help="re-optimize inverter reactive power, or hold it at zero")
@_objective_options
@_solver_options
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_guarded
def online_eval_cmd(network, pc_path, test_scenarios, qw_free,
                    a, b, k_loss, zero_root_cost,
                    rho, rho_policy, eps, gap_tol, max_iters, init_policy,
                    seed, workers, out):
    """Re-solve the second stage per scenario with the first stage pinned."""
    net = load_network(network)
    test = load_scenarios(test_scenarios)
    prog = assemble(net, test, _objective(a, b, k_loss, zero_root_cost))
    cfg = _solver_config(rho, rho_policy, eps, gap_tol, max_iters,
                         init_policy, seed, workers)
    pc = _load_pc(pc_path)
    report = online_second_stage(prog, pc, test, cfg, qw_free=qw_free)
    deviations = [max_voltage_deviation(net, vm) for vm in report.solution.v]
    doc = {
        "qw_free": report.qw_free,
        "n_scenarios": len(test),
        "infeasible_indices": list(report.infeasible),
        "n_infeasible": len(report.infeasible),
        "converged_per_scenario": list(report.converged),
        "iterations_per_scenario": list(report.iterations),
        "max_deviation": max(deviations),
        "deviations": deviations,
        "objective": report.objective_terms,
        "note": report.note,
        "solution": solution_to_dict(report.solution),
    }
    _dump_json(_finite(doc), out)
    _write_manifest(out, "online-eval", {
        "network": str(network), "pc": str(pc_path),
        "test_scenarios": str(test_scenarios), "qw_free": qw_free,
        "a": a, "b": b, "k_loss": k_loss, "zero_root_cost": zero_root_cost,
        "rho": rho, "rho_policy": rho_policy, "eps": eps,
        "gap_tol": gap_tol, "max_iters": max_iters, "init": init_policy,
        "workers": workers, "out": str(out),
    }, seed=seed, inputs=[network, pc_path, test_scenarios])
    click.echo(f"{len(test) - len(report.infeasible)} of {len(test)} "
               f"scenarios feasible, max deviation {max(deviations):.4g}")


@main.command("run-experiment")
@click.option("--network", "network_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="feeder JSON; omitted builds the default study feeder "
                   "(30-node trunk, two 10-node laterals at node 20, "
                   "1 MVA PV at node 30)")
@click.option("--mean-ratios", default="0.3,0.6,0.9", show_default=True,
              help="comma-separated day-type mean ratios")
@click.option("--count", type=int, default=1000, show_default=True,
              help="scenarios drawn per day type")
@click.option("--reduce-to", type=int, default=7, show_default=True)
@click.option("--k-list",
              default="1.1,1.2,1.3,1.4,1.5,1.6,1.7,1.8,1.9",
              show_default=True, help="local-policy blend weights")
@click.option("--test-count", type=int, default=100, show_default=True,
              help="fresh scenarios for the online comparison; 0 skips it")
@click.option("--a", type=float, default=1.0, show_default=True)
@click.option("--b", type=float, default=0.5, show_default=True)
@click.option("--k-loss", type=float, default=1.0, show_default=True)
@click.option("--zero-root-cost/--priced-root", default=True,
              show_default=True)
@click.option("--rho", type=float, default=2.0, show_default=True)
@click.option("--rho-policy", type=click.Choice(["fixed", "adaptive"]),
              default="fixed", show_default=True)
@click.option("--eps", type=float, default=1e-4, show_default=True)
@click.option("--gap-tol", type=float, default=1e-3, show_default=True)
@click.option("--max-iters", type=int, default=20000, show_default=True)
@click.option("--init", "init_policy", type=click.Choice(["zeros", "random"]),
              default="zeros", show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              required=True)
@_guarded
def run_experiment_cmd(network_path, mean_ratios, count, reduce_to, k_list,
                       test_count, a, b, k_loss, zero_root_cost,
                       rho, rho_policy, eps, gap_tol, max_iters, init_policy,
                       workers, seed, out_dir):
    """Full study: day-type solves plus the local-policy comparison.

    Per day type: sample, reduce, solve, audit, exactness verdict,
    residual trace. Then, on the last (sunniest) day type, re-solve the
    second stage over fresh scenarios with the first stage pinned and
    sweep the local policy's blend weight. All randomness derives from
    the root seed by stage label, so reruns are byte-identical apart
    from the timing fields.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        ratios = [float(tok) for tok in mean_ratios.split(",") if tok.strip()]
        ks = [float(tok) for tok in k_list.split(",") if tok.strip()]
    except ValueError:
        raise BadParameter("mean-ratios and k-list must be comma-separated numbers")
    if not ratios:
        raise BadParameter("mean-ratios must name at least one day type")

    if network_path:
        net = load_network(network_path)
    else:
        net = make_feeder(30, ((20, 10), (20, 10)), s_w_overrides={30: 1.0})
    save_network(net, out / "network.json")

    obj = _objective(a, b, k_loss, zero_root_cost)
    cfg = _solver_config(rho, rho_policy, eps, gap_tol, max_iters,
                         init_policy, seed, workers)

    def day_label(ratio):
        names = {0.3: "cloudy", 0.6: "partly-cloudy", 0.9: "sunny"}
        return names.get(ratio, f"ratio-{ratio:g}")

    day_rows = []
    failures = []
    last_prog = None
    last_report = None
    last_ratio = None
    for ratio in ratios:
        label = day_label(ratio)
        click.echo(f"[{label}] sampling {count} scenarios")
        full = sample_scenarios(net, ratio, count,
                                derived_seed(seed, f"scenarios-{label}"))
        save_scenarios(full, out / f"scenarios_{label}.json")
        reduced = fast_forward_reduce(full, reduce_to)
        save_scenarios(reduced, out / f"reduced_{label}.json")
        distance = kantorovich_distance(full, _kept_indices(full, reduced))
        min_pi = min(s.pi for s in reduced.scenarios)
        click.echo(f"[{label}] reduced to {reduce_to} "
                   f"(distance {distance:.4g}, min probability {min_pi:.4g})")

        prog = assemble(net, reduced, obj)
        report = solve(prog, cfg)
        doc, audit = _solve_doc(prog, report, eps)
        doc["reduction"] = {"kantorovich_distance": distance,
                            "min_probability": min_pi}
        _dump_json(doc, out / f"solve_{label}.json")
        _write_trace_csv(report.traces, out / f"trace_{label}.csv")

        verdict = check_exactness(prog)
        _dump_json(_finite({
            "vacuous": verdict.vacuous,
            "m_independent": verdict.m_independent,
            "m_independent_margin": verdict.m_independent_margin,
            "per_scenario": list(verdict.per_scenario),
        }), out / f"exactness_{label}.json")

        terms = doc["objective"]
        day_rows.append({
            "day_type": label,
            "mean_ratio": ratio,
            "negative_utility": terms["negative_utility"],
            "root_energy": terms["root_energy"],
            "expected_loss_mw": terms["expected_loss_mw"],
            "converged": report.converged,
            "iterations": report.iterations,
            "final_rho": doc["final_rho"],
            "audit_ok": audit.ok,
        })
        status = "converged" if report.converged else "DID NOT CONVERGE"
        click.echo(f"[{label}] {status} after {report.iterations} iterations, "
                   f"losses {terms['expected_loss_mw']:.4g} MW")
        if not report.converged:
            failures.append(f"{label}: no convergence in {max_iters} iterations")
        elif not audit.ok:
            failures.append(f"{label}: feasibility audit failed")
        last_prog, last_report, last_ratio = prog, report, ratio

    sweep_rows = []
    if test_count > 0 and last_report is not None and not failures:
        label = day_label(last_ratio)
        click.echo(f"[online] {test_count} fresh scenarios at "
                   f"mean ratio {last_ratio:g}")
        test = sample_scenarios(net, last_ratio, test_count,
                                derived_seed(seed, "test-scenarios"))
        save_scenarios(test, out / "test_scenarios.json")
        pc = {nid: val for nid, val in last_report.solution.pc.items()
              if nid != net.root}
        test_prog = assemble(net, test, obj)
        online = online_second_stage(test_prog, pc, test, cfg, qw_free=True)
        deviations = [max_voltage_deviation(net, vm)
                      for vm in online.solution.v]
        _dump_json(_finite({
            "pinned_from": label,
            "n_scenarios": test_count,
            "infeasible_indices": list(online.infeasible),
            "converged_per_scenario": list(online.converged),
            "max_deviation": max(deviations),
            "deviations": deviations,
            "objective": online.objective_terms,
            "note": online.note,
        }), out / "online_eval.json")
        cdf = sorted(deviations)
        _write_cdf_csv([(d, (i + 1) / len(cdf)) for i, d in enumerate(cdf)],
                       out / "cdf_stochastic.csv")
        sweep_rows.append({
            "method": "stochastic",
            "expected_loss_mw": online.objective_terms["expected_loss_mw"],
            "max_deviation": max(deviations),
            "n_infeasible": len(online.infeasible),
        })
        click.echo(f"[online] max deviation {max(deviations):.4g}, "
                   f"{len(online.infeasible)} infeasible")
        for k in ks:
            metrics = evaluate_policy(test_prog, pc, k, test)
            _write_cdf_csv(metrics.cdf, out / f"cdf_k{k:g}.csv")
            sweep_rows.append({
                "method": f"K={k:g}",
                "expected_loss_mw": metrics.expected_loss_mw,
                "max_deviation": metrics.max_deviation,
                "n_infeasible": metrics.n_failed,
            })
            click.echo(f"[K={k:g}] loss {metrics.expected_loss_mw:.4g} MW, "
                       f"max deviation {metrics.max_deviation:.4g}")

    summary = {
        "epsilon": net.epsilon,
        "day_types": day_rows,
        "k_sweep": sweep_rows,
    }
    _dump_json(_finite(summary), out / "summary.json")
    with open(out / "day_types.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day_type", "mean_ratio", "negative_utility",
                         "root_energy", "expected_loss_mw", "iterations"])
        for row in day_rows:
            writer.writerow([row["day_type"], _sig4(row["mean_ratio"]),
                             _sig4(row["negative_utility"]),
                             _sig4(row["root_energy"]),
                             _sig4(row["expected_loss_mw"]),
                             row["iterations"]])
    with open(out / "k_sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "expected_loss_mw", "max_deviation",
                         "n_infeasible"])
        for row in sweep_rows:
            writer.writerow([row["method"], _sig4(row["expected_loss_mw"]),
                             _sig4(row["max_deviation"]),
                             row["n_infeasible"]])
    _write_manifest(out, "run-experiment", {
        "network": str(network_path), "mean_ratios": mean_ratios,
        "count": count, "reduce_to": reduce_to, "k_list": k_list,
        "test_count": test_count, "a": a, "b": b, "k_loss": k_loss,
        "zero_root_cost": zero_root_cost, "rho": rho,
        "rho_policy": rho_policy, "eps": eps, "gap_tol": gap_tol,
        "max_iters": max_iters, "init": init_policy, "workers": workers,
        "out": str(out_dir),
    }, seed=seed, inputs=[network_path] if network_path else [])
    click.echo(_summary_text(summary))
    if failures:
        _fail(EXIT_NOT_CONVERGED, "; ".join(failures))


def _summary_text(summary: dict) -> str:
    blocks = []
    day_rows = summary.get("day_types", [])
    if day_rows:
        blocks.append("objective breakdown by day type")
        blocks.append(_render_table(
            ["day type", "mean ratio", "negative utility", "root energy",
             "loss (MW)", "iterations"],
            [[r["day_type"], r["mean_ratio"], r["negative_utility"],
              r["root_energy"], r["expected_loss_mw"], r["iterations"]]
             for r in day_rows]))
    sweep = summary.get("k_sweep", [])
    if sweep:
        eps = summary.get("epsilon")
        title = "local policy comparison"
        if eps is not None:
            title += f" (band epsilon {_sig4(eps)})"
        blocks.append(title)
        blocks.append(_render_table(
            ["method", "loss (MW)", "max deviation", "infeasible"],
            [[r["method"], r["expected_loss_mw"], r["max_deviation"],
              r["n_infeasible"]] for r in sweep]))
    return "\n\n".join(blocks) if blocks else "nothing to report"


@main.command("report")
@click.option("--dir", "exp_dir", type=click.Path(file_okay=False),
              default=None, help="experiment directory with summary.json")
@click.option("--solve-report", type=click.Path(exists=True, dir_okay=False),
              default=None, help="single solve report JSON")
@_guarded
def report_cmd(exp_dir, solve_report):
    """Render experiment or solve artifacts as plain-text tables."""
    if (exp_dir is None) == (solve_report is None):
        raise BadParameter("pass exactly one of --dir or --solve-report")
    if exp_dir:
        summary_path = Path(exp_dir) / "summary.json"
        with open(summary_path) as fh:
            summary = json.load(fh)
        click.echo(_summary_text(summary))
        return
    with open(solve_report) as fh:
        doc = json.load(fh)
    res = doc.get("residuals", {})
    status = "converged" if doc.get("converged") else "not converged"
    click.echo(f"{status} after {doc.get('iterations')} iterations "
               f"(r={_sig4(res.get('primal'))} s={_sig4(res.get('dual'))} "
               f"gap={_sig4(res.get('socp_gap_pu2'))} "
               f"rho={_sig4(doc.get('final_rho'))})")
    terms = doc.get("objective", {})
    click.echo(_render_table(
        ["term", "value"],
        [[name, terms[name]] for name in
         ("negative_utility", "root_energy", "expected_loss_mw",
          "weighted_loss", "total") if name in terms]))
    audit = doc.get("audit", {})
    if audit:
        click.echo(f"audit ok: {audit.get('ok')}  "
                   f"cone gap: {_sig4(audit.get('socp_gap_pu2'))} (pu)^2")


if __name__ == "__main__":
    main()
