import json
import math

import numpy as np
import pytest

from feederopt.errors import (
    BadParameter,
    InjectionExceedsNameplate,
    ScenarioNetworkMismatch,
)
from feederopt.network import LineParams, NodeParams, build_network, make_feeder
from feederopt.program import (
    ObjectiveConfig,
    Solution,
    assemble,
    audit_report_to_dict,
    complementarity_check,
    feasibility_audit,
    load_solution,
    objective_terms,
    objective_value,
    save_solution,
    solution_from_dict,
    solution_to_dict,
)
from feederopt.scenario import Scenario, make_scenario_set, sample_scenarios

from oracles import powerflow_2node


def two_node_net(p_l=0.3, q_l=0.1, s_w=0.0, q_s=0.0):
    nodes = [
        NodeParams(id=0),
        NodeParams(id=1, ancestor=0, p_l_mw=p_l, q_l_mvar=q_l, pf=0.95,
                   pc_max_mw=0.05, s_w_mva=s_w, q_s=q_s),
    ]
    lines = [LineParams(node=1, r_ohm=0.5, x_ohm=0.6, l_max_ka2=0.5)]
    return build_network(nodes, lines, v0_kv=7.2, s_base_mva=1.0, epsilon=0.05)


def scen(net, w_by_node, pi=None):
    ids = list(net.order)
    if pi is None:
        pi = [1.0 / len(w_by_node)] * len(w_by_node)
    scenarios = [
        Scenario(w={i: wm.get(i, 0.0) for i in ids}, pi=p)
        for wm, p in zip(w_by_node, pi)
    ]
    return make_scenario_set(scenarios)


def test_objective_config_validation():
    ObjectiveConfig(a=2.0, b=0.0)
    ObjectiveConfig(a=2.0, b=1.9999, k_loss=5.0)
    with pytest.raises(BadParameter):
        ObjectiveConfig(a=1.0, b=1.0)
    with pytest.raises(BadParameter):
        ObjectiveConfig(a=1.0, b=-0.1)
    with pytest.raises(BadParameter):
        ObjectiveConfig(a=2.0, b=1.0, k_loss=-1.0)
    with pytest.raises(BadParameter):
        ObjectiveConfig(a=2.0, b=1.0, root_cost=42)
    ObjectiveConfig(a=2.0, b=1.0, root_cost=lambda p: p * p)


def test_assemble_rejects_domain_mismatch():
    net = two_node_net()
    bad = make_scenario_set([Scenario(w={0: 0.0, 1: 0.0, 7: 0.0}, pi=1.0)])
    with pytest.raises(ScenarioNetworkMismatch):
        assemble(net, bad, ObjectiveConfig(a=1.0, b=0.0))


def test_assemble_rejects_nameplate_violation():
    net = two_node_net(s_w=0.1)
    ss = scen(net, [{1: 0.2}])
    with pytest.raises(InjectionExceedsNameplate):
        assemble(net, ss, ObjectiveConfig(a=1.0, b=0.0))


def test_assemble_qw_max_boundaries():
    net = two_node_net(s_w=0.1)
    ss = scen(net, [{1: 0.1}, {1: 0.0}])
    prog = assemble(net, ss, ObjectiveConfig(a=1.0, b=0.0))
    pos = net.arrays.pos_of[1]
    # at nameplate: no reactive headroom; at zero output: full nameplate
    assert prog.qw_max[0, pos] == pytest.approx(0.0, abs=1e-15)
    assert prog.qw_max[1, pos] == pytest.approx(0.1, rel=1e-12)


def test_assemble_size_counts():
    net = make_feeder(50)
    ss = sample_scenarios(net, 0.4, count=7, seed=1)
    prog = assemble(net, ss, ObjectiveConfig(a=1.0, b=0.0))
    assert prog.n_scenarios == 7
    assert prog.first_stage_size == 50
    # chain: 49 internal non-root blocks of 10, leaf block of 7, root 2+3
    assert prog.second_stage_size == 49 * 10 + 7 + 5


def zero_solution(net, m_count, v0_sq=None):
    if v0_sq is None:
        v0_sq = net.v0_kv**2
    ids = list(net.order)
    nonroot = [i for i in ids if i != 0]
    return Solution(
        pc={i: 0.0 for i in ids},
        qw=tuple({i: 0.0 for i in ids} for _ in range(m_count)),
        p=tuple({i: 0.0 for i in ids} for _ in range(m_count)),
        q=tuple({i: 0.0 for i in ids} for _ in range(m_count)),
        v=tuple({i: v0_sq for i in ids} for _ in range(m_count)),
        l=tuple({i: 0.0 for i in nonroot} for _ in range(m_count)),
        p0_plus=tuple(0.0 for _ in range(m_count)),
        p0_minus=tuple(0.0 for _ in range(m_count)),
    )


def test_objective_zero_cases():
    nodes = [
        NodeParams(id=0),
        NodeParams(id=1, ancestor=0, pc_max_mw=0.0),
    ]
    lines = [LineParams(node=1, r_ohm=0.5, x_ohm=0.6, l_max_ka2=0.5)]
    net = build_network(nodes, lines, v0_kv=7.2, s_base_mva=1.0, epsilon=0.05)
    ss = scen(net, [{}])
    prog = assemble(net, ss, ObjectiveConfig(a=1e-9, b=0.0))
    sol = zero_solution(net, 1)
    assert objective_value(prog, sol) == 0.0


def test_objective_utility_vanishes_at_peak():
    net = two_node_net()
    ss = scen(net, [{}, {}])
    prog = assemble(net, ss, ObjectiveConfig(a=3.0, b=1.0, k_loss=2.0))
    sol = zero_solution(net, 2)
    sol = Solution(pc={0: 0.0, 1: 0.05}, qw=sol.qw, p=sol.p, q=sol.q,
                   v=sol.v, l=sol.l, p0_plus=sol.p0_plus, p0_minus=sol.p0_minus)
    assert objective_value(prog, sol) == 0.0


def test_objective_terms_breakdown():
    net = two_node_net()
    ss = scen(net, [{}, {}], pi=[0.25, 0.75])
    prog = assemble(net, ss, ObjectiveConfig(a=3.0, b=1.0, k_loss=2.0))
    base = zero_solution(net, 2)
    sol = Solution(pc={0: 0.0, 1: 0.01}, qw=base.qw, p=base.p, q=base.q,
                   v=base.v, l=({1: 0.1}, {1: 0.2}),
                   p0_plus=(1.0, 2.0), p0_minus=(0.0, 0.5))
    terms = objective_terms(prog, sol)
    # K_u defaults to 1: (0.01-0.05)^2
    assert terms["negative_utility"] == pytest.approx(0.04**2, rel=1e-12)
    assert terms["root_energy"] == pytest.approx(
        0.25 * 3.0 * 1.0 + 0.75 * (3.0 * 2.0 - 1.0 * 0.5), rel=1e-12)
    assert terms["expected_loss_mw"] == pytest.approx(
        0.5 * (0.25 * 0.1 + 0.75 * 0.2), rel=1e-12)
    assert terms["total"] == pytest.approx(objective_value(prog, sol), rel=1e-14)


def test_objective_scenario_permutation_invariance():
    net = two_node_net(s_w=0.1)
    ss = scen(net, [{1: 0.05}, {1: 0.1}], pi=[0.3, 0.7])
    ss_perm = scen(net, [{1: 0.1}, {1: 0.05}], pi=[0.7, 0.3])
    prog = assemble(net, ss, ObjectiveConfig(a=3.0, b=1.0, k_loss=2.0))
    prog_perm = assemble(net, ss_perm, ObjectiveConfig(a=3.0, b=1.0, k_loss=2.0))
    base = zero_solution(net, 2)
    sol = Solution(pc=base.pc, qw=base.qw, p=base.p, q=base.q, v=base.v,
                   l=({1: 0.1}, {1: 0.2}), p0_plus=(1.0, 2.0), p0_minus=(0.0, 0.0))
    sol_perm = Solution(pc=base.pc, qw=base.qw, p=base.p, q=base.q, v=base.v,
                        l=({1: 0.2}, {1: 0.1}), p0_plus=(2.0, 1.0), p0_minus=(0.0, 0.0))
    assert objective_value(prog, sol) == pytest.approx(
        objective_value(prog_perm, sol_perm), rel=1e-14)


def test_objective_scenario_duplication_invariance():
    net = two_node_net(s_w=0.1)
    ss = scen(net, [{1: 0.08}], pi=[1.0])
    ss_dup = scen(net, [{1: 0.08}, {1: 0.08}], pi=[0.5, 0.5])
    prog = assemble(net, ss, ObjectiveConfig(a=3.0, b=1.0, k_loss=2.0))
    prog_dup = assemble(net, ss_dup, ObjectiveConfig(a=3.0, b=1.0, k_loss=2.0))
    base = zero_solution(net, 1)
    sol = Solution(pc={0: 0.0, 1: 0.02}, qw=base.qw, p=base.p, q=base.q,
                   v=base.v, l=({1: 0.3},), p0_plus=(1.5,), p0_minus=(0.0,))
    base2 = zero_solution(net, 2)
    sol_dup = Solution(pc={0: 0.0, 1: 0.02}, qw=base2.qw, p=base2.p, q=base2.q,
                       v=base2.v, l=({1: 0.3}, {1: 0.3}),
                       p0_plus=(1.5, 1.5), p0_minus=(0.0, 0.0))
    assert abs(objective_value(prog, sol)
               - objective_value(prog_dup, sol_dup)) <= 1e-12


def exact_two_node_solution(net, p_l, q_l, q_s=0.0):
    z_base = net.z_base_ohm
    r = 0.5 / z_base
    x = 0.6 / z_base
    shunt = q_s * net.v0_kv**2  # per-unit shunt coefficient
    p, q, v, l = powerflow_2node(r, x, p_l, q_l, shunt=shunt)
    s = net.s_base_mva
    v_base = net.v0_kv**2
    i_base2 = (s / net.v0_kv) ** 2
    p0 = p + r * l
    q0 = q + x * l
    return Solution(
        pc={0: 0.0, 1: 0.0},
        qw=({0: 0.0, 1: 0.0},),
        p=({0: p0 * s, 1: p * s},),
        q=({0: q0 * s, 1: q * s},),
        v=({0: v_base, 1: v * v_base},),
        l=({1: l * i_base2},),
        p0_plus=(p0 * s,),
        p0_minus=(0.0,),
    )


def test_audit_exact_two_node_flow():
    net = two_node_net(p_l=0.3, q_l=0.1)
    ss = scen(net, [{}])
    prog = assemble(net, ss, ObjectiveConfig(a=1.0, b=0.0))
    sol = exact_two_node_solution(net, 0.3, 0.1)
    report = feasibility_audit(prog, sol, tol=1e-9)
    assert report.ok
    for name, val in report.families.items():
        assert val < 1e-12, f"{name}: {val}"
    # exact power flow means the cone is tight
    assert abs(report.socp_gap) < 1e-12


def test_audit_exact_two_node_with_shunt():
    net = two_node_net(p_l=0.3, q_l=0.1, q_s=0.001)
    ss = scen(net, [{}])
    prog = assemble(net, ss, ObjectiveConfig(a=1.0, b=0.0))
    sol = exact_two_node_solution(net, 0.3, 0.1, q_s=0.001)
    report = feasibility_audit(prog, sol, tol=1e-9)
    assert report.ok, report.families


def test_audit_flags_voltage_violation():
    net = two_node_net()
    ss = scen(net, [{}])
    prog = assemble(net, ss, ObjectiveConfig(a=1.0, b=0.0))
    sol = zero_solution(net, 1)
    eps = net.epsilon
    bad_v = dict(sol.v[0])
    bad_v[1] = (1 + 2 * eps) ** 2 * net.v0_kv**2
    sol = Solution(pc=sol.pc, qw=sol.qw, p=sol.p, q=sol.q, v=(bad_v,),
                   l=sol.l, p0_plus=sol.p0_plus, p0_minus=sol.p0_minus)
    report = feasibility_audit(prog, sol, tol=1e-6)
    assert not report.ok
    expected = (1 + 2 * eps) ** 2 - (1 + eps) ** 2
    assert report.families["voltage_band"] == pytest.approx(expected, rel=1e-9)


def test_audit_flags_cone_violation():
    net = two_node_net()
    ss = scen(net, [{}])
    prog = assemble(net, ss, ObjectiveConfig(a=1.0, b=0.0))
    sol = zero_solution(net, 1)
    p_bad = dict(sol.p[0])
    p_bad[1] = 1.0  # flow with zero current: P^2 > v*l
    sol = Solution(pc=sol.pc, qw=sol.qw, p=(p_bad,), q=sol.q, v=sol.v,
                   l=sol.l, p0_plus=sol.p0_plus, p0_minus=sol.p0_minus)
    report = feasibility_audit(prog, sol, tol=1e-6)
    assert not report.ok
    assert report.families["cone"] == pytest.approx(1.0, rel=1e-12)


def test_audit_flags_split_inconsistency():
    net = two_node_net()
    ss = scen(net, [{}])
    prog = assemble(net, ss, ObjectiveConfig(a=1.0, b=0.0))
    sol = zero_solution(net, 1)
    sol = Solution(pc=sol.pc, qw=sol.qw, p=sol.p, q=sol.q, v=sol.v,
                   l=sol.l, p0_plus=(0.4,), p0_minus=(0.0,))
    report = feasibility_audit(prog, sol, tol=1e-6)
    assert report.families["root_split"] == pytest.approx(0.4, rel=1e-12)
    assert not report.ok


def test_complementarity_check_values():
    base = zero_solution(two_node_net(), 1)
    sol = Solution(pc=base.pc, qw=base.qw, p=base.p, q=base.q, v=base.v,
                   l=base.l, p0_plus=(3.0,), p0_minus=(0.0,))
    assert complementarity_check(sol) == 0.0
    sol = Solution(pc=base.pc, qw=base.qw, p=base.p, q=base.q, v=base.v,
                   l=base.l, p0_plus=(1.0,), p0_minus=(0.2,))
    assert complementarity_check(sol) == pytest.approx(0.2)


def test_root_cost_hook_objective():
    net = two_node_net()
    ss = scen(net, [{}, {}], pi=[0.5, 0.5])
    prog = assemble(net, ss, ObjectiveConfig(a=3.0, b=1.0,
                                             root_cost=lambda p: 2.0 * p * p))
    base = zero_solution(net, 2)
    sol = Solution(pc={0: 0.0, 1: 0.05}, qw=base.qw, p=base.p, q=base.q,
                   v=base.v, l=base.l, p0_plus=(1.0, 0.0), p0_minus=(0.0, 0.5))
    # cost 2*P0^2 at net imports 1.0 and -0.5; utility at its peak
    assert objective_value(prog, sol) == pytest.approx(
        0.5 * 2.0 * 1.0 + 0.5 * 2.0 * 0.25, rel=1e-12)


def test_solution_json_round_trip(tmp_path):
    net = two_node_net()
    sol = exact_two_node_solution(net, 0.3, 0.1)
    d = solution_to_dict(sol)
    back = solution_from_dict(d)
    assert back == sol
    path = tmp_path / "sol.json"
    save_solution(sol, path)
    assert load_solution(path) == sol
    raw = json.loads(path.read_text())
    assert set(raw) == {"pc_mw", "scenarios"}
    with pytest.raises(BadParameter):
        solution_from_dict({"pc_mw": {}})


def test_audit_report_json():
    net = two_node_net()
    ss = scen(net, [{}])
    prog = assemble(net, ss, ObjectiveConfig(a=1.0, b=0.0))
    report = feasibility_audit(prog, exact_two_node_solution(net, 0.3, 0.1), 1e-6)
    d = audit_report_to_dict(report)
    assert d["ok"] is True
    assert set(d["families"]) == {
        "real_balance", "reactive_balance", "voltage_drop", "cone",
        "voltage_band", "current_cap", "pc_box", "qw_box",
        "root_split", "root_sign",
    }
    json.dumps(d)
