from __future__ import annotations

import json
from pathlib import Path

import pytest

from citsim.catalog import StrategyLevel, load_catalog, load_generic_catalog
from citsim.network import load_network
from citsim.sim import (
    Bottleneck,
    _snapshot_links,
    effective_capacities,
    init_state,
)
from citsim.strategy import (
    ControlStrategy,
    PendingDecision,
    PlanRunner,
    PreferredSituation,
    StrategyError,
    answer_six_questions,
    compose_strategy,
    deescalate,
    escalate,
    evaluate_preferred_situation,
    load_plans,
    resolve_conflicts,
    scope_elements,
)

DATA = Path(__file__).resolve().parents[1] / "src" / "citsim" / "data"


def load_scenario(name):
    base = DATA / "scenarios" / name
    network = load_network(json.loads((base / "network.json").read_text()))
    catalog = load_catalog(json.loads((base / "catalog.json").read_text()))
    return network, catalog


def north_branch_problem():
    return Bottleneck(
        id="bn:L_N1:queue_spill",
        element="L_N1",
        kind="queue_spill",
        severity=2.0,
        measure=30.0,
        threshold=15.0,
        primary_cause="inc_north",
    )


# ---------------------------------------------------------------------------
# Scope


def test_scope_elements_per_level_on_diamond():
    net, _ = load_scenario("diamond")
    problem = north_branch_problem()
    assert scope_elements(problem, StrategyLevel.INFORM_TRAFFIC, net) == ["L_IN", "L_N1"]
    assert scope_elements(problem, StrategyLevel.ENLARGE_OUTFLOW, net) == ["B", "K1", "SEG_N"]
    assert scope_elements(problem, StrategyLevel.REDUCE_INFLOW, net) == ["A"]
    assert scope_elements(problem, StrategyLevel.REROUTE_TRAFFIC, net) == ["C1"]


def test_scope_for_route_part_problem_uses_member_links():
    net, _ = load_scenario("diamond")
    rp_north = next(
        rp.id for rp in net.route_parts.values() if "L_N1" in rp.member_links
    )
    problem = Bottleneck(
        id=f"bn:{rp_north}:travel_time_excess",
        element=rp_north,
        kind="travel_time_excess",
        severity=1.2,
        measure=3.0,
        threshold=2.5,
    )
    scope = scope_elements(problem, StrategyLevel.INFORM_TRAFFIC, net)
    assert "L_N1" in scope and "L_N2" in scope and "L_IN" in scope


def test_unknown_problem_element_raises():
    net, cat = load_scenario("diamond")
    problem = Bottleneck(
        id="bn:NOPE:queue_spill", element="NOPE", kind="queue_spill",
        severity=1.0, measure=1.0, threshold=1.0,
    )
    with pytest.raises(StrategyError, match="not a link or route part"):
        scope_elements(problem, StrategyLevel.INFORM_TRAFFIC, net)


# ---------------------------------------------------------------------------
# Composition


EXPECTED_BY_LEVEL = {
    StrategyLevel.INFORM_TRAFFIC: {
        ("PVD", "L_N1"), ("RWW", "L_IN"), ("RWW", "L_N1"),
    },
    StrategyLevel.ENLARGE_OUTFLOW: {
        ("PVD", "L_N1"), ("RWW", "L_IN"), ("RWW", "L_N1"), ("FI", "SEG_N"),
    },
    StrategyLevel.REDUCE_INFLOW: {
        ("PVD", "L_N1"), ("RWW", "L_IN"), ("RWW", "L_N1"), ("FI", "SEG_N"),
        ("METERING", "A"),
    },
    StrategyLevel.REROUTE_TRAFFIC: {
        ("PVD", "L_N1"), ("RWW", "L_IN"), ("RWW", "L_N1"), ("FI", "SEG_N"),
        ("METERING", "A"), ("IVS_ROUTE", "C1"), ("MTTA", "C1"),
    },
}


def test_composition_is_cumulative_and_exact_on_diamond():
    net, cat = load_scenario("diamond")
    problem = north_branch_problem()
    previous = frozenset()
    for level, expected in EXPECTED_BY_LEVEL.items():
        strategy = compose_strategy(problem, level, net, cat, strategy_id="st:1")
        assert strategy.activations == frozenset(expected), level
        assert strategy.activations >= previous
        assert strategy.status == "proposed"
        assert strategy.level is level
        previous = strategy.activations


def test_composed_strategy_targets_problem_threshold():
    net, cat = load_scenario("diamond")
    strategy = compose_strategy(
        north_branch_problem(), StrategyLevel.ENLARGE_OUTFLOW, net, cat
    )
    ps = strategy.preferred_situation
    assert ps.element == "L_N1"
    assert ps.measure == "queue"
    assert ps.comparator == "<="
    assert ps.target == 15.0


def test_every_activation_respects_applicability():
    net, cat = load_scenario("diamond")
    strategy = compose_strategy(
        north_branch_problem(), StrategyLevel.REROUTE_TRAFFIC, net, cat
    )
    from citsim.strategy import element_kind_of

    for sid, element in strategy.activations:
        assert element_kind_of(net, element) in cat.get(sid).applicable_elements


def test_compose_is_pure_and_deterministic():
    net, cat = load_scenario("diamond")
    problem = north_branch_problem()
    a = compose_strategy(problem, StrategyLevel.REROUTE_TRAFFIC, net, cat)
    b = compose_strategy(problem, StrategyLevel.REROUTE_TRAFFIC, net, cat)
    assert a == b
    assert a.sorted_activations() == sorted(a.activations)


def test_operational_gating_excludes_unsuitable_services():
    net, _ = load_scenario("diamond")
    doc = {
        "services": [
            {
                "id": "GOOD", "name": "x", "category": "c_its",
                "primary_objective": "", "contributions": ["inform_traffic"],
                "applicable_elements": ["link"], "bundled_for": ["driver"],
                "deployment_scale": "large_scale", "control_mode": "via_provider",
                "tm_suitable": True, "effect_profile": "inform_only",
            },
            {
                "id": "UNSUITABLE", "name": "x", "category": "c_its",
                "primary_objective": "", "contributions": ["inform_traffic"],
                "applicable_elements": ["link"], "bundled_for": ["driver"],
                "deployment_scale": "large_scale", "control_mode": "via_provider",
                "tm_suitable": False, "effect_profile": "inform_only",
            },
            {
                "id": "PILOT", "name": "x", "category": "c_its",
                "primary_objective": "", "contributions": ["inform_traffic"],
                "applicable_elements": ["link"], "bundled_for": ["driver"],
                "deployment_scale": "proof_of_concept", "control_mode": "via_provider",
                "tm_suitable": True, "effect_profile": "inform_only",
            },
        ]
    }
    cat = load_catalog(doc)
    problem = north_branch_problem()
    gated = compose_strategy(problem, StrategyLevel.INFORM_TRAFFIC, net, cat)
    assert {sid for sid, _ in gated.activations} == {"GOOD"}
    manual = compose_strategy(
        problem, StrategyLevel.INFORM_TRAFFIC, net, cat, operational_only=False
    )
    assert {sid for sid, _ in manual.activations} == {"GOOD", "UNSUITABLE", "PILOT"}


def test_unservable_level_raises():
    net, _ = load_scenario("diamond")
    doc = {
        "services": [
            {
                "id": "METERING", "name": "x", "category": "ttm",
                "primary_objective": "", "contributions": ["reduce_inflow"],
                "applicable_elements": ["control_node"], "bundled_for": [],
                "deployment_scale": "large_scale", "control_mode": "direct_operator",
                "tm_suitable": True, "effect_profile": "capacity_control",
            }
        ]
    }
    cat = load_catalog(doc)
    with pytest.raises(StrategyError, match="strategy unservable at level inform_traffic"):
        compose_strategy(north_branch_problem(), StrategyLevel.INFORM_TRAFFIC, net, cat)


# ---------------------------------------------------------------------------
# Escalation


def test_escalate_walks_all_levels_and_round_trips():
    net, cat = load_scenario("diamond")
    problem = north_branch_problem()
    s1 = compose_strategy(problem, StrategyLevel.INFORM_TRAFFIC, net, cat)
    s2 = escalate(s1, net, cat)
    s3 = escalate(s2, net, cat)
    s4 = escalate(s3, net, cat)
    assert [s.level for s in (s1, s2, s3, s4)] == list(StrategyLevel)
    assert s1.activations <= s2.activations <= s3.activations <= s4.activations
    with pytest.raises(StrategyError, match="maximum escalation"):
        escalate(s4, net, cat)
    assert deescalate(s4, net, cat).activations == s3.activations
    assert deescalate(s2, net, cat).activations == s1.activations
    with pytest.raises(StrategyError, match="minimum escalation"):
        deescalate(s1, net, cat)


# ---------------------------------------------------------------------------
# Conflict regulation


def test_operator_decides_withholds_both_and_emits_decision():
    _, cat = load_scenario("diamond")
    proposed = {("IVS_ROUTE", "C1"), ("MTTA", "C1"), ("RWW", "L_IN")}
    kept, pending = resolve_conflicts(proposed, cat)
    assert kept == frozenset({("RWW", "L_IN")})
    assert pending == [
        PendingDecision("IVS_ROUTE|MTTA|C1", "IVS_ROUTE", "MTTA", "C1")
    ]


def test_operator_decision_keeps_the_chosen_service():
    _, cat = load_scenario("diamond")
    proposed = {("IVS_ROUTE", "C1"), ("MTTA", "C1")}
    kept, pending = resolve_conflicts(
        proposed, cat, decisions={"IVS_ROUTE|MTTA|C1": "MTTA"}
    )
    assert kept == frozenset({("MTTA", "C1")})
    assert pending == []


def test_conflict_rules_scope_is_per_element():
    _, cat = load_scenario("diamond")
    proposed = {("IVS_ROUTE", "C1"), ("MTTA", "C2")}
    kept, pending = resolve_conflicts(proposed, cat)
    assert kept == frozenset(proposed)
    assert pending == []


def test_no_rules_passes_activations_through():
    _, cat = load_scenario("thessaloniki")
    proposed = {("FI", "SEG_EGN_E"), ("RWW", "E_CTR_EGN2")}
    kept, pending = resolve_conflicts(proposed, cat)
    assert kept == frozenset(proposed)
    assert pending == []


def test_preference_rules_resolve_automatically():
    base = {
        "id": "A", "name": "x", "category": "c_its", "primary_objective": "",
        "contributions": ["inform_traffic"], "applicable_elements": ["link"],
        "bundled_for": [], "deployment_scale": "large_scale",
        "control_mode": "via_provider", "tm_suitable": True,
        "effect_profile": "inform_only",
    }
    cat = load_catalog(
        {
            "services": [base, {**base, "id": "B"}],
            "conflict_rules": [
                {"service_a": "A", "service_b": "B", "scope": "*",
                 "resolution": "prefer_a"}
            ],
        }
    )
    kept, pending = resolve_conflicts({("A", "L"), ("B", "L")}, cat)
    assert kept == frozenset({("A", "L")})
    assert pending == []

    cat_b = load_catalog(
        {
            "services": [base, {**base, "id": "B"}],
            "conflict_rules": [
                {"service_a": "A", "service_b": "B", "scope": "*",
                 "resolution": "prefer_b"}
            ],
        }
    )
    kept, _ = resolve_conflicts({("A", "L"), ("B", "L")}, cat_b)
    assert kept == frozenset({("B", "L")})


def test_resolution_leaves_no_conflicting_pair():
    net, cat = load_scenario("diamond")
    strategy = compose_strategy(
        north_branch_problem(), StrategyLevel.REROUTE_TRAFFIC, net, cat
    )
    kept, _ = resolve_conflicts(strategy.activations, cat)
    by_element = {}
    for sid, element in kept:
        by_element.setdefault(element, set()).add(sid)
    for rule in cat.conflict_rules:
        for element, present in by_element.items():
            if rule.scope in ("*", element):
                assert not (rule.service_a in present and rule.service_b in present)


# ---------------------------------------------------------------------------
# Preferred situation


def make_single_link_state(queue_sizes):
    from citsim.network import load_network as load

    doc = {
        "schema_version": 1,
        "nodes": [
            {"id": "A", "kind": "control", "x": 0.0, "y": 0.0},
            {"id": "B", "kind": "control", "x": 100.0, "y": 0.0},
        ],
        "edges": [
            {"id": "L", "from": "A", "to": "B", "length": 1000.0,
             "capacity": 1800.0, "free_flow_speed": 60.0, "lanes": 1}
        ],
        "control_segments": [],
        "policy": {},
    }
    net = load(doc)
    state = init_state(net, {"entries": []}, seed=1)

    def set_queue(n):
        state._links["L"].queue = [(f"x{i}", 0.0) for i in range(n)]
        state._links["L"].head = 0
        _snapshot_links(state, net, effective_capacities(state, net))

    return net, state, set_queue


def situation_strategy(target=50.0):
    problem = Bottleneck(
        id="bn:L:queue_spill", element="L", kind="queue_spill",
        severity=2.4, measure=120.0, threshold=target,
    )
    return ControlStrategy(
        id="st:1",
        problem=problem,
        preferred_situation=PreferredSituation("L", "queue", "<=", target),
        level=StrategyLevel.INFORM_TRAFFIC,
        activations=frozenset(),
        status="active",
    )


def test_preferred_situation_met_after_consecutive_ticks():
    net, state, set_queue = make_single_link_state([])
    strategy = situation_strategy()
    streak = 0
    for i in range(6):
        set_queue(40)
        status = evaluate_preferred_situation(strategy, state, net, streak)
        streak = status.streak
        assert status.holds_now
        assert status.met == (i == 5)
    assert status.severity == 1.0


def test_preferred_situation_not_met_reports_ratio():
    net, state, set_queue = make_single_link_state([])
    strategy = situation_strategy()
    set_queue(80)
    status = evaluate_preferred_situation(strategy, state, net, streak=5)
    assert not status.met and not status.holds_now
    assert status.severity == pytest.approx(1.6)
    assert status.streak == 0


def test_preferred_situation_oscillation_resets_streak():
    net, state, set_queue = make_single_link_state([])
    strategy = situation_strategy()
    streak = 0
    for q in [45, 55, 45, 55, 45, 55, 45, 55]:
        set_queue(q)
        status = evaluate_preferred_situation(strategy, state, net, streak)
        streak = status.streak
        assert not status.met
    for _ in range(6):
        set_queue(45)
        status = evaluate_preferred_situation(strategy, state, net, streak)
        streak = status.streak
    assert status.met


# ---------------------------------------------------------------------------
# Response plans


def plan_doc(plans):
    return {"plans": plans}


def test_plans_fire_once_per_episode():
    net, state, set_queue = make_single_link_state([])
    plans = load_plans(
        plan_doc(
            [
                {
                    "id": "p1",
                    "trigger": {"element": "L", "measure": "queue", "op": ">", "value": 100},
                    "actions": [{"auto": {"level": "inform_traffic"}}],
                }
            ]
        ),
        net,
    )
    runner = PlanRunner(plans)
    set_queue(120)
    assert len(runner.evaluate(state, net)) == 1
    for _ in range(50):
        assert runner.evaluate(state, net) == []
    set_queue(40)
    assert runner.evaluate(state, net) == []
    set_queue(130)
    firings = runner.evaluate(state, net)
    assert len(firings) == 1
    assert firings[0].trigger_value == 130.0


def test_simultaneous_plans_ordered_by_id():
    net, state, set_queue = make_single_link_state([])
    plans = load_plans(
        plan_doc(
            [
                {
                    "id": "p2",
                    "trigger": {"element": "L", "measure": "queue", "op": ">", "value": 10},
                    "actions": [{"manual": "check the cameras"}],
                },
                {
                    "id": "p1",
                    "trigger": {"element": "L", "measure": "queue", "op": ">", "value": 10},
                    "actions": [{"auto": {"level": "enlarge_outflow"}}],
                },
            ]
        ),
        net,
    )
    runner = PlanRunner(plans)
    set_queue(50)
    firings = runner.evaluate(state, net)
    assert [f.plan.id for f in firings] == ["p1", "p2"]
    assert firings[0].plan.actions[0].kind == "auto"
    assert firings[0].plan.actions[0].level is StrategyLevel.ENLARGE_OUTFLOW
    assert firings[1].plan.actions[0].prompt == "check the cameras"


def test_plan_validation_aggregates_errors():
    net, _, _ = make_single_link_state([])
    bad = plan_doc(
        [
            {
                "id": "p1",
                "trigger": {"element": "NOPE", "measure": "queue", "op": "!!", "value": 1},
                "actions": [],
            }
        ]
    )
    with pytest.raises(StrategyError) as err:
        load_plans(bad, net)
    message = str(err.value)
    assert "unknown element" in message
    assert "unknown comparator" in message
    assert "at least one action" in message


# ---------------------------------------------------------------------------
# Deployment planning


def test_planning_report_groups_services_by_scale():
    net, cat = load_scenario("thessaloniki")
    census = {
        "driver": 6500,
        "commercial_fleet": 600,
        "vru": {"count": 50, "nonnormative": True},
    }
    report = answer_six_questions(net, cat, census)
    assert report.available_services == {
        "large_scale": ["FI", "GLOSA", "IVS", "RHW", "RWW"],
        "limited_scale": ["WSP"],
        "proof_of_concept": ["CTLP", "EVW", "GP", "SVW"],
    }
    assert report.end_user_census == {
        "commercial_fleet": 600,
        "driver": 6500,
        "vru": "limited",
    }
    assert report.common_problems == ["queue_spill", "speed_drop", "travel_time_excess"]


def test_planning_report_counts_match_network():
    net, cat = load_scenario("thessaloniki")
    report = answer_six_questions(net, cat, {})
    kinds = {"choice_node": 0, "control_node": 0, "choice_control_node": 0,
             "regular_node": 0}
    for node in net.nodes.values():
        key = {
            "choice": "choice_node",
            "control": "control_node",
            "choice_control": "choice_control_node",
            "regular": "regular_node",
        }[node.kind.value]
        kinds[key] += 1
    for key, count in kinds.items():
        assert report.network_summary[key] == count
    assert report.network_summary["link"] == len(net.links)
    assert report.network_summary["control_segment"] == len(net.control_segments)
    assert report.network_summary["regular_node"] == 4


def test_contribution_map_joins_levels_with_network_elements():
    net, cat = load_scenario("diamond")
    report = answer_six_questions(net, cat, {})
    fi = report.contribution_map["FI"]
    link_and_segment = sorted(list(net.links) + list(net.control_segments))
    assert fi == {
        "enlarge_outflow": link_and_segment,
        "reduce_inflow": link_and_segment,
    }
    mtta = report.contribution_map["MTTA"]
    assert mtta["reroute_traffic"] == ["A", "B", "C1", "C2", "K1", "K2"]
    assert "PVD" not in report.contribution_map


def test_empty_catalog_planning_report():
    net, _ = load_scenario("diamond")
    cat = load_catalog({"services": []})
    report = answer_six_questions(net, cat, {})
    assert report.available_services == {}
    assert report.contribution_map == {}
    assert report.operational_services == []


def test_planning_report_serializes_six_answers_in_order():
    net, cat = load_scenario("diamond")
    report = answer_six_questions(net, cat, {"driver": 1350})
    doc = report.to_dict()
    assert list(doc) == [
        "q1_network_elements",
        "q2_end_users",
        "q3_common_problems",
        "q4_available_services",
        "q5_operational_services",
        "q6_contribution_map",
    ]
    assert doc["q2_end_users"] == {"driver": 1350}
