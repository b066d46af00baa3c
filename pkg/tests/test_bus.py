"""Activation pipeline: dispatch, gateway forwarding, physical effects."""

import json
from pathlib import Path

import pytest

from citsim.bus import (
    ActivationBus,
    ActiveEffect,
    BusError,
    EffectParameters,
    ProviderGateway,
    apply_effects,
    load_effects,
)
from citsim.catalog import ControlMode, EndUserType, StrategyLevel, load_catalog
from citsim.network import load_network
from citsim.sim import Agent, Bottleneck, ControlOverlay, effective_capacities, init_state
from citsim.strategy import ControlStrategy, PreferredSituation, compose_strategy

DATA = Path(__file__).resolve().parents[1] / "src" / "citsim" / "data"


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def diamond():
    base = DATA / "scenarios" / "diamond"
    network = load_network(load_json(base / "network.json"))
    catalog = load_catalog(load_json(base / "catalog.json"))
    params = load_effects(load_json(base / "effects.json"))
    return network, catalog, params


def fresh_state(network, seed=7):
    demand = {"entries": [{"origin": "A", "destination": "B", "rate": 0,
                           "start": 0, "end": 3600, "user_type": "driver"}]}
    return init_state(network, demand, seed=seed)


def queue_problem(element="L_N1"):
    return Bottleneck(
        id=f"bn:{element}:queue_spill",
        element=element,
        kind="queue_spill",
        severity=1.2,
        measure=18.0,
        threshold=15.0,
    )


def manual_strategy(activations, level=StrategyLevel.ENLARGE_OUTFLOW, status="proposed"):
    return ControlStrategy(
        id="st:0",
        problem=queue_problem(),
        preferred_situation=PreferredSituation("L_N1", "queue", "<=", 15.0),
        level=level,
        activations=frozenset(activations),
        status=status,
    )


def make_agents(n, services, user=EndUserType.DRIVER):
    agents = {}
    for i in range(n):
        aid = f"ag{i:05d}"
        agents[aid] = Agent(
            id=aid,
            user_type=user,
            origin="A",
            destination="B",
            depart_tick=0,
            depart_seconds=0.0,
            compliance=0.6,
            subscribed_services=frozenset(services),
        )
    return agents


# ---------------------------------------------------------------------------
# Effect parameter loading


def test_load_effects_reads_profiles_and_providers(diamond):
    _, _, params = diamond
    spec = params.profile_for("FI", StrategyLevel.ENLARGE_OUTFLOW)
    assert spec.effect == "capacity_boost"
    assert spec.factor == 1.3
    assert params.profile_for("FI", StrategyLevel.REDUCE_INFLOW).effect == "capacity_restrict"
    assert params.profile_for("MTTA", StrategyLevel.REROUTE_TRAFFIC).shift_share == 0.1
    assert [g.id for g in params.providers] == ["provider_main"]
    assert params.providers[0].latency_ticks == 2
    assert params.compliance[EndUserType.DRIVER] == 0.6
    assert params.always_inform is False


def test_load_effects_aggregates_validation_errors():
    bad = {
        "profiles": [
            {"service": "X", "level": "enlarge_outflow", "effect": "teleport"},
            {"service": "Y", "level": "enlarge_outflow", "effect": "capacity_boost", "factor": 0.9},
        ],
        "compliance": {"cyclist": 0.5, "driver": 1.4},
        "providers": [{"id": "p", "services": [], "latency_ticks": -1, "drop_probability": 1.0}],
    }
    with pytest.raises(BusError) as err:
        load_effects(bad)
    text = str(err.value)
    assert "teleport" in text
    assert "boost factor" in text
    assert "cyclist" in text
    assert "driver" in text
    assert "latency" in text
    assert "drop probability" in text


# ---------------------------------------------------------------------------
# apply_effects


def eff(service, element, effect, factor=1.0, share=0.0, links=frozenset()):
    return ActiveEffect(
        service=service,
        element=element,
        effect=effect,
        factor=factor,
        shift_share=share,
        strategy_id="st:0",
        problem_links=frozenset(links),
        effective_tick=0,
        control_mode=ControlMode.DIRECT_OPERATOR,
    )


def test_boost_applies_to_segment_members(diamond):
    network, _, _ = diamond
    state = fresh_state(network)
    overlay = apply_effects(
        [eff("FI", "SEG_N", "capacity_boost", 1.3)], network, state
    )
    assert overlay.capacity_factors == {"L_N1": pytest.approx(1.3)}
    caps = effective_capacities(state, network, overlay)
    assert caps["L_N1"] == pytest.approx(1560.0)
    assert caps["L_IN"] == 1800.0


def test_restrict_on_node_scales_outgoing_links(diamond):
    network, _, _ = diamond
    state = fresh_state(network)
    overlay = apply_effects(
        [eff("METERING", "A", "capacity_restrict", 0.8)], network, state
    )
    assert overlay.capacity_factors == {"L_IN": pytest.approx(0.8)}
    assert effective_capacities(state, network, overlay)["L_IN"] == pytest.approx(1440.0)


def test_same_direction_factors_compose_multiplicatively(diamond):
    network, _, _ = diamond
    state = fresh_state(network)
    overlay = apply_effects(
        [
            eff("FI", "SEG_N", "capacity_boost", 1.3),
            eff("OTHER", "L_N1", "capacity_boost", 1.2),
        ],
        network,
        state,
    )
    assert overlay.capacity_factors["L_N1"] == pytest.approx(1.56)


def test_opposing_factors_on_one_link_rejected(diamond):
    network, _, _ = diamond
    state = fresh_state(network)
    with pytest.raises(BusError, match="conflicting physical effects on L_N1"):
        apply_effects(
            [
                eff("FI", "SEG_N", "capacity_boost", 1.3),
                eff("METERING", "C1", "capacity_restrict", 0.8),
            ],
            network,
            state,
        )


def test_green_split_conserves_node_capacity():
    doc = {
        "schema_version": 1,
        "nodes": [
            {"id": "U1", "kind": "control", "x": 0, "y": 100},
            {"id": "U2", "kind": "control", "x": 0, "y": 0},
            {"id": "J", "kind": "control", "x": 100, "y": 50},
            {"id": "E", "kind": "control", "x": 200, "y": 50},
        ],
        "edges": [
            {"id": "IN_A", "from": "U1", "to": "J", "length": 500, "capacity": 1800,
             "free_flow_speed": 50, "lanes": 2},
            {"id": "IN_B", "from": "U2", "to": "J", "length": 500, "capacity": 1200,
             "free_flow_speed": 50, "lanes": 1},
            {"id": "OUT", "from": "J", "to": "E", "length": 500, "capacity": 3600,
             "free_flow_speed": 50, "lanes": 3},
        ],
        "policy": {"default": {"max_queue": 1e9, "max_density": 1e9,
                               "min_speed_ratio": 1e-9, "travel_time_ratio": 1e9}},
    }
    network = load_network(doc)
    demand = {"entries": [{"origin": "U1", "destination": "E", "rate": 0,
                           "start": 0, "end": 3600, "user_type": "driver"}]}
    state = init_state(network, demand, seed=1)
    # Queue on IN_A makes it the favored approach.
    state._links["IN_A"].queue.append(("agx", 0.0))

    overlay = apply_effects([eff("SIG", "J", "green_split_shift", 0.2)], network, state)
    caps = effective_capacities(state, network, overlay)
    assert caps["IN_A"] == pytest.approx(1800 * 1.2)
    # Total approach capacity into J is unchanged.
    assert caps["IN_A"] + caps["IN_B"] == pytest.approx(1800 + 1200, abs=1.0)
    assert caps["IN_B"] == pytest.approx(3000 - 2160)


def test_speed_harmonize_becomes_queued_bonus(diamond):
    network, _, _ = diamond
    state = fresh_state(network)
    overlay = apply_effects(
        [
            eff("IVS", "SEG_N", "speed_harmonize", 0.05),
            eff("IVS2", "L_N1", "speed_harmonize", 0.05),
        ],
        network,
        state,
    )
    assert overlay.queued_capacity_bonus["L_N1"] == pytest.approx(1.05 * 1.05 - 1.0)
    # No queue on the link: the bonus stays dormant.
    assert effective_capacities(state, network, overlay)["L_N1"] == pytest.approx(1200.0)


def test_reroute_and_shift_produce_directives(diamond):
    network, _, _ = diamond
    state = fresh_state(network)
    overlay = apply_effects(
        [eff("MTTA", "C1", "reroute_and_shift", share=0.1, links={"L_N1"})],
        network,
        state,
    )
    assert len(overlay.reroutes) == 1
    directive = overlay.reroutes[0]
    assert directive.node == "C1"
    assert directive.avoid == frozenset({"L_N1"})
    assert directive.notified is None
    assert len(overlay.shifts) == 1
    assert overlay.shifts[0].share == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# Dispatch and latency


def test_direct_operator_effect_lands_at_issue_tick(diamond):
    network, catalog, params = diamond
    state = fresh_state(network)
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = compose_strategy(
        queue_problem(), StrategyLevel.REDUCE_INFLOW, network, catalog
    )
    bus.dispatch(strategy, tick=5)
    overlay = bus.overlay(5, state)
    # Ramp metering is operator-owned: restriction is immediate.
    assert overlay.capacity_factors.get("L_IN") == pytest.approx(0.8)
    assert bus.service_status(5)["METERING"] == "active"


def test_provider_effect_waits_for_gateway_latency(diamond):
    network, catalog, params = diamond
    state = fresh_state(network)
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = compose_strategy(
        queue_problem(), StrategyLevel.ENLARGE_OUTFLOW, network, catalog
    )
    bus.dispatch(strategy, tick=0)
    assert bus.service_status(0)["FI"] == "pending"
    assert "L_N1" not in bus.overlay(0, state).capacity_factors
    assert "L_N1" not in bus.overlay(1, state).capacity_factors
    overlay = bus.overlay(2, state)
    assert overlay.capacity_factors.get("L_N1") == pytest.approx(1.3)
    assert bus.service_status(2)["FI"] == "active"


def test_deactivation_pays_the_same_latency(diamond):
    network, catalog, params = diamond
    state = fresh_state(network)
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = compose_strategy(
        queue_problem(), StrategyLevel.ENLARGE_OUTFLOW, network, catalog
    )
    bus.dispatch(strategy, tick=0)
    agents = {}
    for t in range(3):
        bus.process_tick(t, agents)
    assert bus.overlay(2, state).capacity_factors.get("L_N1") == pytest.approx(1.3)

    bus.dispatch(strategy.with_status("active"), tick=10, action="deactivate")
    bus.process_tick(10, agents)
    bus.process_tick(11, agents)
    assert bus.overlay(10, state).capacity_factors.get("L_N1") == pytest.approx(1.3)
    assert bus.overlay(11, state).capacity_factors.get("L_N1") == pytest.approx(1.3)
    bus.process_tick(12, agents)
    assert bus.overlay(12, state).capacity_factors == {}
    assert bus.service_status(12)["FI"] == "inactive"


def test_deactivation_restores_base_parameters_exactly(diamond):
    network, catalog, params = diamond
    state = fresh_state(network)
    base = effective_capacities(state, network, ControlOverlay())
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = compose_strategy(
        queue_problem(), StrategyLevel.REDUCE_INFLOW, network, catalog
    )
    agents = make_agents(5, ["FI", "RWW", "MTTA", "PVD"])
    bus.dispatch(strategy, tick=0)
    for t in range(4):
        bus.process_tick(t, agents)
    changed = effective_capacities(state, network, bus.overlay(3, state))
    assert changed != base

    bus.dispatch(strategy.with_status("active"), tick=20, action="deactivate")
    for t in range(20, 24):
        bus.process_tick(t, agents)
    overlay = bus.overlay(23, state)
    assert overlay == ControlOverlay()
    assert effective_capacities(state, network, overlay) == base


def test_lifecycle_must_alternate(diamond):
    network, catalog, params = diamond
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = compose_strategy(
        queue_problem(), StrategyLevel.ENLARGE_OUTFLOW, network, catalog
    )
    bus.dispatch(strategy, tick=0)
    with pytest.raises(BusError, match="double activate"):
        bus.dispatch(strategy, tick=1)


def test_deactivate_before_activate_rejected(diamond):
    network, catalog, params = diamond
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = compose_strategy(
        queue_problem(), StrategyLevel.ENLARGE_OUTFLOW, network, catalog
    ).with_status("active")
    with pytest.raises(BusError, match="deactivate while inactive"):
        bus.dispatch(strategy, tick=0, action="deactivate")


def test_dispatch_checks_strategy_status(diamond):
    network, catalog, params = diamond
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = compose_strategy(
        queue_problem(), StrategyLevel.ENLARGE_OUTFLOW, network, catalog
    ).with_status("retired")
    with pytest.raises(BusError, match="not in proposed state"):
        bus.dispatch(strategy, tick=0)


# ---------------------------------------------------------------------------
# Forwarding and delivery


def test_unserved_provider_service_dead_letters(diamond):
    network, catalog, _ = diamond
    # No gateway carries anything: provider-mediated services go nowhere.
    params = EffectParameters(profiles={}, compliance={}, providers=())
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = manual_strategy([("RWW", "L_N1")], StrategyLevel.INFORM_TRAFFIC)
    bus.dispatch(strategy, tick=0, levels={("RWW", "L_N1"): StrategyLevel.INFORM_TRAFFIC})
    dead = [r for r in bus.delivery_log if r["stage"] == "dead_letter"]
    assert len(dead) == 1
    assert dead[0]["reason"] == "no subscribing gateway"
    assert bus.effective_effects(10) == []
    assert bus.service_status(10)["RWW"] == "inactive"


def test_delivery_log_stages_in_order(diamond):
    network, catalog, params = diamond
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = manual_strategy([("FI", "SEG_N")])
    agents = make_agents(2, ["FI"])
    bus.dispatch(strategy, tick=0, levels={("FI", "SEG_N"): StrategyLevel.ENLARGE_OUTFLOW})
    bus.process_tick(0, agents)
    bus.process_tick(1, agents)
    notes = bus.process_tick(2, agents)
    stages = [r["stage"] for r in bus.delivery_log]
    assert stages == ["dispatched", "forwarded", "delivered", "delivered"]
    assert [n.agent_id for n in notes] == ["ag00000", "ag00001"]
    assert all(n.delivered_tick == 2 for n in notes)
    assert all(n.payload_kind == "capacity_boost" for n in notes)


def test_drop_rate_thins_deliveries_binomially(diamond):
    network, catalog, _ = diamond
    params = EffectParameters(
        profiles={},
        compliance={},
        providers=(
            ProviderGateway(
                id="lossy",
                services=frozenset({"RWW"}),
                latency_ticks=0,
                drop_probability=0.3,
            ),
        ),
    )
    bus = ActivationBus(params, network, catalog, seed=123)
    strategy = manual_strategy([("RWW", "L_N1")], StrategyLevel.INFORM_TRAFFIC)
    agents = make_agents(1000, ["RWW"])
    bus.dispatch(strategy, tick=0, levels={("RWW", "L_N1"): StrategyLevel.INFORM_TRAFFIC})
    notes = bus.process_tick(0, agents)
    delivered = len(notes)
    dropped = sum(1 for r in bus.delivery_log if r["stage"] == "dropped")
    assert delivered + dropped == 1000
    assert 650 <= delivered <= 750


def test_drop_draws_are_reproducible(diamond):
    network, catalog, _ = diamond
    params = EffectParameters(
        profiles={},
        compliance={},
        providers=(
            ProviderGateway(
                id="lossy",
                services=frozenset({"RWW"}),
                latency_ticks=0,
                drop_probability=0.4,
            ),
        ),
    )
    agents = make_agents(200, ["RWW"])
    outcomes = []
    for _ in range(2):
        bus = ActivationBus(params, network, catalog, seed=9)
        strategy = manual_strategy([("RWW", "L_N1")], StrategyLevel.INFORM_TRAFFIC)
        bus.dispatch(strategy, tick=0,
                     levels={("RWW", "L_N1"): StrategyLevel.INFORM_TRAFFIC})
        notes = bus.process_tick(0, agents)
        outcomes.append([n.agent_id for n in notes])
    assert outcomes[0] == outcomes[1]


def test_unsubscribed_agents_not_notified(diamond):
    network, catalog, params = diamond
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = manual_strategy([("FI", "SEG_N")])
    agents = make_agents(3, ["MTTA"])  # nobody subscribes to FI
    bus.dispatch(strategy, tick=0, levels={("FI", "SEG_N"): StrategyLevel.ENLARGE_OUTFLOW})
    notes = []
    for t in range(3):
        notes.extend(bus.process_tick(t, agents))
    assert notes == []
    # The physical boost still lands; informing is a separate concern.
    state = fresh_state(network)
    assert bus.overlay(2, state).capacity_factors.get("L_N1") == pytest.approx(1.3)


def test_provider_reroute_reaches_only_logged_recipients(diamond):
    network, catalog, params = diamond
    state = fresh_state(network)
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = manual_strategy(
        [("MTTA", "C1")], StrategyLevel.REROUTE_TRAFFIC
    )
    subscribed = make_agents(3, ["MTTA"])
    unsubscribed = make_agents(2, ["FI"])
    for aid, agent in unsubscribed.items():
        subscribed["x" + aid] = agent
    bus.dispatch(strategy, tick=0,
                 levels={("MTTA", "C1"): StrategyLevel.REROUTE_TRAFFIC})
    for t in range(3):
        bus.process_tick(t, subscribed)
    overlay = bus.overlay(2, state)
    assert len(overlay.reroutes) == 1
    assert overlay.reroutes[0].notified == frozenset({"ag00000", "ag00001", "ag00002"})
    assert len(overlay.shifts) == 1
    assert overlay.shifts[0].notified == frozenset({"ag00000", "ag00001", "ag00002"})


def test_undelivered_provider_advice_reaches_nobody(diamond):
    network, catalog, params = diamond
    state = fresh_state(network)
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = manual_strategy([("MTTA", "C1")], StrategyLevel.REROUTE_TRAFFIC)
    bus.dispatch(strategy, tick=0,
                 levels={("MTTA", "C1"): StrategyLevel.REROUTE_TRAFFIC})
    # Forwards are still in flight at tick 2; nobody was told yet.
    overlay = bus.overlay(2, state)
    assert len(overlay.reroutes) == 1
    assert overlay.reroutes[0].notified == frozenset()


def test_service_status_scoped_to_element(diamond):
    network, catalog, params = diamond
    bus = ActivationBus(params, network, catalog, seed=7)
    strategy = manual_strategy([("FI", "SEG_N")])
    bus.dispatch(strategy, tick=0, levels={("FI", "SEG_N"): StrategyLevel.ENLARGE_OUTFLOW})
    assert bus.service_status(5, element="SEG_N")["FI"] == "active"
    assert bus.service_status(5, element="L_OUT")["FI"] == "inactive"


def test_status_covers_whole_catalog(diamond):
    network, catalog, params = diamond
    bus = ActivationBus(params, network, catalog, seed=7)
    status = bus.service_status(0)
    assert sorted(status) == sorted(catalog.services)
    assert set(status.values()) == {"inactive"}
