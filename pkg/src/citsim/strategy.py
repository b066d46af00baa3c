"""Strategy composition and regulation.

Maps detected traffic problems to per-element service activations
through four escalation levels. Level k always carries every activation
of levels below it, so escalation is monotone by construction. Each
level draws its spatial scope from the problem element:

  inform_traffic   the problem links and their upstream feeders
  enlarge_outflow  control points on or downstream of the problem
  reduce_inflow    control points strictly upstream
  reroute_traffic  upstream choice nodes that have an alternative
                   route part around the problem

Scope horizons default to two hops. All outputs are deterministically
ordered; composition is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

from .catalog import ElementKind, ServiceCatalog, StrategyLevel
from .network import NodeKind, RoadNetwork
from .sim import Bottleneck, TrafficState

DEFAULT_SCOPE_HOPS = 2
DEFAULT_CONSECUTIVE_TICKS = 6

_NODE_ELEMENT_KIND = {
    NodeKind.CHOICE: ElementKind.CHOICE_NODE,
    NodeKind.CONTROL: ElementKind.CONTROL_NODE,
    NodeKind.CHOICE_CONTROL: ElementKind.CHOICE_CONTROL_NODE,
    NodeKind.REGULAR: ElementKind.REGULAR_NODE,
}


class StrategyError(Exception):
    pass


@dataclass(frozen=True)
class PreferredSituation:
    """Target predicate the strategy tries to restore."""

    element: str
    measure: str  # "queue" | "mean_speed" | "travel_time_ratio" | "density"
    comparator: str  # "<=" | ">="
    target: float

    def describe(self) -> str:
        return f"{self.measure}({self.element}) {self.comparator} {self.target:g}"


@dataclass(frozen=True)
class ControlStrategy:
    id: str
    problem: Bottleneck
    preferred_situation: PreferredSituation
    level: StrategyLevel
    activations: frozenset[tuple[str, str]]  # (service id, element id)
    created_by: str = "automatic"  # "automatic" | "operator"
    status: str = "proposed"  # "proposed" | "active" | "retired"

    def sorted_activations(self) -> list[tuple[str, str]]:
        return sorted(self.activations)

    def with_status(self, status: str) -> "ControlStrategy":
        return replace(self, status=status)


@dataclass(frozen=True)
class PendingDecision:
    """Conflict a person must settle before either service activates."""

    key: str
    service_a: str
    service_b: str
    element: str


@dataclass(frozen=True)
class SituationStatus:
    met: bool
    holds_now: bool
    severity: float  # 1.0 when on target, ratio of miss otherwise
    streak: int


# ---------------------------------------------------------------------------
# Element and scope helpers


def element_kind_of(network: RoadNetwork, element_id: str) -> ElementKind:
    if element_id in network.nodes:
        return _NODE_ELEMENT_KIND[network.nodes[element_id].kind]
    if element_id in network.links:
        return ElementKind.LINK
    if element_id in network.control_segments:
        return ElementKind.CONTROL_SEGMENT
    raise StrategyError(f"unknown network element {element_id!r}")


def _problem_links(problem: Bottleneck, network: RoadNetwork) -> list[str]:
    if problem.element in network.links:
        return [problem.element]
    if problem.element in network.route_parts:
        return list(network.route_parts[problem.element].member_links)
    raise StrategyError(f"problem element {problem.element!r} is not a link or route part")


def _upstream_links(network: RoadNetwork, seeds: Iterable[str], hops: int) -> set[str]:
    frontier = {network.links[l].from_node for l in seeds}
    seen_nodes = set(frontier)
    found: set[str] = set()
    for _ in range(hops):
        next_frontier = set()
        for node in frontier:
            for link in network.in_links(node):
                found.add(link.id)
                if link.from_node not in seen_nodes:
                    seen_nodes.add(link.from_node)
                    next_frontier.add(link.from_node)
        frontier = next_frontier
    return found


def _downstream_links(network: RoadNetwork, seeds: Iterable[str], hops: int) -> set[str]:
    frontier = {network.links[l].to_node for l in seeds}
    seen_nodes = set(frontier)
    found: set[str] = set()
    for _ in range(hops):
        next_frontier = set()
        for node in frontier:
            for link in network.out_links(node):
                found.add(link.id)
                if link.to_node not in seen_nodes:
                    seen_nodes.add(link.to_node)
                    next_frontier.add(link.to_node)
        frontier = next_frontier
    return found


def _nodes_upstream(network: RoadNetwork, problem_links: list[str], hops: int) -> set[str]:
    nodes = {network.links[l].from_node for l in problem_links}
    frontier = set(nodes)
    for _ in range(hops):
        next_frontier = set()
        for node in frontier:
            for link in network.in_links(node):
                if link.from_node not in nodes:
                    nodes.add(link.from_node)
                    next_frontier.add(link.from_node)
        frontier = next_frontier
    return nodes


def _nodes_downstream(network: RoadNetwork, problem_links: list[str], hops: int) -> set[str]:
    nodes = {network.links[l].to_node for l in problem_links}
    frontier = set(nodes)
    for _ in range(hops):
        next_frontier = set()
        for node in frontier:
            for link in network.out_links(node):
                if link.to_node not in nodes:
                    nodes.add(link.to_node)
                    next_frontier.add(link.to_node)
        frontier = next_frontier
    return nodes


def _segments_touching(network: RoadNetwork, link_ids: set[str]) -> set[str]:
    return {
        seg.id
        for seg in network.control_segments.values()
        if any(m in link_ids for m in seg.member_links)
    }


def scope_elements(
    problem: Bottleneck,
    level: StrategyLevel,
    network: RoadNetwork,
    hops: int = DEFAULT_SCOPE_HOPS,
) -> list[str]:
    """Element ids a single escalation level may act on, sorted."""
    links = _problem_links(problem, network)
    link_set = set(links)

    if level is StrategyLevel.INFORM_TRAFFIC:
        return sorted(link_set | _upstream_links(network, links, hops))

    if level is StrategyLevel.ENLARGE_OUTFLOW:
        reach = link_set | _downstream_links(network, links, hops)
        nodes = {
            n for n in _nodes_downstream(network, links, hops)
            if network.nodes[n].kind.is_control
        }
        return sorted(nodes | _segments_touching(network, reach))

    if level is StrategyLevel.REDUCE_INFLOW:
        upstream = _upstream_links(network, links, hops)
        nodes = {
            n for n in _nodes_upstream(network, links, hops)
            if network.nodes[n].kind.is_control
        }
        segments = _segments_touching(network, upstream) - _segments_touching(network, link_set)
        return sorted(nodes | segments)

    if level is StrategyLevel.REROUTE_TRAFFIC:
        candidates = {
            n for n in _nodes_upstream(network, links, hops)
            if network.nodes[n].kind.is_choice
        }
        chosen = set()
        for node in candidates:
            for rp in network.route_parts.values():
                if rp.from_choice != node:
                    continue
                if not any(m in link_set for m in rp.member_links):
                    continue
                for alt_id in rp.alternatives:
                    alt = network.route_parts[alt_id]
                    if not any(m in link_set for m in alt.member_links):
                        chosen.add(node)
                        break
        return sorted(chosen)

    raise StrategyError(f"unknown strategy level {level!r}")


def activation_levels(
    problem: Bottleneck,
    level: StrategyLevel,
    network: RoadNetwork,
    catalog: ServiceCatalog,
    operational_only: bool = True,
    scope_hops: int = DEFAULT_SCOPE_HOPS,
) -> dict[tuple[str, str], StrategyLevel]:
    """Highest contributing level per activation pair.

    A pair may enter the cumulative union at several levels; its effect
    profile follows the most severe one. Pairs outside every scope
    (probe-data companions) map to the informational level.
    """
    levels: dict[tuple[str, str], StrategyLevel] = {}
    for l in StrategyLevel:
        if l > level:
            break
        services = catalog.services_for_strategy(l, operational_only=operational_only)
        if not services:
            continue
        for element in scope_elements(problem, l, network, scope_hops):
            kind = element_kind_of(network, element)
            for sid in services:
                if kind in catalog.get(sid).applicable_elements:
                    levels[(sid, element)] = l
    return levels


# ---------------------------------------------------------------------------
# Composition and escalation


def preferred_situation_for(problem: Bottleneck, network: RoadNetwork) -> PreferredSituation:
    if problem.kind == "queue_spill":
        thresholds = network.policy.thresholds_for_link(problem.element)
        target = thresholds.max_queue if thresholds else problem.threshold
        return PreferredSituation(problem.element, "queue", "<=", target)
    if problem.kind == "speed_drop":
        return PreferredSituation(problem.element, "mean_speed", ">=", problem.threshold)
    if problem.kind == "travel_time_excess":
        return PreferredSituation(problem.element, "travel_time_ratio", "<=", problem.threshold)
    raise StrategyError(f"unknown problem kind {problem.kind!r}")


def compose_strategy(
    problem: Bottleneck,
    level: StrategyLevel,
    network: RoadNetwork,
    catalog: ServiceCatalog,
    strategy_id: str = "st:0",
    operational_only: bool = True,
    scope_hops: int = DEFAULT_SCOPE_HOPS,
    created_by: str = "automatic",
) -> ControlStrategy:
    """Join services to in-scope elements, cumulatively across levels."""
    activations: set[tuple[str, str]] = set(
        activation_levels(
            problem, level, network, catalog,
            operational_only=operational_only, scope_hops=scope_hops,
        )
    )
    if not activations:
        raise StrategyError(f"strategy unservable at level {level.wire_name}")

    # Probe-data companions ride along on the problem links themselves.
    for sid in sorted(catalog.services):
        descriptor = catalog.services[sid]
        if not descriptor.indirect:
            continue
        for link_id in _problem_links(problem, network):
            if ElementKind.LINK in descriptor.applicable_elements:
                activations.add((sid, link_id))

    return ControlStrategy(
        id=strategy_id,
        problem=problem,
        preferred_situation=preferred_situation_for(problem, network),
        level=level,
        activations=frozenset(activations),
        created_by=created_by,
        status="proposed",
    )


def escalate(
    strategy: ControlStrategy,
    network: RoadNetwork,
    catalog: ServiceCatalog,
    strategy_id: str | None = None,
    operational_only: bool = True,
    scope_hops: int = DEFAULT_SCOPE_HOPS,
) -> ControlStrategy:
    if strategy.level >= StrategyLevel.REROUTE_TRAFFIC:
        raise StrategyError("maximum escalation reached")
    successor = compose_strategy(
        strategy.problem,
        StrategyLevel(strategy.level + 1),
        network,
        catalog,
        strategy_id=strategy_id or strategy.id,
        operational_only=operational_only,
        scope_hops=scope_hops,
        created_by=strategy.created_by,
    )
    assert successor.activations >= strategy.activations
    return successor


def deescalate(
    strategy: ControlStrategy,
    network: RoadNetwork,
    catalog: ServiceCatalog,
    strategy_id: str | None = None,
    operational_only: bool = True,
    scope_hops: int = DEFAULT_SCOPE_HOPS,
) -> ControlStrategy:
    if strategy.level <= StrategyLevel.INFORM_TRAFFIC:
        raise StrategyError("minimum escalation reached")
    return compose_strategy(
        strategy.problem,
        StrategyLevel(strategy.level - 1),
        network,
        catalog,
        strategy_id=strategy_id or strategy.id,
        operational_only=operational_only,
        scope_hops=scope_hops,
        created_by=strategy.created_by,
    )


# ---------------------------------------------------------------------------
# Conflict regulation


def resolve_conflicts(
    activations: Iterable[tuple[str, str]],
    catalog: ServiceCatalog,
    decisions: dict[str, str] | None = None,
) -> tuple[frozenset[tuple[str, str]], list[PendingDecision]]:
    """Drop or withhold activations that violate a conflict rule.

    Rules resolve automatically when they name a preference; otherwise
    both parties are withheld and a pending decision is emitted. An
    operator decision maps the decision key to the winning service id.
    """
    decisions = decisions or {}
    kept = set(activations)
    pending: list[PendingDecision] = []

    by_element: dict[str, set[str]] = {}
    for sid, element in kept:
        by_element.setdefault(element, set()).add(sid)

    for element in sorted(by_element):
        present = by_element[element]
        for rule in catalog.conflict_rules:
            if rule.scope not in ("*", element):
                continue
            if rule.service_a not in present or rule.service_b not in present:
                continue
            resolution = rule.resolution.value
            if resolution == "prefer_a":
                kept.discard((rule.service_b, element))
                present.discard(rule.service_b)
            elif resolution == "prefer_b":
                kept.discard((rule.service_a, element))
                present.discard(rule.service_a)
            else:
                key = f"{rule.service_a}|{rule.service_b}|{element}"
                winner = decisions.get(key)
                if winner in (rule.service_a, rule.service_b):
                    loser = rule.service_b if winner == rule.service_a else rule.service_a
                    kept.discard((loser, element))
                    present.discard(loser)
                else:
                    kept.discard((rule.service_a, element))
                    kept.discard((rule.service_b, element))
                    present.discard(rule.service_a)
                    present.discard(rule.service_b)
                    pending.append(
                        PendingDecision(key, rule.service_a, rule.service_b, element)
                    )

    return frozenset(kept), pending


# ---------------------------------------------------------------------------
# Preferred-situation evaluation


def measure_value(
    state: TrafficState, network: RoadNetwork, element: str, measure: str
) -> float:
    if measure == "queue":
        return float(state.link_state(element).queue)
    if measure == "mean_speed":
        return state.link_state(element).mean_speed
    if measure == "density":
        link = network.links[element]
        ls = state.link_state(element)
        lane_km = (link.length / 1000.0) * link.lanes
        return ls.vehicles_on_link / lane_km if lane_km > 0 else 0.0
    if measure == "travel_time_ratio":
        rp = network.route_parts.get(element)
        if rp is None:
            raise StrategyError(f"travel_time_ratio needs a route part, got {element!r}")
        free = 0.0
        actual = 0.0
        for link_id in rp.member_links:
            link = network.links[link_id]
            ls = state.link_state(link_id)
            free += link.free_flow_time
            cap = ls.effective_capacity
            actual += link.free_flow_time + (ls.queue * 3600.0 / cap if cap > 0 else 0.0)
        return actual / free if free > 0 else 1.0
    raise StrategyError(f"unknown measure {measure!r}")


def evaluate_preferred_situation(
    strategy: ControlStrategy,
    state: TrafficState,
    network: RoadNetwork,
    streak: int = 0,
    required_ticks: int = DEFAULT_CONSECUTIVE_TICKS,
) -> SituationStatus:
    """One evaluation step; callers thread `streak` between ticks."""
    ps = strategy.preferred_situation
    value = measure_value(state, network, ps.element, ps.measure)
    if ps.comparator == "<=":
        holds = value <= ps.target
        severity = 1.0 if holds else (value / ps.target if ps.target else float("inf"))
    elif ps.comparator == ">=":
        holds = value >= ps.target
        severity = 1.0 if holds else (ps.target / value if value else float("inf"))
    else:
        raise StrategyError(f"unknown comparator {ps.comparator!r}")
    new_streak = streak + 1 if holds else 0
    return SituationStatus(
        met=new_streak >= required_ticks,
        holds_now=holds,
        severity=severity,
        streak=new_streak,
    )


# ---------------------------------------------------------------------------
# Response plans


@dataclass(frozen=True)
class PlanTrigger:
    element: str
    measure: str
    op: str  # ">" | ">=" | "<" | "<="
    value: float

    def holds(self, state: TrafficState, network: RoadNetwork) -> bool:
        v = measure_value(state, network, self.element, self.measure)
        if self.op == ">":
            return v > self.value
        if self.op == ">=":
            return v >= self.value
        if self.op == "<":
            return v < self.value
        if self.op == "<=":
            return v <= self.value
        raise StrategyError(f"unknown comparator {self.op!r}")


@dataclass(frozen=True)
class PlanAction:
    kind: str  # "auto" | "manual"
    level: StrategyLevel | None = None
    prompt: str | None = None


@dataclass(frozen=True)
class ResponsePlan:
    id: str
    trigger: PlanTrigger
    actions: tuple[PlanAction, ...]


@dataclass(frozen=True)
class PlanFiring:
    plan: ResponsePlan
    tick: int
    trigger_value: float


def load_plans(document: dict, network: RoadNetwork) -> list[ResponsePlan]:
    plans: list[ResponsePlan] = []
    errors: list[str] = []
    for entry in document.get("plans", []):
        pid = entry.get("id")
        if not pid:
            errors.append("plan entry without id")
            continue
        plan_errors: list[str] = []
        trig = entry.get("trigger", {})
        element = trig.get("element", "")
        known = (
            element in network.links
            or element in network.nodes
            or element in network.control_segments
            or element in network.route_parts
        )
        if not known:
            plan_errors.append(f"plan {pid}: trigger references unknown element {element!r}")
        if trig.get("op") not in (">", ">=", "<", "<="):
            plan_errors.append(f"plan {pid}: unknown comparator {trig.get('op')!r}")
        if not isinstance(trig.get("value"), (int, float)):
            plan_errors.append(f"plan {pid}: trigger value must be a number")
        actions: list[PlanAction] = []
        for action in entry.get("actions", []):
            if "auto" in action:
                try:
                    level = StrategyLevel.from_wire(action["auto"]["level"])
                except (KeyError, TypeError, ValueError) as exc:
                    plan_errors.append(f"plan {pid}: bad auto action ({exc})")
                    continue
                actions.append(PlanAction(kind="auto", level=level))
            elif "manual" in action:
                actions.append(PlanAction(kind="manual", prompt=str(action["manual"])))
            else:
                plan_errors.append(f"plan {pid}: action is neither auto nor manual")
        if not actions:
            plan_errors.append(f"plan {pid}: at least one action required")
        if plan_errors:
            errors.extend(plan_errors)
            continue
        plans.append(
            ResponsePlan(
                id=pid,
                trigger=PlanTrigger(
                    element=element,
                    measure=trig.get("measure", "queue"),
                    op=trig["op"],
                    value=float(trig["value"]),
                ),
                actions=tuple(actions),
            )
        )
    if errors:
        raise StrategyError("; ".join(errors))
    return sorted(plans, key=lambda p: p.id)


@dataclass
class PlanRunner:
    """Evaluates plan triggers each tick, firing once per episode.

    An episode is a maximal run of consecutive ticks where the trigger
    holds; the plan fires on the first tick of each episode and re-arms
    only after the trigger releases.
    """

    plans: list[ResponsePlan]
    _active: dict[str, bool] = field(default_factory=dict)

    def evaluate(self, state: TrafficState, network: RoadNetwork) -> list[PlanFiring]:
        firings: list[PlanFiring] = []
        for plan in sorted(self.plans, key=lambda p: p.id):
            holds = plan.trigger.holds(state, network)
            was_active = self._active.get(plan.id, False)
            if holds and not was_active:
                firings.append(
                    PlanFiring(
                        plan=plan,
                        tick=state.tick,
                        trigger_value=measure_value(
                            state, network, plan.trigger.element, plan.trigger.measure
                        ),
                    )
                )
            self._active[plan.id] = holds
        return firings


# ---------------------------------------------------------------------------
# Deployment planning


@dataclass(frozen=True)
class PlanningReport:
    network_summary: dict[str, int]
    end_user_census: dict[str, object]
    common_problems: list[str]
    available_services: dict[str, list[str]]
    operational_services: list[str]
    contribution_map: dict[str, dict[str, list[str]]]

    def to_dict(self) -> dict:
        return {
            "q1_network_elements": self.network_summary,
            "q2_end_users": self.end_user_census,
            "q3_common_problems": self.common_problems,
            "q4_available_services": self.available_services,
            "q5_operational_services": self.operational_services,
            "q6_contribution_map": self.contribution_map,
        }


def normalize_census(census: dict) -> dict[str, object]:
    out: dict[str, object] = {}
    for key in sorted(census):
        value = census[key]
        if isinstance(value, dict):
            out[key] = "limited" if value.get("nonnormative") else value.get("count")
        else:
            out[key] = value
    return out


def answer_six_questions(
    network: RoadNetwork, catalog: ServiceCatalog, census: dict
) -> PlanningReport:
    """Deployment-planning walkthrough for one area of interest."""
    summary = {kind.value: 0 for kind in ElementKind}
    for node in network.nodes.values():
        summary[_NODE_ELEMENT_KIND[node.kind].value] += 1
    summary[ElementKind.LINK.value] = len(network.links)
    summary[ElementKind.CONTROL_SEGMENT.value] = len(network.control_segments)

    problems = []
    if any(
        network.policy.thresholds_for_link(l) is not None for l in network.links
    ):
        problems.extend(["queue_spill", "speed_drop"])
    if network.route_parts:
        problems.append("travel_time_excess")

    available: dict[str, list[str]] = {}
    for service in catalog.services.values():
        if not service.in_area:
            continue
        available.setdefault(service.deployment_scale.value, []).append(service.id)
    available = {scale: sorted(ids) for scale, ids in sorted(available.items())}

    operational = sorted(
        s.id for s in catalog.services.values() if s.in_area and s.operational
    )

    elements_by_kind: dict[ElementKind, list[str]] = {kind: [] for kind in ElementKind}
    for node in network.nodes.values():
        elements_by_kind[_NODE_ELEMENT_KIND[node.kind]].append(node.id)
    elements_by_kind[ElementKind.LINK] = list(network.links)
    elements_by_kind[ElementKind.CONTROL_SEGMENT] = list(network.control_segments)

    contribution_map: dict[str, dict[str, list[str]]] = {}
    for sid in sorted(catalog.services):
        service = catalog.services[sid]
        if not service.contributions:
            continue
        per_level: dict[str, list[str]] = {}
        for level in sorted(service.contributions):
            elements = sorted(
                e
                for kind in service.applicable_elements
                for e in elements_by_kind[kind]
            )
            per_level[level.wire_name] = elements
        contribution_map[sid] = per_level

    return PlanningReport(
        network_summary=summary,
        end_user_census=normalize_census(census),
        common_problems=problems,
        available_services=available,
        operational_services=operational,
        contribution_map=contribution_map,
    )
