"""Mesoscopic traffic dynamics: point queues over the link graph.

Each link is a vertical queue: vehicles traverse at free-flow speed,
then discharge in FIFO order limited by effective capacity. Effective
capacity composes the physical value with incident factors and whatever
control overlay is active this tick. The model is fully deterministic:
every random draw (mode shift, advice compliance) comes from the
counter-based generator keyed by the run seed and stable ids, so
identical inputs replay to identical run logs.

Time advances in fixed ticks of dt seconds. Within one tick, per link:
arrivals whose free-flow traversal has elapsed join the queue, then the
queue discharges floor(credit + capacity*dt/3600) vehicles, carrying
fractional credit while the queue persists. Outflow per tick therefore
never exceeds capacity*dt/3600 + 1.

Trip times are kept in continuous seconds alongside the tick counts:
each discharged vehicle is stamped exit = max(queue_join, server_free)
and the server advances by one headway (3600/capacity). An uncongested
trip therefore takes exactly its free-flow time and reports zero delay,
while queued trips accumulate waiting at the fluid rate.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .catalog import EndUserType, ServiceCatalog
from .network import RoadNetwork, shortest_path
from .randgen import coin

DEFAULT_COMPLIANCE = {
    EndUserType.DRIVER: 0.6,
    EndUserType.VRU: 0.5,
    EndUserType.PUBLIC_TRANSPORT: 0.9,
    EndUserType.COMMERCIAL_FLEET: 0.9,
    EndUserType.EMERGENCY: 0.9,
}


class SimulationError(Exception):
    pass


@dataclass
class Agent:
    id: str
    user_type: EndUserType
    origin: str
    destination: str
    depart_tick: int
    depart_seconds: float
    compliance: float
    subscribed_services: frozenset[str] = frozenset()
    route: list[str] = field(default_factory=list)
    leg: int = -1  # index into route; -1 before departure
    free_flow_seconds: float = 0.0
    done: bool = False
    shifted: bool = False


@dataclass(frozen=True)
class Incident:
    id: str
    link: str
    capacity_factor: float
    start_tick: int
    end_tick: int

    def active(self, tick: int) -> bool:
        return self.start_tick <= tick < self.end_tick


@dataclass(frozen=True)
class LinkState:
    link: str
    vehicles_on_link: int
    queue: int
    inflow: int
    outflow: int
    effective_capacity: float
    mean_speed: float


@dataclass(frozen=True)
class Bottleneck:
    id: str
    element: str  # link id or route part id
    kind: str  # "queue_spill" | "speed_drop" | "travel_time_excess"
    severity: float
    measure: float
    threshold: float
    primary_cause: str | None = None


@dataclass(frozen=True)
class RerouteDirective:
    """Advice at a choice node to route around a set of links."""

    key: str  # stable id for compliance draws
    node: str
    avoid: frozenset[str]
    service: str
    notified: frozenset[str] | None = None  # agent ids; None = all subscribers


@dataclass(frozen=True)
class ShiftDirective:
    """Departure-time mode shift: trips leave the road network."""

    key: str
    service: str
    share: float
    notified: frozenset[str] | None = None


@dataclass
class ControlOverlay:
    """Per-tick physical and behavioral modifications from active services."""

    capacity_factors: dict[str, float] = field(default_factory=dict)
    queued_capacity_bonus: dict[str, float] = field(default_factory=dict)
    reroutes: tuple[RerouteDirective, ...] = ()
    shifts: tuple[ShiftDirective, ...] = ()


@dataclass
class _LinkRuntime:
    # traversing: heap of (join_tick, seq, agent_id, join_seconds)
    traversing: list[tuple[float, int, str, float]] = field(default_factory=list)
    queue: list[tuple[str, float]] = field(default_factory=list)
    head: int = 0  # consumed queue prefix; compacted periodically
    credit: float = 0.0
    server_free: float = 0.0  # continuous exit stamp of the fluid server
    inflow: int = 0
    outflow: int = 0

    def queue_len(self) -> int:
        return len(self.queue) - self.head

    def on_link(self) -> int:
        return len(self.traversing) + self.queue_len()


@dataclass
class TrafficState:
    seed: int
    tick: int = 0
    agents: dict[str, Agent] = field(default_factory=dict)
    incidents: list[Incident] = field(default_factory=list)
    created: int = 0
    completed: int = 0
    log: list[dict] = field(default_factory=list)
    _links: dict[str, _LinkRuntime] = field(default_factory=dict)
    _pending: list[Agent] = field(default_factory=list)  # departure order
    _next_departure: int = 0
    _entry_seq: int = 0
    _snapshot: dict[str, LinkState] = field(default_factory=dict)

    def on_network(self) -> int:
        return self.created - self.completed

    def link_state(self, link_id: str) -> LinkState:
        return self._snapshot[link_id]

    def link_states(self) -> list[LinkState]:
        return [self._snapshot[k] for k in sorted(self._snapshot)]


def expand_demand(demand: dict) -> list[dict]:
    """Turn rate-based OD entries into per-agent departure records."""
    records: list[dict] = []
    for idx, entry in enumerate(demand.get("entries", [])):
        duration = float(entry["end"]) - float(entry["start"])
        if duration <= 0:
            raise SimulationError(f"demand entry {idx}: end must exceed start")
        count = round(float(entry["rate"]) * duration / 3600.0)
        for k in range(count):
            records.append(
                {
                    "depart_seconds": float(entry["start"]) + k * duration / count,
                    "origin": entry["origin"],
                    "destination": entry["destination"],
                    "user_type": EndUserType(entry["user_type"]),
                }
            )
    records.sort(key=lambda r: r["depart_seconds"])
    return records


def init_state(
    network: RoadNetwork,
    demand: dict,
    seed: int,
    dt: float = 10.0,
    catalog: ServiceCatalog | None = None,
    compliance: dict[EndUserType, float] | None = None,
) -> TrafficState:
    """Build the initial population; deterministic in (network, demand, seed)."""
    comp = dict(DEFAULT_COMPLIANCE)
    if compliance:
        comp.update(compliance)
    bundles: dict[EndUserType, frozenset[str]] = {}
    if catalog is not None:
        for ut in EndUserType:
            bundles[ut] = frozenset(catalog.bundle_for(ut))

    free_flow_cache: dict[tuple[str, str], float | None] = {}

    def reference_seconds(origin: str, destination: str) -> float:
        key = (origin, destination)
        if key not in free_flow_cache:
            path = shortest_path(network, origin, destination)
            if path is None:
                free_flow_cache[key] = None
            else:
                free_flow_cache[key] = sum(network.links[l].free_flow_time for l in path)
        value = free_flow_cache[key]
        if value is None:
            raise SimulationError(f"unreachable destination {destination} from {origin}")
        return value

    state = TrafficState(seed=seed)
    for i, record in enumerate(expand_demand(demand)):
        agent = Agent(
            id=f"ag{i:05d}",
            user_type=record["user_type"],
            origin=record["origin"],
            destination=record["destination"],
            depart_tick=int(record["depart_seconds"] // dt),
            depart_seconds=record["depart_seconds"],
            compliance=comp[record["user_type"]],
            subscribed_services=bundles.get(record["user_type"], frozenset()),
            free_flow_seconds=reference_seconds(record["origin"], record["destination"]),
        )
        state.agents[agent.id] = agent
        state._pending.append(agent)

    for entry in demand.get("incidents", []):
        factor = float(entry["capacity_factor"])
        if not (0 <= factor < 1):
            raise SimulationError(f"incident {entry['id']}: capacity_factor must be in [0, 1)")
        if entry["link"] not in network.links:
            raise SimulationError(f"incident {entry['id']}: unknown link {entry['link']!r}")
        state.incidents.append(
            Incident(
                id=entry["id"],
                link=entry["link"],
                capacity_factor=factor,
                start_tick=int(entry["start_tick"]),
                end_tick=int(entry["end_tick"]),
            )
        )

    for link_id in network.links:
        state._links[link_id] = _LinkRuntime()
    _snapshot_links(state, network, effective_capacities(state, network))
    return state


def effective_capacities(
    state: TrafficState,
    network: RoadNetwork,
    overlay: ControlOverlay | None = None,
) -> dict[str, float]:
    """Per-link veh/h after incidents and the control overlay, this tick."""
    caps = {lid: link.capacity for lid, link in network.links.items()}
    for incident in state.incidents:
        if incident.active(state.tick):
            caps[incident.link] *= incident.capacity_factor
    if overlay is not None:
        for lid, factor in overlay.capacity_factors.items():
            if lid in caps:
                caps[lid] *= factor
        for lid, bonus in overlay.queued_capacity_bonus.items():
            if lid in caps and state._links[lid].queue_len() > 0:
                caps[lid] *= 1.0 + bonus
    return caps


def instantaneous_costs(
    state: TrafficState, network: RoadNetwork, caps: dict[str, float]
) -> dict[str, float]:
    """Per-link travel time in seconds: free flow plus queue clearance."""
    costs = {}
    for lid, link in network.links.items():
        queue = state._links[lid].queue_len()
        cap = caps[lid]
        penalty = queue * 3600.0 / cap if cap > 0 else float("inf")
        costs[lid] = link.free_flow_time + penalty
    return costs


def _route_or_raise(
    network: RoadNetwork, origin: str, destination: str, costs: dict[str, float]
) -> list[str]:
    path = shortest_path(network, origin, destination, cost=costs)
    if path is None:
        raise SimulationError(f"unreachable destination {destination} from {origin}")
    return path


def _applies(directive, agent: Agent) -> bool:
    if directive.service not in agent.subscribed_services:
        return False
    return directive.notified is None or agent.id in directive.notified


def _complete(
    state: TrafficState, agent: Agent, trip_seconds: float, shifted: bool = False
) -> None:
    agent.done = True
    agent.shifted = shifted
    state.completed += 1
    delay = 0.0 if shifted else max(0.0, trip_seconds - agent.free_flow_seconds)
    state.log.append(
        {
            "tick": state.tick,
            "event": "agent_completed",
            "agent": agent.id,
            "user_type": agent.user_type.value,
            "trip_seconds": round(trip_seconds, 6),
            "delay_seconds": round(delay, 6),
            "shifted": shifted,
        }
    )


def _enter_link(
    state: TrafficState,
    agent: Agent,
    link_id: str,
    enter_seconds: float,
    dt: float,
    network: RoadNetwork,
) -> None:
    runtime = state._links[link_id]
    join_seconds = enter_seconds + network.links[link_id].free_flow_time
    join_tick = max(join_seconds / dt, float(state.tick))
    state._entry_seq += 1
    heapq.heappush(runtime.traversing, (join_tick, state._entry_seq, agent.id, join_seconds))
    runtime.inflow += 1


def _maybe_reroute(
    state: TrafficState,
    agent: Agent,
    node: str,
    overlay: ControlOverlay,
    network: RoadNetwork,
    costs: dict[str, float],
) -> None:
    remaining = agent.route[agent.leg + 1 :]
    for directive in overlay.reroutes:
        if directive.node != node or not _applies(directive, agent):
            continue
        if not any(l in directive.avoid for l in remaining):
            continue
        if not coin(state.seed, agent.compliance, "comply", directive.key, agent.id):
            continue
        blocked = {l: float("inf") for l in directive.avoid}
        detour = shortest_path(network, node, agent.destination, cost={**costs, **blocked})
        if detour is None or any(l in directive.avoid for l in detour):
            continue
        if detour == remaining:
            continue
        agent.route = agent.route[: agent.leg + 1] + detour
        state.log.append(
            {
                "tick": state.tick,
                "event": "agent_rerouted",
                "agent": agent.id,
                "at_node": node,
                "service": directive.service,
            }
        )
        return


def step(
    state: TrafficState,
    network: RoadNetwork,
    dt: float = 10.0,
    overlay: ControlOverlay | None = None,
) -> TrafficState:
    """Advance one tick. Conservation and the capacity bound hold afterwards."""
    overlay = overlay or ControlOverlay()
    caps = effective_capacities(state, network, overlay)
    costs = instantaneous_costs(state, network, caps)

    for runtime in state._links.values():
        runtime.inflow = 0
        runtime.outflow = 0

    # Departures scheduled for this tick.
    while state._next_departure < len(state._pending):
        agent = state._pending[state._next_departure]
        if agent.depart_tick > state.tick:
            break
        state._next_departure += 1
        state.created += 1
        state.log.append(
            {
                "tick": state.tick,
                "event": "agent_departed",
                "agent": agent.id,
                "user_type": agent.user_type.value,
                "origin": agent.origin,
                "destination": agent.destination,
            }
        )
        if agent.origin == agent.destination:
            agent.route = []
            _complete(state, agent, 0.0)
            continue
        shifted = False
        for directive in overlay.shifts:
            if _applies(directive, agent) and coin(
                state.seed, directive.share * agent.compliance, "shift", directive.key, agent.id
            ):
                shifted = True
                break
        if shifted:
            agent.route = []
            _complete(state, agent, 0.0, shifted=True)
            continue
        agent.route = _route_or_raise(network, agent.origin, agent.destination, costs)
        agent.leg = -1
        _maybe_reroute(state, agent, agent.origin, overlay, network, costs)
        agent.leg = 0
        _enter_link(state, agent, agent.route[0], agent.depart_seconds, dt, network)

    # Free-flow arrivals join their link queue.
    for link_id in sorted(state._links):
        runtime = state._links[link_id]
        while runtime.traversing and runtime.traversing[0][0] <= state.tick:
            _, _, agent_id, join_seconds = heapq.heappop(runtime.traversing)
            runtime.queue.append((agent_id, join_seconds))

    # Capacity-limited FIFO discharge.
    for link_id in sorted(state._links):
        runtime = state._links[link_id]
        rate = caps[link_id] * dt / 3600.0
        available = runtime.credit + rate
        to_discharge = min(int(available), runtime.queue_len())
        headway = 3600.0 / caps[link_id] if to_discharge else 0.0
        for _ in range(to_discharge):
            agent_id, join_seconds = runtime.queue[runtime.head]
            runtime.head += 1
            runtime.outflow += 1
            exit_seconds = max(join_seconds, runtime.server_free)
            runtime.server_free = exit_seconds + headway
            agent = state.agents[agent_id]
            node = network.links[link_id].to_node
            if agent.leg + 1 >= len(agent.route):
                _complete(state, agent, exit_seconds - agent.depart_seconds)
                continue
            _maybe_reroute(state, agent, node, overlay, network, costs)
            agent.leg += 1
            _enter_link(state, agent, agent.route[agent.leg], exit_seconds, dt, network)
        if runtime.queue_len() == 0:
            runtime.credit = 0.0
            runtime.queue.clear()
            runtime.head = 0
        else:
            runtime.credit = available - to_discharge
        if runtime.head > 4096:
            del runtime.queue[: runtime.head]
            runtime.head = 0

    _snapshot_links(state, network, caps)
    total_queue = sum(r.queue_len() for r in state._links.values())
    max_queue = max((r.queue_len() for r in state._links.values()), default=0)
    state.log.append(
        {
            "tick": state.tick,
            "event": "tick_summary",
            "total_queue": total_queue,
            "max_queue": max_queue,
            "created": state.created,
            "completed": state.completed,
            "on_network": state.on_network(),
        }
    )
    state.tick += 1
    return state


def _snapshot_links(state: TrafficState, network: RoadNetwork, caps: dict[str, float]) -> None:
    snapshot = {}
    for link_id, link in network.links.items():
        runtime = state._links[link_id]
        queue = runtime.queue_len()
        cap = caps[link_id]
        travel = link.free_flow_time + (queue * 3600.0 / cap if cap > 0 else float("inf"))
        snapshot[link_id] = LinkState(
            link=link_id,
            vehicles_on_link=runtime.on_link(),
            queue=queue,
            inflow=runtime.inflow,
            outflow=runtime.outflow,
            effective_capacity=cap,
            mean_speed=(link.length / travel) * 3.6 if travel > 0 else link.free_flow_speed,
        )
    state._snapshot = snapshot


# ---------------------------------------------------------------------------
# Problem detection


def detect_bottlenecks(state: TrafficState, network: RoadNetwork) -> list[Bottleneck]:
    """Elements whose measure strictly exceeds its policy threshold."""
    found: list[Bottleneck] = []
    caps = {lid: ls.effective_capacity for lid, ls in state._snapshot.items()}

    def cause_for(link_ids: list[str]) -> str | None:
        heads = {network.links[l].to_node for l in link_ids}
        downstream = {out.id for head in heads for out in network.out_links(head)}
        relevant = set(link_ids) | downstream
        for incident in state.incidents:
            if incident.active(state.tick) and incident.link in relevant:
                return incident.id
        return None

    for link_id in sorted(network.links):
        thresholds = network.policy.thresholds_for_link(link_id)
        if thresholds is None:
            continue
        link = network.links[link_id]
        ls = state._snapshot[link_id]
        lane_km = (link.length / 1000.0) * link.lanes
        density = ls.vehicles_on_link / lane_km if lane_km > 0 else 0.0
        by_queue = ls.queue / thresholds.max_queue
        by_density = density / thresholds.max_density
        if max(by_queue, by_density) > 1:
            if by_queue >= by_density:
                measure, threshold = float(ls.queue), thresholds.max_queue
            else:
                measure, threshold = density, thresholds.max_density
            found.append(
                Bottleneck(
                    id=f"bn:{link_id}:queue_spill",
                    element=link_id,
                    kind="queue_spill",
                    severity=measure / threshold,
                    measure=measure,
                    threshold=threshold,
                    primary_cause=cause_for([link_id]),
                )
            )
        floor_speed = link.free_flow_speed * thresholds.min_speed_ratio
        if ls.mean_speed < floor_speed:
            found.append(
                Bottleneck(
                    id=f"bn:{link_id}:speed_drop",
                    element=link_id,
                    kind="speed_drop",
                    severity=floor_speed / ls.mean_speed if ls.mean_speed > 0 else float("inf"),
                    measure=ls.mean_speed,
                    threshold=floor_speed,
                    primary_cause=cause_for([link_id]),
                )
            )

    for rp_id in sorted(network.route_parts):
        rp = network.route_parts[rp_id]
        free = sum(network.links[l].free_flow_time for l in rp.member_links)
        actual = 0.0
        for l in rp.member_links:
            cap = caps[l]
            queue = state._links[l].queue_len()
            actual += network.links[l].free_flow_time + (queue * 3600.0 / cap if cap > 0 else 0.0)
        ratio = actual / free if free > 0 else 1.0
        limit = network.policy.ratio_for_route_part(rp_id)
        if ratio > limit:
            found.append(
                Bottleneck(
                    id=f"bn:{rp_id}:travel_time_excess",
                    element=rp_id,
                    kind="travel_time_excess",
                    severity=ratio / limit,
                    measure=ratio,
                    threshold=limit,
                    primary_cause=cause_for(list(rp.member_links)),
                )
            )

    found.sort(key=lambda b: (-b.severity, b.element, b.kind))
    return found


# ---------------------------------------------------------------------------
# KPIs


def compute_kpis(log: list[dict]) -> dict:
    """Aggregate a run log into the KPI report."""
    total_delay_h = 0.0
    throughput = 0
    shifted = 0
    queue_sum = 0
    queue_ticks = 0
    max_queue = 0
    activations: dict[str, int] = {}
    for record in log:
        kind = record.get("event")
        if kind == "agent_completed":
            throughput += 1
            total_delay_h += record["delay_seconds"] / 3600.0
            if record.get("shifted"):
                shifted += 1
        elif kind == "tick_summary":
            queue_sum += record["total_queue"]
            queue_ticks += 1
            max_queue = max(max_queue, record["max_queue"])
        elif kind == "strategy_activated":
            level = record["level"]
            activations[level] = activations.get(level, 0) + 1
    return {
        "total_delay_veh_h": round(total_delay_h, 6),
        "throughput": throughput,
        "mode_shifted": shifted,
        "mean_queue": round(queue_sum / queue_ticks, 6) if queue_ticks else 0.0,
        "max_queue": max_queue,
        "strategy_activations": dict(sorted(activations.items())),
    }
