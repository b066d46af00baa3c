"""Service activation pipeline: operator, provider gateways, end users.

Activating a strategy turns each (service, element) pair into one
message. Operator-owned services take effect at the issuing tick;
provider-mediated services take effect only after a subscribing gateway
has forwarded them, which costs that gateway's latency, and the same
latency applies when they are switched off. Every forwarding outcome
lands in an append-only delivery log.

Physical effects never mutate the simulation; each tick the bus derives
a fresh control overlay from the set of currently effective activations,
so removing an effect restores the base parameters bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .catalog import ControlMode, EndUserType, ServiceCatalog, StrategyLevel
from .network import RoadNetwork
from .randgen import coin
from .sim import (
    Agent,
    ControlOverlay,
    RerouteDirective,
    ShiftDirective,
    TrafficState,
)
from .strategy import ControlStrategy, activation_levels


class BusError(Exception):
    pass


@dataclass(frozen=True)
class ActivationMessage:
    id: str
    strategy_id: str
    service: str
    element: str
    action: str  # "activate" | "deactivate"
    issued_tick: int
    control_mode: ControlMode
    level: StrategyLevel


@dataclass(frozen=True)
class ProviderGateway:
    id: str
    services: frozenset[str]
    latency_ticks: int
    drop_probability: float
    subscriber_agents: frozenset[str] | None = None  # None: every known agent


@dataclass(frozen=True)
class EndUserNotification:
    message_id: str
    agent_id: str
    service: str
    payload_kind: str
    delivered_tick: int


@dataclass(frozen=True)
class EffectSpec:
    service: str
    level: StrategyLevel
    effect: str
    factor: float = 1.0
    shift_share: float = 0.0


@dataclass(frozen=True)
class EffectParameters:
    profiles: dict[tuple[str, StrategyLevel], EffectSpec]
    compliance: dict[EndUserType, float]
    providers: tuple[ProviderGateway, ...]
    always_inform: bool = False

    def profile_for(self, service: str, level: StrategyLevel) -> EffectSpec | None:
        return self.profiles.get((service, level))


EFFECT_KINDS = {
    "capacity_boost",
    "capacity_restrict",
    "green_split_shift",
    "speed_harmonize",
    "reroute_advice",
    "reroute_and_shift",
    "demand_shift",
    "inform_only",
}


def load_effects(document: dict) -> EffectParameters:
    errors: list[str] = []
    profiles: dict[tuple[str, StrategyLevel], EffectSpec] = {}
    for entry in document.get("profiles", []):
        service = entry.get("service")
        try:
            level = StrategyLevel.from_wire(entry.get("level", ""))
        except ValueError as exc:
            errors.append(str(exc))
            continue
        effect = entry.get("effect")
        if effect not in EFFECT_KINDS:
            errors.append(f"profile {service}/{level.wire_name}: unknown effect {effect!r}")
            continue
        factor = float(entry.get("factor", 1.0))
        if effect == "capacity_boost" and factor <= 1.0:
            errors.append(f"profile {service}: boost factor must exceed 1, got {factor}")
        if effect == "capacity_restrict" and not (0 < factor < 1):
            errors.append(f"profile {service}: restrict factor must be in (0, 1), got {factor}")
        profiles[(service, level)] = EffectSpec(
            service=service,
            level=level,
            effect=effect,
            factor=factor,
            shift_share=float(entry.get("shift_share", 0.0)),
        )

    compliance: dict[EndUserType, float] = {}
    for key, value in document.get("compliance", {}).items():
        try:
            user = EndUserType(key)
        except ValueError:
            errors.append(f"compliance: unknown end-user type {key!r}")
            continue
        p = float(value)
        if not (0 <= p <= 1):
            errors.append(f"compliance {key}: probability must be in [0, 1], got {p}")
        compliance[user] = p

    gateways: list[ProviderGateway] = []
    for entry in document.get("providers", []):
        latency = int(entry.get("latency_ticks", 0))
        drop = float(entry.get("drop_probability", 0.0))
        if latency < 0:
            errors.append(f"provider {entry.get('id')}: latency must be >= 0")
        if not (0 <= drop < 1):
            errors.append(f"provider {entry.get('id')}: drop probability must be in [0, 1)")
        agents = entry.get("subscriber_agents")
        gateways.append(
            ProviderGateway(
                id=entry.get("id", f"provider_{len(gateways)}"),
                services=frozenset(entry.get("services", [])),
                latency_ticks=latency,
                drop_probability=drop,
                subscriber_agents=frozenset(agents) if agents is not None else None,
            )
        )

    if errors:
        raise BusError("; ".join(errors))
    return EffectParameters(
        profiles=profiles,
        compliance=compliance,
        providers=tuple(gateways),
        always_inform=bool(document.get("always_inform", False)),
    )


@dataclass(frozen=True)
class ActiveEffect:
    service: str
    element: str
    effect: str
    factor: float
    shift_share: float
    strategy_id: str
    problem_links: frozenset[str]
    effective_tick: int
    control_mode: ControlMode


# ---------------------------------------------------------------------------
# Effect application


def _expand_capacity_targets(network: RoadNetwork, element: str, outgoing: bool) -> list[str]:
    if element in network.links:
        return [element]
    if element in network.control_segments:
        return list(network.control_segments[element].member_links)
    if element in network.nodes:
        links = network.out_links(element) if outgoing else network.in_links(element)
        return [l.id for l in links]
    raise BusError(f"effect targets unknown element {element!r}")


def apply_effects(
    effects: Iterable[ActiveEffect],
    network: RoadNetwork,
    state: TrafficState,
    notified: dict[tuple[str, str], frozenset[str] | None] | None = None,
) -> ControlOverlay:
    """Fold effective activations into one per-tick control overlay.

    Boost and restrict factors compose multiplicatively, but a link
    pulled in both directions by different activations is a regulation
    failure and raises instead of being silently combined.
    """
    notified = notified or {}
    capacity_factors: dict[str, float] = {}
    direction: dict[str, str] = {}
    harmonize: dict[str, float] = {}
    reroutes: list[RerouteDirective] = []
    shifts: list[ShiftDirective] = []

    def scale(link_id: str, factor: float, kind: str) -> None:
        if kind in ("capacity_boost", "capacity_restrict"):
            prior = direction.get(link_id)
            if prior is not None and prior != kind:
                raise BusError(
                    f"conflicting physical effects on {link_id}: {prior} vs {kind}"
                )
            direction[link_id] = kind
        capacity_factors[link_id] = capacity_factors.get(link_id, 1.0) * factor

    for eff in sorted(effects, key=lambda e: (e.service, e.element)):
        audience = notified.get((eff.service, eff.element))
        if eff.effect == "capacity_boost":
            for link_id in _expand_capacity_targets(network, eff.element, outgoing=False):
                scale(link_id, eff.factor, "capacity_boost")
        elif eff.effect == "capacity_restrict":
            for link_id in _expand_capacity_targets(network, eff.element, outgoing=True):
                scale(link_id, eff.factor, "capacity_restrict")
        elif eff.effect == "green_split_shift":
            _green_split(network, state, eff, scale)
        elif eff.effect == "speed_harmonize":
            for link_id in _expand_capacity_targets(network, eff.element, outgoing=False):
                combined = (1.0 + harmonize.get(link_id, 0.0)) * (1.0 + eff.factor) - 1.0
                harmonize[link_id] = combined
        elif eff.effect in ("reroute_advice", "reroute_and_shift"):
            reroutes.append(
                RerouteDirective(
                    key=f"{eff.service}:{eff.element}:{eff.strategy_id}",
                    node=eff.element,
                    avoid=eff.problem_links,
                    service=eff.service,
                    notified=audience,
                )
            )
            if eff.effect == "reroute_and_shift" and eff.shift_share > 0:
                shifts.append(
                    ShiftDirective(
                        key=f"{eff.service}:{eff.element}:{eff.strategy_id}",
                        service=eff.service,
                        share=eff.shift_share,
                        notified=audience,
                    )
                )
        elif eff.effect == "demand_shift":
            shifts.append(
                ShiftDirective(
                    key=f"{eff.service}:{eff.element}:{eff.strategy_id}",
                    service=eff.service,
                    share=eff.shift_share,
                    notified=audience,
                )
            )
        elif eff.effect == "inform_only":
            pass
        else:
            raise BusError(f"unknown effect kind {eff.effect!r}")

    return ControlOverlay(
        capacity_factors=capacity_factors,
        queued_capacity_bonus=harmonize,
        reroutes=tuple(reroutes),
        shifts=tuple(shifts),
    )


def _green_split(network: RoadNetwork, state: TrafficState, eff: ActiveEffect, scale) -> None:
    """Favor the busiest approach; scale the rest to conserve node capacity."""
    approaches = sorted(network.in_links(eff.element), key=lambda l: l.id)
    if len(approaches) < 2:
        return
    chosen = max(approaches, key=lambda l: (state._links[l.id].queue_len(), l.id))
    total = sum(l.capacity for l in approaches)
    boosted = chosen.capacity * (1.0 + eff.factor)
    rest = total - chosen.capacity
    ratio = max(0.0, (total - boosted) / rest) if rest > 0 else 1.0
    for link in approaches:
        if link.id == chosen.id:
            scale(link.id, 1.0 + eff.factor, "green_split_shift")
        else:
            scale(link.id, ratio, "green_split_shift")


# ---------------------------------------------------------------------------
# The bus


@dataclass
class _Forward:
    message: ActivationMessage
    gateway: ProviderGateway
    due_tick: int


class ActivationBus:
    """Single-writer message pipeline synchronized to simulation ticks."""

    def __init__(
        self,
        params: EffectParameters,
        network: RoadNetwork,
        catalog: ServiceCatalog,
        seed: int,
    ):
        self.params = params
        self.network = network
        self.catalog = catalog
        self.seed = seed
        self.delivery_log: list[dict] = []
        self._msg_seq = 0
        self._effects: dict[tuple[str, str], ActiveEffect] = {}
        self._removals: dict[tuple[str, str], int] = {}
        self._queue: list[_Forward] = []
        self._delivered: dict[tuple[str, str], set[str]] = {}
        self._lifecycle: dict[tuple[str, str], str] = {}  # "on" | "off"

    # -- dispatch -----------------------------------------------------------

    def _next_message_id(self) -> str:
        mid = f"msg:{self._msg_seq}"
        self._msg_seq += 1
        return mid

    def _log(self, tick: int, stage: str, message: ActivationMessage, **extra) -> None:
        record = {
            "tick": tick,
            "stage": stage,
            "message": message.id,
            "service": message.service,
            "element": message.element,
            "action": message.action,
            "strategy": message.strategy_id,
        }
        record.update(extra)
        self.delivery_log.append(record)

    def dispatch(
        self,
        strategy: ControlStrategy,
        tick: int,
        action: str = "activate",
        levels: dict[tuple[str, str], StrategyLevel] | None = None,
        pairs: frozenset[tuple[str, str]] | None = None,
    ) -> list[ActivationMessage]:
        """One message per activation pair; effects scheduled by control mode.

        `pairs` restricts dispatch to a subset of the strategy's
        activations, which lets escalation message only the delta while
        the shared pairs keep running uninterrupted.
        """
        if pairs is None:
            if action == "activate" and strategy.status != "proposed":
                raise BusError(f"strategy {strategy.id} is not in proposed state")
            if action == "deactivate" and strategy.status != "active":
                raise BusError(f"strategy {strategy.id} is not active")
        elif strategy.status == "retired":
            raise BusError(f"strategy {strategy.id} is retired")
        if levels is None:
            levels = activation_levels(
                strategy.problem, strategy.level, self.network, self.catalog
            )

        problem_links = self._problem_links(strategy)
        targets = strategy.activations if pairs is None else frozenset(pairs)
        messages: list[ActivationMessage] = []
        for service, element in sorted(targets):
            pair = (service, element)
            state_now = self._lifecycle.get(pair, "off")
            if action == "activate" and state_now == "on":
                raise BusError(f"double activate for {service} on {element}")
            if action == "deactivate" and state_now == "off":
                raise BusError(f"deactivate while inactive for {service} on {element}")
            descriptor = self.catalog.get(service)
            message = ActivationMessage(
                id=self._next_message_id(),
                strategy_id=strategy.id,
                service=service,
                element=element,
                action=action,
                issued_tick=tick,
                control_mode=descriptor.control_mode,
                level=levels.get(pair, StrategyLevel.INFORM_TRAFFIC),
            )
            messages.append(message)
            self._log(tick, "dispatched", message, control_mode=descriptor.control_mode.value)
            self._lifecycle[pair] = "on" if action == "activate" else "off"
            self._route(message, pair, problem_links, tick)
        return messages

    def _problem_links(self, strategy: ControlStrategy) -> frozenset[str]:
        element = strategy.problem.element
        if element in self.network.links:
            return frozenset([element])
        if element in self.network.route_parts:
            return frozenset(self.network.route_parts[element].member_links)
        return frozenset()

    def _route(
        self,
        message: ActivationMessage,
        pair: tuple[str, str],
        problem_links: frozenset[str],
        tick: int,
    ) -> None:
        if message.control_mode is ControlMode.DIRECT_OPERATOR:
            effective = tick
        else:
            gateways = [g for g in self.params.providers if message.service in g.services]
            if not gateways:
                self._log(tick, "dead_letter", message, reason="no subscribing gateway")
                if message.action == "deactivate":
                    # The switch-off still happens; nobody is told.
                    self._removals[pair] = tick
                    self._delivered.pop(pair, None)
                return
            for gateway in gateways:
                self._queue.append(
                    _Forward(message, gateway, tick + gateway.latency_ticks)
                )
            effective = tick + min(g.latency_ticks for g in gateways)

        if message.action == "activate":
            spec = self.params.profile_for(message.service, message.level)
            self._effects[pair] = ActiveEffect(
                service=message.service,
                element=message.element,
                effect=spec.effect if spec else "inform_only",
                factor=spec.factor if spec else 1.0,
                shift_share=spec.shift_share if spec else 0.0,
                strategy_id=message.strategy_id,
                problem_links=problem_links,
                effective_tick=effective,
                control_mode=message.control_mode,
            )
            self._removals.pop(pair, None)
        else:
            self._removals[pair] = effective

    # -- forwarding ---------------------------------------------------------

    def gateway_forward(
        self,
        message: ActivationMessage,
        gateway: ProviderGateway,
        tick: int,
        agents: dict[str, Agent],
    ) -> list[EndUserNotification]:
        """Fan one forwarded message out to the gateway's audience."""
        if message.service not in gateway.services:
            self._log(tick, "dead_letter", message, gateway=gateway.id,
                      reason="gateway does not subscribe to service")
            return []
        self._log(tick, "forwarded", message, gateway=gateway.id)
        spec = self.params.profile_for(message.service, message.level)
        payload = spec.effect if spec else "inform_only"
        notifications: list[EndUserNotification] = []
        pair = (message.service, message.element)
        for agent_id in sorted(agents):
            agent = agents[agent_id]
            if message.service not in agent.subscribed_services:
                continue
            if (
                gateway.subscriber_agents is not None
                and agent_id not in gateway.subscriber_agents
            ):
                continue
            if gateway.drop_probability > 0 and coin(
                self.seed, gateway.drop_probability, "drop", message.id, agent_id
            ):
                self._log(tick, "dropped", message, gateway=gateway.id, agent=agent_id)
                continue
            self._log(tick, "delivered", message, gateway=gateway.id, agent=agent_id)
            notifications.append(
                EndUserNotification(
                    message_id=message.id,
                    agent_id=agent_id,
                    service=message.service,
                    payload_kind=payload,
                    delivered_tick=tick,
                )
            )
            if message.action == "activate":
                self._delivered.setdefault(pair, set()).add(agent_id)
        return notifications

    def process_tick(self, tick: int, agents: dict[str, Agent]) -> list[EndUserNotification]:
        """Deliver due forwards and finalize due switch-offs."""
        for pair, due in sorted(self._removals.items()):
            if due <= tick:
                self._effects.pop(pair, None)
                self._delivered.pop(pair, None)
                del self._removals[pair]
        notifications: list[EndUserNotification] = []
        still_queued: list[_Forward] = []
        for forward in self._queue:
            if forward.due_tick <= tick:
                notifications.extend(
                    self.gateway_forward(forward.message, forward.gateway, tick, agents)
                )
            else:
                still_queued.append(forward)
        self._queue = still_queued
        return notifications

    # -- state --------------------------------------------------------------

    def is_active_pair(self, service: str, element: str) -> bool:
        return self._lifecycle.get((service, element), "off") == "on"

    def effective_effects(self, tick: int) -> list[ActiveEffect]:
        out = []
        for pair in sorted(self._effects):
            eff = self._effects[pair]
            if eff.effective_tick > tick:
                continue
            removal = self._removals.get(pair)
            if removal is not None and removal <= tick:
                continue
            out.append(eff)
        return out

    def overlay(self, tick: int, state: TrafficState) -> ControlOverlay:
        effects = self.effective_effects(tick)
        notified = {
            pair: frozenset(self._delivered[pair]) if pair in self._delivered else None
            for pair in ((e.service, e.element) for e in effects)
        }
        # Provider-mediated advice reaches only logged recipients; operator
        # channels (roadside assets) address every subscriber directly.
        for eff in effects:
            pair = (eff.service, eff.element)
            if eff.control_mode is ControlMode.VIA_PROVIDER and notified[pair] is None:
                notified[pair] = frozenset()
        return apply_effects(effects, self.network, state, notified)

    def service_status(self, tick: int, element: str | None = None) -> dict[str, str]:
        status = {sid: "inactive" for sid in sorted(self.catalog.services)}
        for (service, elem), eff in self._effects.items():
            if element is not None and elem != element:
                continue
            removal = self._removals.get((service, elem))
            if removal is not None and removal <= tick:
                continue
            if eff.effective_tick > tick:
                if status.get(service) != "active":
                    status[service] = "pending"
            else:
                status[service] = "active"
        return status
