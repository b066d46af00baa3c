"""The single-writer control loop tying simulation, strategies, and messaging.

One Engine owns all mutable run state. Commands from any thread land in
a FIFO queue and are applied strictly in order between simulation
steps, so command effects are deterministic given the queue order. Every
externally visible transition is emitted as an EngineEvent and appended
to the run log; replaying the log reconstructs the run.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field

from .bus import ActivationBus, BusError
from .catalog import CatalogError, ElementKind, StrategyLevel
from .scenario import Scenario
from .sim import (
    Bottleneck,
    compute_kpis,
    detect_bottlenecks,
    init_state,
    step,
)
from .strategy import (
    ControlStrategy,
    PlanFiring,
    PlanRunner,
    PreferredSituation,
    StrategyError,
    activation_levels,
    compose_strategy,
    deescalate,
    element_kind_of,
    escalate,
    evaluate_preferred_situation,
    resolve_conflicts,
)

EVENT_KINDS = (
    "StateSnapshot",
    "BottleneckDetected",
    "StrategyProposed",
    "StrategyActivated",
    "StrategyRetired",
    "PendingDecision",
    "MessageLifecycle",
    "KpiUpdate",
)

_TRIGGER_KIND = {
    "queue": "queue_spill",
    "density": "queue_spill",
    "mean_speed": "speed_drop",
    "travel_time_ratio": "travel_time_excess",
}


class EngineError(Exception):
    pass


@dataclass(frozen=True)
class EngineEvent:
    tick: int
    seq: int
    kind: str
    payload: dict

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "seq": self.seq,
            "kind": self.kind,
            "payload": self.payload,
        }


@dataclass
class PendingDecisionRecord:
    id: str
    key: str
    service_a: str
    service_b: str
    element: str
    strategy_id: str
    status: str = "open"  # "open" | "decided" | "expired"
    choice: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "key": self.key,
            "service_a": self.service_a,
            "service_b": self.service_b,
            "element": self.element,
            "strategy_id": self.strategy_id,
            "status": self.status,
            "choice": self.choice,
        }


class _KpiTracker:
    """Incremental fold of the run log, matching compute_kpis exactly."""

    def __init__(self):
        self.delay_h = 0.0
        self.throughput = 0
        self.shifted = 0
        self.queue_sum = 0
        self.queue_ticks = 0
        self.max_queue = 0
        self.activations: dict[str, int] = {}

    def fold(self, record: dict) -> None:
        kind = record.get("event")
        if kind == "agent_completed":
            self.throughput += 1
            self.delay_h += record["delay_seconds"] / 3600.0
            if record.get("shifted"):
                self.shifted += 1
        elif kind == "tick_summary":
            self.queue_sum += record["total_queue"]
            self.queue_ticks += 1
            self.max_queue = max(self.max_queue, record["max_queue"])
        elif kind == "strategy_activated":
            level = record["level"]
            self.activations[level] = self.activations.get(level, 0) + 1

    def report(self) -> dict:
        mean = round(self.queue_sum / self.queue_ticks, 6) if self.queue_ticks else 0.0
        return {
            "total_delay_veh_h": round(self.delay_h, 6),
            "throughput": self.throughput,
            "mode_shifted": self.shifted,
            "mean_queue": mean,
            "max_queue": self.max_queue,
            "strategy_activations": dict(sorted(self.activations.items())),
        }


class Engine:
    def __init__(self, scenario: Scenario, kpi_every: int = 10):
        self.scenario = scenario
        self.network = scenario.network
        self.catalog = scenario.catalog
        self.dt = scenario.dt
        self.kpi_every = kpi_every
        self.state = init_state(
            self.network,
            scenario.demand,
            seed=scenario.seed,
            dt=self.dt,
            catalog=self.catalog,
            compliance=scenario.effects.compliance or None,
        )
        self.bus = ActivationBus(
            scenario.effects, self.network, self.catalog, seed=scenario.seed
        )
        self.plan_runner = PlanRunner(scenario.plans)
        self.events: list[EngineEvent] = []
        self.run_log: list[dict] = []
        self.prompts: list[dict] = []
        self.strategies: dict[str, ControlStrategy] = {}
        self.pending: dict[str, PendingDecisionRecord] = {}
        self.decisions: dict[str, str] = {}
        self.bottlenecks: dict[str, Bottleneck] = {}
        self._seen_problems: dict[str, Bottleneck] = {}
        self._present: set[str] = set()
        self._situation: dict[str, dict] = {}
        self._on_pairs: dict[str, frozenset] = {}
        self._live_levels: dict[tuple[str, str], StrategyLevel] = {}
        self._override: dict[str, bool] = {}
        self._forced: dict[tuple[str, str], str] = {}
        self._pending_by_key: dict[str, str] = {}
        self._seq = 0
        self._strategy_seq = 0
        self._decision_seq = 0
        self._sim_cursor = 0
        self._delivery_cursor = 0
        self._results: dict[str, dict] = {}
        self._queue: deque = deque()
        self._lock = threading.RLock()
        self._kpi = _KpiTracker()
        if scenario.effects.always_inform:
            self._standing_inform()

    # -- plumbing -----------------------------------------------------------

    def _append_log(self, record: dict) -> None:
        self.run_log.append(record)
        self._kpi.fold(record)

    def _emit(self, kind: str, payload: dict, tick: int | None = None) -> EngineEvent:
        event = EngineEvent(
            tick=self.state.tick if tick is None else tick,
            seq=self._seq,
            kind=kind,
            payload=payload,
        )
        self._seq += 1
        self.events.append(event)
        self._append_log(
            {"event": kind, "tick": event.tick, "seq": event.seq, **payload}
        )
        return event

    def _ingest_sim_log(self) -> None:
        for record in self.state.log[self._sim_cursor:]:
            self._append_log(record)
        self._sim_cursor = len(self.state.log)

    def _mirror_delivery(self, tick: int | None = None) -> None:
        for record in self.bus.delivery_log[self._delivery_cursor:]:
            self._emit("MessageLifecycle", dict(record), tick=record["tick"])
        self._delivery_cursor = len(self.bus.delivery_log)

    def _prompt(self, tick: int, source: str, text: str) -> None:
        entry = {"tick": tick, "source": source, "prompt": text}
        self.prompts.append(entry)
        self._append_log({"event": "operator_prompt", **entry})

    def events_since(self, after_seq: int = -1) -> list[EngineEvent]:
        return [e for e in self.events if e.seq > after_seq]

    def kpis(self) -> dict:
        return self._kpi.report()

    # -- command queue ------------------------------------------------------

    def submit(self, command: dict) -> None:
        with self._lock:
            self._queue.append(command)

    def execute(self, command: dict) -> dict:
        """Queue one command and drain; returns that command's result."""
        with self._lock:
            self._queue.append(command)
            results = self._drain()
            self._mirror_delivery()
            return results[-1]

    def _drain(self) -> list[dict]:
        results = []
        while self._queue:
            command = self._queue.popleft()
            results.append(self._apply(command))
        return results

    def _apply(self, command: dict) -> dict:
        request_id = command.get("request_id")
        if request_id is not None and request_id in self._results:
            return self._results[request_id]
        try:
            handler = getattr(self, f"_cmd_{command.get('command')}", None)
            if handler is None:
                raise EngineError(f"unknown command {command.get('command')!r}")
            result = {"ok": True, **handler(command)}
        except (EngineError, StrategyError, BusError, CatalogError, ValueError) as exc:
            result = {"ok": False, "error": str(exc)}
        if request_id is not None:
            self._results[request_id] = result
        return result

    # -- commands -----------------------------------------------------------

    def _levels_for(self, strategy: ControlStrategy) -> dict:
        return activation_levels(
            strategy.problem,
            strategy.level,
            self.network,
            self.catalog,
            operational_only=not self._override.get(strategy.id, False),
            scope_hops=self.scenario.scope_hops,
        )

    def _cmd_compose(self, command: dict) -> dict:
        problem_id = command.get("problem")
        problem = self._seen_problems.get(problem_id)
        if problem is None:
            raise EngineError(f"unknown problem {problem_id!r}")
        level = StrategyLevel.from_wire(command.get("level", ""))
        override = bool(command.get("override", False))
        if command.get("dry_run"):
            preview = compose_strategy(
                problem, level, self.network, self.catalog,
                strategy_id="st:preview",
                operational_only=not override,
                scope_hops=self.scenario.scope_hops,
            )
            return {
                "strategy": None,
                "level": level.wire_name,
                "activations": [list(p) for p in preview.sorted_activations()],
            }
        sid = f"st:{self._strategy_seq}"
        strategy = compose_strategy(
            problem, level, self.network, self.catalog,
            strategy_id=sid,
            operational_only=not override,
            scope_hops=self.scenario.scope_hops,
            created_by=command.get("created_by", "operator"),
        )
        self._strategy_seq += 1
        self.strategies[sid] = strategy
        self._override[sid] = override
        self._emit("StrategyProposed", self._strategy_payload(strategy))
        return {
            "strategy": sid,
            "level": level.wire_name,
            "activations": [list(p) for p in strategy.sorted_activations()],
        }

    def _strategy_payload(self, strategy: ControlStrategy, **extra) -> dict:
        payload = {
            "strategy": strategy.id,
            "problem": strategy.problem.id,
            "level": strategy.level.wire_name,
            "status": strategy.status,
            "created_by": strategy.created_by,
            "activations": [list(p) for p in strategy.sorted_activations()],
            "preferred_situation": strategy.preferred_situation.describe(),
        }
        payload.update(extra)
        return payload

    def _require_strategy(self, command: dict) -> ControlStrategy:
        sid = command.get("strategy")
        strategy = self.strategies.get(sid)
        if strategy is None:
            raise EngineError(f"unknown strategy {sid!r}")
        return strategy

    def _register_pendings(self, pendings, strategy_id: str) -> list[str]:
        created = []
        for pending in pendings:
            if pending.key in self._pending_by_key:
                existing = self.pending[self._pending_by_key[pending.key]]
                if existing.status == "open":
                    continue
            did = f"dec:{self._decision_seq}"
            self._decision_seq += 1
            record = PendingDecisionRecord(
                id=did,
                key=pending.key,
                service_a=pending.service_a,
                service_b=pending.service_b,
                element=pending.element,
                strategy_id=strategy_id,
            )
            self.pending[did] = record
            self._pending_by_key[pending.key] = did
            created.append(did)
            self._emit("PendingDecision", {**record.to_dict(), "decision": did})
        return created

    def _check_not_on(self, pairs) -> None:
        for service, element in sorted(pairs):
            if self.bus.is_active_pair(service, element):
                raise EngineError(
                    f"activation overlaps a live strategy for {service} on {element}"
                )

    def _cmd_activate(self, command: dict) -> dict:
        strategy = self._require_strategy(command)
        if strategy.status != "proposed":
            raise EngineError(f"strategy {strategy.id} is not proposed")
        tick = self.state.tick
        kept, pendings = resolve_conflicts(
            strategy.activations, self.catalog, self.decisions
        )
        self._check_not_on(kept)
        levels = self._levels_for(strategy)
        self.bus.dispatch(strategy, tick, "activate", levels=levels, pairs=kept)
        for pair in kept:
            self._live_levels[pair] = levels.get(pair, StrategyLevel.INFORM_TRAFFIC)
        active = strategy.with_status("active")
        self.strategies[strategy.id] = active
        self._on_pairs[strategy.id] = frozenset(kept)
        self._situation[strategy.id] = {"streak": 0, "met": False}
        decision_ids = self._register_pendings(pendings, strategy.id)
        withheld = sorted(strategy.activations - kept)
        self._emit(
            "StrategyActivated",
            self._strategy_payload(
                active,
                activated=[list(p) for p in sorted(kept)],
                withheld=[list(p) for p in withheld],
            ),
        )
        self._append_log(
            {
                "event": "strategy_activated",
                "tick": tick,
                "strategy": strategy.id,
                "level": strategy.level.wire_name,
            }
        )
        return {
            "strategy": strategy.id,
            "activated": [list(p) for p in sorted(kept)],
            "withheld": [list(p) for p in withheld],
            "pending_decisions": decision_ids,
        }

    def _cmd_escalate(self, command: dict) -> dict:
        return self._shift_level(command, escalate)

    def _cmd_deescalate(self, command: dict) -> dict:
        return self._shift_level(command, deescalate)

    def _shift_level(self, command: dict, shift) -> dict:
        strategy = self._require_strategy(command)
        if strategy.status == "retired":
            raise EngineError(f"strategy {strategy.id} is retired")
        override = self._override.get(strategy.id, False)
        if strategy.status == "proposed":
            replacement = shift(
                strategy, self.network, self.catalog,
                strategy_id=strategy.id,
                operational_only=not override,
                scope_hops=self.scenario.scope_hops,
            )
            self.strategies[strategy.id] = replacement
            self._emit("StrategyProposed", self._strategy_payload(replacement))
            return {
                "strategy": strategy.id,
                "level": replacement.level.wire_name,
                "activations": [list(p) for p in replacement.sorted_activations()],
            }
        return self._replace_active(strategy, shift)

    def _replace_active(self, old: ControlStrategy, shift) -> dict:
        tick = self.state.tick
        override = self._override.get(old.id, False)
        new_sid = f"st:{self._strategy_seq}"
        successor = shift(
            old, self.network, self.catalog,
            strategy_id=new_sid,
            operational_only=not override,
            scope_hops=self.scenario.scope_hops,
        )
        self._strategy_seq += 1
        kept_new, pendings = resolve_conflicts(
            successor.activations, self.catalog, self.decisions
        )
        levels_new = activation_levels(
            successor.problem, successor.level, self.network, self.catalog,
            operational_only=not override, scope_hops=self.scenario.scope_hops,
        )
        on_old = self._on_pairs.get(old.id, frozenset())
        to_off = set(on_old - kept_new)
        to_on = set(kept_new - on_old)
        # A pair kept across levels whose profile level changed must cycle.
        default = StrategyLevel.INFORM_TRAFFIC
        for pair in kept_new & on_old:
            if levels_new.get(pair, default) != self._live_levels.get(pair, default):
                to_off.add(pair)
                to_on.add(pair)
        self._check_not_on(to_on - to_off)
        levels_old = self._levels_for(old)
        if to_off:
            self.bus.dispatch(old, tick, "deactivate", levels=levels_old,
                              pairs=frozenset(to_off))
        self._emit("StrategyProposed", self._strategy_payload(successor))
        if to_on:
            self.bus.dispatch(successor, tick, "activate", levels=levels_new,
                              pairs=frozenset(to_on))
        for pair in to_off:
            self._live_levels.pop(pair, None)
        for pair in to_on:
            self._live_levels[pair] = levels_new.get(pair, StrategyLevel.INFORM_TRAFFIC)
        self.strategies[old.id] = old.with_status("retired")
        self._emit(
            "StrategyRetired",
            {"strategy": old.id, "superseded_by": new_sid},
        )
        self._expire_pendings(old.id)
        active = successor.with_status("active")
        self.strategies[new_sid] = active
        self._override[new_sid] = override
        self._on_pairs[new_sid] = frozenset((on_old - to_off) | to_on)
        self._on_pairs.pop(old.id, None)
        self._situation.pop(old.id, None)
        self._situation[new_sid] = {"streak": 0, "met": False}
        decision_ids = self._register_pendings(pendings, new_sid)
        self._emit(
            "StrategyActivated",
            self._strategy_payload(
                active,
                activated=[list(p) for p in sorted(self._on_pairs[new_sid])],
                withheld=[list(p) for p in sorted(successor.activations - kept_new)],
            ),
        )
        self._append_log(
            {
                "event": "strategy_activated",
                "tick": tick,
                "strategy": new_sid,
                "level": successor.level.wire_name,
            }
        )
        return {
            "strategy": new_sid,
            "replaces": old.id,
            "level": successor.level.wire_name,
            "activated": [list(p) for p in sorted(self._on_pairs[new_sid])],
            "pending_decisions": decision_ids,
        }

    def _expire_pendings(self, strategy_id: str) -> None:
        for record in self.pending.values():
            if record.strategy_id == strategy_id and record.status == "open":
                record.status = "expired"
                self._pending_by_key.pop(record.key, None)

    def _cmd_retire(self, command: dict) -> dict:
        strategy = self._require_strategy(command)
        if strategy.status == "retired":
            raise EngineError(f"strategy {strategy.id} is already retired")
        tick = self.state.tick
        if strategy.status == "active":
            on = self._on_pairs.pop(strategy.id, frozenset())
            if on:
                self.bus.dispatch(
                    strategy, tick, "deactivate",
                    levels=self._levels_for(strategy), pairs=on,
                )
            for pair in on:
                self._live_levels.pop(pair, None)
            self._situation.pop(strategy.id, None)
        self._expire_pendings(strategy.id)
        self.strategies[strategy.id] = strategy.with_status("retired")
        self._emit("StrategyRetired", {"strategy": strategy.id})
        self._forced = {
            pair: sid for pair, sid in self._forced.items() if sid != strategy.id
        }
        return {"strategy": strategy.id}

    def _cmd_decide(self, command: dict) -> dict:
        did = command.get("decision")
        record = self.pending.get(did)
        if record is None:
            raise EngineError(f"unknown decision {did!r}")
        if record.status != "open":
            raise EngineError(f"decision {did} is {record.status}")
        choose = command.get("choose")
        if choose not in (record.service_a, record.service_b):
            raise EngineError(
                f"choice must be {record.service_a} or {record.service_b}"
            )
        record.status = "decided"
        record.choice = choose
        self.decisions[record.key] = choose
        self._pending_by_key.pop(record.key, None)
        loser = (
            record.service_b if choose == record.service_a else record.service_a
        )
        activated = []
        strategy = self.strategies.get(record.strategy_id)
        if strategy is not None and strategy.status == "active":
            tick = self.state.tick
            levels = self._levels_for(strategy)
            on = set(self._on_pairs.get(strategy.id, frozenset()))
            loser_pair = (loser, record.element)
            if loser_pair in on:
                self.bus.dispatch(strategy, tick, "deactivate",
                                  levels=levels, pairs=frozenset({loser_pair}))
                on.discard(loser_pair)
                self._live_levels.pop(loser_pair, None)
            winner_pair = (choose, record.element)
            if winner_pair in strategy.activations and not self.bus.is_active_pair(
                *winner_pair
            ):
                self.bus.dispatch(strategy, tick, "activate",
                                  levels=levels, pairs=frozenset({winner_pair}))
                on.add(winner_pair)
                self._live_levels[winner_pair] = levels.get(
                    winner_pair, StrategyLevel.INFORM_TRAFFIC
                )
                activated.append(list(winner_pair))
            self._on_pairs[strategy.id] = frozenset(on)
        self._emit(
            "PendingDecision",
            {**record.to_dict(), "decision": did, "activated": activated},
        )
        return {"decision": did, "choose": choose, "activated": activated}

    def _default_force_level(self, service_id: str) -> StrategyLevel:
        descriptor = self.catalog.get(service_id)
        if descriptor.contributions:
            return max(descriptor.contributions)
        return StrategyLevel.INFORM_TRAFFIC

    def _cmd_force_on(self, command: dict) -> dict:
        service = command.get("service")
        element = command.get("element")
        descriptor = self.catalog.get(service)
        kind = element_kind_of(self.network, element)
        if kind not in descriptor.applicable_elements:
            raise EngineError(f"{service} is not applicable to {kind.value} {element}")
        pair = (service, element)
        if self.bus.is_active_pair(service, element):
            raise EngineError(f"{service} is already active on {element}")
        level = (
            StrategyLevel.from_wire(command["level"])
            if command.get("level")
            else self._default_force_level(service)
        )
        tick = self.state.tick
        sid = f"st:{self._strategy_seq}"
        self._strategy_seq += 1
        problem = Bottleneck(
            id=f"bn:{element}:operator",
            element=element,
            kind="queue_spill",
            severity=1.0,
            measure=0.0,
            threshold=0.0,
        )
        shell = ControlStrategy(
            id=sid,
            problem=problem,
            preferred_situation=PreferredSituation(element, "queue", "<=", float("inf")),
            level=level,
            activations=frozenset({pair}),
            created_by="operator_override",
        )
        self.bus.dispatch(shell, tick, "activate", levels={pair: level},
                          pairs=frozenset({pair}))
        self._live_levels[pair] = level
        self.strategies[sid] = shell.with_status("active")
        self._on_pairs[sid] = frozenset({pair})
        self._forced[pair] = sid
        self._emit(
            "StrategyActivated",
            self._strategy_payload(
                self.strategies[sid],
                forced=True,
                activated=[list(pair)],
                withheld=[],
            ),
        )
        self._append_log(
            {"event": "strategy_activated", "tick": tick,
             "strategy": sid, "level": level.wire_name}
        )
        return {"strategy": sid, "service": service, "element": element,
                "level": level.wire_name}

    def _cmd_force_off(self, command: dict) -> dict:
        pair = (command.get("service"), command.get("element"))
        sid = self._forced.get(pair)
        if sid is None:
            raise EngineError(
                f"{pair[0]} was not forced on {pair[1]}"
            )
        strategy = self.strategies[sid]
        self.bus.dispatch(
            strategy, self.state.tick, "deactivate",
            levels={pair: self._live_levels.get(pair, StrategyLevel.INFORM_TRAFFIC)},
            pairs=frozenset({pair}),
        )
        self._live_levels.pop(pair, None)
        self.strategies[sid] = strategy.with_status("retired")
        self._on_pairs.pop(sid, None)
        del self._forced[pair]
        self._emit("StrategyRetired", {"strategy": sid, "forced": True})
        return {"strategy": sid}

    # -- standing inform policy --------------------------------------------

    def _elements_of_kind(self, kind: ElementKind) -> list[str]:
        if kind is ElementKind.LINK:
            return sorted(self.network.links)
        if kind is ElementKind.CONTROL_SEGMENT:
            return sorted(self.network.control_segments)
        return sorted(
            n.id for n in self.network.nodes.values()
            if element_kind_of(self.network, n.id) is kind
        )

    def _standing_inform(self) -> None:
        pairs = set()
        for sid in sorted(self.catalog.services):
            descriptor = self.catalog.services[sid]
            if not descriptor.operational or not descriptor.in_area:
                continue
            if StrategyLevel.INFORM_TRAFFIC not in descriptor.contributions:
                continue
            for kind in descriptor.applicable_elements:
                for element in self._elements_of_kind(kind):
                    pairs.add((sid, element))
        if not pairs:
            return
        kept, pendings = resolve_conflicts(pairs, self.catalog, self.decisions)
        anchor = sorted(self.network.links)[0]
        shell = ControlStrategy(
            id="st:inform",
            problem=Bottleneck(
                id="bn:standing:inform", element=anchor, kind="queue_spill",
                severity=1.0, measure=0.0, threshold=0.0,
            ),
            preferred_situation=PreferredSituation(anchor, "queue", "<=", float("inf")),
            level=StrategyLevel.INFORM_TRAFFIC,
            activations=frozenset(pairs),
            created_by="policy",
        )
        levels = {pair: StrategyLevel.INFORM_TRAFFIC for pair in kept}
        self.bus.dispatch(shell, 0, "activate", levels=levels, pairs=kept)
        for pair in kept:
            self._live_levels[pair] = StrategyLevel.INFORM_TRAFFIC
        self.strategies["st:inform"] = shell.with_status("active")
        self._on_pairs["st:inform"] = frozenset(kept)
        self._register_pendings(pendings, "st:inform")
        self._emit(
            "StrategyActivated",
            self._strategy_payload(
                self.strategies["st:inform"],
                standing=True,
                activated=[list(p) for p in sorted(kept)],
                withheld=[list(p) for p in sorted(pairs - kept)],
            ),
            tick=0,
        )
        self._append_log(
            {"event": "strategy_activated", "tick": 0,
             "strategy": "st:inform", "level": StrategyLevel.INFORM_TRAFFIC.wire_name}
        )
        self._mirror_delivery()

    # -- per-tick work ------------------------------------------------------

    def advance(self, ticks: int) -> None:
        with self._lock:
            for _ in range(ticks):
                self._tick_once()

    def _tick_once(self) -> None:
        tick = self.state.tick
        self._drain()
        self._mirror_delivery()
        self.bus.process_tick(tick, self.state.agents)
        self._mirror_delivery()
        overlay = self.bus.overlay(tick, self.state)
        step(self.state, self.network, dt=self.dt, overlay=overlay)
        self._ingest_sim_log()
        self._detect(tick)
        self._run_plans(tick)
        self._evaluate_situations(tick)
        if self.kpi_every and (tick + 1) % self.kpi_every == 0:
            self._emit("KpiUpdate", self.kpis(), tick=tick)
        self._emit("StateSnapshot", self._snapshot_payload(), tick=tick)

    def _detect(self, tick: int) -> None:
        current = detect_bottlenecks(self.state, self.network)
        self.bottlenecks = {b.id: b for b in current}
        self._seen_problems.update(self.bottlenecks)
        now = set(self.bottlenecks)
        for bid in sorted(now - self._present):
            problem = self.bottlenecks[bid]
            self._emit(
                "BottleneckDetected",
                {
                    "problem": bid,
                    "element": problem.element,
                    "bottleneck_kind": problem.kind,
                    "severity": round(problem.severity, 6),
                    "measure": round(problem.measure, 6),
                    "threshold": problem.threshold,
                    "primary_cause": problem.primary_cause,
                },
                tick=tick,
            )
        self._present = now

    def _plan_problem(self, firing: PlanFiring) -> Bottleneck:
        trigger = firing.plan.trigger
        kind = _TRIGGER_KIND.get(trigger.measure, "queue_spill")
        value = firing.trigger_value
        if trigger.op in (">", ">="):
            severity = value / trigger.value if trigger.value else float("inf")
        else:
            severity = trigger.value / value if value else float("inf")
        return Bottleneck(
            id=f"bn:{trigger.element}:{kind}",
            element=trigger.element,
            kind=kind,
            severity=severity,
            measure=value,
            threshold=trigger.value,
        )

    def _run_plans(self, tick: int) -> None:
        for firing in self.plan_runner.evaluate(self.state, self.network):
            problem = self._plan_problem(firing)
            self._seen_problems.setdefault(problem.id, problem)
            for action in firing.plan.actions:
                if action.kind == "manual":
                    self._prompt(tick, firing.plan.id, action.prompt or "")
                    continue
                sid = f"st:{self._strategy_seq}"
                try:
                    strategy = compose_strategy(
                        problem, action.level, self.network, self.catalog,
                        strategy_id=sid,
                        scope_hops=self.scenario.scope_hops,
                        created_by="automatic",
                    )
                except StrategyError as exc:
                    self._prompt(tick, firing.plan.id, str(exc))
                    continue
                self._strategy_seq += 1
                self.strategies[sid] = strategy
                self._override[sid] = False
                self._emit(
                    "StrategyProposed",
                    self._strategy_payload(strategy, plan=firing.plan.id),
                    tick=tick,
                )

    def _evaluate_situations(self, tick: int) -> None:
        for sid in sorted(self._situation):
            strategy = self.strategies[sid]
            if strategy.status != "active":
                continue
            info = self._situation[sid]
            status = evaluate_preferred_situation(
                strategy, self.state, self.network,
                streak=info["streak"],
                required_ticks=self.scenario.preferred_consecutive_ticks,
            )
            info["streak"] = status.streak
            newly_met = status.met and not info["met"]
            info["met"] = status.met
            if not newly_met:
                continue
            self._prompt(
                tick, sid,
                f"preferred situation met for {sid}; confirm de-escalation or retire",
            )
            if strategy.level <= StrategyLevel.INFORM_TRAFFIC:
                continue
            new_sid = f"st:{self._strategy_seq}"
            try:
                proposal = deescalate(
                    strategy, self.network, self.catalog,
                    strategy_id=new_sid,
                    operational_only=not self._override.get(sid, False),
                    scope_hops=self.scenario.scope_hops,
                )
            except StrategyError:
                continue
            self._strategy_seq += 1
            self.strategies[new_sid] = proposal
            self._override[new_sid] = self._override.get(sid, False)
            self._emit(
                "StrategyProposed",
                self._strategy_payload(proposal, deescalates=sid),
                tick=tick,
            )

    # -- views --------------------------------------------------------------

    def _snapshot_payload(self) -> dict:
        links = self.state.link_states()
        queues = {ls.link: ls.queue for ls in links if ls.queue}
        return {
            "on_network": self.state.on_network(),
            "created": self.state.created,
            "completed": self.state.completed,
            "total_queue": sum(ls.queue for ls in links),
            "max_queue": max((ls.queue for ls in links), default=0),
            "queues": queues,
        }

    def snapshot(self) -> dict:
        """Full state view for the API; never mutates."""
        tick = self.state.tick
        return {
            "tick": tick,
            "on_network": self.state.on_network(),
            "created": self.state.created,
            "completed": self.state.completed,
            "links": [
                {
                    "link": ls.link,
                    "vehicles_on_link": ls.vehicles_on_link,
                    "queue": ls.queue,
                    "inflow": ls.inflow,
                    "outflow": ls.outflow,
                    "effective_capacity": ls.effective_capacity,
                    "mean_speed": round(ls.mean_speed, 6),
                }
                for ls in self.state.link_states()
            ],
            "bottlenecks": [
                {
                    "problem": b.id,
                    "element": b.element,
                    "bottleneck_kind": b.kind,
                    "severity": round(b.severity, 6),
                    "primary_cause": b.primary_cause,
                }
                for _, b in sorted(self.bottlenecks.items())
            ],
            "strategies": [
                self._strategy_payload(self.strategies[sid])
                for sid in sorted(self.strategies)
            ],
            "pending_decisions": [
                self.pending[did].to_dict() for did in sorted(self.pending)
            ],
            "services": self.bus.service_status(tick),
            "prompts": list(self.prompts),
            "kpis": self.kpis(),
        }
