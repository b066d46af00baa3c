/** Event-sourced console state.
 *
 * Everything here is derived exclusively from the event stream, one
 * event at a time, so a reconnect that replays from the last seen
 * sequence number lands on exactly the state an uninterrupted consumer
 * holds. Nothing in this module invents state the server did not send.
 */

import type {
  ActivationPair,
  BottleneckInfo,
  EngineEvent,
  KpiReport,
  MessageLifecyclePayload,
  PendingDecisionInfo,
  ServiceStatus,
  SnapshotPayload,
  StrategyPayload,
} from "./types.js";

export interface ChipTransition {
  status: ServiceStatus;
  tick: number;
}

export interface StrategyCard extends StrategyPayload {
  lastEventTick: number;
}

export interface KpiPoint {
  tick: number;
  kpis: KpiReport;
}

export interface ViewModel {
  tick: number;
  lastSeq: number;
  counts: { created: number; completed: number; onNetwork: number };
  totalQueue: number;
  maxQueue: number;
  queues: Record<string, number>;
  bottlenecks: Record<string, BottleneckInfo & { detectedTick: number }>;
  /** Per (service, element) delivery state, keyed "service|element". */
  pairStatus: Record<string, ServiceStatus>;
  /** Per service: the strongest status over its elements. */
  chips: Record<string, ServiceStatus>;
  /** Chip history, recorded only when the chip value changes. */
  chipLog: Record<string, ChipTransition[]>;
  strategies: Record<string, StrategyCard>;
  decisions: Record<string, PendingDecisionInfo>;
  kpiSeries: KpiPoint[];
  deliveredMessages: number;
  droppedMessages: number;
}

export function createModel(): ViewModel {
  return {
    tick: 0,
    lastSeq: -1,
    counts: { created: 0, completed: 0, onNetwork: 0 },
    totalQueue: 0,
    maxQueue: 0,
    queues: {},
    bottlenecks: {},
    pairStatus: {},
    chips: {},
    chipLog: {},
    strategies: {},
    decisions: {},
    kpiSeries: [],
    deliveredMessages: 0,
    droppedMessages: 0,
  };
}

const RANK: Record<ServiceStatus, number> = { inactive: 0, pending: 1, active: 2 };

function chipOf(model: ViewModel, service: string): ServiceStatus {
  let best: ServiceStatus = "inactive";
  const prefix = service + "|";
  for (const key of Object.keys(model.pairStatus)) {
    if (!key.startsWith(prefix)) continue;
    const status = model.pairStatus[key];
    if (RANK[status] > RANK[best]) best = status;
  }
  return best;
}

function setPair(
  model: ViewModel,
  service: string,
  element: string,
  status: ServiceStatus,
  tick: number,
): void {
  model.pairStatus[`${service}|${element}`] = status;
  const chip = chipOf(model, service);
  if (model.chips[service] !== chip) {
    model.chips[service] = chip;
    (model.chipLog[service] ??= []).push({ status: chip, tick });
  }
}

function applyLifecycle(model: ViewModel, tick: number, p: MessageLifecyclePayload): void {
  if (p.stage === "dispatched") {
    if (p.action === "activate") {
      const immediate = p.control_mode === "direct_operator";
      setPair(model, p.service, p.element, immediate ? "active" : "pending", tick);
    } else if (p.control_mode === "direct_operator") {
      setPair(model, p.service, p.element, "inactive", tick);
    }
  } else if (p.stage === "forwarded") {
    // Arrives at the gateway's effective tick; the switch happens now.
    setPair(model, p.service, p.element, p.action === "activate" ? "active" : "inactive", tick);
  } else if (p.stage === "dead_letter") {
    setPair(model, p.service, p.element, "inactive", tick);
  } else if (p.stage === "delivered") {
    model.deliveredMessages += 1;
  } else if (p.stage === "dropped") {
    model.droppedMessages += 1;
  }
}

export function applyEvent(model: ViewModel, event: EngineEvent): ViewModel {
  if (event.seq <= model.lastSeq) return model; // replay overlap is a no-op
  model.lastSeq = event.seq;
  if (event.tick > model.tick) model.tick = event.tick;

  switch (event.kind) {
    case "StateSnapshot": {
      const p = event.payload as unknown as SnapshotPayload;
      model.counts = {
        created: p.created,
        completed: p.completed,
        onNetwork: p.on_network,
      };
      model.totalQueue = p.total_queue;
      model.maxQueue = p.max_queue;
      model.queues = { ...p.queues };
      break;
    }
    case "BottleneckDetected": {
      const p = event.payload as unknown as BottleneckInfo;
      model.bottlenecks[p.problem] = { ...p, detectedTick: event.tick };
      break;
    }
    case "StrategyProposed":
    case "StrategyActivated": {
      const p = event.payload as unknown as StrategyPayload;
      model.strategies[p.strategy] = { ...p, lastEventTick: event.tick };
      break;
    }
    case "StrategyRetired": {
      const id = event.payload.strategy as string;
      const card = model.strategies[id];
      if (card) {
        card.status = "retired";
        card.lastEventTick = event.tick;
      }
      break;
    }
    case "PendingDecision": {
      const p = event.payload as unknown as PendingDecisionInfo & { decision: string };
      model.decisions[p.decision ?? p.id] = {
        id: p.id,
        key: p.key,
        service_a: p.service_a,
        service_b: p.service_b,
        element: p.element,
        strategy_id: p.strategy_id,
        status: p.status,
        choice: p.choice,
      };
      break;
    }
    case "MessageLifecycle": {
      applyLifecycle(model, event.tick, event.payload as unknown as MessageLifecyclePayload);
      break;
    }
    case "KpiUpdate": {
      model.kpiSeries.push({
        tick: event.tick,
        kpis: event.payload as unknown as KpiReport,
      });
      break;
    }
  }
  return model;
}

export function openDecisions(model: ViewModel): PendingDecisionInfo[] {
  return Object.values(model.decisions)
    .filter((d) => d.status === "open")
    .sort((a, b) => a.id.localeCompare(b.id));
}

export function chipStatus(model: ViewModel, service: string): ServiceStatus {
  return model.chips[service] ?? "inactive";
}

export function activationKey(pair: ActivationPair): string {
  return `${pair[0]}|${pair[1]}`;
}

/** Sorted comparable form of an activation set, for preview checks. */
export function activationSet(pairs: ActivationPair[]): string[] {
  return pairs.map(activationKey).sort();
}
