/** DOM rendering: pure functions from data to elements.
 *
 * The network view draws scenario coordinates directly. Node kinds get
 * distinct glyphs (diamond for route choice, square for control, both
 * overlaid for combined nodes, small dot for plain nodes); links heat
 * up with queue length and flash when a bottleneck sits on them.
 */

import type {
  BottleneckInfo,
  NetworkDoc,
  PendingDecisionInfo,
  ServiceInfo,
  StateView,
} from "./types.js";
import type { StrategyCard, ViewModel } from "./viewmodel.js";
import { chipStatus, openDecisions } from "./viewmodel.js";

const SVG_NS = "http://www.w3.org/2000/svg";

function svgEl<K extends keyof SVGElementTagNameMap>(
  tag: K,
  attrs: Record<string, string | number>,
): SVGElementTagNameMap[K] {
  const el = document.createElementNS(SVG_NS, tag);
  for (const [key, value] of Object.entries(attrs)) {
    el.setAttribute(key, String(value));
  }
  return el;
}

function el(tag: string, className?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

interface Projection {
  x(value: number): number;
  y(value: number): number;
}

function projection(doc: NetworkDoc, width: number, height: number): Projection {
  const xs = doc.nodes.map((n) => n.x);
  const ys = doc.nodes.map((n) => n.y);
  const pad = 40;
  const minX = Math.min(...xs);
  const maxX = Math.max(...xs);
  const minY = Math.min(...ys);
  const maxY = Math.max(...ys);
  const spanX = maxX - minX || 1;
  const spanY = maxY - minY || 1;
  return {
    x: (v) => pad + ((v - minX) / spanX) * (width - 2 * pad),
    y: (v) => height - pad - ((v - minY) / spanY) * (height - 2 * pad),
  };
}

function heatColor(queue: number, maxQueue: number): string {
  if (queue <= 0) return "#4a5568";
  const t = Math.min(1, queue / Math.max(maxQueue, 20));
  const hue = 50 - 50 * t; // yellow toward red
  return `hsl(${hue}, 85%, 52%)`;
}

export function renderNetwork(
  host: HTMLElement,
  doc: NetworkDoc,
  state: StateView | null,
  onBottleneckClick: (b: BottleneckInfo) => void,
): void {
  const width = 760;
  const height = 460;
  host.replaceChildren();
  const svg = svgEl("svg", {
    viewBox: `0 0 ${width} ${height}`,
    width: "100%",
    role: "img",
  });
  const proj = projection(doc, width, height);
  const nodeById = new Map(doc.nodes.map((n) => [n.id, n]));
  const queueByLink = new Map(
    (state?.links ?? []).map((ls) => [ls.link, ls.queue]),
  );
  const bottleneckByElement = new Map(
    (state?.bottlenecks ?? []).map((b) => [b.element, b]),
  );
  const segmentLinks = new Set(
    doc.control_segments.flatMap((s) => s.member_links),
  );

  for (const edge of doc.edges) {
    const a = nodeById.get(edge.from);
    const b = nodeById.get(edge.to);
    if (!a || !b) continue;
    const line = svgEl("line", {
      x1: proj.x(a.x),
      y1: proj.y(a.y),
      x2: proj.x(b.x),
      y2: proj.y(b.y),
      stroke: heatColor(queueByLink.get(edge.id) ?? 0, 60),
      "stroke-width": segmentLinks.has(edge.id) ? 7 : 3,
      "stroke-linecap": "round",
    });
    const hit = bottleneckByElement.get(edge.id);
    if (hit) {
      line.setAttribute("class", "bottleneck");
      line.addEventListener("click", () => onBottleneckClick(hit));
    }
    svg.appendChild(line);
  }

  for (const node of doc.nodes) {
    const cx = proj.x(node.x);
    const cy = proj.y(node.y);
    const group = svgEl("g", {});
    const isChoice = node.kind === "choice_node" || node.kind === "choice_control_node";
    const isControl = node.kind === "control_node" || node.kind === "choice_control_node";
    if (isControl) {
      group.appendChild(
        svgEl("rect", {
          x: cx - 8, y: cy - 8, width: 16, height: 16,
          fill: "#2b6cb0", stroke: "#e2e8f0", "stroke-width": 1.5,
        }),
      );
    }
    if (isChoice) {
      group.appendChild(
        svgEl("polygon", {
          points: `${cx},${cy - 10} ${cx + 10},${cy} ${cx},${cy + 10} ${cx - 10},${cy}`,
          fill: isControl ? "none" : "#38a169",
          stroke: "#e2e8f0",
          "stroke-width": 1.5,
        }),
      );
    }
    if (!isChoice && !isControl) {
      group.appendChild(
        svgEl("circle", { cx, cy, r: 4, fill: "#718096" }),
      );
    }
    const label = svgEl("text", {
      x: cx + 12, y: cy - 10, class: "node-label",
    });
    label.textContent = node.id;
    group.appendChild(label);
    svg.appendChild(group);
  }
  host.appendChild(svg);
}

export function renderChips(host: HTMLElement, services: ServiceInfo[], model: ViewModel): void {
  host.replaceChildren();
  for (const service of services) {
    const status = chipStatus(model, service.id);
    const chip = el("span", `chip chip-${status}`, service.id);
    chip.title = `${service.name} (${service.control_mode}): ${status}`;
    host.appendChild(chip);
  }
}

export function renderStrategies(
  host: HTMLElement,
  cards: StrategyCard[],
  handlers: {
    activate(id: string): void;
    escalate(id: string): void;
    deescalate(id: string): void;
    retire(id: string): void;
  },
): void {
  host.replaceChildren();
  for (const card of cards) {
    const box = el("div", `card card-${card.status}`);
    box.appendChild(el("div", "card-title", `${card.strategy} · ${card.level}`));
    box.appendChild(el("div", "card-sub", `${card.problem} · ${card.status}`));
    box.appendChild(el("div", "card-sub", card.preferred_situation));
    const pairs = card.activations.map(([s, e]) => `${s}@${e}`).join(", ");
    box.appendChild(el("div", "card-pairs", pairs));
    const row = el("div", "card-actions");
    const buttons: [string, (id: string) => void, boolean][] = [
      ["activate", handlers.activate, card.status === "proposed"],
      ["escalate", handlers.escalate, card.status !== "retired"],
      ["de-escalate", handlers.deescalate, card.status !== "retired"],
      ["retire", handlers.retire, card.status === "active"],
    ];
    for (const [label, handler, enabled] of buttons) {
      const button = el("button", undefined, label) as HTMLButtonElement;
      button.disabled = !enabled;
      button.addEventListener("click", () => handler(card.strategy));
      row.appendChild(button);
    }
    box.appendChild(row);
    host.appendChild(box);
  }
}

export function renderDecisions(
  host: HTMLElement,
  model: ViewModel,
  decide: (decision: PendingDecisionInfo, choose: string) => void,
): void {
  host.replaceChildren();
  const open = openDecisions(model);
  if (open.length === 0) {
    host.appendChild(el("div", "empty", "no pending decisions"));
    return;
  }
  for (const decision of open) {
    const box = el("div", "decision");
    box.appendChild(
      el("div", "card-title", `${decision.service_a} vs ${decision.service_b} @ ${decision.element}`),
    );
    const row = el("div", "card-actions");
    for (const choice of [decision.service_a, decision.service_b]) {
      const button = el("button", undefined, `keep ${choice}`);
      button.addEventListener("click", () => decide(decision, choice));
      row.appendChild(button);
    }
    box.appendChild(row);
    host.appendChild(box);
  }
}

export function renderKpis(host: HTMLElement, model: ViewModel): void {
  host.replaceChildren();
  const latest = model.kpiSeries.at(-1);
  const facts = el("div", "kpi-facts");
  const entries: [string, string][] = latest
    ? [
        ["tick", String(latest.tick)],
        ["delay veh·h", latest.kpis.total_delay_veh_h.toFixed(3)],
        ["throughput", String(latest.kpis.throughput)],
        ["max queue", String(latest.kpis.max_queue)],
        ["on network", String(model.counts.onNetwork)],
      ]
    : [["tick", String(model.tick)]];
  for (const [k, v] of entries) {
    const item = el("div", "kpi");
    item.appendChild(el("span", "kpi-name", k));
    item.appendChild(el("span", "kpi-value", v));
    facts.appendChild(item);
  }
  host.appendChild(facts);

  if (model.kpiSeries.length >= 2) {
    const width = 320;
    const height = 60;
    const series = model.kpiSeries.slice(-120);
    const max = Math.max(...series.map((p) => p.kpis.total_delay_veh_h), 1e-9);
    const step = width / (series.length - 1);
    const points = series
      .map((p, i) => `${(i * step).toFixed(1)},${(height - (p.kpis.total_delay_veh_h / max) * height).toFixed(1)}`)
      .join(" ");
    const svg = svgEl("svg", { viewBox: `0 0 ${width} ${height}`, class: "spark" });
    svg.appendChild(
      svgEl("polyline", { points, fill: "none", stroke: "#63b3ed", "stroke-width": 1.5 }),
    );
    host.appendChild(svg);
  }
}

export function renderBanner(host: HTMLElement, status: string): void {
  host.textContent = status === "live" ? "" : `stream ${status}: view may be stale`;
  host.className = status === "live" ? "banner hidden" : "banner";
}
