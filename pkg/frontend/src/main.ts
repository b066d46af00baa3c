/** Console entry point: wires client, stream, model, and views. */

import { ConsoleClient } from "./client.js";
import {
  renderBanner,
  renderChips,
  renderDecisions,
  renderKpis,
  renderNetwork,
  renderStrategies,
} from "./render.js";
import { EventStream } from "./stream.js";
import type { BottleneckInfo, NetworkDoc, ServiceInfo, StateView } from "./types.js";
import { LEVELS } from "./types.js";
import { applyEvent, createModel } from "./viewmodel.js";

function need(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

async function boot(): Promise<void> {
  const base = window.location.origin;
  const client = new ConsoleClient(base);
  const model = createModel();

  const doc: NetworkDoc = await client.network();
  const services: ServiceInfo[] = await client.services();
  let state: StateView | null = await client.state();

  const banner = need("banner");
  const networkHost = need("network");
  const chipsHost = need("services");
  const strategiesHost = need("strategies");
  const decisionsHost = need("decisions");
  const kpiHost = need("kpis");
  const composeHost = need("compose");

  let selected: BottleneckInfo | null = null;
  let dirty = true;

  function markDirty(): void {
    dirty = true;
  }

  async function refreshState(): Promise<void> {
    try {
      state = await client.state();
    } catch {
      state = state; // keep the last view; the banner already warns
    }
    markDirty();
  }

  async function showCompose(b: BottleneckInfo): Promise<void> {
    selected = b;
    composeHost.replaceChildren();
    const title = document.createElement("div");
    title.className = "card-title";
    title.textContent = `${b.problem} (severity ${b.severity.toFixed(2)})`;
    composeHost.appendChild(title);
    for (const level of LEVELS) {
      const row = document.createElement("div");
      row.className = "compose-row";
      const button = document.createElement("button");
      button.textContent = level;
      const preview = document.createElement("span");
      preview.className = "preview";
      try {
        const dry = await client.compose(b.problem, level, { dryRun: true });
        preview.textContent = dry.activations.map(([s, e]) => `${s}@${e}`).join(", ");
        button.addEventListener("click", async () => {
          const composed = await client.compose(b.problem, level);
          if (composed.ok && composed.strategy) {
            await client.activate(composed.strategy);
          }
          await refreshState();
        });
      } catch (error) {
        preview.textContent = String(error);
        button.disabled = true;
      }
      row.appendChild(button);
      row.appendChild(preview);
      composeHost.appendChild(row);
    }
  }

  const stream = new EventStream(
    `${base.replace(/^http/, "ws")}/events`,
    (event) => {
      applyEvent(model, event);
      markDirty();
    },
    { onStatus: (status) => renderBanner(banner, status) },
  );
  stream.start();

  const handlers = {
    activate: (id: string) => void client.activate(id).then(refreshState),
    escalate: (id: string) => void client.escalate(id).then(refreshState),
    deescalate: (id: string) => void client.deescalate(id).then(refreshState),
    retire: (id: string) => void client.retire(id).then(refreshState),
  };

  need("btn-pause").addEventListener("click", () => void client.pause());
  need("btn-resume").addEventListener("click", () => void client.resume());
  need("btn-step").addEventListener("click", () => void client.step(1).then(refreshState));

  setInterval(() => void refreshState(), 1000);
  setInterval(() => {
    if (!dirty) return;
    dirty = false;
    renderNetwork(networkHost, doc, state, (b) => void showCompose(b));
    renderChips(chipsHost, services, model);
    renderStrategies(
      strategiesHost,
      Object.values(model.strategies).sort((a, b) => a.strategy.localeCompare(b.strategy)),
      handlers,
    );
    renderDecisions(decisionsHost, model, (decision, choose) => {
      void client.decide(decision.id, choose).then(refreshState);
    });
    renderKpis(kpiHost, model);
    if (selected) {
      const still = (state?.bottlenecks ?? []).some((b) => b.problem === selected?.problem);
      if (!still) {
        composeHost.replaceChildren();
        selected = null;
      }
    }
  }, 120);
}

void boot();
