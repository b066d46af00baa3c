/** Typed HTTP client for the control service.
 *
 * Every mutating call carries a client-generated request id and retries
 * once on transport failure with the same id, so a command is applied
 * at most once no matter how the first attempt died.
 */

import type {
  ActivateResult,
  CommandResult,
  ComposeResult,
  KpiReport,
  NetworkDoc,
  ServiceInfo,
  ShiftResult,
  StateView,
  StrategyLevelName,
  StrategyPayload,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly body: unknown,
  ) {
    super(`api error ${status}: ${JSON.stringify(body)}`);
  }
}

export interface ClientOptions {
  fetchImpl?: typeof fetch;
  /** Stable prefix so parallel consoles never collide on request ids. */
  idPrefix?: string;
}

export class ConsoleClient {
  private readonly fetchImpl: typeof fetch;
  private readonly idPrefix: string;
  private idCounter = 0;

  constructor(
    readonly baseUrl: string,
    options: ClientOptions = {},
  ) {
    this.fetchImpl = options.fetchImpl ?? fetch;
    this.idPrefix =
      options.idPrefix ?? `con-${Date.now().toString(36)}-${Math.floor(Math.random() * 1e6)}`;
  }

  nextRequestId(): string {
    this.idCounter += 1;
    return `${this.idPrefix}:${this.idCounter}`;
  }

  private async get<T>(path: string): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`);
    const body = await response.json();
    if (!response.ok) throw new ApiError(response.status, body);
    return body as T;
  }

  private async post<T extends CommandResult>(
    path: string,
    payload: Record<string, unknown>,
    requestId?: string,
  ): Promise<T> {
    const body = requestId === undefined ? payload : { ...payload, request_id: requestId };
    const send = () =>
      this.fetchImpl(`${this.baseUrl}${path}`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      });
    let response: Response;
    try {
      response = await send();
    } catch {
      response = await send(); // same request id: replay, not re-apply
    }
    const parsed = await response.json();
    if (!response.ok && parsed?.ok === undefined) {
      throw new ApiError(response.status, parsed);
    }
    return parsed as T;
  }

  // -- reads ----------------------------------------------------------------

  network(): Promise<NetworkDoc> {
    return this.get<NetworkDoc>("/network");
  }

  state(): Promise<StateView> {
    return this.get<StateView>("/state");
  }

  services(): Promise<ServiceInfo[]> {
    return this.get<{ services: ServiceInfo[] }>("/services").then((r) => r.services);
  }

  strategies(): Promise<StrategyPayload[]> {
    return this.get<{ strategies: StrategyPayload[] }>("/strategies").then(
      (r) => r.strategies,
    );
  }

  kpis(): Promise<KpiReport> {
    return this.get<KpiReport>("/kpis");
  }

  // -- strategy lifecycle ---------------------------------------------------

  compose(
    problem: string,
    level: StrategyLevelName,
    options: { override?: boolean; dryRun?: boolean } = {},
  ): Promise<ComposeResult> {
    return this.post<ComposeResult>(
      "/strategies",
      {
        problem,
        level,
        override: options.override ?? false,
        dry_run: options.dryRun ?? false,
      },
      this.nextRequestId(),
    );
  }

  activate(strategyId: string): Promise<ActivateResult> {
    return this.post<ActivateResult>(
      `/strategies/${strategyId}/activate`,
      {},
      this.nextRequestId(),
    );
  }

  escalate(strategyId: string): Promise<ShiftResult> {
    return this.post<ShiftResult>(
      `/strategies/${strategyId}/escalate`,
      {},
      this.nextRequestId(),
    );
  }

  deescalate(strategyId: string): Promise<ShiftResult> {
    return this.post<ShiftResult>(
      `/strategies/${strategyId}/deescalate`,
      {},
      this.nextRequestId(),
    );
  }

  retire(strategyId: string): Promise<CommandResult> {
    return this.post(`/strategies/${strategyId}/retire`, {}, this.nextRequestId());
  }

  decide(decisionId: string, choose: string): Promise<CommandResult> {
    return this.post(`/decisions/${decisionId}`, { choose }, this.nextRequestId());
  }

  forceOn(service: string, element: string, level?: StrategyLevelName): Promise<CommandResult> {
    return this.post(
      `/services/${service}/force_on`,
      level === undefined ? { element } : { element, level },
      this.nextRequestId(),
    );
  }

  forceOff(service: string, element: string): Promise<CommandResult> {
    return this.post(`/services/${service}/force_off`, { element }, this.nextRequestId());
  }

  // -- pace -----------------------------------------------------------------

  pause(): Promise<CommandResult> {
    return this.post("/sim/pause", {});
  }

  resume(): Promise<CommandResult> {
    return this.post("/sim/resume", {});
  }

  step(ticks = 1): Promise<CommandResult> {
    return this.post("/sim/step", { ticks });
  }

  setRate(ticksPerSecond: number): Promise<CommandResult> {
    return this.post("/sim/rate", { ticks_per_second: ticksPerSecond });
  }
}
