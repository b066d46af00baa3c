/** Reconnecting event-stream consumer.
 *
 * Tracks the last sequence number it has seen and resumes from there
 * after any drop, so the consumer's event history is gap-free and
 * duplicate-free across reconnects. The socket constructor is
 * injectable; the browser passes nothing, tests pass a Node client.
 */

import type { EngineEvent } from "./types.js";

export interface SocketLike {
  onopen: ((event?: unknown) => void) | null;
  onmessage: ((event: { data: unknown }) => void) | null;
  onclose: ((event?: unknown) => void) | null;
  onerror: ((event?: unknown) => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export type StreamStatus = "connecting" | "live" | "stale" | "stopped";

export interface StreamOptions {
  socketFactory?: SocketFactory;
  reconnectDelayMs?: number;
  onStatus?: (status: StreamStatus) => void;
}

declare const WebSocket: { new (url: string): SocketLike };

export class EventStream {
  private readonly factory: SocketFactory;
  private readonly reconnectDelayMs: number;
  private readonly onStatus?: (status: StreamStatus) => void;
  private socket: SocketLike | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private running = false;
  private statusValue: StreamStatus = "stopped";
  private lastSeenSeq = -1;

  constructor(
    private readonly eventsUrl: string,
    private readonly onEvent: (event: EngineEvent) => void,
    options: StreamOptions = {},
  ) {
    this.factory = options.socketFactory ?? ((url) => new WebSocket(url));
    this.reconnectDelayMs = options.reconnectDelayMs ?? 250;
    this.onStatus = options.onStatus;
  }

  get status(): StreamStatus {
    return this.statusValue;
  }

  get lastSeen(): number {
    return this.lastSeenSeq;
  }

  /** The live socket; tests close it to simulate a network drop. */
  get transport(): SocketLike | null {
    return this.socket;
  }

  start(): void {
    if (this.running) return;
    this.running = true;
    this.open();
  }

  stop(): void {
    this.running = false;
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    const socket = this.socket;
    this.socket = null;
    if (socket) {
      socket.onclose = null;
      socket.close();
    }
    this.setStatus("stopped");
  }

  private setStatus(status: StreamStatus): void {
    if (this.statusValue === status) return;
    this.statusValue = status;
    this.onStatus?.(status);
  }

  private open(): void {
    this.setStatus(this.lastSeenSeq >= 0 ? "stale" : "connecting");
    const socket = this.factory(`${this.eventsUrl}?after_seq=${this.lastSeenSeq}`);
    this.socket = socket;
    socket.onopen = () => {
      if (this.socket === socket) this.setStatus("live");
    };
    socket.onmessage = (message) => {
      let event: EngineEvent;
      try {
        event = JSON.parse(String(message.data)) as EngineEvent;
      } catch {
        return;
      }
      if (event.seq > this.lastSeenSeq) this.lastSeenSeq = event.seq;
      this.onEvent(event);
    };
    socket.onerror = () => {};
    socket.onclose = () => {
      if (!this.running || this.socket !== socket) return;
      this.socket = null;
      this.setStatus("stale");
      this.timer = setTimeout(() => {
        this.timer = null;
        if (this.running) this.open();
      }, this.reconnectDelayMs);
    };
  }
}
