/**
 * Viewer client: byte stream in, state out. The transport is abstract so
 * the same client runs over a live WebSocket or an offline recorded stream.
 */

import { MessageScanner } from "./protocol.js";
import { ViewerState, applyMessage, initialState } from "./state.js";

export interface ClientEvents {
  onState?(state: ViewerState): void;
}

export class ViewerClient {
  state: ViewerState = initialState();
  private scanner = new MessageScanner();

  constructor(private events: ClientEvents = {}) {}

  connecting(): void {
    this.state = { ...this.state, connection: "connecting" };
    this.events.onState?.(this.state);
  }

  disconnected(): void {
    this.state = { ...this.state, connection: "disconnected" };
    this.events.onState?.(this.state);
  }

  /** Feed raw bytes from the transport; chunk boundaries are arbitrary. */
  receive(chunk: Uint8Array): void {
    for (const message of this.scanner.feed(chunk)) {
      this.state = applyMessage(this.state, message);
      this.events.onState?.(this.state);
    }
  }
}

export interface BackoffOptions {
  initialMs?: number;
  maxMs?: number;
}

/** Exponential backoff schedule for reconnect attempts. */
export function backoffDelays(attempts: number, options: BackoffOptions = {}): number[] {
  const initial = options.initialMs ?? 250;
  const max = options.maxMs ?? 8000;
  const out: number[] = [];
  for (let i = 0; i < attempts; i++) {
    out.push(Math.min(max, initial * 2 ** i));
  }
  return out;
}
