/** A single conversation entry. Turns are append-only; at most one turn is
 * pending at any time. */
export interface ChatTurn {
  role: "user" | "model";
  text: string;
  pending: boolean;
  /** error message when the stream failed; partial text is retained */
  failed?: string;
  /** generation rate reported by the gateway once the turn completes */
  stepsPerS?: number;
}

export interface ChatSettings {
  maxNewTokens: number;
  strategy: "greedy" | "temperature";
  temperature?: number;
  seed?: number;
}

export const DEFAULT_SETTINGS: ChatSettings = { maxNewTokens: 64, strategy: "greedy" };

/** Frames the gateway sends on the streaming WebSocket. */
export type StreamFrame =
  | { type: "token"; text: string }
  | { type: "done"; steps_per_s: number }
  | { type: "error"; code: number; message: string };

/** Exactly the gateway's swarm-status payload; the panel invents nothing. */
export interface SwarmStatus {
  n_blocks: number;
  max_seq: number;
  coverage: number[];
  bottleneck_throughput: number;
  servers: {
    id: string;
    range: [number, number];
    throughput: number;
    age_ms: number;
  }[];
}

/** Minimal WebSocket surface so tests can substitute a scripted stream. */
export interface StreamSocket {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
}

export type SocketFactory = (url: string, protocol: string) => StreamSocket;

export const WS_SUBPROTOCOL = "petal-stream-v1";
