import {
  ChatSettings,
  ChatTurn,
  DEFAULT_SETTINGS,
  SocketFactory,
  StreamFrame,
  StreamSocket,
  WS_SUBPROTOCOL,
} from "./types.js";

/** Byte length of a string under the gateway's UTF-8 tokenizer. */
export function utf8Length(text: string): number {
  return new TextEncoder().encode(text).length;
}

/** Drop characters from the left until the UTF-8 byte length fits. */
export function truncateLeftUtf8(text: string, maxBytes: number): string {
  if (maxBytes <= 0) return "";
  const enc = new TextEncoder();
  if (enc.encode(text).length <= maxBytes) return text;
  // never split a code point: walk characters from the right
  const chars = Array.from(text);
  let bytes = 0;
  let start = chars.length;
  while (start > 0) {
    const next = bytes + enc.encode(chars[start - 1]).length;
    if (next > maxBytes) break;
    bytes = next;
    start -= 1;
  }
  return chars.slice(start).join("");
}

/** Turn-tagged plain-text context: the gateway is stateless, so the whole
 * conversation is replayed in the prompt, truncated from the left so that
 * prompt tokens + new tokens fit the model's sequence budget. */
export function assembleContext(turns: ChatTurn[], userText: string, budgetBytes: number): string {
  const lines: string[] = [];
  for (const t of turns) {
    if (t.pending || t.failed !== undefined) continue;
    lines.push(`${t.role}: ${t.text}`);
  }
  lines.push(`user: ${userText}`);
  lines.push("model:");
  return truncateLeftUtf8(lines.join("\n"), budgetBytes);
}

/** Chat state machine: append-only turns, one in-flight stream at a time. */
export class ChatStore {
  turns: ChatTurn[] = [];
  /** model sequence budget, refreshed from the swarm panel */
  maxSeq = 128;
  onChange: () => void = () => {};

  private socket: StreamSocket | null = null;
  private lastRequest: { prompt: string; settings: ChatSettings } | null = null;

  constructor(
    private makeSocket: SocketFactory,
    private wsUrl: string,
  ) {}

  get pendingTurn(): ChatTurn | null {
    return this.turns.find((t) => t.pending) ?? null;
  }

  get canRetry(): boolean {
    const last = this.turns[this.turns.length - 1];
    return !this.pendingTurn && last !== undefined && last.failed !== undefined;
  }

  /** Send a prompt. Returns false (and does nothing) while a turn is pending. */
  send(text: string, settings: ChatSettings = DEFAULT_SETTINGS): boolean {
    if (this.pendingTurn || text.length === 0) return false;
    const context = this.contextFor(text, settings);
    this.lastRequest = { prompt: context, settings };
    this.turns.push({ role: "user", text, pending: false });
    const model: ChatTurn = { role: "model", text: "", pending: true };
    this.turns.push(model);
    this.openStream(model, context, settings);
    this.onChange();
    return true;
  }

  /** Re-send the last failed request verbatim into the same (reset) turn. */
  retry(): boolean {
    const last = this.turns[this.turns.length - 1];
    if (!this.canRetry || !this.lastRequest || last.role !== "model") return false;
    last.text = "";
    last.failed = undefined;
    last.pending = true;
    this.openStream(last, this.lastRequest.prompt, this.lastRequest.settings);
    this.onChange();
    return true;
  }

  private contextFor(text: string, settings: ChatSettings): string {
    const budget = Math.max(1, this.maxSeq - settings.maxNewTokens);
    return assembleContext(this.turns, text, budget);
  }

  private openStream(turn: ChatTurn, prompt: string, settings: ChatSettings): void {
    const socket = this.makeSocket(this.wsUrl, WS_SUBPROTOCOL);
    this.socket = socket;
    const request = {
      prompt,
      max_new_tokens: settings.maxNewTokens,
      strategy: settings.strategy,
      ...(settings.temperature !== undefined ? { temperature: settings.temperature } : {}),
      ...(settings.seed !== undefined ? { seed: settings.seed } : {}),
    };
    socket.onopen = () => socket.send(JSON.stringify(request));
    socket.onmessage = (ev) => {
      const frame = JSON.parse(ev.data) as StreamFrame;
      if (frame.type === "token") {
        turn.text += frame.text; // in arrival order: rendered text == frame concat
      } else if (frame.type === "done") {
        turn.pending = false;
        turn.stepsPerS = frame.steps_per_s;
        this.socket = null;
      } else {
        turn.pending = false;
        turn.failed = `error ${frame.code}: ${frame.message}`;
        this.socket = null;
      }
      this.onChange();
    };
    socket.onclose = () => {
      if (turn.pending) {
        turn.pending = false;
        turn.failed = "connection closed before completion";
        this.socket = null;
        this.onChange();
      }
    };
    socket.onerror = socket.onclose;
  }
}
