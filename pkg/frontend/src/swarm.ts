import { SwarmStatus } from "./types.js";

export const POLL_PERIOD_MS = 5000;

/** Polls the gateway's swarm status. Keeps the last good payload; flags it
 * stale once no successful poll has landed for 2x the poll period. */
export class SwarmPoller {
  status: SwarmStatus | null = null;
  lastSuccessMs: number | null = null;
  onChange: () => void = () => {};

  constructor(
    private fetchStatus: () => Promise<SwarmStatus>,
    public periodMs: number = POLL_PERIOD_MS,
    private now: () => number = () => Date.now(),
  ) {}

  async poll(): Promise<void> {
    try {
      this.status = await this.fetchStatus();
      this.lastSuccessMs = this.now();
    } catch {
      // keep the previous payload; staleness is derived from its age
    }
    this.onChange();
  }

  get stale(): boolean {
    if (this.lastSuccessMs === null) return true;
    return this.now() - this.lastSuccessMs > 2 * this.periodMs;
  }

  /** Composing is possible only when every block is served. */
  get canCompose(): boolean {
    return this.status !== null && this.status.bottleneck_throughput > 0;
  }

  get uncoveredBlocks(): number[] {
    if (!this.status) return [];
    return this.status.coverage.flatMap((n, i) => (n === 0 ? [i] : []));
  }
}

export async function fetchSwarmStatus(baseUrl = ""): Promise<SwarmStatus> {
  const resp = await fetch(`${baseUrl}/api/v1/swarm`);
  if (!resp.ok) throw new Error(`swarm status: HTTP ${resp.status}`);
  return (await resp.json()) as SwarmStatus;
}
