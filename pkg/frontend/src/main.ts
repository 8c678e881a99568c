import { ChatStore } from "./chat.js";
import { POLL_PERIOD_MS, SwarmPoller, fetchSwarmStatus } from "./swarm.js";
import { bindUi } from "./ui.js";

const wsUrl = `${location.protocol === "https:" ? "wss" : "ws"}://${location.host}/api/v1/stream`;
const store = new ChatStore(
  (url, protocol) => new WebSocket(url, protocol) as unknown as import("./types.js").StreamSocket,
  wsUrl,
);
const poller = new SwarmPoller(() => fetchSwarmStatus(""));

bindUi(store, poller, document);
void poller.poll();
setInterval(() => void poller.poll(), POLL_PERIOD_MS);
