import { ChatStore } from "./chat.js";
import { SwarmPoller } from "./swarm.js";
import { ChatTurn } from "./types.js";

/** DOM glue: renders the store/poller state into the static page. All logic
 * lives in ChatStore and SwarmPoller, which are covered by the test suite. */
export function bindUi(store: ChatStore, poller: SwarmPoller, doc: Document): void {
  const log = doc.getElementById("chat-log") as HTMLElement;
  const input = doc.getElementById("prompt-input") as HTMLTextAreaElement;
  const sendBtn = doc.getElementById("send-btn") as HTMLButtonElement;
  const retryBtn = doc.getElementById("retry-btn") as HTMLButtonElement;
  const notice = doc.getElementById("notice") as HTMLElement;
  const panel = doc.getElementById("swarm-panel") as HTMLElement;

  function renderTurn(t: ChatTurn): HTMLElement {
    const div = doc.createElement("div");
    div.className = `turn ${t.role}${t.pending ? " pending" : ""}${t.failed ? " failed" : ""}`;
    const body = doc.createElement("pre");
    body.textContent = t.text;
    div.appendChild(body);
    if (t.failed) {
      const badge = doc.createElement("span");
      badge.className = "badge";
      badge.textContent = t.failed;
      div.appendChild(badge);
    }
    if (t.stepsPerS !== undefined) {
      const rate = doc.createElement("span");
      rate.className = "rate";
      rate.textContent = `${t.stepsPerS.toFixed(2)} steps/s`;
      div.appendChild(rate);
    }
    return div;
  }

  function renderChat(): void {
    log.replaceChildren(...store.turns.map(renderTurn));
    log.scrollTop = log.scrollHeight;
    retryBtn.hidden = !store.canRetry;
    updateComposer();
  }

  function updateComposer(): void {
    const blocked = store.pendingTurn !== null || !poller.canCompose;
    input.disabled = blocked;
    sendBtn.disabled = blocked;
    notice.textContent = !poller.canCompose
      ? "swarm has uncovered blocks - composing disabled"
      : "";
  }

  function renderPanel(): void {
    const s = poller.status;
    if (!s) {
      panel.textContent = "no swarm data yet";
      updateComposer();
      return;
    }
    if (s.max_seq) store.maxSeq = s.max_seq;
    const bar = s.coverage
      .map((n) => `<span class="block ${n === 0 ? "uncovered" : "covered"}" title="${n} server(s)"></span>`)
      .join("");
    const rows = s.servers
      .map(
        (sv) =>
          `<tr><td>${sv.id.slice(0, 8)}</td><td>[${sv.range[0]}, ${sv.range[1]})</td>` +
          `<td>${sv.throughput.toFixed(1)}</td><td>${(sv.age_ms / 1000).toFixed(0)}s</td></tr>`,
      )
      .join("");
    panel.innerHTML =
      `<div class="coverage">${bar}</div>` +
      `<div class="bottleneck">bottleneck: ${s.bottleneck_throughput.toFixed(2)} tok/s` +
      `${poller.stale ? ' <span class="stale">stale</span>' : ""}</div>` +
      `<table><thead><tr><th>server</th><th>blocks</th><th>tok/s</th><th>age</th></tr></thead>` +
      `<tbody>${rows}</tbody></table>`;
    updateComposer();
  }

  store.onChange = renderChat;
  poller.onChange = renderPanel;

  sendBtn.addEventListener("click", () => {
    if (store.send(input.value.trim())) input.value = "";
  });
  input.addEventListener("keydown", (ev) => {
    if (ev.key === "Enter" && !ev.shiftKey) {
      ev.preventDefault();
      sendBtn.click();
    }
  });
  retryBtn.addEventListener("click", () => store.retry());

  renderChat();
  renderPanel();
}
