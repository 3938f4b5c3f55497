/** DOM layer: renders SessionView state and wires the controls to the API. */
import { ApiError, ChatApi } from "./api.js";
import type { LabelValue, Scenario, Sentiment } from "./api.js";
import {
  LabelControl,
  Message,
  SENTIMENTS,
  SENTIMENT_TAGS,
  SessionView,
  allowedModes,
  badgeText,
  beginTurn,
  buildTurnBody,
  canSend,
  completeTurn,
  defaultControl,
  failTurn,
  fromTranscript,
  newSessionView,
} from "./state.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  node.append(...children);
  return node;
}

function distributionBar(dist: Record<Sentiment, number>): HTMLElement {
  const bar = el("div", { class: "dist-bar", "data-testid": "dist-bar" });
  for (const s of SENTIMENTS) {
    const p = dist[s] ?? 0;
    const seg = el("span", {
      class: `dist-seg dist-${s}`,
      "data-sentiment": s,
      title: `${s} ${(p * 100).toFixed(1)}%`,
    });
    seg.style.width = `${(p * 100).toFixed(2)}%`;
    bar.append(seg);
  }
  return bar;
}

function messageNode(scenario: Scenario, msg: Message): HTMLElement {
  const node = el("div", {
    class: `message ${msg.speaker}${msg.pendingEcho ? " pending" : ""}`,
    "data-testid": `message-${msg.speaker}`,
    "data-turn": String(msg.turnIndex),
  });
  node.append(el("div", { class: "speaker" }, msg.speaker === "user" ? "you" : "model"));
  node.append(el("div", { class: "text" }, msg.text));
  if (msg.speaker === "model" && msg.labelUsed !== undefined) {
    const badge = el(
      "span",
      {
        class: `badge badge-${msg.labelSource}`,
        "data-testid": "label-badge",
        "data-label": String(msg.labelUsed),
        "data-source": msg.labelSource ?? "",
      },
      badgeText(scenario, msg),
    );
    node.append(badge);
    if (msg.labelDistribution) node.append(distributionBar(msg.labelDistribution));
  }
  return node;
}

export class ChatApp {
  view: SessionView | null = null;
  control: LabelControl = defaultControl(2);
  private api: ChatApi | null = null;

  constructor(private readonly root: HTMLElement) {
    this.renderSetup();
  }

  /* ------------------------------------------------------------------ */

  private renderSetup(): void {
    this.root.innerHTML = "";
    const url = el("input", {
      type: "text",
      value: "http://127.0.0.1:8000",
      "data-testid": "server-url",
      class: "server-url",
    });
    const scenarioSel = el("select", { "data-testid": "scenario-select" });
    scenarioSel.append(
      el("option", { value: "2" }, "scenario 2: sentiment tags"),
      el("option", { value: "1" }, "scenario 1: generic control"),
    );
    const start = el("button", { "data-testid": "new-session" }, "new session");
    const banner = el("div", { class: "banner hidden", "data-testid": "setup-error" });
    start.addEventListener("click", () => {
      void this.startSession(
        url.value,
        Number(scenarioSel.value) === 1 ? 1 : 2,
        banner,
        start,
      );
    });
    this.root.append(
      el("div", { class: "setup", "data-testid": "setup-panel" },
        el("h1", {}, "conditioned dialog chat"),
        el("label", {}, "server "), url,
        el("label", {}, " scenario "), scenarioSel,
        start, banner),
    );
  }

  async startSession(
    baseUrl: string,
    scenario: Scenario,
    banner?: HTMLElement,
    button?: HTMLButtonElement,
  ): Promise<void> {
    const api = new ChatApi(baseUrl);
    if (button) button.disabled = true;
    try {
      const info = await api.createSession(scenario);
      this.attachSession(api, info.session_id, scenario);
    } catch (e) {
      if (banner) {
        banner.textContent =
          e instanceof ApiError ? e.message : `cannot start session: ${String(e)}`;
        banner.classList.remove("hidden");
      }
    } finally {
      if (button) button.disabled = false;
    }
  }

  /** Bind an existing session (used directly by tests; no network). */
  attachSession(api: ChatApi, sessionId: string, scenario: Scenario): void {
    this.api = api;
    this.view = newSessionView(sessionId, scenario);
    this.control = defaultControl(scenario);
    this.renderChat();
  }

  /* ------------------------------------------------------------------ */

  private renderChat(): void {
    if (!this.view) return;
    const scenario = this.view.scenario;
    this.root.innerHTML = "";

    const messages = el("div", { class: "messages", "data-testid": "messages" });
    const banner = el("div", { class: "banner hidden", "data-testid": "error-banner" });
    const input = el("input", {
      type: "text",
      placeholder: scenario === 2 ? "say something (tags like :) welcome)" : "say something",
      "data-testid": "utterance-input",
    });
    const send = el("button", { "data-testid": "send-button" }, "send");
    const refresh = el("button", { "data-testid": "refresh-button" }, "refresh");

    const controls = this.labelControls(scenario);
    const doSend = () => void this.sendCurrent(input);
    send.addEventListener("click", doSend);
    input.addEventListener("keydown", (e) => {
      if ((e as KeyboardEvent).key === "Enter") doSend();
    });
    refresh.addEventListener("click", () => void this.refreshFromServer());

    this.root.append(
      el("div", { class: "chat", "data-testid": "chat-panel" },
        el("div", { class: "header" },
          el("span", {}, `scenario ${scenario}`),
          el("span", { class: "session-id", "data-testid": "session-id" },
            this.view.sessionId),
          refresh),
        messages, banner, controls,
        el("div", { class: "composer" }, input, send)),
    );
    this.paint();
  }

  private labelControls(scenario: Scenario): HTMLElement {
    const wrap = el("div", { class: "label-controls", "data-testid": "label-controls" });
    if (scenario === 1) {
      // fixed mode only: a generic / non-generic toggle
      const toggle = el("select", { "data-testid": "generic-toggle" });
      toggle.append(
        el("option", { value: "0" }, "non-generic"),
        el("option", { value: "1" }, "generic"),
      );
      toggle.value = String(this.control.fixedValue);
      toggle.addEventListener("change", () => {
        this.control = { mode: "fixed", fixedValue: Number(toggle.value) };
      });
      wrap.append(el("label", {}, "reply style "), toggle);
      return wrap;
    }
    const mode = el("select", { "data-testid": "mode-select" });
    for (const m of allowedModes(scenario)) {
      mode.append(el("option", { value: m }, m === "predict" ? "predict label" : "fix label"));
    }
    mode.value = this.control.mode;
    const sentiment = el("select", { "data-testid": "sentiment-select" });
    for (const s of SENTIMENTS) {
      sentiment.append(el("option", { value: s }, `${SENTIMENT_TAGS[s]} ${s}`));
    }
    sentiment.value = String(
      typeof this.control.fixedValue === "string" ? this.control.fixedValue : "positive",
    );
    sentiment.disabled = this.control.mode !== "fixed";
    const sync = () => {
      sentiment.disabled = mode.value !== "fixed";
      this.control = {
        mode: mode.value === "fixed" ? "fixed" : "predict",
        fixedValue: sentiment.value as LabelValue,
      };
    };
    mode.addEventListener("change", sync);
    sentiment.addEventListener("change", sync);
    wrap.append(el("label", {}, "label "), mode, sentiment);
    return wrap;
  }

  /** Re-render the message list and input state from this.view. */
  private paint(): void {
    if (!this.view) return;
    const messages = this.root.querySelector('[data-testid="messages"]');
    const banner = this.root.querySelector('[data-testid="error-banner"]');
    const input = this.root.querySelector<HTMLInputElement>('[data-testid="utterance-input"]');
    const send = this.root.querySelector<HTMLButtonElement>('[data-testid="send-button"]');
    if (!messages || !banner || !input || !send) return;
    messages.innerHTML = "";
    for (const m of this.view.messages) {
      messages.append(messageNode(this.view.scenario, m));
    }
    if (this.view.error) {
      banner.textContent = this.view.error;
      banner.classList.remove("hidden");
    } else {
      banner.textContent = "";
      banner.classList.add("hidden");
    }
    input.disabled = this.view.pending;
    send.disabled = this.view.pending;
  }

  async sendCurrent(input: HTMLInputElement): Promise<void> {
    if (!this.view || !this.api) return;
    const text = input.value;
    if (!canSend(this.view, text)) return; // pending or empty: no request
    this.view = beginTurn(this.view, text);
    input.value = "";
    this.paint();
    try {
      const body = buildTurnBody(this.view.scenario, this.control, text.trim());
      const resp = await this.api.sendTurn(this.view.sessionId, body);
      this.view = completeTurn(this.view, resp);
    } catch (e) {
      const msg = e instanceof ApiError ? e.message : String(e);
      this.view = failTurn(this.view, msg);
    }
    this.paint();
  }

  async refreshFromServer(): Promise<void> {
    if (!this.view || !this.api) return;
    try {
      const transcript = await this.api.getTranscript(this.view.sessionId);
      this.view = fromTranscript(transcript);
    } catch (e) {
      this.view = failTurn(this.view, e instanceof ApiError ? e.message : String(e));
    }
    this.paint();
  }
}

export function mountApp(root: HTMLElement): ChatApp {
  return new ChatApp(root);
}
