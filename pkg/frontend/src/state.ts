/** Pure session-view state: the DOM layer renders this and nothing else.
 *
 * Invariants kept here: at most one in-flight turn per session, label badges
 * always carry the server's label verbatim, and a view rebuilt from the
 * server transcript renders identically to one built turn by turn.
 */
import type {
  LabelSource,
  LabelValue,
  Scenario,
  Sentiment,
  Transcript,
  TurnRequestBody,
  TurnResponse,
} from "./api.js";

export interface Message {
  speaker: "user" | "model";
  text: string;
  turnIndex: number;
  labelUsed?: LabelValue;
  labelSource?: LabelSource;
  labelDistribution?: Record<Sentiment, number>;
  pendingEcho?: boolean;
}

export interface LabelControl {
  mode: "predict" | "fixed";
  fixedValue: LabelValue;
}

export interface SessionView {
  sessionId: string;
  scenario: Scenario;
  messages: Message[];
  pending: boolean;
  error: string | null;
}

export const SENTIMENTS: readonly Sentiment[] = ["positive", "negative", "neutral"];
export const SENTIMENT_TAGS: Record<Sentiment, string> = {
  positive: ":)",
  negative: ":(",
  neutral: ":P",
};

export function defaultControl(scenario: Scenario): LabelControl {
  // scenario 1 has no classifier: fixed mode only, non-generic by default
  return scenario === 1
    ? { mode: "fixed", fixedValue: 0 }
    : { mode: "predict", fixedValue: "positive" };
}

export function allowedModes(scenario: Scenario): ReadonlyArray<LabelControl["mode"]> {
  return scenario === 1 ? ["fixed"] : ["predict", "fixed"];
}

/** The label_override (if any) a request must carry under this control. */
export function overrideFor(scenario: Scenario, control: LabelControl): LabelValue | undefined {
  if (scenario === 1) return control.fixedValue; // always explicit: 0 or 1
  return control.mode === "fixed" ? control.fixedValue : undefined;
}

export function buildTurnBody(
  scenario: Scenario,
  control: LabelControl,
  text: string,
  deterministic = false,
): TurnRequestBody {
  const body: TurnRequestBody = { utterance: text };
  const override = overrideFor(scenario, control);
  if (override !== undefined) body.label_override = override;
  if (deterministic) body.deterministic = true;
  return body;
}

export function labelName(scenario: Scenario, label: LabelValue): string {
  if (scenario === 1) return label === 1 ? "generic" : "non-generic";
  return String(label);
}

/** Badge text, straight from the server's label fields. */
export function badgeText(scenario: Scenario, msg: Message): string {
  if (msg.labelUsed === undefined || msg.labelSource === undefined) return "";
  return `${msg.labelSource}: ${labelName(scenario, msg.labelUsed)}`;
}

export function newSessionView(sessionId: string, scenario: Scenario): SessionView {
  return { sessionId, scenario, messages: [], pending: false, error: null };
}

export function canSend(view: SessionView, text: string): boolean {
  return !view.pending && text.trim().length > 0;
}

/** Optimistically append the user message and mark the turn in flight. */
export function beginTurn(view: SessionView, text: string): SessionView {
  if (view.pending) throw new Error("a turn is already in flight");
  const echo: Message = {
    speaker: "user",
    text: text.trim(),
    turnIndex: nextTurnIndex(view),
    pendingEcho: true,
  };
  return { ...view, pending: true, error: null, messages: [...view.messages, echo] };
}

export function completeTurn(view: SessionView, resp: TurnResponse): SessionView {
  const messages = view.messages.map((m) =>
    m.pendingEcho ? { ...m, pendingEcho: false, turnIndex: resp.turn_index } : m,
  );
  messages.push({
    speaker: "model",
    text: resp.response,
    turnIndex: resp.turn_index,
    labelUsed: resp.label_used,
    labelSource: resp.label_source,
    labelDistribution: resp.label_distribution,
  });
  return { ...view, pending: false, messages };
}

/** Server state is untouched on failure: drop the echo, surface the error. */
export function failTurn(view: SessionView, error: string): SessionView {
  return {
    ...view,
    pending: false,
    error,
    messages: view.messages.filter((m) => !m.pendingEcho),
  };
}

export function clearError(view: SessionView): SessionView {
  return { ...view, error: null };
}

function nextTurnIndex(view: SessionView): number {
  let n = -1;
  for (const m of view.messages) n = Math.max(n, m.turnIndex);
  return n + 1;
}

/** Rebuild the view from GET /sessions/{id}; mirrors the server exactly. */
export function fromTranscript(transcript: Transcript): SessionView {
  const view = newSessionView(transcript.session_id, transcript.scenario);
  view.messages = transcript.turns.map((t) => ({
    speaker: t.speaker,
    text: t.text,
    turnIndex: t.turn_index,
    labelUsed: t.label_used,
    labelSource: t.label_source,
    labelDistribution: t.label_distribution,
  }));
  return view;
}
