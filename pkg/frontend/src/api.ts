/** Typed client for the chat service's JSON API. */

export type Scenario = 1 | 2;
export type Sentiment = "positive" | "negative" | "neutral";
/** Scenario 1 labels travel as 0|1; scenario 2 labels as sentiment names. */
export type LabelValue = number | Sentiment;
export type LabelSource = "fixed" | "predicted";

export interface SessionInfo {
  session_id: string;
  scenario: Scenario;
  turn_count: number;
}

export interface TurnResponse {
  response: string;
  label_used: LabelValue;
  label_source: LabelSource;
  label_distribution?: Record<Sentiment, number>;
  log_prob: number;
  turn_index: number;
  truncated: boolean;
}

export interface TranscriptEntry {
  turn_index: number;
  speaker: "user" | "model";
  text: string;
  label_used?: LabelValue;
  label_source?: LabelSource;
  label_distribution?: Record<Sentiment, number>;
  log_prob?: number;
  truncated?: boolean;
}

export interface Transcript {
  session_id: string;
  scenario: Scenario;
  turns: TranscriptEntry[];
}

export interface TurnRequestBody {
  utterance: string;
  label_override?: LabelValue;
  deterministic?: boolean;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function errorMessage(res: Response): Promise<string> {
  try {
    const body = (await res.json()) as { detail?: unknown };
    if (typeof body.detail === "string") return body.detail;
    if (Array.isArray(body.detail)) {
      return body.detail
        .map((d) => {
          const e = d as { field?: string; message?: string };
          return e.field ? `${e.field}: ${e.message ?? ""}` : JSON.stringify(d);
        })
        .join("; ");
    }
  } catch {
    /* non-JSON body */
  }
  return `server returned ${res.status}`;
}

export class ChatApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let res: Response;
    try {
      res = await this.fetchFn(this.baseUrl.replace(/\/$/, "") + path, init);
    } catch (e) {
      throw new ApiError(0, `cannot reach server: ${String(e)}`);
    }
    if (!res.ok) {
      throw new ApiError(res.status, await errorMessage(res));
    }
    return (await res.json()) as T;
  }

  health(): Promise<{ status: string; scenario: Scenario }> {
    return this.request("/health");
  }

  createSession(scenario: Scenario): Promise<SessionInfo> {
    return this.request("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ scenario }),
    });
  }

  sendTurn(sessionId: string, body: TurnRequestBody): Promise<TurnResponse> {
    return this.request(`/sessions/${sessionId}/turns`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  getTranscript(sessionId: string): Promise<Transcript> {
    return this.request(`/sessions/${sessionId}`);
  }
}
