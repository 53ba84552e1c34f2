import { ApiClient, ApiError, TurnResult } from "./api.js";

export interface Bubble {
  speaker: "user" | "system";
  text: string;
  /** detail panel attached to system bubbles */
  result?: TurnResult;
}

export interface ChatState {
  sessionId: string | null;
  bubbles: Bubble[];
  entityMemory: number[];
  pending: boolean;
  /** user text that failed to send; shown with a retry affordance */
  failed: string | null;
  notice: string | null;
}

const emptyState = (): ChatState => ({
  sessionId: null,
  bubbles: [],
  entityMemory: [],
  pending: false,
  failed: null,
  notice: null,
});

/** All client behavior; the view is a pure function of this state.
 *
 * No recommendation logic lives here: every rendered fact comes verbatim
 * from server responses.
 */
export class ChatStore {
  state: ChatState = emptyState();
  private listeners: Array<(s: ChatState) => void> = [];

  constructor(private readonly api: ApiClient) {}

  subscribe(fn: (s: ChatState) => void): void {
    this.listeners.push(fn);
    fn(this.state);
  }

  private emit(patch: Partial<ChatState>): void {
    this.state = { ...this.state, ...patch };
    for (const fn of this.listeners) fn(this.state);
  }

  /** One in-flight request per session: callers must check `pending`. */
  async send(text: string): Promise<void> {
    if (this.state.pending || !text.trim()) return;
    this.emit({ pending: true, failed: null, notice: null });
    try {
      if (this.state.sessionId === null) {
        this.emit({ sessionId: await this.api.createSession() });
      }
      const result = await this.api.postMessage(this.state.sessionId!, text);
      const snapshot = await this.api.getState(this.state.sessionId!);
      this.emit({
        bubbles: [
          ...this.state.bubbles,
          { speaker: "user", text },
          { speaker: "system", text: result.response, result },
        ],
        entityMemory: snapshot.entity_memory,
        pending: false,
      });
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        // the server lost our session; start a fresh one with a notice
        this.state = emptyState();
        this.emit({ notice: "session expired, started a new one" });
        return;
      }
      this.emit({ pending: false, failed: text });
    }
  }

  async retry(): Promise<void> {
    const text = this.state.failed;
    if (text !== null) await this.send(text);
  }

  async reset(): Promise<void> {
    this.state = emptyState();
    this.emit({ sessionId: await this.api.createSession() });
  }
}
