import { Snapshot, TurnResult } from "../src/api.js";

interface StubSession {
  id: string;
  created_at: number;
  history: Array<{ speaker: string; text: string }>;
  entity_memory: number[];
  last_result: TurnResult | null;
}

/** In-memory double of the recommendation service's HTTP surface.
 *
 * Produces a `fetch`-compatible function so ApiClient can be exercised
 * without a real backend. Knobs let tests inject inconsistent turns,
 * server errors, and forgotten sessions.
 */
export class StubServer {
  sessions = new Map<string, StubSession>();
  requests: Array<{ method: string; path: string }> = [];
  /** next postMessage responds with consistent=false */
  nextInconsistent = false;
  /** every request fails with this status until cleared */
  failWith: number | null = null;
  private counter = 0;

  cannedResult(text: string): TurnResult {
    const consistent = !this.nextInconsistent;
    this.nextInconsistent = false;
    return {
      template: ["you", "might", "like", "[ITEM]", "or", "[ITEM]"],
      slot_count: 2,
      recommendations: [
        { item_id: 4, name: "item_4", probability: 0.61 },
        { item_id: 9, name: "item_9", probability: 0.22 },
      ],
      response: `you might like item_4 or item_9 (re: ${text})`,
      consistent,
    };
  }

  fetch: typeof fetch = async (input, init) => {
    const url = new URL(String(input));
    const method = init?.method ?? "GET";
    this.requests.push({ method, path: url.pathname });

    if (this.failWith !== null) {
      return new Response("boom", { status: this.failWith });
    }

    if (method === "POST" && url.pathname === "/sessions") {
      const id = `s${++this.counter}`;
      this.sessions.set(id, {
        id,
        created_at: 1700000000 + this.counter,
        history: [],
        entity_memory: [],
        last_result: null,
      });
      return Response.json({ id });
    }

    const turn = url.pathname.match(/^\/sessions\/([^/]+)\/messages$/);
    if (method === "POST" && turn) {
      const session = this.sessions.get(turn[1]!);
      if (!session) return new Response("gone", { status: 404 });
      const { text } = JSON.parse(String(init?.body)) as { text: string };
      const result = this.cannedResult(text);
      session.history.push({ speaker: "user", text });
      session.history.push({ speaker: "system", text: result.response });
      for (const rec of result.recommendations) {
        if (!session.entity_memory.includes(rec.item_id)) {
          session.entity_memory.push(rec.item_id);
        }
      }
      session.last_result = result;
      return Response.json(result);
    }

    const state = url.pathname.match(/^\/sessions\/([^/]+)$/);
    if (method === "GET" && state) {
      const session = this.sessions.get(state[1]!);
      if (!session) return new Response("gone", { status: 404 });
      return Response.json(session satisfies Snapshot);
    }

    return new Response("not found", { status: 404 });
  };
}
