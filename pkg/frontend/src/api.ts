import { z } from "zod";

export const RecommendationSchema = z.object({
  item_id: z.number(),
  name: z.string(),
  probability: z.number(),
});

export const TurnResultSchema = z.object({
  template: z.array(z.string()),
  slot_count: z.number(),
  recommendations: z.array(RecommendationSchema),
  response: z.string(),
  consistent: z.boolean(),
});

export const SnapshotSchema = z.object({
  id: z.string(),
  created_at: z.number(),
  history: z.array(z.object({ speaker: z.string(), text: z.string() })),
  entity_memory: z.array(z.number()),
  last_result: TurnResultSchema.nullable(),
});

export type Recommendation = z.infer<typeof RecommendationSchema>;
export type TurnResult = z.infer<typeof TurnResultSchema>;
export type Snapshot = z.infer<typeof SnapshotSchema>;

export class ApiError extends Error {
  constructor(message: string, readonly status?: number) {
    super(message);
  }
}

/** Thin typed wrapper over the service's HTTP contract. */
export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    let res: Response;
    try {
      res = await this.fetchFn(`${this.baseUrl}${path}`, init);
    } catch (err) {
      throw new ApiError(`network error: ${String(err)}`);
    }
    if (!res.ok) {
      throw new ApiError(`server returned ${res.status}`, res.status);
    }
    return res.json();
  }

  async createSession(): Promise<string> {
    const body = await this.request("/sessions", { method: "POST" });
    return z.object({ id: z.string() }).parse(body).id;
  }

  async postMessage(sessionId: string, text: string): Promise<TurnResult> {
    const body = await this.request(`/sessions/${sessionId}/messages`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ text }),
    });
    return TurnResultSchema.parse(body);
  }

  async getState(sessionId: string): Promise<Snapshot> {
    return SnapshotSchema.parse(await this.request(`/sessions/${sessionId}`));
  }
}
