import type { FeedbackBody, HealthPayload, QueuePayload, ReviewItem, Verdict } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceError extends Error {
  constructor(message: string, readonly status?: number) {
    super(message);
  }
}

/** One decision maps to exactly one POST /feedback body. */
export function feedbackBody(
  mentionId: string,
  verdict: Verdict,
  correctedId?: string,
): FeedbackBody {
  if (verdict === "correct") {
    if (!correctedId) {
      throw new Error("a correction needs the corrected expert id");
    }
    return { mention_id: mentionId, verdict, corrected_expert_id: correctedId };
  }
  if (correctedId) {
    throw new Error(`verdict ${verdict} does not take a corrected expert id`);
  }
  return { mention_id: mentionId, verdict };
}

export class ReviewClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.baseUrl + path, init);
    } catch (err) {
      throw new ServiceError(`service unreachable: ${String(err)}`);
    }
    if (!response.ok) {
      throw new ServiceError(`${path} failed with ${response.status}`, response.status);
    }
    return response.json();
  }

  async health(): Promise<HealthPayload> {
    return (await this.request("/health")) as HealthPayload;
  }

  async queue(): Promise<ReviewItem[]> {
    const payload = (await this.request("/queue")) as QueuePayload;
    return payload.items;
  }

  async submit(body: FeedbackBody): Promise<void> {
    await this.request("/feedback", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }
}
