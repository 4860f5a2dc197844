// Wire types mirroring the linking service's JSON payloads. The client
// treats everything it receives as read-only.

export interface RankedCandidate {
  expert_id: string;
  score: number;
}

export interface ReviewItem {
  mention_id: string;
  name: string;
  support: string[];
  ranked: RankedCandidate[];
  accepted: string | null;
}

export interface QueuePayload {
  items: ReviewItem[];
}

export interface HealthPayload {
  status: string;
  model_version: number;
}

export type Verdict = "confirm" | "correct" | "reject_all";

export interface FeedbackBody {
  mention_id: string;
  verdict: Verdict;
  corrected_expert_id?: string;
}
