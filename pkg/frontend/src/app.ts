import { ReviewClient, ServiceError, feedbackBody } from "./client.js";
import { orderQueue, renderQueue } from "./queue.js";
import type { ReviewItem, Verdict } from "./types.js";

export interface View {
  setQueueHtml(html: string): void;
  setBanner(message: string | null): void;
  toast(message: string): void;
}

/**
 * Keeps the pending-review list in sync with the service. Decisions are
 * optimistic: the item disappears immediately and is restored with an error
 * toast if the POST fails.
 */
export class ReviewController {
  private items: ReviewItem[] = [];

  constructor(private readonly client: ReviewClient, private readonly view: View) {}

  async refresh(): Promise<void> {
    try {
      this.items = orderQueue(await this.client.queue());
      this.view.setBanner(null);
      this.view.setQueueHtml(renderQueue(this.items));
    } catch (err) {
      if (err instanceof ServiceError) {
        this.view.setBanner(`Service unavailable: ${err.message}`);
        return;
      }
      throw err;
    }
  }

  item(mentionId: string): ReviewItem | undefined {
    return this.items.find((i) => i.mention_id === mentionId);
  }

  async decide(mentionId: string, verdict: Verdict, correctedId?: string): Promise<void> {
    const item = this.item(mentionId);
    if (!item) {
      return;
    }
    const body = feedbackBody(mentionId, verdict, correctedId);
    this.items = this.items.filter((i) => i.mention_id !== mentionId);
    this.view.setQueueHtml(renderQueue(this.items));
    try {
      await this.client.submit(body);
    } catch (err) {
      this.items = orderQueue([...this.items, item]);
      this.view.setQueueHtml(renderQueue(this.items));
      this.view.toast(`Feedback failed, item restored: ${String(err)}`);
    }
  }
}

/** Browser wiring: event delegation over the rendered queue. */
export function mount(root: HTMLElement, baseUrl: string, refreshMs = 5000): ReviewController {
  const queueEl = root.querySelector<HTMLElement>("#queue");
  const bannerEl = root.querySelector<HTMLElement>("#banner");
  const toastEl = root.querySelector<HTMLElement>("#toast");
  if (!queueEl || !bannerEl || !toastEl) {
    throw new Error("mount point is missing #queue, #banner or #toast");
  }
  const controller = new ReviewController(new ReviewClient(baseUrl), {
    setQueueHtml: (html) => {
      queueEl.innerHTML = html;
    },
    setBanner: (message) => {
      bannerEl.textContent = message ?? "";
      bannerEl.style.display = message ? "block" : "none";
    },
    toast: (message) => {
      toastEl.textContent = message;
      toastEl.style.display = "block";
      setTimeout(() => {
        toastEl.style.display = "none";
      }, 4000);
    },
  });

  queueEl.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    const mentionId = target.dataset.mention;
    if (!mentionId) {
      return;
    }
    if (target.classList.contains("confirm")) {
      void controller.decide(mentionId, "confirm");
    } else if (target.classList.contains("reject")) {
      void controller.decide(mentionId, "reject_all");
    } else if (target.classList.contains("pick")) {
      void controller.decide(mentionId, "correct", target.dataset.expert);
    }
  });

  void controller.refresh();
  setInterval(() => void controller.refresh(), refreshMs);
  return controller;
}
