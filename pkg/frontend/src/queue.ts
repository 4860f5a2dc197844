import type { ReviewItem } from "./types.js";

/**
 * Gap between the two best candidate scores. Small gaps mean the model was
 * nearly undecided, so those reviews carry the most label value. Items with
 * fewer than two candidates have nothing to disambiguate and sort last.
 */
export function topTwoGap(item: ReviewItem): number {
  if (item.ranked.length < 2) {
    return Number.POSITIVE_INFINITY;
  }
  return item.ranked[0].score - item.ranked[1].score;
}

/** Uncertainty-first order: ascending top-2 gap, ties by mention id. */
export function orderQueue(items: readonly ReviewItem[]): ReviewItem[] {
  return [...items].sort((a, b) => {
    const gap = topTwoGap(a) - topTwoGap(b);
    if (gap !== 0 && !Number.isNaN(gap)) {
      return gap < 0 ? -1 : 1;
    }
    return a.mention_id < b.mention_id ? -1 : a.mention_id > b.mention_id ? 1 : 0;
  });
}

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Render one pending decision; candidates keep the service's order. */
export function renderItem(item: ReviewItem): string {
  const gap = topTwoGap(item);
  const accepted = item.accepted === null
    ? '<span class="below-threshold">below threshold</span>'
    : `<span class="accepted">${escapeHtml(item.accepted)}</span>`;
  const snippets = item.support
    .map((s) => `<li class="snippet">${escapeHtml(s)}</li>`)
    .join("");
  const candidates = item.ranked
    .map(
      (c, i) =>
        `<li class="candidate" data-expert="${escapeHtml(c.expert_id)}">` +
        `<button class="pick" data-mention="${escapeHtml(item.mention_id)}" ` +
        `data-expert="${escapeHtml(c.expert_id)}">#${i + 1} ` +
        `${escapeHtml(c.expert_id)}</button> ` +
        `<span class="score">${c.score.toFixed(4)}</span></li>`,
    )
    .join("");
  return (
    `<article class="review-item" data-mention="${escapeHtml(item.mention_id)}" ` +
    `data-gap="${Number.isFinite(gap) ? gap.toFixed(6) : "none"}">` +
    `<header><h2>${escapeHtml(item.name)}</h2>${accepted}</header>` +
    `<ul class="support">${snippets}</ul>` +
    `<ol class="candidates">${candidates}</ol>` +
    `<footer>` +
    `<button class="confirm" data-mention="${escapeHtml(item.mention_id)}">Confirm</button>` +
    `<button class="reject" data-mention="${escapeHtml(item.mention_id)}">Reject all</button>` +
    `</footer></article>`
  );
}

/** Render the whole queue, most ambiguous decisions first. */
export function renderQueue(items: readonly ReviewItem[]): string {
  if (items.length === 0) {
    return '<p class="empty">No pending reviews.</p>';
  }
  return orderQueue(items).map(renderItem).join("\n");
}
