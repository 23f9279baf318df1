// Pending-review queue state. Reviews apply optimistically: the card leaves
// the queue before the wire answers and comes back (with an inline message)
// if the service refuses. Invalid actions are blocked here and never reach
// the network.

import type { ApiClient } from './api.js';
import { ApiError } from './api.js';
import type { OutfitCard, ReviewAction, ReviewReceipt } from './types.js';

export interface QueueEntry {
  card: OutfitCard;
  error: string | null;
  busy: boolean;
}

export type ReviewOutcome =
  | { kind: 'applied'; card: ReviewReceipt }
  | { kind: 'blocked'; message: string }
  | { kind: 'rejected'; message: string; refreshed: boolean };

export function validateAction(action: ReviewAction): string | null {
  if (!action.outfit_id) {
    return 'outfit id is missing';
  }
  if (action.verdict !== 'approved' && action.verdict !== 'rejected') {
    return 'verdict must be approved or rejected';
  }
  if (action.verdict === 'rejected' && !action.reason) {
    return 'rejection needs a reason (coherence or variety)';
  }
  if (!action.reviewer.trim()) {
    return 'reviewer name is required';
  }
  return null;
}

export class PendingQueue {
  private readonly client: ApiClient;
  private entries: QueueEntry[] = [];
  divisionFilter: string | null = null;
  onChange: (() => void) | null = null;

  constructor(client: ApiClient) {
    this.client = client;
  }

  private notify(): void {
    this.onChange?.();
  }

  async load(): Promise<void> {
    const cards = await this.client.listOutfits('pending');
    this.entries = cards.map((card) => ({ card, error: null, busy: false }));
    this.notify();
  }

  /** Every pending entry, unfiltered. */
  all(): readonly QueueEntry[] {
    return this.entries;
  }

  /** Entries whose anchor item belongs to the selected division. */
  visible(): readonly QueueEntry[] {
    if (!this.divisionFilter) {
      return this.entries;
    }
    return this.entries.filter((e) => anchorDivision(e.card) === this.divisionFilter);
  }

  size(): number {
    return this.entries.length;
  }

  find(outfitId: string): QueueEntry | undefined {
    return this.entries.find((e) => e.card.outfit_id === outfitId);
  }

  async review(action: ReviewAction): Promise<ReviewOutcome> {
    const message = validateAction(action);
    const index = this.entries.findIndex((e) => e.card.outfit_id === action.outfit_id);
    if (message !== null) {
      if (index >= 0) {
        const entry = this.entries[index]!;
        entry.error = message;
        this.notify();
      }
      return { kind: 'blocked', message };
    }
    if (index < 0) {
      return { kind: 'blocked', message: `outfit ${action.outfit_id} is not in the queue` };
    }

    const [entry] = this.entries.splice(index, 1);
    this.notify();
    try {
      const card = await this.client.review(action);
      return { kind: 'applied', card };
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // someone else reviewed it; the card is genuinely gone
        await this.load();
        return { kind: 'rejected', message: err.message, refreshed: true };
      }
      // roll the optimistic removal back where it was
      const restored: QueueEntry = {
        card: entry!.card,
        error: err instanceof Error ? err.message : String(err),
        busy: false,
      };
      this.entries.splice(Math.min(index, this.entries.length), 0, restored);
      this.notify();
      return {
        kind: 'rejected',
        message: restored.error ?? 'review failed',
        refreshed: false,
      };
    }
  }
}

export function anchorDivision(card: OutfitCard): string | null {
  const anchorId = typeof card.anchor_id === 'string' ? card.anchor_id : card.item_ids[0];
  const item = card.items.find((i) => i.product_id === anchorId);
  return item ? item.division : null;
}
