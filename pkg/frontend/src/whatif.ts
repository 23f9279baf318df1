// What-if explorer: re-recommend at a chosen lambda and show appearance
// badges. Slider moves can overlap in flight; each request takes a sequence
// number and only the newest one may publish its response.

import type { ApiClient } from './api.js';
import type { RecommendResponse } from './types.js';

export interface WhatIfState {
  productId: string | null;
  lambda: number;
  loading: boolean;
  response: RecommendResponse | null;
  badges: Record<string, number>;
  error: string | null;
}

export type RunResult = { applied: boolean; stale: boolean };

export class WhatIfPanel {
  private readonly client: ApiClient;
  private seq = 0;
  readonly state: WhatIfState = {
    productId: null,
    lambda: 1.0,
    loading: false,
    response: null,
    badges: {},
    error: null,
  };
  onChange: (() => void) | null = null;

  constructor(client: ApiClient) {
    this.client = client;
  }

  private notify(): void {
    this.onChange?.();
  }

  async run(productId: string, lambda: number, count = 3): Promise<RunResult> {
    const ticket = ++this.seq;
    this.state.productId = productId;
    this.state.lambda = lambda;
    this.state.loading = true;
    this.state.error = null;
    this.notify();
    try {
      const response = await this.client.recommend(productId, count, lambda);
      const appearance = await this.client.appearance();
      if (ticket !== this.seq) {
        return { applied: false, stale: true }; // a newer request owns the panel
      }
      this.state.response = response;
      this.state.badges = appearance.counts;
      this.state.loading = false;
      this.notify();
      return { applied: true, stale: false };
    } catch (err) {
      if (ticket !== this.seq) {
        return { applied: false, stale: true };
      }
      this.state.loading = false;
      this.state.error = err instanceof Error ? err.message : String(err);
      this.notify();
      return { applied: false, stale: false };
    }
  }

  badgeFor(productId: string): number {
    return this.state.badges[productId] ?? 0;
  }
}
