// Thin typed client over the /v1 endpoints. fetch is injectable so tests
// can fake the wire without a server.

import type {
  AppearanceSnapshot,
  ErrorBody,
  Metrics,
  OutfitCard,
  RecommendResponse,
  ReviewAction,
  ReviewReceipt,
} from './types.js';

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  readonly status: number;
  readonly code: string;
  readonly detail: unknown;

  constructor(status: number, body: ErrorBody) {
    super(body.message);
    this.status = status;
    this.code = body.code;
    this.detail = body.detail;
  }
}

async function parseError(res: Response): Promise<ApiError> {
  let body: ErrorBody = { code: 'unknown', message: `HTTP ${res.status}`, detail: null };
  try {
    const parsed = (await res.json()) as Partial<ErrorBody>;
    if (typeof parsed.code === 'string' && typeof parsed.message === 'string') {
      body = { code: parsed.code, message: parsed.message, detail: parsed.detail ?? null };
    }
  } catch {
    // non-JSON error body; keep the fallback
  }
  return new ApiError(res.status, body);
}

export class ApiClient {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, '');
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(`${this.base}${path}`, init);
    if (!res.ok) {
      throw await parseError(res);
    }
    return (await res.json()) as T;
  }

  healthz(): Promise<{ status: string; products: number; models: number }> {
    return this.request('/v1/healthz');
  }

  listOutfits(verdict?: 'pending' | 'approved' | 'rejected'): Promise<OutfitCard[]> {
    const query = verdict ? `?verdict=${verdict}` : '';
    return this.request<{ outfits: OutfitCard[] }>(`/v1/outfits${query}`).then(
      (body) => body.outfits,
    );
  }

  review(action: ReviewAction): Promise<ReviewReceipt> {
    return this.request('/v1/review', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(action),
    });
  }

  recommend(productId: string, count: number, lambda: number): Promise<RecommendResponse> {
    const id = encodeURIComponent(productId);
    return this.request(`/v1/recommend/${id}?count=${count}&lambda=${lambda}`);
  }

  appearance(): Promise<AppearanceSnapshot> {
    return this.request('/v1/appearance');
  }

  metrics(): Promise<Metrics> {
    return this.request('/v1/metrics');
  }
}
