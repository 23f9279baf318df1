// Shapes mirroring the /v1 JSON bodies. The UI never derives rankings or
// counts itself; everything displayed comes from these responses.

export interface ItemView {
  product_id: string;
  division: string;
  category: string;
  color: string;
  title: string;
  image_uri: string;
}

export interface ReviewReceipt {
  outfit_id: string;
  item_ids: string[];
  source: 'generated' | 'expert';
  verdict: 'pending' | 'approved' | 'rejected';
  reason: 'coherence' | 'variety' | null;
  anchor_id?: string;
  created_at?: string;
  [extra: string]: unknown;
}

// /v1/outfits listings add the resolved item details.
export interface OutfitCard extends ReviewReceipt {
  items: ItemView[];
}

export interface RecommendedOutfit {
  outfit_id: string;
  anchor_id: string;
  lambda: number;
  duplicated: boolean;
  created_at: string;
  items: ItemView[];
}

export interface RecommendResponse {
  product_id: string;
  lambda: number;
  outfits: RecommendedOutfit[];
}

export type ReviewVerdict = 'approved' | 'rejected';
export type RejectReason = 'coherence' | 'variety';

export interface ReviewAction {
  outfit_id: string;
  verdict: ReviewVerdict;
  reason?: RejectReason;
  reviewer: string;
}

export interface AppearanceSnapshot {
  counts: Record<string, number>;
  entries: number;
}

export interface Metrics {
  products: Record<string, number>;
  outfits: Record<string, number>;
  approval_rate: number | null;
  diversity: number | null;
  registry_version: number;
  appearance_entries: number;
}

export interface ErrorBody {
  code: string;
  message: string;
  detail: unknown;
}
