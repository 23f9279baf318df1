import type { FetchLike } from '../src/api.js';
import type { ItemView, OutfitCard } from '../src/types.js';

export function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { 'Content-Type': 'application/json' },
  });
}

export interface Deferred<T> {
  promise: Promise<T>;
  resolve: (value: T) => void;
  reject: (err: unknown) => void;
}

export function deferred<T>(): Deferred<T> {
  let resolve!: (value: T) => void;
  let reject!: (err: unknown) => void;
  const promise = new Promise<T>((res, rej) => {
    resolve = res;
    reject = rej;
  });
  return { promise, resolve, reject };
}

export function item(productId: string, division: string): ItemView {
  return {
    product_id: productId,
    division,
    category: 'tee',
    color: 'navy',
    title: `${division} ${productId}`,
    image_uri: `img/${productId}.jpg`,
  };
}

export function card(outfitId: string, divisions: string[], anchorId?: string): OutfitCard {
  const items = divisions.map((d, i) => item(`${outfitId}-i${i}`, d));
  return {
    outfit_id: outfitId,
    item_ids: items.map((i) => i.product_id),
    source: 'generated',
    verdict: 'pending',
    reason: null,
    items,
    ...(anchorId !== undefined ? { anchor_id: anchorId } : {}),
  };
}

export interface RecordedCall {
  url: string;
  init?: RequestInit;
}

/** Fake fetch that pops canned responses in order and records every call. */
export function scriptedFetch(
  responses: (Response | (() => Promise<Response>))[],
): { fetch: FetchLike; calls: RecordedCall[] } {
  const calls: RecordedCall[] = [];
  const queue = [...responses];
  const impl: FetchLike = (url, init) => {
    calls.push({ url, init });
    const next = queue.shift();
    if (!next) {
      throw new Error(`unexpected request: ${url}`);
    }
    return typeof next === 'function' ? next() : Promise.resolve(next);
  };
  return { fetch: impl, calls };
}
