// End-to-end checks against a real service process. The suite seeds a small
// data directory, launches the HTTP service, and drives it exactly the way
// the browser modules do: through ApiClient over the wire.

import { spawn, execFile, type ChildProcess } from 'node:child_process';
import { mkdtemp, rm } from 'node:fs/promises';
import { tmpdir } from 'node:os';
import { join } from 'node:path';
import { fileURLToPath } from 'node:url';
import { promisify } from 'node:util';
import { afterAll, beforeAll, describe, expect, it } from 'vitest';

import { ApiClient, type FetchLike } from '../src/api.js';
import { PendingQueue } from '../src/queue.js';
import { WhatIfPanel } from '../src/whatif.js';
import type { AppearanceSnapshot, Metrics, RecommendResponse } from '../src/types.js';

const execFileAsync = promisify(execFile);
const HERE = fileURLToPath(new URL('.', import.meta.url));
const REPO_ROOT = join(HERE, '..', '..');
const PORT = 18300 + (process.pid % 500);
const BASE = `http://127.0.0.1:${PORT}`;

let dataDir: string;
let server: ChildProcess | null = null;
let serverLog = '';

async function waitForService(): Promise<void> {
  for (let attempt = 0; attempt < 120; attempt += 1) {
    try {
      const res = await fetch(`${BASE}/v1/healthz`);
      if (res.ok) return;
    } catch {
      // not listening yet
    }
    await new Promise((r) => setTimeout(r, 500));
  }
  throw new Error(`service never came up on ${BASE}\n${serverLog}`);
}

beforeAll(async () => {
  dataDir = await mkdtemp(join(tmpdir(), 'curation-e2e-'));
  await execFileAsync(
    'python3',
    [
      join(REPO_ROOT, 'scripts', 'seed_demo.py'),
      '--data-dir', dataDir,
      '--products', '120',
      '--outfits', '240',
      '--seed', '7',
      '--epochs', '2',
    ],
    { cwd: REPO_ROOT, timeout: 150_000 },
  );
  server = spawn(
    'trendgen',
    ['--data-dir', dataDir, 'serve', '--port', String(PORT)],
    { cwd: REPO_ROOT, stdio: ['ignore', 'pipe', 'pipe'] },
  );
  server.stdout?.on('data', (chunk: Buffer) => {
    serverLog += chunk.toString();
  });
  server.stderr?.on('data', (chunk: Buffer) => {
    serverLog += chunk.toString();
  });
  await waitForService();
});

afterAll(async () => {
  if (server && server.exitCode === null) {
    server.kill('SIGTERM');
    await new Promise<void>((resolve) => {
      const force = setTimeout(() => {
        server?.kill('SIGKILL');
        resolve();
      }, 5_000);
      server?.once('exit', () => {
        clearTimeout(force);
        resolve();
      });
    });
  }
  if (dataDir) {
    await rm(dataDir, { recursive: true, force: true });
  }
});

async function anyProductId(client: ApiClient): Promise<string> {
  const outfits = await client.listOutfits();
  const first = outfits[0]?.items[0];
  if (!first) throw new Error('seeded service has no outfit items');
  return first.product_id;
}

describe('curation flow against the live service', () => {
  it('serves a trained catalog', async () => {
    const client = new ApiClient(BASE);
    const health = await client.healthz();
    expect(health.status).toBe('ok');
    expect(health.products).toBe(120);
    expect(health.models).toBe(15);
  });

  it('approving removes the card, persists, and feeds the next training run', async () => {
    const client = new ApiClient(BASE);
    const anchor = await anyProductId(client);
    await client.recommend(anchor, 3, 1.0); // put some cards in the queue

    const queue = new PendingQueue(client);
    await queue.load();
    const before = queue.size();
    expect(before).toBeGreaterThanOrEqual(3);
    const target = queue.all()[0]!.card;

    const metricsBefore = (await client.metrics()) as Metrics;
    const outcome = await queue.review({
      outfit_id: target.outfit_id,
      verdict: 'approved',
      reviewer: 'e2e',
    });
    expect(outcome.kind).toBe('applied');
    expect(queue.size()).toBe(before - 1);
    expect(queue.find(target.outfit_id)).toBeUndefined();

    // the verdict persisted server-side
    const approved = await client.listOutfits('approved');
    expect(approved.map((c) => c.outfit_id)).toContain(target.outfit_id);
    const metricsAfter = (await client.metrics()) as Metrics;
    expect(metricsAfter.outfits['approved']).toBe(
      (metricsBefore.outfits['approved'] ?? 0) + 1,
    );

    // and the approved pool (which is exactly what training reads) is
    // consumed by the next run: a fresh train call succeeds and swaps models
    const trainRes = await fetch(`${BASE}/v1/train`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ pairing: 'tops:bottoms', epochs: 1 }),
    });
    expect(trainRes.ok).toBe(true);
    const trained = (await trainRes.json()) as {
      trained: string[];
      approved: number;
      version: number;
    };
    expect(trained.trained).toEqual(['Tops:Bottoms']);
    // the pool the run consumed includes the outfit we just approved
    expect(trained.approved).toBe(metricsAfter.outfits['approved']);
    expect(trained.version).toBe(metricsBefore.registry_version + 1);
  });

  it('blocks a reasonless rejection client-side; the service never sees it', async () => {
    let wireCalls = 0;
    const counting: FetchLike = (url, init) => {
      wireCalls += 1;
      return fetch(url, init);
    };
    const client = new ApiClient(BASE, counting);
    const queue = new PendingQueue(client);
    await queue.load();
    expect(queue.size()).toBeGreaterThan(0);
    const target = queue.all()[0]!.card;
    const callsAfterLoad = wireCalls;

    const outcome = await queue.review({
      outfit_id: target.outfit_id,
      verdict: 'rejected',
      reviewer: 'e2e',
    });
    expect(outcome.kind).toBe('blocked');
    expect(wireCalls).toBe(callsAfterLoad); // nothing went over the wire
    expect(queue.find(target.outfit_id)?.error).toMatch(/reason/);

    // server still has it pending
    const stillPending = await new ApiClient(BASE).listOutfits('pending');
    expect(stillPending.map((c) => c.outfit_id)).toContain(target.outfit_id);

    // with a reason it goes through
    const done = await queue.review({
      outfit_id: target.outfit_id,
      verdict: 'rejected',
      reason: 'variety',
      reviewer: 'e2e',
    });
    expect(done.kind).toBe('applied');
  });
});

describe('what-if fidelity against the live service', () => {
  it('shows the lambda=0 response item-for-item and badges matching appearance', async () => {
    const captured: { url: string; body: unknown }[] = [];
    const capturing: FetchLike = async (url, init) => {
      const res = await fetch(url, init);
      captured.push({ url, body: await res.clone().json() });
      return res;
    };
    const client = new ApiClient(BASE, capturing);
    const anchor = await anyProductId(client);

    const panel = new WhatIfPanel(client);
    const outcome = await panel.run(anchor, 0);
    expect(outcome).toEqual({ applied: true, stale: false });
    expect(panel.state.lambda).toBe(0);

    // what the panel holds is byte-for-byte what the service answered
    const wire = captured.find((c) => c.url.includes('/v1/recommend/'));
    expect(wire).toBeDefined();
    const wireBody = wire!.body as RecommendResponse;
    expect(wireBody.lambda).toBe(0);
    expect(panel.state.response).toEqual(wireBody);
    for (const [i, outfit] of wireBody.outfits.entries()) {
      expect(panel.state.response?.outfits[i]?.items).toEqual(outfit.items);
    }

    // badges mirror the appearance table as served right now
    const appearanceRes = await fetch(`${BASE}/v1/appearance`);
    const appearance = (await appearanceRes.json()) as AppearanceSnapshot;
    expect(panel.state.badges).toEqual(appearance.counts);
    for (const outfit of wireBody.outfits) {
      for (const item of outfit.items) {
        if (item.product_id === outfit.anchor_id) continue;
        expect(panel.badgeFor(item.product_id)).toBeGreaterThanOrEqual(1);
      }
    }
  });
});
