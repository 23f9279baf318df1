// DOM wiring. All ranking, counting, and verdict state lives server-side;
// this file only renders the two state objects and forwards clicks.

import { ApiClient, ApiError } from './api.js';
import { PendingQueue } from './queue.js';
import { WhatIfPanel } from './whatif.js';
import type { OutfitCard, RejectReason } from './types.js';

const DIVISIONS = ['Tops', 'Bottoms', 'Footwear', 'Outerwear', 'Accessories'];

type TabKey = 'pending' | 'approved' | 'rejected' | 'whatif';

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function itemRow(item: { product_id: string; division: string; color: string; title: string;
                         image_uri: string },
                 badge?: number): HTMLElement {
  const row = el('div', 'item-row');
  if (item.image_uri) {
    const img = el('img', 'thumb');
    img.src = item.image_uri;
    img.alt = item.title;
    row.append(img);
  }
  row.append(
    el('span', 'item-division', item.division),
    el('span', 'item-title', item.title),
    el('span', `swatch swatch-${item.color}`, item.color),
  );
  if (badge !== undefined) {
    row.append(el('span', 'badge', `seen ${badge}x`));
  }
  return row;
}

class App {
  private readonly client: ApiClient;
  private readonly queue: PendingQueue;
  private readonly whatif: WhatIfPanel;
  private tab: TabKey = 'pending';
  private reviewed: OutfitCard[] = [];
  private readonly root: HTMLElement;

  constructor(root: HTMLElement, baseUrl: string) {
    this.root = root;
    this.client = new ApiClient(baseUrl);
    this.queue = new PendingQueue(this.client);
    this.whatif = new WhatIfPanel(this.client);
    this.queue.onChange = () => this.render();
    this.whatif.onChange = () => this.render();
  }

  private reviewer(): string {
    const input = document.getElementById('reviewer') as HTMLInputElement | null;
    return input?.value ?? '';
  }

  async start(): Promise<void> {
    await this.queue.load();
    this.render();
  }

  private async switchTab(tab: TabKey): Promise<void> {
    this.tab = tab;
    if (tab === 'approved' || tab === 'rejected') {
      this.reviewed = await this.client.listOutfits(tab);
    }
    this.render();
  }

  private async act(card: OutfitCard, verdict: 'approved' | 'rejected',
                    reason?: RejectReason): Promise<void> {
    const outcome = await this.queue.review({
      outfit_id: card.outfit_id,
      verdict,
      reason,
      reviewer: this.reviewer(),
    });
    if (outcome.kind === 'applied' && this.tab !== 'pending') {
      this.reviewed = await this.client.listOutfits(verdict);
    }
    this.render();
  }

  private pendingCard(entryCard: OutfitCard, error: string | null): HTMLElement {
    const box = el('article', 'card');
    box.append(el('h3', undefined, entryCard.outfit_id));
    for (const item of entryCard.items) {
      box.append(itemRow(item));
    }
    if (error) {
      box.append(el('p', 'error', error));
    }
    const controls = el('div', 'controls');
    const approve = el('button', 'approve', 'Approve');
    approve.onclick = () => void this.act(entryCard, 'approved');
    const reason = el('select') as HTMLSelectElement;
    reason.append(new Option('reason...', ''), new Option('coherence', 'coherence'),
                  new Option('variety', 'variety'));
    const reject = el('button', 'reject', 'Reject');
    reject.onclick = () =>
      void this.act(entryCard, 'rejected',
                    (reason.value || undefined) as RejectReason | undefined);
    controls.append(approve, reject, reason);
    box.append(controls);
    return box;
  }

  private renderPending(main: HTMLElement): void {
    const bar = el('div', 'filterbar');
    const filter = el('select') as HTMLSelectElement;
    filter.append(new Option('all divisions', ''));
    for (const d of DIVISIONS) filter.append(new Option(d, d));
    filter.value = this.queue.divisionFilter ?? '';
    filter.onchange = () => {
      this.queue.divisionFilter = filter.value || null;
      this.render();
    };
    bar.append(el('span', undefined, `${this.queue.size()} pending`), filter);
    main.append(bar);
    for (const entry of this.queue.visible()) {
      main.append(this.pendingCard(entry.card, entry.error));
    }
  }

  private renderReviewed(main: HTMLElement): void {
    for (const card of this.reviewed) {
      const box = el('article', 'card');
      const label = card.reason ? `${card.verdict} (${card.reason})` : card.verdict;
      box.append(el('h3', undefined, `${card.outfit_id} - ${label}`));
      for (const item of card.items) box.append(itemRow(item));
      main.append(box);
    }
  }

  private renderWhatIf(main: HTMLElement): void {
    const bar = el('div', 'filterbar');
    const product = el('input') as HTMLInputElement;
    product.placeholder = 'anchor product id';
    product.value = this.whatif.state.productId ?? '';
    const slider = el('input') as HTMLInputElement;
    slider.type = 'range';
    slider.min = '0';
    slider.max = '3';
    slider.step = '0.25';
    slider.value = String(this.whatif.state.lambda);
    const readout = el('span', 'lambda-readout', `lambda ${slider.value}`);
    const go = () => {
      if (product.value) {
        void this.whatif.run(product.value, Number(slider.value));
      }
    };
    slider.oninput = () => {
      readout.textContent = `lambda ${slider.value}`;
      go();
    };
    product.onchange = go;
    bar.append(product, slider, readout);
    main.append(bar);

    const state = this.whatif.state;
    if (state.loading) main.append(el('p', undefined, 'loading...'));
    if (state.error) main.append(el('p', 'error', state.error));
    if (state.response) {
      const strip = el('div', 'whatif-strip');
      for (const outfit of state.response.outfits) {
        const box = el('article', 'card');
        const flag = outfit.duplicated ? ' (duplicate fallback)' : '';
        box.append(el('h3', undefined, outfit.outfit_id + flag));
        for (const item of outfit.items) {
          box.append(itemRow(item, this.whatif.badgeFor(item.product_id)));
        }
        strip.append(box);
      }
      main.append(strip);
    }
  }

  render(): void {
    this.root.replaceChildren();
    const tabs = el('nav', 'tabs');
    const defs: [TabKey, string][] = [
      ['pending', `Pending (${this.queue.size()})`],
      ['approved', 'Approved'],
      ['rejected', 'Rejected'],
      ['whatif', 'What-if'],
    ];
    for (const [key, label] of defs) {
      const b = el('button', key === this.tab ? 'tab active' : 'tab', label);
      b.onclick = () => void this.switchTab(key);
      tabs.append(b);
    }
    this.root.append(tabs);
    const main = el('main');
    if (this.tab === 'pending') this.renderPending(main);
    else if (this.tab === 'whatif') this.renderWhatIf(main);
    else this.renderReviewed(main);
    this.root.append(main);
  }
}

export function mount(): void {
  const root = document.getElementById('app');
  if (!root) throw new Error('missing #app element');
  const base =
    (document.getElementById('base-url') as HTMLInputElement | null)?.value ??
    window.location.origin;
  const app = new App(root, base);
  void app.start().catch((err: unknown) => {
    const msg = err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
    root.replaceChildren(el('p', 'error', `failed to reach the service: ${msg}`));
  });
}

if (typeof document !== 'undefined' && document.getElementById('app')) {
  mount();
}
