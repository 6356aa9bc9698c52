/**
 * Blind review controller.
 * Wires the item payload into the two-panel viewer, records verdicts, and
 * advances only after the server acknowledges a write. The client never
 * sees or asks for source identities; unblinding lives in the CSV export.
 */

import { ApiError, Choice, isComplete, ItemView, NextPayload, ReviewApi } from './api.js';
import { SyncedPanels } from './viewer.js';

export interface Controller {
  refresh(): Promise<void>;
  submit(choice: Choice): Promise<void>;
  retry(): Promise<void>;
  currentItemId(): string | null;
}

function el<T extends HTMLElement>(doc: Document, id: string): T {
  const node = doc.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

export function initApp(doc: Document, api: ReviewApi, sessionId: string): Controller {
  const review = el<HTMLElement>(doc, 'review');
  const complete = el<HTMLElement>(doc, 'complete');
  const banner = el<HTMLElement>(doc, 'banner');
  const bannerText = el<HTMLElement>(doc, 'banner-text');
  const retryBtn = el<HTMLButtonElement>(doc, 'retry');
  const stratum = el<HTMLElement>(doc, 'stratum');
  const progress = el<HTMLElement>(doc, 'progress');
  const finalCount = el<HTMLElement>(doc, 'final-count');
  const exportLink = el<HTMLAnchorElement>(doc, 'export-link');
  const panelLeft = el<HTMLElement>(doc, 'panel-left');
  const panelRight = el<HTMLElement>(doc, 'panel-right');
  const overlayToggle = el<HTMLInputElement>(doc, 'overlay-toggle');
  const overlayOpacity = el<HTMLInputElement>(doc, 'overlay-opacity');

  const panels = new SyncedPanels([panelLeft, panelRight]);
  const baseImgs = [panelLeft, panelRight].map(
    (p) => p.querySelector<HTMLImageElement>('.base')!,
  );
  const overlayImgs = [panelLeft, panelRight].map(
    (p) => p.querySelector<HTMLImageElement>('.overlay')!,
  );

  el<HTMLElement>(doc, 'session-label').textContent = sessionId;
  exportLink.href = api.exportUrl(sessionId);

  // One in-flight write at a time; a failed write is kept for retry so the
  // reviewer's decision is never lost to a network blip.
  let current: ItemView | null = null;
  let pendingWrite: { itemId: string; choice: Choice } | null = null;
  let busy = false;

  function showBanner(message: string): void {
    bannerText.textContent = message;
    banner.hidden = false;
  }

  function render(payload: NextPayload): void {
    banner.hidden = true;
    if (isComplete(payload)) {
      current = null;
      review.hidden = true;
      complete.hidden = false;
      finalCount.textContent = `${payload.progress.done} of ${payload.progress.total}`;
      return;
    }
    current = payload;
    review.hidden = false;
    complete.hidden = true;
    baseImgs.forEach((img) => (img.src = api.assetUrl(payload.image)));
    overlayImgs[0].src = api.assetUrl(payload.overlay_left);
    overlayImgs[1].src = api.assetUrl(payload.overlay_right);
    stratum.textContent = payload.stratum || '';
    progress.textContent = `${payload.progress.done} / ${payload.progress.total} reviewed`;
    panels.reset();
  }

  async function refresh(): Promise<void> {
    try {
      render(await api.fetchNext(sessionId));
    } catch (err) {
      showBanner(err instanceof ApiError ? `server error: ${err.message}` : 'network error; retry');
    }
  }

  async function submit(choice: Choice): Promise<void> {
    if (busy || !current) return;
    busy = true;
    pendingWrite = { itemId: current.item_id, choice };
    try {
      await api.submitVerdict(sessionId, pendingWrite.itemId, pendingWrite.choice);
      pendingWrite = null;
      await refresh();
    } catch (err) {
      if (err instanceof ApiError) {
        // 409: this item was finalized elsewhere (another tab); resync.
        pendingWrite = null;
        if (err.status === 409) await refresh();
        else showBanner(`server error: ${err.message}`);
      } else {
        showBanner('verdict not recorded; retry');
      }
    } finally {
      busy = false;
    }
  }

  // Re-send the kept verdict if one failed in flight, else just reload.
  async function retry(): Promise<void> {
    if (pendingWrite && current && pendingWrite.itemId === current.item_id) {
      const { choice } = pendingWrite;
      pendingWrite = null;
      await submit(choice);
    } else {
      await refresh();
    }
  }

  el<HTMLButtonElement>(doc, 'verdict-left').addEventListener('click', () => void submit('left'));
  el<HTMLButtonElement>(doc, 'verdict-right').addEventListener('click', () => void submit('right'));
  el<HTMLButtonElement>(doc, 'verdict-inconclusive').addEventListener(
    'click',
    () => void submit('inconclusive'),
  );
  retryBtn.addEventListener('click', () => void retry());
  el<HTMLButtonElement>(doc, 'reset-view').addEventListener('click', () => panels.reset());

  overlayToggle.addEventListener('change', () => panels.setOverlayVisible(overlayToggle.checked));
  overlayOpacity.addEventListener('input', () =>
    panels.setOverlayOpacity(Number(overlayOpacity.value) / 100),
  );
  panels.setOverlayOpacity(Number(overlayOpacity.value) / 100);

  const keys: Record<string, Choice> = { '1': 'left', '2': 'right', '0': 'inconclusive' };
  doc.addEventListener('keydown', (e: KeyboardEvent) => {
    const choice = keys[e.key];
    if (choice && !(e.target instanceof HTMLInputElement)) void submit(choice);
  });

  return {
    refresh,
    submit,
    retry,
    currentItemId: () => (current ? current.item_id : null),
  };
}

/** Entry point for the served page: session token comes from the URL only. */
export function boot(doc: Document, loc: Location): Controller | null {
  const sessionId = new URLSearchParams(loc.search).get('session');
  const gate = el<HTMLElement>(doc, 'gate');
  if (!sessionId) {
    gate.hidden = false;
    el<HTMLElement>(doc, 'review').hidden = true;
    el<HTMLButtonElement>(doc, 'session-go').addEventListener('click', () => {
      const value = el<HTMLInputElement>(doc, 'session-input').value.trim();
      if (value) loc.search = `session=${encodeURIComponent(value)}`;
    });
    return null;
  }
  gate.hidden = true;
  const controller = initApp(doc, new ReviewApi(''), sessionId);
  void controller.refresh();
  return controller;
}
