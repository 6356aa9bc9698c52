/**
 * Side-by-side synced viewer.
 * One shared transform drives both panels so the reviewer always compares
 * the same region; pure transform math is exported for tests.
 */

export interface ViewTransform {
  scale: number;
  x: number;
  y: number;
}

export const MIN_SCALE = 1;
export const MAX_SCALE = 16;

export const IDENTITY: ViewTransform = { scale: 1, x: 0, y: 0 };

/**
 * Zoom by `factor` keeping the content under the screen point (px, py)
 * stationary. Screen mapping is s = c * scale + offset.
 */
export function zoomAt(t: ViewTransform, px: number, py: number, factor: number): ViewTransform {
  const scale = Math.min(MAX_SCALE, Math.max(MIN_SCALE, t.scale * factor));
  if (scale === t.scale) return t;
  const ratio = scale / t.scale;
  return {
    scale,
    x: px - (px - t.x) * ratio,
    y: py - (py - t.y) * ratio,
  };
}

export function panBy(t: ViewTransform, dx: number, dy: number): ViewTransform {
  return { scale: t.scale, x: t.x + dx, y: t.y + dy };
}

export function cssTransform(t: ViewTransform): string {
  return `translate(${t.x}px, ${t.y}px) scale(${t.scale})`;
}

interface PanelParts {
  root: HTMLElement;
  layers: HTMLElement;
  overlay: HTMLImageElement;
}

/**
 * Binds wheel zoom and drag pan on every panel and mirrors the resulting
 * transform onto all of them. Overlay visibility/opacity is also shared.
 */
export class SyncedPanels {
  private transform: ViewTransform = IDENTITY;
  private panels: PanelParts[] = [];
  private dragFrom: { x: number; y: number } | null = null;

  constructor(panelRoots: HTMLElement[]) {
    for (const root of panelRoots) {
      const layers = root.querySelector<HTMLElement>('.layers');
      const overlay = root.querySelector<HTMLImageElement>('.overlay');
      if (!layers || !overlay) throw new Error('panel missing .layers or .overlay');
      this.panels.push({ root, layers, overlay });
      this.bind(root);
    }
    this.apply();
  }

  get current(): ViewTransform {
    return this.transform;
  }

  reset(): void {
    this.transform = IDENTITY;
    this.apply();
  }

  setOverlayVisible(visible: boolean): void {
    for (const p of this.panels) p.overlay.style.visibility = visible ? 'visible' : 'hidden';
  }

  setOverlayOpacity(alpha: number): void {
    for (const p of this.panels) p.overlay.style.opacity = String(alpha);
  }

  private bind(root: HTMLElement): void {
    root.addEventListener('wheel', (e: WheelEvent) => {
      e.preventDefault();
      const rect = root.getBoundingClientRect();
      const factor = e.deltaY < 0 ? 1.25 : 0.8;
      this.transform = zoomAt(this.transform, e.clientX - rect.left, e.clientY - rect.top, factor);
      this.apply();
    });
    root.addEventListener('mousedown', (e: MouseEvent) => {
      if (e.button !== 0) return;
      this.dragFrom = { x: e.clientX, y: e.clientY };
    });
    root.addEventListener('mousemove', (e: MouseEvent) => {
      if (!this.dragFrom) return;
      this.transform = panBy(this.transform, e.clientX - this.dragFrom.x, e.clientY - this.dragFrom.y);
      this.dragFrom = { x: e.clientX, y: e.clientY };
      this.apply();
    });
    const stop = () => {
      this.dragFrom = null;
    };
    root.addEventListener('mouseup', stop);
    root.addEventListener('mouseleave', stop);
  }

  private apply(): void {
    const css = cssTransform(this.transform);
    for (const p of this.panels) {
      p.layers.style.transform = css;
      p.root.style.cursor = this.transform.scale > 1 ? 'grab' : 'default';
    }
  }
}
