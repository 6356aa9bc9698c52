/**
 * Review service client.
 * Thin typed wrapper over the HTTP + JSON endpoints; payloads mirror the
 * server exactly and carry no source identities.
 */

export type Choice = 'left' | 'right' | 'inconclusive';

export interface Progress {
  done: number;
  total: number;
}

export interface ItemView {
  item_id: string;
  stratum: string;
  image: string;
  overlay_left: string;
  overlay_right: string;
  progress: Progress;
}

export interface SessionComplete {
  complete: true;
  progress: Progress;
}

export type NextPayload = ItemView | SessionComplete;

export interface VerdictAck {
  ok: boolean;
  item_id: string;
  verdict: string;
  progress: Progress;
}

export function isComplete(p: NextPayload): p is SessionComplete {
  return (p as SessionComplete).complete === true;
}

/** Non-2xx response; `status` distinguishes conflicts (409) from bad requests. */
export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

async function asJson<T>(res: Response): Promise<T> {
  if (!res.ok) {
    let detail = res.statusText || `HTTP ${res.status}`;
    try {
      const body = (await res.json()) as { error?: string };
      if (body && typeof body.error === 'string') detail = body.error;
    } catch {
      // non-JSON error body; keep the status line
    }
    throw new ApiError(res.status, detail);
  }
  return (await res.json()) as T;
}

export class ReviewApi {
  // Empty base means same-origin (the server hosts this bundle itself);
  // tests pass an absolute http://host:port base.
  constructor(private readonly base: string = '') {}

  async fetchNext(sessionId: string): Promise<NextPayload> {
    const res = await fetch(`${this.base}/sessions/${encodeURIComponent(sessionId)}/next`);
    return asJson<NextPayload>(res);
  }

  async submitVerdict(sessionId: string, itemId: string, choice: Choice): Promise<VerdictAck> {
    const res = await fetch(`${this.base}/sessions/${encodeURIComponent(sessionId)}/verdicts`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ item_id: itemId, verdict: choice }),
    });
    return asJson<VerdictAck>(res);
  }

  assetUrl(ref: string): string {
    return `${this.base}/assets/${encodeURIComponent(ref)}`;
  }

  exportUrl(sessionId: string): string {
    return `${this.base}/sessions/${encodeURIComponent(sessionId)}/export.csv`;
  }
}
