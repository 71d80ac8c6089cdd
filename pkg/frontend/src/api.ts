// Admin API client. Read-and-decide only: events, decisions, whitelist,
// mode. Nothing here can touch TLS material.

import type {
  DecisionStatus,
  FlowSnapshot,
  ModeView,
  ProxyEvent,
  WhitelistRow,
} from './types.js';

export type StreamHandle = { stop: () => void };

export class AdminClient {
  constructor(readonly base: string) {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await fetch(`${this.base}${path}`);
    if (!resp.ok) throw new Error(`GET ${path}: ${resp.status}`);
    return (await resp.json()) as T;
  }

  fetchEvents(since = 0): Promise<ProxyEvent[]> {
    return this.getJson<ProxyEvent[]>(`/events.json?since=${since}`);
  }

  fetchFlows(): Promise<FlowSnapshot[]> {
    return this.getJson<FlowSnapshot[]>('/flows');
  }

  fetchWhitelist(): Promise<WhitelistRow[]> {
    return this.getJson<WhitelistRow[]>('/whitelist');
  }

  async fetchMode(): Promise<ModeView> {
    const raw = await this.getJson<{
      mode: string;
      manual_selection: string[];
      pending_timeout: number;
    }>('/mode');
    return {
      mode: raw.mode,
      manualSelection: raw.manual_selection,
      pendingTimeout: raw.pending_timeout,
    };
  }

  private async post(path: string, payload: unknown): Promise<Response> {
    return fetch(`${this.base}${path}`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(payload),
    });
  }

  async submitDecision(flowId: number, action: 'allow' | 'block'): Promise<DecisionStatus> {
    const resp = await this.post('/decision', { flow_id: flowId, action });
    const body = (await resp.json()) as { status?: string; error?: string };
    if (resp.status === 200 && body.status === 'accepted') return 'accepted';
    if (body.status === 'expired') return 'expired';
    return 'invalid';
  }

  async removeWhitelistEntry(name: string, version: string): Promise<boolean> {
    const resp = await this.post('/whitelist', { op: 'remove', name, version });
    return resp.ok;
  }

  async toggleEnforceAnyway(name: string, version: string, value: boolean): Promise<boolean> {
    const resp = await this.post('/whitelist', {
      op: 'set_enforce_anyway',
      name,
      version,
      value,
    });
    return resp.ok;
  }

  async setMode(mode: string, manualSelection: string[] = []): Promise<boolean> {
    const resp = await this.post('/mode', { mode, manual_selection: manualSelection });
    return resp.ok;
  }

  /**
   * Subscribe to the SSE event stream, starting after `since`. Built on fetch
   * streaming so it behaves identically in the browser and in node tests.
   * Reconnects automatically (resuming from the last seen event id) and
   * reports link health through `onStale`.
   */
  streamEvents(
    since: number,
    onEvent: (ev: ProxyEvent) => void,
    onStale?: (stale: boolean) => void,
  ): StreamHandle {
    let stopped = false;
    let lastId = since;

    const run = async (): Promise<void> => {
      while (!stopped) {
        try {
          const resp = await fetch(`${this.base}/events?since=${lastId}`, {
            headers: { Accept: 'text/event-stream', 'Last-Event-ID': String(lastId) },
          });
          if (!resp.ok || resp.body === null) throw new Error(`stream: ${resp.status}`);
          onStale?.(false);
          const reader = resp.body.getReader();
          const decoder = new TextDecoder();
          let buffer = '';
          while (!stopped) {
            const { value, done } = await reader.read();
            if (done) break;
            buffer += decoder.decode(value, { stream: true });
            let sep: number;
            while ((sep = buffer.indexOf('\n\n')) >= 0) {
              const frame = buffer.slice(0, sep);
              buffer = buffer.slice(sep + 2);
              const data = frame
                .split('\n')
                .find((line) => line.startsWith('data: '));
              if (!data) continue; // keepalive comment
              const ev = JSON.parse(data.slice(6)) as ProxyEvent;
              lastId = Math.max(lastId, ev.event_id);
              onEvent(ev);
            }
          }
        } catch {
          // fall through to reconnect
        }
        if (!stopped) {
          onStale?.(true);
          await new Promise((resolve) => setTimeout(resolve, 1000));
        }
      }
    };
    void run();
    return {
      stop: () => {
        stopped = true;
      },
    };
  }
}
