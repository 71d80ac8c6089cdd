// Dashboard state is a pure function of the proxy's event stream: no
// UI-local truth. Replaying the same events always rebuilds the same state,
// which is what makes reconnect-and-resume safe.

import type { FlowView, ModeView, ProxyEvent } from './types.js';

export type DashboardState = {
  lastEventId: number;
  flows: Record<number, FlowView>;
  mode: ModeView | null;
  whitelistGeneration: number;
};

export function initialState(): DashboardState {
  return { lastEventId: 0, flows: {}, mode: null, whitelistGeneration: 0 };
}

function routePhase(route: string | undefined): FlowView['phase'] {
  switch (route) {
    case 'pentest':
      return 'Pentesting';
    case 'enforced-passthrough':
      return 'Enforcing';
    default:
      return 'Forwarding';
  }
}

export function applyEvent(state: DashboardState, ev: ProxyEvent): DashboardState {
  if (ev.event_id <= state.lastEventId) {
    return state; // duplicate delivery is a no-op
  }
  const next: DashboardState = { ...state, lastEventId: ev.event_id };
  const touch = (flowId: number, patch: Partial<FlowView>): void => {
    const current = next.flows[flowId];
    if (!current) return;
    next.flows = { ...next.flows, [flowId]: { ...current, ...patch } };
  };

  switch (ev.event) {
    case 'flow_opened': {
      const flow: FlowView = {
        flowId: ev.flow_id!,
        client: ev.client ?? 'unknown',
        version: ev.version ?? '',
        target: `${ev.target_host}:${ev.target_port}`,
        phase: 'Connecting',
        verdict: 'Untested',
        bytesUp: 0,
        bytesDown: 0,
        openedAt: ev.ts,
      };
      next.flows = { ...next.flows, [flow.flowId]: flow };
      break;
    }
    case 'flow_routed':
      touch(ev.flow_id!, { route: ev.route, phase: routePhase(ev.route) });
      break;
    case 'pentest_verdict':
      touch(ev.flow_id!, { verdict: ev.verdict ?? 'Untested', evidence: ev.evidence });
      break;
    case 'decision_requested':
      touch(ev.flow_id!, {
        phase: 'PendingDecision',
        pendingDeadline: ev.deadline,
        pendingTimeout: ev.timeout,
      });
      break;
    case 'decision_resolved':
      touch(ev.flow_id!, {
        decision: ev.action,
        phase: ev.action === 'allow' ? 'Enforcing' : 'Closed',
      });
      break;
    case 'enforcement':
      touch(ev.flow_id!, {
        phase: ev.action === 'Forwarded' ? 'Forwarding' : 'Enforcing',
        enforcement: {
          action: ev.action ?? 'error',
          reason: ev.reason ?? null,
          divergenceIndex: ev.divergence_index ?? null,
        },
      });
      break;
    case 'flow_closed':
      touch(ev.flow_id!, {
        phase: 'Closed',
        bytesUp: ev.bytes_up ?? 0,
        bytesDown: ev.bytes_down ?? 0,
        error: ev.error ?? null,
        closedAt: ev.ts,
      });
      break;
    case 'mode_changed':
      next.mode = {
        mode: ev.mode ?? 'automatic',
        manualSelection: ev.manual_selection ?? [],
        pendingTimeout: ev.pending_timeout ?? 30,
      };
      break;
    case 'whitelist_changed':
      next.whitelistGeneration = state.whitelistGeneration + 1;
      break;
    default:
      break; // unknown events must not break replay
  }
  return next;
}

export function reduceEvents(state: DashboardState, events: ProxyEvent[]): DashboardState {
  return events.reduce(applyEvent, state);
}

/** Seconds left on a pending flow's decision window; null when not pending. */
export function decisionCountdown(flow: FlowView, nowSeconds: number): number | null {
  if (flow.phase !== 'PendingDecision' || flow.pendingDeadline === undefined) {
    return null;
  }
  return Math.max(0, flow.pendingDeadline - nowSeconds);
}

export function sortedFlows(state: DashboardState): FlowView[] {
  return Object.values(state.flows).sort((a, b) => b.flowId - a.flowId);
}

export function pendingFlows(state: DashboardState): FlowView[] {
  return sortedFlows(state).filter((f) => f.phase === 'PendingDecision');
}
