// Wire types for the proxy's admin API. The event JSON is shared bit-exactly
// with the proxy's own event stream.

export type ProxyEvent = {
  event_id: number;
  ts: number;
  event: string;
  flow_id?: number;
  client?: string;
  version?: string;
  client_port?: number;
  target_host?: string;
  target_port?: number;
  route?: string;
  verdict?: string;
  evidence?: string | null;
  deadline?: number;
  timeout?: number;
  action?: string;
  reason?: string | null;
  divergence_index?: number | null;
  bytes_up?: number;
  bytes_down?: number;
  error?: string | null;
  mode?: string;
  manual_selection?: string[];
  pending_timeout?: number;
  op?: string;
  name?: string;
};

export type FlowPhase =
  | 'Connecting'
  | 'Pentesting'
  | 'Enforcing'
  | 'Forwarding'
  | 'PendingDecision'
  | 'Closed';

export type EnforcementView = {
  action: string;
  reason: string | null;
  divergenceIndex: number | null;
};

export type FlowView = {
  flowId: number;
  client: string;
  version: string;
  target: string;
  phase: FlowPhase;
  route?: string;
  verdict: string;
  evidence?: string | null;
  enforcement?: EnforcementView;
  pendingDeadline?: number;
  pendingTimeout?: number;
  decision?: string;
  bytesUp: number;
  bytesDown: number;
  error?: string | null;
  openedAt: number;
  closedAt?: number;
};

export type ModeView = {
  mode: string;
  manualSelection: string[];
  pendingTimeout: number;
};

export type WhitelistRow = {
  name: string;
  version: string;
  first_url: string;
  inserted_at: number;
  enforce_anyway: boolean;
};

export type DecisionStatus = 'accepted' | 'expired' | 'invalid';

export type FlowSnapshot = {
  flow_id: number;
  client: string;
  version: string;
  target_host: string;
  target_port: number;
  phase: string;
  verdict: string;
  bytes_up: number;
  bytes_down: number;
  error: string | null;
};
