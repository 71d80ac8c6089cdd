// Pure HTML renderers: state in, markup out. Keeps the DOM glue in main.ts
// trivial and everything here testable without a browser.

import { decisionCountdown, sortedFlows, type DashboardState } from './store.js';
import type { FlowView, WhitelistRow } from './types.js';

function esc(value: unknown): string {
  return String(value ?? '')
    .replaceAll('&', '&amp;')
    .replaceAll('<', '&lt;')
    .replaceAll('>', '&gt;')
    .replaceAll('"', '&quot;');
}

function phaseClass(flow: FlowView): string {
  if (flow.phase === 'PendingDecision') return 'pending';
  if (flow.phase === 'Closed') return flow.error ? 'blocked' : 'closed';
  return 'live';
}

function verdictBadge(verdict: string): string {
  const cls =
    verdict === 'Vulnerable' ? 'bad' : verdict === 'PenProof' ? 'good' : 'dim';
  return `<span class="badge ${cls}">${esc(verdict)}</span>`;
}

function enforcementCell(flow: FlowView): string {
  if (!flow.enforcement) return '';
  const e = flow.enforcement;
  const cls = e.action === 'Forwarded' ? 'good' : 'bad';
  const detail =
    e.divergenceIndex !== null && e.divergenceIndex !== undefined
      ? ` @${e.divergenceIndex}`
      : '';
  return `<span class="badge ${cls}">${esc(e.action)}${esc(detail)}</span>`;
}

export function renderFlowRow(flow: FlowView, nowSeconds: number): string {
  const countdown = decisionCountdown(flow, nowSeconds);
  const decisionCell =
    countdown !== null
      ? `<span class="countdown" data-deadline="${flow.pendingDeadline}">${countdown.toFixed(0)}s</span>
         <button class="allow" data-flow="${flow.flowId}" data-action="allow">allow</button>
         <button class="block" data-flow="${flow.flowId}" data-action="block">block</button>`
      : flow.decision
        ? `<span class="dim">${esc(flow.decision)}</span>`
        : '';
  return `<tr class="${phaseClass(flow)}" data-flow="${flow.flowId}">
    <td>${flow.flowId}</td>
    <td>${esc(flow.client)}${flow.version ? ` <span class="dim">${esc(flow.version)}</span>` : ''}</td>
    <td>${esc(flow.target)}</td>
    <td>${esc(flow.phase)}</td>
    <td>${verdictBadge(flow.verdict)}</td>
    <td>${enforcementCell(flow)}</td>
    <td class="num">${flow.bytesUp}/${flow.bytesDown}</td>
    <td>${decisionCell}</td>
    <td class="dim">${esc(flow.error ?? '')}</td>
  </tr>`;
}

export function renderFlowTable(state: DashboardState, nowSeconds: number): string {
  const rows = sortedFlows(state)
    .map((flow) => renderFlowRow(flow, nowSeconds))
    .join('\n');
  return `<table>
    <thead><tr>
      <th>#</th><th>client</th><th>target</th><th>phase</th><th>verdict</th>
      <th>enforcement</th><th>bytes ↑/↓</th><th>decision</th><th>note</th>
    </tr></thead>
    <tbody>${rows}</tbody>
  </table>`;
}

export function renderWhitelist(rows: WhitelistRow[]): string {
  if (rows.length === 0) {
    return '<p class="dim">whitelist is empty</p>';
  }
  const body = rows
    .map(
      (row) => `<tr>
      <td>${esc(row.name)}</td>
      <td>${esc(row.version)}</td>
      <td class="dim">${esc(row.first_url)}</td>
      <td><input type="checkbox" class="enforce-toggle" data-name="${esc(row.name)}"
           data-version="${esc(row.version)}" ${row.enforce_anyway ? 'checked' : ''}></td>
      <td><button class="remove" data-name="${esc(row.name)}" data-version="${esc(row.version)}">remove</button></td>
    </tr>`,
    )
    .join('\n');
  return `<table>
    <thead><tr><th>client</th><th>version</th><th>first url</th><th>enforce anyway</th><th></th></tr></thead>
    <tbody>${body}</tbody>
  </table>`;
}

export function renderStatusBar(
  state: DashboardState,
  stale: boolean,
  nowSeconds: number,
): string {
  const mode = state.mode
    ? `${state.mode.mode}${state.mode.manualSelection.length ? ` [${state.mode.manualSelection.join(', ')}]` : ''}`
    : 'unknown';
  const pending = sortedFlows(state).filter((f) => f.phase === 'PendingDecision').length;
  const link = stale
    ? '<span class="badge bad">stream stale — reconnecting</span>'
    : '<span class="badge good">live</span>';
  return `${link} <span>mode: <b>${esc(mode)}</b></span>
    <span>flows: ${Object.keys(state.flows).length}</span>
    <span>pending: ${pending}</span>
    <span class="dim">event #${state.lastEventId} · ${new Date(nowSeconds * 1000).toLocaleTimeString()}</span>`;
}
