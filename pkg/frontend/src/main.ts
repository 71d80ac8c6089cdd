// DOM glue: subscribe to the event stream, re-render on change, forward
// operator actions to the admin API.

import { AdminClient } from './api.js';
import { applyEvent, initialState, type DashboardState } from './store.js';
import { renderFlowTable, renderStatusBar, renderWhitelist } from './render.js';

const params = new URLSearchParams(window.location.search);
const apiBase = params.get('api') ?? 'http://127.0.0.1:8191';
const client = new AdminClient(apiBase);

let state: DashboardState = initialState();
let stale = false;
let whitelistGenerationShown = -1;

const flowsEl = document.getElementById('flows')!;
const whitelistEl = document.getElementById('whitelist')!;
const statusEl = document.getElementById('status')!;
const noticeEl = document.getElementById('notice')!;

function notify(message: string): void {
  noticeEl.textContent = message;
  noticeEl.classList.add('visible');
  setTimeout(() => noticeEl.classList.remove('visible'), 4000);
}

function renderAll(): void {
  const now = Date.now() / 1000;
  flowsEl.innerHTML = renderFlowTable(state, now);
  statusEl.innerHTML = renderStatusBar(state, stale, now);
}

async function refreshWhitelist(): Promise<void> {
  try {
    whitelistEl.innerHTML = renderWhitelist(await client.fetchWhitelist());
    whitelistGenerationShown = state.whitelistGeneration;
  } catch {
    whitelistEl.innerHTML = '<p class="dim">whitelist unavailable</p>';
  }
}

client.fetchMode().then((mode) => {
  state = { ...state, mode };
  renderAll();
});
void refreshWhitelist();

client.streamEvents(
  0,
  (ev) => {
    state = applyEvent(state, ev);
    renderAll();
    if (state.whitelistGeneration !== whitelistGenerationShown) {
      void refreshWhitelist();
    }
  },
  (isStale) => {
    stale = isStale;
    renderAll();
  },
);

// countdown ticks without new events
setInterval(renderAll, 1000);

flowsEl.addEventListener('click', async (event) => {
  const target = event.target as HTMLElement;
  const flowAttr = target.getAttribute('data-flow');
  const action = target.getAttribute('data-action');
  if (!flowAttr || (action !== 'allow' && action !== 'block')) return;
  const status = await client.submitDecision(Number(flowAttr), action);
  if (status !== 'accepted') {
    notify(`decision for flow ${flowAttr}: ${status}`);
  }
});

whitelistEl.addEventListener('click', async (event) => {
  const target = event.target as HTMLElement;
  if (!target.classList.contains('remove')) return;
  const name = target.getAttribute('data-name')!;
  const version = target.getAttribute('data-version')!;
  await client.removeWhitelistEntry(name, version);
  void refreshWhitelist();
});

whitelistEl.addEventListener('change', async (event) => {
  const target = event.target as HTMLInputElement;
  if (!target.classList.contains('enforce-toggle')) return;
  await client.toggleEnforceAnyway(
    target.getAttribute('data-name')!,
    target.getAttribute('data-version')!,
    target.checked,
  );
  void refreshWhitelist();
});

document.getElementById('mode-form')!.addEventListener('submit', async (event) => {
  event.preventDefault();
  const mode = (document.getElementById('mode-select') as HTMLSelectElement).value;
  const selection = (document.getElementById('mode-selection') as HTMLInputElement).value
    .split(',')
    .map((s) => s.trim())
    .filter(Boolean);
  const ok = await client.setMode(mode, selection);
  if (!ok) notify('mode change rejected');
});
