// Pure view rendering: state in, HTML string out. main.ts swaps the result
// into the page and wires clicks via delegation, which keeps every view
// testable as plain strings.

import type { ConsoleState } from "./store.js";
import { viewOf } from "./store.js";
import type { Listing, LossReport } from "./types.js";

function esc(text: string): string {
  return text.replace(/[&<>"']/g, (c) => ({
    "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;", "'": "&#39;",
  })[c] as string);
}

function fmt(value: number, digits = 1): string {
  return value.toFixed(digits);
}

export function renderApp(state: ConsoleState): string {
  return `
  <header>
    <h1>Energy sharing console</h1>
    ${renderConnection(state)}
    ${renderDeviceBadge(state)}
  </header>
  <main>${renderView(state)}</main>
  ${state.lastError ? `<footer class="error">${esc(state.lastError)}</footer>` : ""}
  `;
}

function renderConnection(state: ConsoleState): string {
  const bad: string[] = [];
  if (!state.connected.agent) bad.push("agent");
  if (!state.connected.coordinator) bad.push("coordinator");
  if (bad.length === 0) return "";
  return `<div class="banner" data-test="connection-banner">
    connecting to ${esc(bad.join(" and "))}…</div>`;
}

function renderDeviceBadge(state: ConsoleState): string {
  const agent = state.agent;
  if (!agent) return "";
  return `<div class="badge">
    <strong>${esc(agent.display_name)}</strong>
    <span>${esc(agent.role ?? "no role")} · ${esc(agent.protocol_state)}</span>
    ${levelBar("own battery", agent.battery.level_percent)}
  </div>`;
}

function levelBar(label: string, percent: number): string {
  const width = Math.max(0, Math.min(100, percent));
  return `<div class="bar" data-test="level-bar">
    <span class="bar-label">${esc(label)} ${fmt(percent)}%</span>
    <div class="bar-track"><div class="bar-fill" style="width:${fmt(width, 2)}%"></div></div>
  </div>`;
}

function renderView(state: ConsoleState): string {
  switch (viewOf(state)) {
    case "role-pick":
      return renderRolePick();
    case "lobby":
      return renderLobby(state);
    case "incoming-prompt":
      return renderPrompt(state);
    case "live-transfer":
      return renderLiveTransfer(state);
    case "report":
      return renderReport(state);
  }
}

function renderRolePick(): string {
  return `<section class="role-pick" data-view="role-pick">
    <h2>Choose a role</h2>
    <label>Amount (percent of my battery)
      <input id="amount" type="number" min="1" max="100" value="10">
    </label>
    <label>Duration (seconds, optional; consumer only)
      <input id="duration" type="number" min="0" placeholder="e.g. 1800">
    </label>
    <div class="actions">
      <button data-action="offer">Provide energy</button>
      <button data-action="request">Request energy</button>
    </div>
  </section>`;
}

function renderLobby(state: ConsoleState): string {
  const agent = state.agent!;
  const waiting =
    agent.protocol_state === "AwaitingAccept"
      ? `<p data-test="waiting">Waiting for the provider to confirm…</p>`
      : agent.role === "Provider"
        ? `<p data-test="waiting">Waiting for an energy request…</p>`
        : "";
  return `<section class="lobby" data-view="lobby">
    <h2>Microcell ${esc(state.microcellId)}</h2>
    ${waiting}
    <h3>Open listings</h3>
    ${renderListings(state.listings)}
  </section>`;
}

function renderListings(listings: Listing[]): string {
  if (listings.length === 0) {
    return `<p class="empty">No open offers or requests.</p>`;
  }
  const rows = listings
    .map(
      (l) => `<tr>
        <td>${esc(l.device_id)}</td><td>${esc(l.role)}</td>
        <td>${l.amount_percent}%</td></tr>`,
    )
    .join("");
  return `<table class="listings">
    <thead><tr><th>device</th><th>role</th><th>amount</th></tr></thead>
    <tbody>${rows}</tbody></table>`;
}

function renderPrompt(state: ConsoleState): string {
  const prompt = state.prompt ?? state.agent?.pending_request ?? null;
  const amount = prompt ? `${prompt.amount_percent}%` : "an amount";
  return `<section class="prompt" data-view="incoming-prompt">
    <h2>Incoming energy request</h2>
    <p>A nearby consumer asks for <strong>${esc(amount)}</strong> of your battery.</p>
    <div class="actions">
      <button data-action="accept">Accept</button>
      <button data-action="reject">Reject</button>
    </div>
  </section>`;
}

function renderLiveTransfer(state: ConsoleState): string {
  const agent = state.agent!;
  const session = agent.session;
  const body = session
    ? `
    ${levelBar(agent.role === "Provider" ? "provider battery" : "consumer battery",
               agent.battery.level_percent)}
    <dl class="live-figures">
      <dt>elapsed</dt><dd data-test="elapsed">${fmt(session.elapsed_s, 0)} s</dd>
      <dt>provider expended</dt><dd>${fmt(session.expended_mwh)} mWh</dd>
      <dt>consumer gained</dt><dd>${fmt(session.gained_mwh)} mWh</dd>
      <dt>loss so far</dt><dd data-test="loss">${fmt(session.loss_mwh)} mWh</dd>
    </dl>`
    : `<p>waiting for first sample…</p>`;
  return `<section class="live" data-view="live-transfer">
    <h2>Transfer running</h2>
    ${body}
    <div class="actions"><button data-action="abort">Abort transfer</button></div>
  </section>`;
}

function renderReport(state: ConsoleState): string {
  const agent = state.agent!;
  const heading =
    agent.protocol_state === "Aborted" ? "Transfer aborted" : "Transfer complete";
  if (!state.report) {
    return `<section class="report" data-view="report">
      <h2>${heading}</h2>
      <p data-test="pending">Waiting for the coordinator to reconcile…</p>
    </section>`;
  }
  const partial =
    state.reportState === "ReconciledPartial"
      ? `<p class="partial" data-test="partial">Totals are partial: the session ended early.</p>`
      : "";
  return `<section class="report" data-view="report">
    <h2>${heading}</h2>
    ${partial}
    <dl class="totals">
      <dt>provider expended</dt><dd>${fmt(state.report.provider_expended_mwh)} mWh</dd>
      <dt>consumer gained</dt><dd>${fmt(state.report.consumer_gained_mwh)} mWh</dd>
      <dt>wireless loss</dt><dd data-test="total-loss">${fmt(state.report.loss_mwh)} mWh</dd>
      <dt>duration</dt><dd>${fmt(state.report.duration_s, 0)} s</dd>
    </dl>
    ${renderLossBars(state.report)}
    ${state.report.flags.length
      ? `<p class="flags">flags: ${esc(state.report.flags.join(", "))}</p>` : ""}
  </section>`;
}

export function renderLossBars(report: LossReport): string {
  const peak = Math.max(...report.buckets.map((b) => b.expended_mwh), 0);
  const bars = report.buckets
    .map((b) => {
      const height = peak > 0 ? (b.loss_mwh / peak) * 100 : 0;
      return `<div class="loss-bucket" data-test="loss-bar">
        <div class="loss-fill" style="height:${fmt(height, 2)}%"
             title="${fmt(b.loss_mwh)} mWh lost"></div>
        <span>${fmt(b.start_s, 0)}–${fmt(b.end_s, 0)} s</span>
      </div>`;
    })
    .join("");
  return `<div class="loss-chart" data-test="loss-chart">${bars}</div>`;
}
