// Server access: one reconnecting SSE subscription per endpoint plus small
// fetch wrappers. EventSource reconnects by itself; we surface up/down
// through connection events so the banner reflects reality.

import type { Store } from "./store.js";
import type { AgentCommand, LossReport } from "./types.js";

export function bind(store: Store): void {
  const { agentUrl, coordinatorUrl, microcellId } = store.state;

  const agentEvents = new EventSource(`${agentUrl}/events`);
  agentEvents.onmessage = (msg) => {
    store.dispatch({ type: "agent-status", status: JSON.parse(msg.data) });
  };
  agentEvents.addEventListener("prompt", (msg) => {
    store.dispatch({
      type: "agent-prompt",
      prompt: JSON.parse((msg as MessageEvent).data),
    });
  });
  agentEvents.onopen = () =>
    store.dispatch({ type: "connection", endpoint: "agent", up: true });
  agentEvents.onerror = () =>
    store.dispatch({ type: "connection", endpoint: "agent", up: false });

  const cellEvents = new EventSource(
    `${coordinatorUrl}/v1/microcells/${encodeURIComponent(microcellId)}/events`,
  );
  cellEvents.onmessage = (msg) => {
    store.dispatch({ type: "coordinator-event", event: JSON.parse(msg.data) });
  };
  cellEvents.onopen = () =>
    store.dispatch({ type: "connection", endpoint: "coordinator", up: true });
  cellEvents.onerror = () =>
    store.dispatch({ type: "connection", endpoint: "coordinator", up: false });

  void refreshListings(store);
}

export async function refreshListings(store: Store): Promise<void> {
  const { coordinatorUrl, microcellId } = store.state;
  try {
    const resp = await fetch(
      `${coordinatorUrl}/v1/microcells/${encodeURIComponent(microcellId)}/listings`,
    );
    const listings = await resp.json();
    for (const listing of listings) {
      store.dispatch({
        type: "coordinator-event",
        event: { seq: 0, kind: "listing-created", microcell_id: microcellId,
                 t_s: 0, listing },
      });
    }
  } catch (err) {
    store.dispatch({ type: "error", message: `listings: ${String(err)}` });
  }
}

export async function sendCommand(store: Store,
                                  command: AgentCommand): Promise<void> {
  try {
    const resp = await fetch(`${store.state.agentUrl}/control/command`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(command),
    });
    if (!resp.ok) {
      const body = await resp.json().catch(() => ({ message: resp.statusText }));
      store.dispatch({
        type: "error",
        message: `${command.kind}: ${body.message ?? resp.statusText}`,
      });
    }
  } catch (err) {
    store.dispatch({ type: "error", message: `${command.kind}: ${String(err)}` });
  }
}

export async function fetchLossReport(store: Store,
                                      transactionId: string): Promise<void> {
  try {
    const resp = await fetch(
      `${store.state.coordinatorUrl}/v1/transactions/${transactionId}`,
    );
    if (!resp.ok) return;
    const record = await resp.json();
    if (record.loss_report) {
      store.dispatch({
        type: "loss-report",
        report: record.loss_report as LossReport,
        state: record.state,
      });
    }
  } catch {
    // The report view shows a pending indicator until reconciliation lands.
  }
}
