// Bootstrap: read endpoints from the query string, bind the SSE streams,
// re-render on every store change and map clicks to agent commands.

import { bind, fetchLossReport, sendCommand } from "./api.js";
import { renderApp } from "./render.js";
import { initialState, Store, viewOf } from "./store.js";

function param(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

const store = new Store(
  initialState(
    param("agent", "http://127.0.0.1:7001"),
    param("coordinator", window.location.origin),
    param("microcell", "m1"),
  ),
);

const root = document.getElementById("app") as HTMLElement;

let lastReportFetch = "";
store.subscribe((state) => {
  root.innerHTML = renderApp(state);
  // Entering the report view pulls the reconciled totals once per transaction.
  const txid = state.agent?.last_transaction_id;
  if (viewOf(state) === "report" && txid && txid !== lastReportFetch) {
    lastReportFetch = txid;
    void fetchLossReport(store, txid);
  }
});

root.addEventListener("click", (ev) => {
  const target = (ev.target as HTMLElement).closest("[data-action]");
  if (!target) return;
  const action = target.getAttribute("data-action");
  const amount = Number(
    (document.getElementById("amount") as HTMLInputElement | null)?.value ?? "10",
  );
  const durationRaw =
    (document.getElementById("duration") as HTMLInputElement | null)?.value ?? "";

  if (action === "offer") {
    void sendCommand(store, { kind: "offer", amount_percent: amount });
  } else if (action === "request") {
    const command: { kind: "request"; amount_percent: number; duration_s?: number } =
      { kind: "request", amount_percent: amount };
    if (durationRaw.trim() !== "") {
      command.duration_s = Number(durationRaw);
    }
    void sendCommand(store, command);
  } else if (action === "accept") {
    void sendCommand(store, { kind: "accept" });
  } else if (action === "reject") {
    void sendCommand(store, { kind: "reject" });
  } else if (action === "abort") {
    void sendCommand(store, { kind: "abort" });
  }
});

bind(store);
root.innerHTML = renderApp(store.state);
