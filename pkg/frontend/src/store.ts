// Single state store: every server event funnels through reduce(), and the
// visible view is derived from the agent's reported protocol state alone.
// The console never transitions optimistically; clicking a button only sends
// a command, and the UI moves when the agent's status event arrives.

import type {
  AgentStatus,
  CoordinatorEvent,
  Listing,
  LossReport,
  PendingRequest,
} from "./types.js";

export type View =
  | "role-pick"
  | "lobby"
  | "incoming-prompt"
  | "live-transfer"
  | "report";

export interface ConsoleState {
  agentUrl: string;
  coordinatorUrl: string;
  microcellId: string;
  agent: AgentStatus | null;
  listings: Listing[];
  prompt: PendingRequest | null;
  report: LossReport | null;
  reportState: string | null;
  connected: { agent: boolean; coordinator: boolean };
  lastError: string | null;
}

export type ConsoleEvent =
  | { type: "agent-status"; status: AgentStatus }
  | { type: "agent-prompt"; prompt: PendingRequest }
  | { type: "coordinator-event"; event: CoordinatorEvent }
  | { type: "connection"; endpoint: "agent" | "coordinator"; up: boolean }
  | { type: "loss-report"; report: LossReport; state: string }
  | { type: "error"; message: string };

export function initialState(agentUrl: string, coordinatorUrl: string,
                             microcellId: string): ConsoleState {
  return {
    agentUrl,
    coordinatorUrl,
    microcellId,
    agent: null,
    listings: [],
    prompt: null,
    report: null,
    reportState: null,
    connected: { agent: false, coordinator: false },
    lastError: null,
  };
}

export function reduce(state: ConsoleState, event: ConsoleEvent): ConsoleState {
  switch (event.type) {
    case "agent-status": {
      const status = event.status;
      // The prompt view is tied to the agent being in Deciding; leaving that
      // state dismisses it even if no explicit prompt dismissal exists.
      const prompt =
        status.protocol_state === "Deciding"
          ? status.pending_request ?? state.prompt
          : null;
      return { ...state, agent: status, prompt, connected: { ...state.connected, agent: true } };
    }
    case "agent-prompt":
      return { ...state, prompt: event.prompt };
    case "coordinator-event":
      return applyCoordinatorEvent(state, event.event);
    case "connection":
      return {
        ...state,
        connected: { ...state.connected, [event.endpoint]: event.up },
      };
    case "loss-report":
      return { ...state, report: event.report, reportState: event.state };
    case "error":
      return { ...state, lastError: event.message };
  }
}

function applyCoordinatorEvent(state: ConsoleState,
                               event: CoordinatorEvent): ConsoleState {
  const next = { ...state, connected: { ...state.connected, coordinator: true } };
  if (event.listing) {
    const others = state.listings.filter(
      (l) => l.listing_id !== event.listing!.listing_id,
    );
    next.listings =
      event.listing.state === "Open" ? [event.listing, ...others] : others;
  }
  if (event.transaction && state.agent) {
    const txn = event.transaction;
    const mine =
      txn.provider_id === state.agent.device_id ||
      txn.consumer_id === state.agent.device_id;
    if (mine && txn.loss_report) {
      next.report = txn.loss_report;
      next.reportState = txn.state;
    }
  }
  return next;
}

export function viewOf(state: ConsoleState): View {
  const agent = state.agent;
  if (agent === null || agent.role === null) {
    return "role-pick";
  }
  switch (agent.protocol_state) {
    case "Deciding":
      return "incoming-prompt";
    case "Transferring":
    case "Finalizing":
      return "live-transfer";
    case "Done":
    case "Aborted":
      return "report";
    default:
      return "lobby";
  }
}

export class Store {
  state: ConsoleState;
  private listeners: Array<(s: ConsoleState) => void> = [];

  constructor(state: ConsoleState) {
    this.state = state;
  }

  dispatch(event: ConsoleEvent): void {
    this.state = reduce(this.state, event);
    for (const fn of this.listeners) {
      fn(this.state);
    }
  }

  subscribe(fn: (s: ConsoleState) => void): void {
    this.listeners.push(fn);
  }
}
