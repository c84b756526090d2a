import { describe, expect, it } from "vitest";

import { renderApp, renderLossBars } from "../src/render.js";
import { initialState, reduce } from "../src/store.js";
import type { ConsoleState } from "../src/store.js";
import type { AgentStatus, LossReport } from "../src/types.js";

function status(overrides: Partial<AgentStatus> = {}): AgentStatus {
  return {
    device_id: "phone-a",
    display_name: "Phone A",
    microcell_id: "m1",
    role: null,
    protocol_state: "Idle",
    battery: { capacity_mwh: 10000, charge_mwh: 8000, level_percent: 80 },
    active_transaction_id: null,
    last_transaction_id: null,
    last_sample: null,
    pending_request: null,
    session: null,
    ...overrides,
  };
}

function withStatus(s: AgentStatus): ConsoleState {
  return reduce(initialState("http://a", "http://c", "m1"),
                { type: "agent-status", status: s });
}

const REPORT: LossReport = {
  provider_expended_mwh: 1500,
  consumer_gained_mwh: 900,
  loss_mwh: 600,
  duration_s: 1800,
  bucket_width_s: 300,
  buckets: Array.from({ length: 6 }, (_, i) => ({
    start_s: i * 300,
    end_s: (i + 1) * 300,
    expended_mwh: 250,
    gained_mwh: 150,
    loss_mwh: 100,
  })),
  flags: [],
};

describe("renderApp", () => {
  it("shows the connection banner until both endpoints are up", () => {
    const html = renderApp(initialState("http://a", "http://c", "m1"));
    expect(html).toContain("connection-banner");
    expect(html).toContain("agent and coordinator");
  });

  it("renders role pick with both buttons", () => {
    const html = renderApp(withStatus(status()));
    expect(html).toContain('data-view="role-pick"');
    expect(html).toContain('data-action="offer"');
    expect(html).toContain('data-action="request"');
  });

  it("renders the incoming prompt with the requested amount", () => {
    const html = renderApp(withStatus(status({
      role: "Provider",
      protocol_state: "Deciding",
      pending_request: { request_id: "r1", amount_percent: 10 },
    })));
    expect(html).toContain('data-view="incoming-prompt"');
    expect(html).toContain("10%");
    expect(html).toContain('data-action="accept"');
    expect(html).toContain('data-action="reject"');
  });

  it("renders live transfer figures straight from the agent session", () => {
    const html = renderApp(withStatus(status({
      role: "Provider",
      protocol_state: "Transferring",
      session: { elapsed_s: 600, expended_mwh: 500, gained_mwh: 300,
                 loss_mwh: 200, own_level_percent: 75 },
    })));
    expect(html).toContain('data-view="live-transfer"');
    expect(html).toContain("600 s");
    expect(html).toContain("500.0 mWh");
    expect(html).toContain("200.0 mWh");
    expect(html).toContain('data-action="abort"');
  });

  it("renders the report with six loss bars", () => {
    let state = withStatus(status({ role: "Provider", protocol_state: "Done" }));
    state = reduce(state, { type: "loss-report", report: REPORT,
                            state: "Reconciled" });
    const html = renderApp(state);
    expect(html).toContain('data-view="report"');
    expect(html).toContain("600.0 mWh");
    expect((html.match(/data-test="loss-bar"/g) ?? []).length).toBe(6);
    expect(html).not.toContain('data-test="partial"');
  });

  it("labels partial totals after an aborted session", () => {
    let state = withStatus(status({ role: "Consumer",
                                    protocol_state: "Aborted" }));
    state = reduce(state, {
      type: "loss-report",
      report: { ...REPORT, provider_expended_mwh: 750, consumer_gained_mwh: 450,
                loss_mwh: 300, duration_s: 900,
                buckets: REPORT.buckets.slice(0, 3) },
      state: "ReconciledPartial",
    });
    const html = renderApp(state);
    expect(html).toContain('data-test="partial"');
    expect(html).toContain("300.0 mWh");
  });

  it("shows a pending indicator before reconciliation", () => {
    const html = renderApp(withStatus(status({ role: "Consumer",
                                               protocol_state: "Done" })));
    expect(html).toContain('data-test="pending"');
  });
});

describe("renderLossBars", () => {
  it("scales bars against the peak expended energy", () => {
    const html = renderLossBars(REPORT);
    // loss 100 vs peak expended 250 -> 40% tall
    expect(html).toContain("height:40.00%");
  });

  it("renders zero-height bars for a lossless run", () => {
    const lossless = {
      ...REPORT,
      buckets: REPORT.buckets.map((b) => ({ ...b, loss_mwh: 0 })),
    };
    const html = renderLossBars(lossless);
    expect(html).toContain("height:0.00%");
    expect(html).not.toContain("height:40.00%");
  });
});
