// Shapes of the payloads the console reads from the agent control API and
// the coordinator API. The console displays these verbatim; it never
// computes energy values itself.

export interface BatterySnapshot {
  capacity_mwh: number;
  charge_mwh: number;
  level_percent: number;
}

export interface SessionInfo {
  elapsed_s: number;
  expended_mwh: number;
  gained_mwh: number;
  loss_mwh: number;
  own_level_percent: number;
}

export interface PendingRequest {
  request_id: string;
  amount_percent: number;
}

export interface AgentStatus {
  device_id: string;
  display_name: string;
  microcell_id: string;
  role: "Provider" | "Consumer" | null;
  protocol_state: string;
  battery: BatterySnapshot;
  active_transaction_id: string | null;
  last_transaction_id: string | null;
  last_sample: { t_s: number; level_percent: number; charge_mwh: number } | null;
  pending_request: PendingRequest | null;
  session: SessionInfo | null;
}

export interface Listing {
  listing_id: string;
  device_id: string;
  microcell_id: string;
  role: "Provider" | "Consumer";
  amount_percent: number;
  created_at_s: number;
  state: "Open" | "Matched" | "Withdrawn";
}

export interface LossBucket {
  start_s: number;
  end_s: number;
  expended_mwh: number;
  gained_mwh: number;
  loss_mwh: number;
}

export interface LossReport {
  provider_expended_mwh: number;
  consumer_gained_mwh: number;
  loss_mwh: number;
  duration_s: number;
  bucket_width_s: number;
  buckets: LossBucket[];
  flags: string[];
}

export interface CoordinatorEvent {
  seq: number;
  kind: string;
  microcell_id: string;
  t_s: number;
  listing?: Listing;
  transaction?: {
    transaction_id: string;
    state: string;
    provider_id: string;
    consumer_id: string;
    loss_report: LossReport | null;
  };
}

export type AgentCommand =
  | { kind: "offer"; amount_percent: number }
  | { kind: "request"; amount_percent: number; duration_s?: number }
  | { kind: "accept" }
  | { kind: "reject"; reason?: string }
  | { kind: "abort" };
