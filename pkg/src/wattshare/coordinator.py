"""Edge service managing devices, listings, transactions and reconciliation.

All writes are serialized through one lock and appended to a JSONL ledger
(one event per line, fsync on transaction state changes) that doubles as the
live event stream: subscribers receive exactly the records the ledger holds,
and startup replays the file to recover bit-identical transaction records.
"""

from __future__ import annotations

import bisect
import json
import os
import secrets
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from queue import Empty, Full, Queue
from typing import Callable, Iterator, Optional

from .battery import EndReason, TelemetrySample
from .domain import (
    BatteryState,
    DeviceProfile,
    EnergyAmount,
    EnergyListing,
    ListingState,
    Role,
)

LEDGER_FILENAME = "ledger.jsonl"
DEFAULT_BUCKET_S = 300.0
REPORT_MATCH_TOLERANCE_MWH = 1e-6
EVENT_BUFFER_SIZE = 256


# ---------------------------------------------------------------------------
# Service errors, mapped onto HTTP statuses by the API layer
# ---------------------------------------------------------------------------

class ServiceError(Exception):
    http_status = 500

    def __init__(self, code: str, message: str, detail: str = ""):
        self.code = code
        self.message = message
        self.detail = detail
        super().__init__(f"{code}: {message}")


class NotFoundError(ServiceError):
    http_status = 404

    def __init__(self, message: str, detail: str = ""):
        super().__init__("not-found", message, detail)


class ForbiddenError(ServiceError):
    http_status = 403

    def __init__(self, message: str, detail: str = ""):
        super().__init__("forbidden", message, detail)


class ConflictError(ServiceError):
    http_status = 409


class RequestValidationError(ServiceError):
    http_status = 400

    def __init__(self, message: str, detail: str = ""):
        super().__init__("validation", message, detail)


# ---------------------------------------------------------------------------
# Party reports and reconciliation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartyReport:
    device_id: str
    log: list[TelemetrySample]
    final_battery: BatteryState
    end_reason: EndReason

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "end_reason": self.end_reason.value,
            "final_battery": {
                "capacity_mwh": self.final_battery.capacity_mwh,
                "charge_mwh": self.final_battery.charge_mwh,
            },
            "log": [
                {"t_s": s.t_s, "level_percent": s.level_percent,
                 "charge_mwh": s.charge_mwh}
                for s in self.log
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PartyReport":
        try:
            log = [TelemetrySample(float(s["t_s"]), float(s["level_percent"]),
                                   float(s["charge_mwh"])) for s in obj["log"]]
            battery = BatteryState(float(obj["final_battery"]["capacity_mwh"]),
                                   float(obj["final_battery"]["charge_mwh"]))
            return cls(device_id=str(obj["device_id"]), log=log,
                       final_battery=battery,
                       end_reason=EndReason(obj["end_reason"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise RequestValidationError("malformed party report", str(exc)) from exc


def validate_party_report(report: PartyReport) -> None:
    """Check the report invariants, naming the violated one on failure."""
    if not report.log:
        raise RequestValidationError("invalid party report", "log is empty")
    for a, b in zip(report.log, report.log[1:]):
        if b.t_s <= a.t_s:
            raise RequestValidationError(
                "invalid party report",
                f"log timestamps not strictly increasing at t={b.t_s}")
    capacity = report.final_battery.capacity_mwh
    for s in report.log:
        expected_level = 100.0 * s.charge_mwh / capacity
        if abs(s.level_percent - expected_level) > 1e-6:
            raise RequestValidationError(
                "invalid party report",
                f"level_percent inconsistent with charge at t={s.t_s}")
    last = report.log[-1]
    if abs(report.final_battery.charge_mwh - last.charge_mwh) > REPORT_MATCH_TOLERANCE_MWH:
        raise RequestValidationError(
            "invalid party report",
            "final battery charge does not match last log sample")


def _check_monotonic(report: PartyReport, role: Role) -> None:
    for a, b in zip(report.log, report.log[1:]):
        if role is Role.PROVIDER and b.charge_mwh > a.charge_mwh + 1e-9:
            raise RequestValidationError(
                "invalid party report", "provider log charge must be non-increasing")
        if role is Role.CONSUMER and b.charge_mwh < a.charge_mwh - 1e-9:
            raise RequestValidationError(
                "invalid party report", "consumer log charge must be non-decreasing")


def _charge_at(times: list[float], charges: list[float], t: float) -> float:
    """Linear interpolation of charge over a log, clamped outside its range."""
    if t <= times[0]:
        return charges[0]
    if t >= times[-1]:
        return charges[-1]
    i = bisect.bisect_right(times, t)
    t0, t1 = times[i - 1], times[i]
    c0, c1 = charges[i - 1], charges[i]
    return c0 + (c1 - c0) * (t - t0) / (t1 - t0)


@dataclass(frozen=True)
class LossBucket:
    start_s: float
    end_s: float
    expended_mwh: float
    gained_mwh: float
    loss_mwh: float


@dataclass(frozen=True)
class LossReport:
    provider_expended_mwh: float
    consumer_gained_mwh: float
    loss_mwh: float
    duration_s: float
    bucket_width_s: float
    buckets: list[LossBucket]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "provider_expended_mwh": self.provider_expended_mwh,
            "consumer_gained_mwh": self.consumer_gained_mwh,
            "loss_mwh": self.loss_mwh,
            "duration_s": self.duration_s,
            "bucket_width_s": self.bucket_width_s,
            "buckets": [
                {"start_s": b.start_s, "end_s": b.end_s,
                 "expended_mwh": b.expended_mwh, "gained_mwh": b.gained_mwh,
                 "loss_mwh": b.loss_mwh}
                for b in self.buckets
            ],
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LossReport":
        return cls(
            provider_expended_mwh=obj["provider_expended_mwh"],
            consumer_gained_mwh=obj["consumer_gained_mwh"],
            loss_mwh=obj["loss_mwh"],
            duration_s=obj["duration_s"],
            bucket_width_s=obj["bucket_width_s"],
            buckets=[LossBucket(b["start_s"], b["end_s"], b["expended_mwh"],
                                b["gained_mwh"], b["loss_mwh"])
                     for b in obj["buckets"]],
            flags=list(obj.get("flags", [])),
        )


def reconcile(provider_report: PartyReport, consumer_report: PartyReport,
              bucket_width_s: float = DEFAULT_BUCKET_S) -> LossReport:
    """Totals and per-bucket energy series from both parties' logs.

    Bucket edges interpolate charge linearly inside each log and hold the
    endpoint values outside its time range, so bucket sums telescope exactly
    to the totals.
    """
    if bucket_width_s <= 0:
        raise RequestValidationError("invalid bucket width",
                                     f"bucket_width_s must be > 0, got {bucket_width_s}")
    validate_party_report(provider_report)
    validate_party_report(consumer_report)
    _check_monotonic(provider_report, Role.PROVIDER)
    _check_monotonic(consumer_report, Role.CONSUMER)

    p_times = [s.t_s for s in provider_report.log]
    p_charges = [s.charge_mwh for s in provider_report.log]
    c_times = [s.t_s for s in consumer_report.log]
    c_charges = [s.charge_mwh for s in consumer_report.log]

    expended = p_charges[0] - p_charges[-1]
    gained = c_charges[-1] - c_charges[0]
    loss = expended - gained

    t_lo = min(p_times[0], c_times[0])
    t_hi = max(p_times[-1], c_times[-1])
    duration = t_hi - t_lo

    buckets: list[LossBucket] = []
    if duration > 0:
        # ceil(duration / width), with a guard against float noise turning an
        # exact multiple into an extra sliver bucket.
        n_buckets = int((duration - 1e-9) // bucket_width_s) + 1
        for i in range(n_buckets):
            start = t_lo + i * bucket_width_s
            end = min(t_lo + (i + 1) * bucket_width_s, t_hi)
            if i == n_buckets - 1:
                end = t_hi
            p0 = _charge_at(p_times, p_charges, start)
            p1 = _charge_at(p_times, p_charges, end)
            c0 = _charge_at(c_times, c_charges, start)
            c1 = _charge_at(c_times, c_charges, end)
            buckets.append(LossBucket(
                start_s=start, end_s=end,
                expended_mwh=p0 - p1, gained_mwh=c1 - c0,
                loss_mwh=(p0 - p1) - (c1 - c0)))
    else:
        buckets.append(LossBucket(t_lo, t_hi, expended, gained, loss))

    return LossReport(
        provider_expended_mwh=expended,
        consumer_gained_mwh=gained,
        loss_mwh=loss,
        duration_s=duration,
        bucket_width_s=bucket_width_s,
        buckets=buckets,
    )


# ---------------------------------------------------------------------------
# Append-only ledger
# ---------------------------------------------------------------------------

class Ledger:
    """One JSON document per line; fsync only where callers ask for it."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fp = open(path, "a", encoding="utf-8")

    def append(self, record: dict, fsync: bool = False) -> None:
        self.append_line(json.dumps(record, separators=(",", ":")), fsync)

    def append_line(self, line: str, fsync: bool = False) -> None:
        self._fp.write(line + "\n")
        self._fp.flush()
        if fsync:
            os.fsync(self._fp.fileno())

    def close(self) -> None:
        self._fp.close()

    @staticmethod
    def replay(path: Path) -> Iterator[dict]:
        if not path.exists():
            return
        with open(path, "r", encoding="utf-8") as fp:
            for line in fp:
                line = line.strip()
                if not line:
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError:
                    # A torn final line from a crash mid-write is dropped.
                    continue


# ---------------------------------------------------------------------------
# Event subscriptions
# ---------------------------------------------------------------------------

class Subscription:
    """Bounded buffer of microcell events; overflow disconnects the subscriber."""

    _CLOSED = object()

    def __init__(self, microcell_id: str, on_close: Callable[["Subscription"], None]):
        self.microcell_id = microcell_id
        self._queue: Queue = Queue(maxsize=EVENT_BUFFER_SIZE)
        self._on_close = on_close
        self.closed = False

    def get(self, timeout_s: float) -> Optional[dict]:
        """Next event, or None on timeout; raises EOFError once closed."""
        if self.closed and self._queue.empty():
            raise EOFError("subscription closed")
        try:
            item = self._queue.get(timeout=timeout_s)
        except Empty:
            if self.closed:
                raise EOFError("subscription closed") from None
            return None
        if item is self._CLOSED:
            raise EOFError("subscription closed")
        return item

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._on_close(self)
            try:
                self._queue.put_nowait(self._CLOSED)
            except Full:
                pass

    def _offer(self, event: dict) -> None:
        try:
            self._queue.put_nowait(event)
        except Full:
            self.close()


# ---------------------------------------------------------------------------
# The coordinator service
# ---------------------------------------------------------------------------

class CoordinatorService:
    """Registry, listings, transaction ledger and event stream for microcells."""

    def __init__(self, data_dir: Optional[Path | str] = None, clock=None,
                 default_bucket_s: float = DEFAULT_BUCKET_S):
        self._clock = clock
        self._default_bucket_s = default_bucket_s
        self._lock = threading.RLock()
        self._devices: dict[str, DeviceProfile] = {}
        self._listings: dict[str, EnergyListing] = {}
        self._listing_order: dict[str, int] = {}
        self._transactions: dict[str, dict] = {}
        self._subs: dict[str, list[Subscription]] = {}
        self._seq = 0
        self._order_counter = 0
        self._ledger: Optional[Ledger] = None
        if data_dir is not None:
            path = Path(data_dir) / LEDGER_FILENAME
            for record in Ledger.replay(path):
                self._apply(record)
            self._ledger = Ledger(path)

    # -- internals -----------------------------------------------------------

    def _now(self) -> float:
        return self._clock.now() if self._clock is not None else time.time()

    def _emit(self, kind: str, microcell_id: str, payload_key: str,
              payload: dict, fsync: bool = False) -> None:
        self._seq += 1
        event = {"seq": self._seq, "kind": kind, "microcell_id": microcell_id,
                 "t_s": self._now(), payload_key: payload}
        # Serialize once under the lock; subscribers get a snapshot decoupled
        # from the live record dict, which keeps later mutations and slow SSE
        # writers from tearing each other.
        line = json.dumps(event, separators=(",", ":"))
        if self._ledger is not None:
            self._ledger.append_line(line, fsync=fsync)
        if self._subs.get(microcell_id):
            snapshot = json.loads(line)
            for sub in list(self._subs[microcell_id]):
                sub._offer(snapshot)

    def _apply(self, record: dict) -> None:
        """Rebuild in-memory state from one replayed ledger record."""
        kind = record.get("kind")
        self._seq = max(self._seq, record.get("seq", 0))
        if kind == "device-registered":
            profile = record["device"]
            self._devices[profile["device_id"]] = DeviceProfile(
                device_id=profile["device_id"],
                display_name=profile["display_name"],
                capacity_mwh=profile["capacity_mwh"],
                microcell_id=profile["microcell_id"],
            )
        elif kind in ("listing-created", "listing-updated"):
            obj = record["listing"]
            listing = EnergyListing(
                listing_id=obj["listing_id"],
                device_id=obj["device_id"],
                microcell_id=obj["microcell_id"],
                role=Role(obj["role"]),
                amount=EnergyAmount(obj["amount_percent"]),
                created_at_s=obj["created_at_s"],
                state=ListingState(obj["state"]),
            )
            if listing.listing_id not in self._listing_order:
                self._order_counter += 1
                self._listing_order[listing.listing_id] = self._order_counter
            self._listings[listing.listing_id] = listing
        elif kind in ("transaction-created", "transaction-updated",
                      "transaction-reconciled"):
            txn = record["transaction"]
            self._transactions[txn["transaction_id"]] = txn

    @staticmethod
    def _listing_dict(listing: EnergyListing) -> dict:
        return {
            "listing_id": listing.listing_id,
            "device_id": listing.device_id,
            "microcell_id": listing.microcell_id,
            "role": listing.role.value,
            "amount_percent": listing.amount.percent,
            "created_at_s": listing.created_at_s,
            "state": listing.state.value,
        }

    @staticmethod
    def _profile_dict(profile: DeviceProfile) -> dict:
        return {
            "device_id": profile.device_id,
            "display_name": profile.display_name,
            "capacity_mwh": profile.capacity_mwh,
            "microcell_id": profile.microcell_id,
        }

    # -- devices ---------------------------------------------------------------

    def register_device(self, profile: DeviceProfile) -> str:
        with self._lock:
            if not profile.device_id:
                profile = replace(profile, device_id=f"dev-{secrets.token_hex(6)}")
            existing = self._devices.get(profile.device_id)
            if existing is not None:
                if existing == profile:
                    return profile.device_id  # idempotent re-registration
                raise ConflictError("conflict",
                                    f"device {profile.device_id} already registered "
                                    "with a different profile")
            self._devices[profile.device_id] = profile
            self._emit("device-registered", profile.microcell_id, "device",
                       self._profile_dict(profile))
            return profile.device_id

    def get_device(self, device_id: str) -> DeviceProfile:
        with self._lock:
            profile = self._devices.get(device_id)
            if profile is None:
                raise NotFoundError(f"unknown device {device_id}")
            return profile

    # -- listings ---------------------------------------------------------------

    def post_listing(self, device_id: str, role: Role, amount: EnergyAmount) -> dict:
        with self._lock:
            profile = self.get_device(device_id)
            for listing in self._listings.values():
                if listing.device_id == device_id and listing.state is ListingState.OPEN:
                    raise ConflictError(
                        "busy", f"device {device_id} already has an open listing",
                        listing.listing_id)
            listing = EnergyListing(
                listing_id=f"lst-{secrets.token_hex(6)}",
                device_id=device_id,
                microcell_id=profile.microcell_id,
                role=role,
                amount=amount,
                created_at_s=self._now(),
            )
            self._order_counter += 1
            self._listing_order[listing.listing_id] = self._order_counter
            self._listings[listing.listing_id] = listing
            self._emit("listing-created", listing.microcell_id, "listing",
                       self._listing_dict(listing))
            return self._listing_dict(listing)

    def withdraw_listing(self, listing_id: str) -> dict:
        with self._lock:
            listing = self._listings.get(listing_id)
            if listing is None:
                raise NotFoundError(f"unknown listing {listing_id}")
            if listing.state is not ListingState.OPEN:
                raise ConflictError("conflict",
                                    f"listing {listing_id} is {listing.state.value}")
            listing.mark_withdrawn()
            self._emit("listing-updated", listing.microcell_id, "listing",
                       self._listing_dict(listing))
            return self._listing_dict(listing)

    def list_open(self, microcell_id: str, role: Optional[Role] = None) -> list[dict]:
        with self._lock:
            rows = [
                listing for listing in self._listings.values()
                if listing.microcell_id == microcell_id
                and listing.state is ListingState.OPEN
                and (role is None or listing.role is role)
            ]
            rows.sort(key=lambda l: (l.created_at_s, self._listing_order[l.listing_id]),
                      reverse=True)
            return [self._listing_dict(l) for l in rows]

    # -- transactions -----------------------------------------------------------

    def _open_listing_for(self, device_id: str, role: Role) -> EnergyListing:
        for listing in self._listings.values():
            if (listing.device_id == device_id and listing.state is ListingState.OPEN
                    and listing.role is role):
                return listing
        raise ConflictError("busy",
                            f"device {device_id} has no open {role.value} listing")

    def create_transaction(self, consumer_id: str, provider_id: str,
                           amount: EnergyAmount, goal_mode: str,
                           duration_s: Optional[float] = None) -> str:
        with self._lock:
            consumer = self.get_device(consumer_id)
            provider = self.get_device(provider_id)
            if consumer.microcell_id != provider.microcell_id:
                raise ConflictError(
                    "locality",
                    f"devices are in different microcells "
                    f"({provider.microcell_id} vs {consumer.microcell_id})")
            if goal_mode not in ("AmountTarget", "DurationTarget"):
                raise RequestValidationError("invalid goal_mode", goal_mode)
            if goal_mode == "DurationTarget":
                if duration_s is None or duration_s <= 0:
                    raise RequestValidationError("invalid duration_s",
                                                 str(duration_s))
            elif duration_s is not None:
                raise RequestValidationError("duration_s not allowed for AmountTarget")

            provider_listing = self._open_listing_for(provider_id, Role.PROVIDER)
            consumer_listing = self._open_listing_for(consumer_id, Role.CONSUMER)
            if not (provider_listing.amount == consumer_listing.amount == amount):
                raise ConflictError(
                    "equal-amount-violation",
                    f"offer {provider_listing.amount.percent}% vs request "
                    f"{consumer_listing.amount.percent}% vs transaction {amount.percent}%")

            txid = secrets.token_hex(16)
            while txid in self._transactions:
                txid = secrets.token_hex(16)

            provider_listing.mark_matched()
            consumer_listing.mark_matched()
            self._emit("listing-updated", provider_listing.microcell_id, "listing",
                       self._listing_dict(provider_listing))
            self._emit("listing-updated", consumer_listing.microcell_id, "listing",
                       self._listing_dict(consumer_listing))

            record = {
                "transaction_id": txid,
                "microcell_id": provider.microcell_id,
                "provider_id": provider_id,
                "consumer_id": consumer_id,
                "amount_percent": amount.percent,
                "goal_mode": goal_mode,
                "created_at_s": self._now(),
                "state": "Created",
                "provider_report": None,
                "consumer_report": None,
                "loss_report": None,
            }
            if goal_mode == "DurationTarget":
                # keep duration next to goal_mode in the serialized record
                record = {
                    **{k: record[k] for k in
                       ("transaction_id", "microcell_id", "provider_id",
                        "consumer_id", "amount_percent", "goal_mode")},
                    "duration_s": float(duration_s),
                    **{k: record[k] for k in
                       ("created_at_s", "state", "provider_report",
                        "consumer_report", "loss_report")},
                }
            self._transactions[txid] = record
            self._emit("transaction-created", record["microcell_id"], "transaction",
                       record, fsync=True)
            return txid

    def _get_record(self, transaction_id: str) -> dict:
        record = self._transactions.get(transaction_id)
        if record is None:
            raise NotFoundError(f"unknown transaction {transaction_id}")
        return record

    def get_transaction(self, transaction_id: str) -> dict:
        with self._lock:
            # Copy so callers never alias the live record (a racing report
            # submission must not tear a reader's serialization).
            return json.loads(json.dumps(self._get_record(transaction_id)))

    def _flags_for(self, record: dict, report: LossReport) -> list[str]:
        """Discrepancies are recorded, not rejected."""
        flags: list[str] = []
        if record["goal_mode"] == "AmountTarget":
            consumer = self._devices.get(record["consumer_id"])
            provider = self._devices.get(record["provider_id"])
            pct = record["amount_percent"]
            if consumer is not None:
                target = consumer.capacity_mwh * pct / 100.0
                if report.consumer_gained_mwh > target + REPORT_MATCH_TOLERANCE_MWH:
                    flags.append("consumer-gained-exceeds-request")
            if provider is not None:
                cap = provider.capacity_mwh * pct / 100.0
                if report.provider_expended_mwh > cap + REPORT_MATCH_TOLERANCE_MWH:
                    flags.append("provider-expended-exceeds-offer")
        return flags

    def submit_report(self, transaction_id: str, report: PartyReport) -> str:
        with self._lock:
            record = self._get_record(transaction_id)
            if record["state"] in ("Reconciled", "ReconciledPartial"):
                raise ConflictError("already-reported",
                                    f"transaction is {record['state']}")
            if report.device_id == record["provider_id"]:
                slot, role = "provider_report", Role.PROVIDER
            elif report.device_id == record["consumer_id"]:
                slot, role = "consumer_report", Role.CONSUMER
            else:
                raise ForbiddenError(
                    f"device {report.device_id} is not a party to this transaction")
            if record[slot] is not None:
                raise ConflictError("already-reported",
                                    f"{role.value} report already submitted")
            validate_party_report(report)
            _check_monotonic(report, role)

            record[slot] = report.to_dict()
            if record["provider_report"] is not None and record["consumer_report"] is not None:
                provider_report = PartyReport.from_dict(record["provider_report"])
                consumer_report = PartyReport.from_dict(record["consumer_report"])
                loss = reconcile(provider_report, consumer_report,
                                 self._default_bucket_s)
                loss = replace(loss, flags=self._flags_for(record, loss))
                aborted = (provider_report.end_reason is EndReason.ABORTED
                           or consumer_report.end_reason is EndReason.ABORTED)
                record["state"] = "ReconciledPartial" if aborted else "Reconciled"
                record["loss_report"] = loss.to_dict()
                self._emit("transaction-reconciled", record["microcell_id"],
                           "transaction", record, fsync=True)
            else:
                record["state"] = "AwaitingReports"
                self._emit("transaction-updated", record["microcell_id"],
                           "transaction", record, fsync=True)
            return record["state"]

    def loss_report(self, transaction_id: str,
                    bucket_width_s: Optional[float] = None) -> dict:
        with self._lock:
            record = self._get_record(transaction_id)
            if record["state"] not in ("Reconciled", "ReconciledPartial"):
                raise ConflictError("not-reconciled",
                                    f"transaction is {record['state']}")
            stored = LossReport.from_dict(record["loss_report"])
            if bucket_width_s is None or bucket_width_s == stored.bucket_width_s:
                return json.loads(json.dumps(record["loss_report"]))
            fresh = reconcile(PartyReport.from_dict(record["provider_report"]),
                              PartyReport.from_dict(record["consumer_report"]),
                              bucket_width_s)
            return replace(fresh, flags=stored.flags).to_dict()

    # -- events -------------------------------------------------------------------

    def subscribe(self, microcell_id: str) -> Subscription:
        sub = Subscription(microcell_id, self._drop_subscription)
        with self._lock:
            self._subs.setdefault(microcell_id, []).append(sub)
        return sub

    def _drop_subscription(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subs.get(sub.microcell_id, [])
            if sub in subs:
                subs.remove(sub)

    def close(self) -> None:
        with self._lock:
            for subs in self._subs.values():
                for sub in list(subs):
                    sub.close()
            if self._ledger is not None:
                self._ledger.close()
                self._ledger = None
