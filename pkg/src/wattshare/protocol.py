"""Peer-to-peer handshake and transfer lifecycle for one provider/consumer pair.

Both roles are pure state machines: ``consumer_handle`` and ``provider_handle``
map (state, event) to (next state, actions) and never touch a socket or a
clock themselves. The surrounding agent executes the returned actions, which
keeps every transition unit-testable and the whole lifecycle replayable.

Wire format: one UTF-8 JSON object per link frame, mandatory "type" tag,
fixed key order, no extra whitespace, so encodings are byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Union

from .battery import EndReason
from .domain import EnergyAmount, Role

# Timer identifiers used in SetTimer/CancelTimer actions.
ACCEPT_TIMER = "accept-timeout"
PEER_LOSS_TIMER = "peer-loss"

# Human-scale yet test-fast defaults; nothing in the transfer flow itself
# constrains these.
ACCEPT_TIMEOUT_S = 30.0
HEARTBEAT_MISSES = 3


@dataclass(frozen=True)
class ProtocolTimers:
    accept_timeout_s: float = ACCEPT_TIMEOUT_S
    peer_loss_s: float = HEARTBEAT_MISSES * 5.0


DEFAULT_TIMERS = ProtocolTimers()


class DecodeError(ValueError):
    """A frame payload that is not a valid protocol message."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind}: {detail}" if detail else kind)


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoleAnnounce:
    device_id: str
    role: Role
    amount: EnergyAmount
    capacity_mwh: float


@dataclass(frozen=True)
class EnergyRequest:
    request_id: str
    amount: EnergyAmount


@dataclass(frozen=True)
class Accept:
    request_id: str


@dataclass(frozen=True)
class Reject:
    request_id: str
    reason: str


@dataclass(frozen=True)
class TransferStart:
    transaction_id: str
    start_time_s: float


@dataclass(frozen=True)
class Heartbeat:
    t_s: float


@dataclass(frozen=True)
class TransferComplete:
    transaction_id: str
    end_reason: EndReason


@dataclass(frozen=True)
class Abort:
    reason: str
    transaction_id: Optional[str] = None
    request_id: Optional[str] = None


ProtocolMessage = Union[RoleAnnounce, EnergyRequest, Accept, Reject,
                        TransferStart, Heartbeat, TransferComplete, Abort]


def encode_message(msg: ProtocolMessage) -> bytes:
    """Deterministic UTF-8 JSON encoding; key order fixed, no whitespace."""
    if isinstance(msg, RoleAnnounce):
        obj = {"type": "ROLE_ANNOUNCE", "device_id": msg.device_id,
               "role": msg.role.value, "amount": msg.amount.percent,
               "capacity_mwh": float(msg.capacity_mwh)}
    elif isinstance(msg, EnergyRequest):
        obj = {"type": "ENERGY_REQUEST", "request_id": msg.request_id,
               "amount": msg.amount.percent}
    elif isinstance(msg, Accept):
        obj = {"type": "ACCEPT", "request_id": msg.request_id}
    elif isinstance(msg, Reject):
        obj = {"type": "REJECT", "request_id": msg.request_id, "reason": msg.reason}
    elif isinstance(msg, TransferStart):
        obj = {"type": "TRANSFER_START", "transaction_id": msg.transaction_id,
               "start_time_s": float(msg.start_time_s)}
    elif isinstance(msg, Heartbeat):
        obj = {"type": "HEARTBEAT", "t_s": float(msg.t_s)}
    elif isinstance(msg, TransferComplete):
        obj = {"type": "TRANSFER_COMPLETE", "transaction_id": msg.transaction_id,
               "end_reason": msg.end_reason.value}
    elif isinstance(msg, Abort):
        obj = {"type": "ABORT"}
        if msg.transaction_id is not None:
            obj["transaction_id"] = msg.transaction_id
        if msg.request_id is not None:
            obj["request_id"] = msg.request_id
        obj["reason"] = msg.reason
    else:
        raise TypeError(f"not a protocol message: {msg!r}")
    return json.dumps(obj, separators=(",", ":")).encode("utf-8")


def _field(obj: dict, name: str, types) -> object:
    if name not in obj:
        raise DecodeError("missing-field", name)
    value = obj[name]
    if not isinstance(value, types) or isinstance(value, bool):
        raise DecodeError("invalid-field", name)
    return value


def decode_message(data: bytes) -> ProtocolMessage:
    """Inverse of encode_message; raises DecodeError naming the bad field."""
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError("malformed", str(exc)) from exc
    if not isinstance(obj, dict):
        raise DecodeError("malformed", "payload is not an object")

    msg_type = obj.get("type")
    if not isinstance(msg_type, str):
        raise DecodeError("missing-field", "type")

    try:
        if msg_type == "ROLE_ANNOUNCE":
            role_text = _field(obj, "role", str)
            try:
                role = Role(role_text)
            except ValueError as exc:
                raise DecodeError("invalid-field", "role") from exc
            return RoleAnnounce(
                device_id=_field(obj, "device_id", str),
                role=role,
                amount=EnergyAmount(_field(obj, "amount", int)),
                capacity_mwh=float(_field(obj, "capacity_mwh", (int, float))),
            )
        if msg_type == "ENERGY_REQUEST":
            return EnergyRequest(
                request_id=_field(obj, "request_id", str),
                amount=EnergyAmount(_field(obj, "amount", int)),
            )
        if msg_type == "ACCEPT":
            return Accept(request_id=_field(obj, "request_id", str))
        if msg_type == "REJECT":
            return Reject(request_id=_field(obj, "request_id", str),
                          reason=_field(obj, "reason", str))
        if msg_type == "TRANSFER_START":
            return TransferStart(
                transaction_id=_field(obj, "transaction_id", str),
                start_time_s=float(_field(obj, "start_time_s", (int, float))),
            )
        if msg_type == "HEARTBEAT":
            return Heartbeat(t_s=float(_field(obj, "t_s", (int, float))))
        if msg_type == "TRANSFER_COMPLETE":
            reason_text = _field(obj, "end_reason", str)
            try:
                end_reason = EndReason(reason_text)
            except ValueError as exc:
                raise DecodeError("invalid-field", "end_reason") from exc
            return TransferComplete(
                transaction_id=_field(obj, "transaction_id", str),
                end_reason=end_reason,
            )
        if msg_type == "ABORT":
            txid = obj.get("transaction_id")
            reqid = obj.get("request_id")
            if txid is not None and not isinstance(txid, str):
                raise DecodeError("invalid-field", "transaction_id")
            if reqid is not None and not isinstance(reqid, str):
                raise DecodeError("invalid-field", "request_id")
            if txid is None and reqid is None:
                raise DecodeError("missing-field", "transaction_id or request_id")
            return Abort(reason=_field(obj, "reason", str),
                         transaction_id=txid, request_id=reqid)
    except DecodeError:
        raise
    except ValueError as exc:
        # e.g. an out-of-range EnergyAmount percent
        raise DecodeError("invalid-field", str(exc)) from exc
    raise DecodeError("unknown-type", msg_type)


# ---------------------------------------------------------------------------
# Events fed to the state machines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Received:
    msg: ProtocolMessage
    t_s: float = 0.0


@dataclass(frozen=True)
class CmdConnect:
    """Link is up and the local role is chosen; carries our announcement."""
    announce: RoleAnnounce
    t_s: float = 0.0


@dataclass(frozen=True)
class CmdRequest:
    request_id: str
    amount: EnergyAmount
    t_s: float = 0.0


@dataclass(frozen=True)
class CmdAccept:
    t_s: float = 0.0


@dataclass(frozen=True)
class CmdReject:
    reason: str
    t_s: float = 0.0


@dataclass(frozen=True)
class CmdAbort:
    t_s: float = 0.0


@dataclass(frozen=True)
class TimerFired:
    timer_id: str
    t_s: float = 0.0


@dataclass(frozen=True)
class LinkDownEvent:
    t_s: float = 0.0


@dataclass(frozen=True)
class RegisterOutcome:
    ok: bool
    transaction_id: str = ""
    reason: str = ""
    t_s: float = 0.0


@dataclass(frozen=True)
class ReportOutcome:
    ok: bool
    detail: str = ""
    t_s: float = 0.0


@dataclass(frozen=True)
class TransferFinished:
    """Provider-local: the sampling loop hit a termination condition."""
    end_reason: EndReason
    t_s: float = 0.0


Event = Union[Received, CmdConnect, CmdRequest, CmdAccept, CmdReject, CmdAbort,
              TimerFired, LinkDownEvent, RegisterOutcome, ReportOutcome,
              TransferFinished]


# ---------------------------------------------------------------------------
# Actions emitted by the state machines (descriptions only; no I/O here)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SendMessage:
    msg: ProtocolMessage


@dataclass(frozen=True)
class RegisterTransaction:
    request_id: str
    amount: EnergyAmount


@dataclass(frozen=True)
class StartSampling:
    pass


@dataclass(frozen=True)
class StopSampling:
    pass


@dataclass(frozen=True)
class SubmitReport:
    transaction_id: str


@dataclass(frozen=True)
class SetTimer:
    id: str
    deadline_s: float


@dataclass(frozen=True)
class CancelTimer:
    id: str


@dataclass(frozen=True)
class RaiseProtocolError:
    detail: str


Action = Union[SendMessage, RegisterTransaction, StartSampling, StopSampling,
               SubmitReport, SetTimer, CancelTimer, RaiseProtocolError]


# ---------------------------------------------------------------------------
# Consumer states
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConsumerIdle:
    pass


@dataclass(frozen=True)
class ConsumerConnected:
    pass


@dataclass(frozen=True)
class AwaitingAccept:
    request_id: str
    deadline_s: float
    amount: EnergyAmount


@dataclass(frozen=True)
class Registering:
    request_id: str
    amount: EnergyAmount


@dataclass(frozen=True)
class ConsumerTransferring:
    transaction_id: str
    started_at_s: float


@dataclass(frozen=True)
class ConsumerFinalizing:
    transaction_id: str
    end_reason: EndReason


@dataclass(frozen=True)
class ConsumerDone:
    end_reason: EndReason


@dataclass(frozen=True)
class ConsumerAborted:
    reason: str


ConsumerState = Union[ConsumerIdle, ConsumerConnected, AwaitingAccept, Registering,
                      ConsumerTransferring, ConsumerFinalizing, ConsumerDone,
                      ConsumerAborted]


# ---------------------------------------------------------------------------
# Provider states
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProviderIdle:
    pass


@dataclass(frozen=True)
class ProviderConnected:
    pass


@dataclass(frozen=True)
class Deciding:
    request_id: str
    amount: EnergyAmount


@dataclass(frozen=True)
class AwaitingStart:
    request_id: str
    amount: EnergyAmount


@dataclass(frozen=True)
class ProviderTransferring:
    transaction_id: str
    started_at_s: float


@dataclass(frozen=True)
class ProviderFinalizing:
    transaction_id: str
    end_reason: EndReason


@dataclass(frozen=True)
class ProviderDone:
    end_reason: EndReason


@dataclass(frozen=True)
class ProviderAborted:
    reason: str


ProviderState = Union[ProviderIdle, ProviderConnected, Deciding, AwaitingStart,
                      ProviderTransferring, ProviderFinalizing, ProviderDone,
                      ProviderAborted]


def state_tag(state: ConsumerState | ProviderState) -> str:
    """Short text tag for status displays: Idle, Deciding, Transferring, ..."""
    name = type(state).__name__
    for prefix in ("Consumer", "Provider"):
        if name.startswith(prefix):
            return name[len(prefix):]
    return name


def _undefined(state, event) -> tuple:
    return state, [RaiseProtocolError(
        detail=f"unexpected {type(event).__name__} in {state_tag(state)}")]


# ---------------------------------------------------------------------------
# Consumer transition table
# ---------------------------------------------------------------------------

def consumer_handle(
    state: ConsumerState,
    event: Event,
    timers: ProtocolTimers = DEFAULT_TIMERS,
) -> tuple[ConsumerState, list[Action]]:
    match state, event:
        case ConsumerIdle(), CmdConnect(announce=announce):
            return ConsumerConnected(), [SendMessage(announce)]

        case ConsumerConnected(), CmdRequest(request_id=rid, amount=amount, t_s=now):
            deadline = now + timers.accept_timeout_s
            return (AwaitingAccept(rid, deadline, amount),
                    [SendMessage(EnergyRequest(rid, amount)),
                     SetTimer(ACCEPT_TIMER, deadline)])

        # Peer announcements carry context for the agent and may arrive at
        # any point of the handshake; no protocol action in any state.
        case _, Received(msg=RoleAnnounce()):
            return state, []

        case AwaitingAccept(request_id=rid, amount=amount), Received(msg=Accept(request_id=got)):
            if got != rid:
                return _undefined(state, event)
            return Registering(rid, amount), [RegisterTransaction(rid, amount)]

        case AwaitingAccept(request_id=rid), Received(msg=Reject(request_id=got, reason=why)):
            if got != rid:
                return _undefined(state, event)
            return ConsumerAborted(f"rejected: {why}"), [CancelTimer(ACCEPT_TIMER)]

        case AwaitingAccept(request_id=rid), TimerFired(timer_id=tid):
            if tid != ACCEPT_TIMER:
                return state, []
            return (ConsumerAborted("timeout"),
                    [SendMessage(Abort(reason="timeout", request_id=rid))])

        case AwaitingAccept(request_id=rid), Received(msg=Abort(reason=why)):
            return ConsumerAborted(f"peer-abort: {why}"), [CancelTimer(ACCEPT_TIMER)]

        case AwaitingAccept(), LinkDownEvent():
            return ConsumerAborted("link-down"), [CancelTimer(ACCEPT_TIMER)]

        case Registering(), RegisterOutcome(ok=True, transaction_id=txid, t_s=now):
            return (ConsumerTransferring(txid, now),
                    [SendMessage(TransferStart(txid, now)),
                     StartSampling(),
                     SetTimer(PEER_LOSS_TIMER, now + timers.peer_loss_s)])

        case Registering(request_id=rid), RegisterOutcome(ok=False, reason=why):
            return (ConsumerAborted("registration-failed"),
                    [SendMessage(Abort(reason=f"registration-failed: {why}",
                                       request_id=rid))])

        case Registering(), LinkDownEvent():
            return ConsumerAborted("link-down"), []

        case ConsumerTransferring(), Received(msg=Heartbeat(), t_s=now):
            # Energy mirroring happens in the agent; here we only refresh
            # the peer-loss deadline.
            return state, [SetTimer(PEER_LOSS_TIMER, now + timers.peer_loss_s)]

        case ConsumerTransferring(transaction_id=txid), Received(msg=TransferComplete(transaction_id=got, end_reason=reason)):
            if got != txid:
                return _undefined(state, event)
            return (ConsumerFinalizing(txid, reason),
                    [StopSampling(), CancelTimer(PEER_LOSS_TIMER), SubmitReport(txid)])

        case ConsumerTransferring(transaction_id=txid), LinkDownEvent():
            return ConsumerAborted("link-down"), [StopSampling(), SubmitReport(txid)]

        case ConsumerTransferring(transaction_id=txid), TimerFired(timer_id=tid):
            if tid != PEER_LOSS_TIMER:
                return state, []
            return (ConsumerAborted("peer-lost"),
                    [SendMessage(Abort(reason="peer-lost", transaction_id=txid)),
                     StopSampling(), SubmitReport(txid)])

        case ConsumerTransferring(transaction_id=txid), Received(msg=Abort(reason=why)):
            return (ConsumerAborted(f"peer-abort: {why}"),
                    [StopSampling(), CancelTimer(PEER_LOSS_TIMER), SubmitReport(txid)])

        case ConsumerTransferring(transaction_id=txid), CmdAbort():
            return (ConsumerAborted("user-abort"),
                    [SendMessage(Abort(reason="user-abort", transaction_id=txid)),
                     StopSampling(), CancelTimer(PEER_LOSS_TIMER), SubmitReport(txid)])

        case ConsumerFinalizing(end_reason=reason), ReportOutcome(ok=True):
            return ConsumerDone(reason), []

        case ConsumerFinalizing(), ReportOutcome(ok=False, detail=detail):
            return ConsumerAborted(f"report-failed: {detail}"), []

        case ConsumerFinalizing(), (LinkDownEvent() | Received(msg=Heartbeat())):
            return state, []

        # Pre-transfer aborts from the local operator.
        case (ConsumerConnected() | AwaitingAccept() | Registering()), CmdAbort():
            return ConsumerAborted("user-abort"), [SendMessage(Abort(reason="user-abort",
                                                                     request_id="-"))]

        # Terminal states absorb stragglers silently, including the outcome
        # of the partial report an abort transition submitted.
        case (ConsumerDone() | ConsumerAborted()), (Received(msg=Heartbeat())
                                                    | Received(msg=TransferComplete())
                                                    | Received(msg=Abort())
                                                    | LinkDownEvent()
                                                    | ReportOutcome()
                                                    | TimerFired()):
            return state, []

        # Stale timers are ignored everywhere else.
        case _, TimerFired():
            return state, []

    return _undefined(state, event)


# ---------------------------------------------------------------------------
# Provider transition table
# ---------------------------------------------------------------------------

def provider_handle(
    state: ProviderState,
    event: Event,
    timers: ProtocolTimers = DEFAULT_TIMERS,
) -> tuple[ProviderState, list[Action]]:
    # One-to-one mode: any provider that is not plain Connected answers
    # every energy request with a busy rejection, state unchanged.
    if isinstance(event, Received) and isinstance(event.msg, EnergyRequest) \
            and not isinstance(state, ProviderConnected):
        return state, [SendMessage(Reject(event.msg.request_id, "busy"))]

    match state, event:
        case ProviderIdle(), CmdConnect(announce=announce):
            return ProviderConnected(), [SendMessage(announce)]

        case _, Received(msg=RoleAnnounce()):
            return state, []

        case ProviderConnected(), Received(msg=EnergyRequest(request_id=rid, amount=amount)):
            return Deciding(rid, amount), []

        case Deciding(request_id=rid, amount=amount), CmdAccept():
            return AwaitingStart(rid, amount), [SendMessage(Accept(rid))]

        case Deciding(request_id=rid), CmdReject(reason=why):
            return ProviderConnected(), [SendMessage(Reject(rid, why))]

        case Deciding(), Received(msg=Abort()):
            return ProviderConnected(), []

        case Deciding(), LinkDownEvent():
            return ProviderAborted("link-down"), []

        case AwaitingStart(), Received(msg=TransferStart(transaction_id=txid, start_time_s=_), t_s=now):
            return ProviderTransferring(txid, now), [StartSampling()]

        case AwaitingStart(), Received(msg=Abort(reason=why)):
            return ProviderAborted(f"peer-abort: {why}"), []

        case AwaitingStart(), LinkDownEvent():
            return ProviderAborted("link-down"), []

        case ProviderTransferring(transaction_id=txid), TransferFinished(end_reason=reason):
            return (ProviderFinalizing(txid, reason),
                    [SendMessage(TransferComplete(txid, reason)),
                     StopSampling(), SubmitReport(txid)])

        case ProviderTransferring(transaction_id=txid), LinkDownEvent():
            return ProviderAborted("link-down"), [StopSampling(), SubmitReport(txid)]

        case ProviderTransferring(transaction_id=txid), Received(msg=Abort(reason=why)):
            return (ProviderAborted(f"peer-abort: {why}"),
                    [StopSampling(), SubmitReport(txid)])

        case ProviderTransferring(transaction_id=txid), CmdAbort():
            return (ProviderAborted("user-abort"),
                    [SendMessage(Abort(reason="user-abort", transaction_id=txid)),
                     StopSampling(), SubmitReport(txid)])

        case ProviderFinalizing(end_reason=reason), ReportOutcome(ok=True):
            return ProviderDone(reason), []

        case ProviderFinalizing(), ReportOutcome(ok=False, detail=detail):
            return ProviderAborted(f"report-failed: {detail}"), []

        case ProviderFinalizing(), (LinkDownEvent() | Received(msg=Abort())):
            return state, []

        case (ProviderConnected() | Deciding() | AwaitingStart()), CmdAbort():
            return ProviderAborted("user-abort"), [SendMessage(Abort(reason="user-abort",
                                                                     request_id="-"))]

        case (ProviderDone() | ProviderAborted()), (Received(msg=Heartbeat())
                                                    | Received(msg=TransferComplete())
                                                    | Received(msg=Abort())
                                                    | LinkDownEvent()
                                                    | ReportOutcome()
                                                    | TimerFired()):
            return state, []

        case _, TimerFired():
            return state, []

    return _undefined(state, event)
