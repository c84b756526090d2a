"""Runtime for one simulated device.

The agent owns a battery, feeds events (link frames, timers, sampling ticks,
operator commands) through one mailbox into its protocol state machine, and
executes the actions the machine returns. The provider side computes the
authoritative energy flow on its sampling ticks and publishes each step in a
heartbeat; the consumer mirrors those receipts onto its own battery, so both
telemetry logs describe the same transfer without a shared world object.

Embedded mode processes events inline on the virtual clock (deterministic,
no threads); threaded mode runs the same logic behind a queue for live
agents with a wall clock.
"""

from __future__ import annotations

import logging
import queue
import secrets
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from . import protocol
from .battery import (
    EndReason,
    TelemetrySample,
    TerminationGoal,
    TransferParams,
    clamp_final_dt,
    drained_mwh,
    take_sample,
)
from .clock import TimerHandle
from .coordinator import PartyReport, ServiceError
from .domain import (
    BatteryState,
    DeviceProfile,
    EnergyAmount,
    Role,
    apply_delta,
    percent_to_energy,
)
from .link import Frame, LinkDownError, LinkEndpoint
from .protocol import (
    ConsumerConnected,
    ConsumerFinalizing,
    ConsumerIdle,
    ConsumerTransferring,
    Deciding,
    DecodeError,
    Heartbeat,
    ProviderFinalizing,
    ProviderIdle,
    ProviderTransferring,
    ProtocolTimers,
    RoleAnnounce,
    state_tag,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration and commands
# ---------------------------------------------------------------------------

class AgentMode:
    SCRIPTED = "Scripted"
    INTERACTIVE = "Interactive"


@dataclass(frozen=True)
class AgentConfig:
    profile: DeviceProfile
    initial_level_percent: float
    params: TransferParams = TransferParams()
    coordinator_url: Optional[str] = None
    control_port: Optional[int] = None
    mode: str = AgentMode.SCRIPTED

    def __post_init__(self) -> None:
        if not 0 <= self.initial_level_percent <= 100:
            raise ValueError(
                f"initial_level_percent must be in [0, 100], "
                f"got {self.initial_level_percent}")


@dataclass(frozen=True)
class Offer:
    amount: EnergyAmount


@dataclass(frozen=True)
class Request:
    amount: EnergyAmount
    duration_s: Optional[float] = None


@dataclass(frozen=True)
class AcceptPending:
    pass


@dataclass(frozen=True)
class RejectPending:
    reason: str = "declined"


@dataclass(frozen=True)
class Abort:
    pass


@dataclass(frozen=True)
class Shutdown:
    pass


AgentCommand = Union[Offer, Request, AcceptPending, RejectPending, Abort, Shutdown]


def parse_command(obj: dict) -> AgentCommand:
    """Operator command from its JSON form (scenario steps, control API)."""
    kind = obj.get("kind")
    if kind == "offer":
        return Offer(EnergyAmount(obj["amount_percent"]))
    if kind == "request":
        duration = obj.get("duration_s")
        return Request(EnergyAmount(obj["amount_percent"]),
                       float(duration) if duration is not None else None)
    if kind == "accept":
        return AcceptPending()
    if kind == "reject":
        return RejectPending(obj.get("reason", "declined"))
    if kind == "abort":
        return Abort()
    if kind == "shutdown":
        return Shutdown()
    raise ValueError(f"unknown command kind {kind!r}")


class CommandRejected(Exception):
    """Command invalid in the agent's current state."""


@dataclass(frozen=True)
class AgentStatus:
    device_id: str
    role: Optional[Role]
    protocol_state: str
    battery: BatteryState
    active_transaction_id: Optional[str]
    last_sample: Optional[TelemetrySample]


# Internal mailbox items beyond protocol events.
@dataclass(frozen=True)
class _Tick:
    generation: int


@dataclass(frozen=True)
class _CommandItem:
    command: AgentCommand
    reply: Optional[queue.Queue] = None


@dataclass(frozen=True)
class _AttachLinkItem:
    endpoint: LinkEndpoint


@dataclass
class _Session:
    """Per-transfer bookkeeping shared by provider and consumer roles."""
    goal: Optional[TerminationGoal]
    consumer_view: Optional[BatteryState]  # provider's pair tracking
    t: float = 0.0
    expended_mwh: float = 0.0
    gained_mwh: float = 0.0
    log: list[TelemetrySample] = field(default_factory=list)
    sampling: bool = False
    report_submitted: bool = False


class DeviceAgent:
    """One simulated device: battery, protocol machine, link and coordinator I/O."""

    def __init__(self, config: AgentConfig, coordinator, clock,
                 embedded: bool = True):
        self.config = config
        self.coordinator = coordinator
        self.clock = clock
        self.embedded = embedded
        capacity = config.profile.capacity_mwh
        self.battery = BatteryState(capacity,
                                    capacity * config.initial_level_percent / 100.0)
        self.role: Optional[Role] = None
        self.state = None  # ConsumerState | ProviderState once a role is chosen
        self.endpoint: Optional[LinkEndpoint] = None
        self.protocol_errors: list[str] = []
        self.last_transaction_id: Optional[str] = None

        self._amount: Optional[EnergyAmount] = None
        self._duration_s: Optional[float] = None
        self._peer_announce: Optional[RoleAnnounce] = None
        self._deferred_request: Optional[protocol.CmdRequest] = None
        self._session: Optional[_Session] = None
        self._timers: dict[str, TimerHandle] = {}
        self._tick_handle: Optional[TimerHandle] = None
        self._tick_generation = 0
        self._listeners: list[Callable[[str, dict], None]] = []
        self._pending: list = []
        self._processing = False
        self._stopped = False

        self._mailbox: Optional[queue.Queue] = None
        self._thread: Optional[threading.Thread] = None
        if not embedded:
            self._mailbox = queue.Queue()
            self._thread = threading.Thread(target=self._run_loop, daemon=True,
                                            name=f"agent-{config.profile.device_id}")

    # ------------------------------------------------------------------ setup

    def start(self) -> None:
        """Register with the coordinator and start processing events."""
        self.coordinator.register_device(self.config.profile)
        if self._thread is not None:
            self._thread.start()

    def attach_link(self, endpoint: LinkEndpoint) -> None:
        self.endpoint = endpoint
        endpoint.set_receiver(self._on_frame, self._on_link_down)
        self._maybe_connect()

    def attach_link_async(self, endpoint: LinkEndpoint) -> None:
        """Attach from another thread by routing through the mailbox."""
        self.post(_AttachLinkItem(endpoint))

    def add_listener(self, fn: Callable[[str, dict], None]) -> None:
        """fn(kind, payload) with kind in {status, prompt}; called on the loop."""
        self._listeners.append(fn)

    # ------------------------------------------------------------------ intake

    def _on_frame(self, frame: Frame) -> None:
        try:
            msg = protocol.decode_message(frame.payload)
        except DecodeError as exc:
            log.warning("%s: undecodable frame dropped: %s",
                        self.config.profile.device_id, exc)
            return
        self.post(protocol.Received(msg, t_s=self.clock.now()))

    def _on_link_down(self) -> None:
        self.post(protocol.LinkDownEvent(t_s=self.clock.now()))

    def post(self, event) -> None:
        if self.embedded:
            self._process(event)
        else:
            self._mailbox.put(event)

    def _run_loop(self) -> None:
        while not self._stopped:
            item = self._mailbox.get()
            if item is None:
                break
            try:
                self._process(item)
            except Exception:
                log.exception("%s: event processing failed",
                              self.config.profile.device_id)

    # ------------------------------------------------------------------ commands

    def submit(self, command: AgentCommand):
        """Run an operator command; raises CommandRejected when invalid."""
        if self.embedded:
            return self._handle_command(command)
        reply: queue.Queue = queue.Queue()
        self._mailbox.put(_CommandItem(command, reply))
        outcome = reply.get(timeout=30.0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome

    def _handle_command(self, command: AgentCommand):
        if isinstance(command, Offer):
            return self._cmd_choose_role(Role.PROVIDER, command.amount, None)
        if isinstance(command, Request):
            return self._cmd_choose_role(Role.CONSUMER, command.amount,
                                         command.duration_s)
        if isinstance(command, AcceptPending):
            if not isinstance(self.state, Deciding):
                raise CommandRejected("invalid-in-state: no pending request")
            floor = self.config.params.provider_floor_percent
            if self.battery.level_percent <= floor:
                self._feed(protocol.CmdReject("provider-floor",
                                              t_s=self.clock.now()))
                raise CommandRejected(
                    f"invalid-in-state: battery at {self.battery.level_percent:.1f}% "
                    f"is at or below the {floor:.0f}% floor; request rejected")
            self._feed(protocol.CmdAccept(t_s=self.clock.now()))
            return None
        if isinstance(command, RejectPending):
            if not isinstance(self.state, Deciding):
                raise CommandRejected("invalid-in-state: no pending request")
            self._feed(protocol.CmdReject(command.reason, t_s=self.clock.now()))
            return None
        if isinstance(command, Abort):
            if self.state is None:
                raise CommandRejected("invalid-in-state: no session")
            self._feed(protocol.CmdAbort(t_s=self.clock.now()))
            return None
        if isinstance(command, Shutdown):
            self._stopped = True
            if self._mailbox is not None:
                self._mailbox.put(None)
            return None
        raise CommandRejected(f"unknown command {command!r}")

    def _cmd_choose_role(self, role: Role, amount: EnergyAmount,
                         duration_s: Optional[float]):
        if self.role is not None:
            raise CommandRejected(f"invalid-in-state: already {self.role.value}")
        # The listing is posted first so the coordinator can match both
        # parties when the consumer registers the transaction.
        listing = self.coordinator.post_listing(
            self.config.profile.device_id, self.config.profile.microcell_id,
            role, amount)
        self.role = role
        self._amount = amount
        self._duration_s = duration_s
        self.state = ProviderIdle() if role is Role.PROVIDER else ConsumerIdle()
        if role is Role.CONSUMER:
            request_id = f"req-{secrets.token_hex(4)}"
            self._deferred_request = protocol.CmdRequest(request_id, amount,
                                                         t_s=self.clock.now())
        self._maybe_connect()
        self._emit_status()
        return listing

    def _maybe_connect(self) -> None:
        if self.endpoint is None or self.role is None:
            return
        if isinstance(self.state, (ProviderIdle, ConsumerIdle)):
            announce = RoleAnnounce(
                device_id=self.config.profile.device_id,
                role=self.role,
                amount=self._amount,
                capacity_mwh=self.config.profile.capacity_mwh,
            )
            self._feed(protocol.CmdConnect(announce, t_s=self.clock.now()))
        # A request made before the link was up fires once we are connected.
        if self._deferred_request is not None and isinstance(self.state,
                                                             ConsumerConnected):
            request, self._deferred_request = self._deferred_request, None
            self._feed(request)

    # ------------------------------------------------------------------ the loop

    def _feed(self, event) -> None:
        """Queue a protocol event for processing within the current drain."""
        self._pending.append(event)
        self._drain()

    def _process(self, item) -> None:
        if isinstance(item, _CommandItem):
            try:
                outcome = self._handle_command(item.command)
            except Exception as exc:
                outcome = exc
            if item.reply is not None:
                item.reply.put(outcome)
            return
        if isinstance(item, _Tick):
            if item.generation == self._tick_generation:
                self._tick()
            return
        if isinstance(item, _AttachLinkItem):
            self.attach_link(item.endpoint)
            return
        self._pending.append(item)
        self._drain()

    def _drain(self) -> None:
        if self._processing:
            return
        self._processing = True
        try:
            while self._pending:
                event = self._pending.pop(0)
                self._step(event)
        finally:
            self._processing = False

    def _step(self, event) -> None:
        if isinstance(event, protocol.Received) and isinstance(event.msg, RoleAnnounce):
            # Cache peer identity/capacity even before our own role is chosen.
            self._peer_announce = event.msg
        if self.state is None or self.role is None:
            return  # no role chosen yet; nothing else to do with protocol traffic
        if isinstance(event, protocol.Received) and isinstance(event.msg, Heartbeat):
            self._mirror_step(event.msg.t_s)

        was_deciding = isinstance(self.state, Deciding)
        timers = ProtocolTimers(peer_loss_s=3 * self.config.params.sampling_period_s)
        if self.role is Role.CONSUMER:
            new_state, actions = protocol.consumer_handle(self.state, event, timers)
        else:
            new_state, actions = protocol.provider_handle(self.state, event, timers)
        self.state = new_state
        active = self._active_transaction_id()
        if active is not None:
            self.last_transaction_id = active
        for action in actions:
            self._perform(action)
        if isinstance(self.state, Deciding) and not was_deciding:
            self._emit_prompt()
        self._emit_status()

    def _perform(self, action) -> None:
        if isinstance(action, protocol.SendMessage):
            self._send(action.msg)
        elif isinstance(action, protocol.RegisterTransaction):
            self._register_transaction(action)
        elif isinstance(action, protocol.StartSampling):
            self._start_sampling()
        elif isinstance(action, protocol.StopSampling):
            self._stop_sampling()
        elif isinstance(action, protocol.SubmitReport):
            self._submit_report(action.transaction_id)
        elif isinstance(action, protocol.SetTimer):
            self._set_timer(action.id, action.deadline_s)
        elif isinstance(action, protocol.CancelTimer):
            self._cancel_timer(action.id)
        elif isinstance(action, protocol.RaiseProtocolError):
            self.protocol_errors.append(action.detail)
            log.warning("%s: protocol error: %s",
                        self.config.profile.device_id, action.detail)

    # ------------------------------------------------------------------ actions

    def _send(self, msg) -> None:
        if self.endpoint is None:
            return
        try:
            self.endpoint.send_frame(Frame(protocol.encode_message(msg)))
        except LinkDownError:
            self._pending.append(protocol.LinkDownEvent(t_s=self.clock.now()))

    def _register_transaction(self, action: protocol.RegisterTransaction) -> None:
        peer = self._peer_announce
        now = self.clock.now()
        if peer is None:
            self._pending.append(protocol.RegisterOutcome(
                ok=False, reason="peer never announced", t_s=now))
            return
        goal_mode = "DurationTarget" if self._duration_s is not None else "AmountTarget"
        try:
            txid = self.coordinator.create_transaction(
                consumer_id=self.config.profile.device_id,
                provider_id=peer.device_id,
                amount=action.amount,
                goal_mode=goal_mode,
                duration_s=self._duration_s,
            )
        except (ServiceError, ConnectionError) as exc:
            self._pending.append(protocol.RegisterOutcome(
                ok=False, reason=str(exc), t_s=now))
            return
        self._pending.append(protocol.RegisterOutcome(
            ok=True, transaction_id=txid, t_s=now))

    def _build_goal(self, transaction_id: str) -> TerminationGoal:
        """The provider learns the goal from the registered transaction record."""
        record = self.coordinator.get_transaction(transaction_id)
        if record["goal_mode"] == "DurationTarget":
            return TerminationGoal.duration(record["duration_s"])
        amount = EnergyAmount(record["amount_percent"])
        offer_cap = percent_to_energy(amount, self.config.profile.capacity_mwh)
        peer_capacity = (self._peer_announce.capacity_mwh
                         if self._peer_announce is not None
                         else self.config.profile.capacity_mwh)
        return TerminationGoal.amount(offer_cap,
                                      percent_to_energy(amount, peer_capacity))

    def _start_sampling(self) -> None:
        txid = self._active_transaction_id()
        if self.role is Role.PROVIDER:
            # Pair tracking: own battery is exact; the peer's charge is
            # unknown (the wire carries no charge), so the view starts empty
            # and ConsumerFull can only bind via session gain.
            peer_capacity = (self._peer_announce.capacity_mwh
                             if self._peer_announce is not None
                             else self.config.profile.capacity_mwh)
            session = _Session(goal=self._build_goal(txid),
                               consumer_view=BatteryState(peer_capacity, 0.0))
        else:
            session = _Session(goal=None, consumer_view=None)
        session.sampling = True
        session.log.append(take_sample(0.0, self.battery))
        self._session = session
        if self.role is Role.PROVIDER:
            dt0, reason0 = self._clamp(session)
            if dt0 == 0 and reason0 is not None:
                self._pending.append(protocol.TransferFinished(
                    reason0, t_s=self.clock.now()))
            else:
                self._schedule_tick()

    def _clamp(self, session: _Session):
        return clamp_final_dt(self.battery, session.consumer_view,
                              self.config.params, session.goal,
                              session.expended_mwh, session.gained_mwh, session.t)

    def _schedule_tick(self) -> None:
        generation = self._tick_generation
        self._tick_handle = self.clock.call_later(
            self.config.params.sampling_period_s,
            lambda: self.post(_Tick(generation)))

    def _tick(self) -> None:
        session = self._session
        if session is None or not session.sampling:
            return
        params = self.config.params
        dt, reason = self._clamp(session)
        if dt > 0:
            t_new = session.t + dt
            # The heartbeat is the step's commitment: if the link is already
            # dead the step is not taken and the log ends at the last
            # published sample, keeping both parties' books aligned.
            try:
                self.endpoint.send_frame(
                    Frame(protocol.encode_message(Heartbeat(t_new))))
            except LinkDownError:
                self._feed(protocol.LinkDownEvent(t_s=self.clock.now()))
                return
            drop = drained_mwh(params.drain_power_w, dt)
            gain = params.efficiency * drop
            self.battery = apply_delta(self.battery, -drop)
            session.consumer_view = apply_delta(session.consumer_view, gain)
            session.expended_mwh += drop
            session.gained_mwh += gain
            session.t = t_new
            session.log.append(take_sample(t_new, self.battery))
        if reason is not None:
            self._feed(protocol.TransferFinished(reason, t_s=self.clock.now()))
        else:
            self._schedule_tick()
            self._emit_status()

    def _mirror_step(self, t_s: float) -> None:
        """Consumer: apply the provider's published step to our battery."""
        session = self._session
        if session is None or not session.sampling or self.role is not Role.CONSUMER:
            return
        dt = t_s - session.t
        if dt <= 0:
            return
        params = self.config.params
        gain = params.efficiency * drained_mwh(params.drain_power_w, dt)
        headroom = self.battery.capacity_mwh - self.battery.charge_mwh
        if gain > headroom + 1e-9:
            log.warning("%s: mirrored gain %.6f exceeds headroom %.6f; aborting",
                        self.config.profile.device_id, gain, headroom)
            self._pending.append(protocol.CmdAbort(t_s=self.clock.now()))
            return
        self.battery = apply_delta(self.battery, gain)
        session.gained_mwh += gain
        session.expended_mwh = session.gained_mwh / params.efficiency
        session.t = t_s
        session.log.append(take_sample(t_s, self.battery))

    def _stop_sampling(self) -> None:
        if self._session is not None:
            self._session.sampling = False
        self._tick_generation += 1
        if self._tick_handle is not None:
            self._tick_handle.cancel()
            self._tick_handle = None

    def _report_end_reason(self) -> EndReason:
        state = self.state
        if isinstance(state, (ConsumerFinalizing, ProviderFinalizing)):
            return state.end_reason
        return EndReason.ABORTED

    def _submit_report(self, transaction_id: str) -> None:
        session = self._session
        if session is None or session.report_submitted or not session.log:
            return
        session.report_submitted = True
        report = PartyReport(
            device_id=self.config.profile.device_id,
            log=list(session.log),
            final_battery=self.battery,
            end_reason=self._report_end_reason(),
        )
        now = self.clock.now()
        try:
            self.coordinator.submit_report(transaction_id, report)
        except (ServiceError, ConnectionError) as exc:
            self._pending.append(protocol.ReportOutcome(ok=False, detail=str(exc),
                                                        t_s=now))
            return
        self._pending.append(protocol.ReportOutcome(ok=True, t_s=now))

    def _set_timer(self, timer_id: str, deadline_s: float) -> None:
        self._cancel_timer(timer_id)
        self._timers[timer_id] = self.clock.call_at(
            deadline_s,
            lambda: self.post(protocol.TimerFired(timer_id, t_s=deadline_s)))

    def _cancel_timer(self, timer_id: str) -> None:
        handle = self._timers.pop(timer_id, None)
        if handle is not None:
            handle.cancel()

    # ------------------------------------------------------------------ status

    def _active_transaction_id(self) -> Optional[str]:
        state = self.state
        if isinstance(state, (ConsumerTransferring, ProviderTransferring,
                              ConsumerFinalizing, ProviderFinalizing)):
            return state.transaction_id
        return None

    def status(self) -> AgentStatus:
        session = self._session
        return AgentStatus(
            device_id=self.config.profile.device_id,
            role=self.role,
            protocol_state=state_tag(self.state) if self.state is not None else "Idle",
            battery=self.battery,
            active_transaction_id=self._active_transaction_id(),
            last_sample=session.log[-1] if session is not None and session.log else None,
        )

    def status_dict(self) -> dict:
        status = self.status()
        out = {
            "device_id": status.device_id,
            "display_name": self.config.profile.display_name,
            "microcell_id": self.config.profile.microcell_id,
            "role": status.role.value if status.role else None,
            "protocol_state": status.protocol_state,
            "battery": {
                "capacity_mwh": status.battery.capacity_mwh,
                "charge_mwh": status.battery.charge_mwh,
                "level_percent": status.battery.level_percent,
            },
            "active_transaction_id": status.active_transaction_id,
            "last_transaction_id": self.last_transaction_id,
            "last_sample": None,
            "pending_request": self._pending_request(),
            "session": self._session_info(),
        }
        if status.last_sample is not None:
            out["last_sample"] = {
                "t_s": status.last_sample.t_s,
                "level_percent": status.last_sample.level_percent,
                "charge_mwh": status.last_sample.charge_mwh,
            }
        return out

    def _pending_request(self) -> Optional[dict]:
        if isinstance(self.state, Deciding):
            return {"request_id": self.state.request_id,
                    "amount_percent": self.state.amount.percent}
        return None

    def _session_info(self) -> Optional[dict]:
        session = self._session
        if session is None:
            return None
        return {
            "elapsed_s": session.t,
            "expended_mwh": session.expended_mwh,
            "gained_mwh": session.gained_mwh,
            "loss_mwh": session.expended_mwh - session.gained_mwh,
            "own_level_percent": self.battery.level_percent,
        }

    def _emit_status(self) -> None:
        payload = self.status_dict()
        for listener in self._listeners:
            listener("status", payload)

    def _emit_prompt(self) -> None:
        payload = self._pending_request()
        if payload is None:
            return
        for listener in self._listeners:
            listener("prompt", payload)

    # ------------------------------------------------------------------ teardown

    def stop(self) -> None:
        self._stopped = True
        if self._mailbox is not None:
            self._mailbox.put(None)
        if self._thread is not None and self._thread.is_alive():
            self._thread.join(timeout=5)
