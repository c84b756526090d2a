"""Scripted end-to-end scenarios on the virtual clock.

A scenario JSON describes devices, their link, timed operator commands and
expected transaction totals. The embedded runner wires agents, links and a
coordinator into one deterministic event loop, so a full 30-minute transfer
replays in milliseconds and repeated runs print byte-identical summaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import agent as agent_mod
from .agent import AgentConfig, CommandRejected, DeviceAgent
from .battery import TransferParams
from .clock import VirtualClock
from .client import LocalCoordinatorClient
from .coordinator import CoordinatorService, ServiceError
from .domain import DeviceProfile
from .link import LinkParams, pair

SCENARIO_HORIZON_S = 10_000_000.0


class ScenarioParseError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioDevice:
    device_id: str
    display_name: str
    capacity_mwh: float
    level_percent: float


@dataclass(frozen=True)
class ScenarioLink:
    a: str
    b: str
    latency_ms: float = 20.0
    disconnect_at_s: Optional[float] = None


@dataclass(frozen=True)
class ScenarioStep:
    at_s: float
    device: str
    command: agent_mod.AgentCommand


@dataclass(frozen=True)
class Expectation:
    provider: str
    consumer: str
    state: Optional[str] = None
    end_reason: Optional[str] = None
    expended_mwh: Optional[float] = None
    gained_mwh: Optional[float] = None
    loss_mwh: Optional[float] = None
    duration_s: Optional[float] = None
    samples_per_log: Optional[int] = None
    tolerance_mwh: float = 1e-6


@dataclass
class ScenarioScript:
    microcell: str
    params: TransferParams
    devices: list[ScenarioDevice]
    links: list[ScenarioLink]
    steps: list[ScenarioStep]
    expectations: list[Expectation] = field(default_factory=list)

    @classmethod
    def from_dict(cls, obj: dict) -> "ScenarioScript":
        try:
            params = TransferParams(**obj.get("params", {}))
            devices = [ScenarioDevice(**d) for d in obj["devices"]]
            links = [ScenarioLink(**l) for l in obj.get("links", [])]
            steps = [
                ScenarioStep(at_s=float(s["at_s"]), device=s["device"],
                             command=parse_command(s["command"]))
                for s in obj.get("steps", [])
            ]
            expectations = [Expectation(**e) for e in obj.get("expectations", [])]
        except ScenarioParseError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioParseError(f"bad scenario: {exc}") from exc

        script = cls(microcell=obj.get("microcell", "m1"), params=params,
                     devices=devices, links=links, steps=steps,
                     expectations=expectations)
        script.validate()
        return script

    @classmethod
    def from_file(cls, path: Path | str) -> "ScenarioScript":
        try:
            with open(path, "r", encoding="utf-8") as fp:
                obj = json.load(fp)
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioParseError(f"cannot read scenario {path}: {exc}") from exc
        return cls.from_dict(obj)

    def validate(self) -> None:
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise ScenarioParseError("duplicate device ids")
        known = set(ids)
        for link in self.links:
            if link.a not in known or link.b not in known:
                raise ScenarioParseError(f"link references unknown device "
                                         f"{link.a}/{link.b}")
        last = float("-inf")
        for step in self.steps:
            if step.device not in known:
                raise ScenarioParseError(f"step references unknown device "
                                         f"{step.device}")
            if step.at_s < last:
                raise ScenarioParseError("step times must be non-decreasing")
            last = step.at_s


def parse_command(obj: dict) -> agent_mod.AgentCommand:
    try:
        return agent_mod.parse_command(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioParseError(str(exc)) from exc


@dataclass
class TransactionOutcome:
    provider: str
    consumer: str
    record: dict

    @property
    def state(self) -> str:
        return self.record["state"]

    @property
    def loss_report(self) -> Optional[dict]:
        return self.record.get("loss_report")

    @property
    def end_reason(self) -> Optional[str]:
        report = self.record.get("provider_report")
        return report["end_reason"] if report else None


@dataclass
class ScenarioResult:
    outcomes: list[TransactionOutcome]
    failures: list[str]
    command_errors: list[str]
    protocol_errors: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures and not self.command_errors

    def summary_table(self) -> str:
        header = (f"{'provider':<12} {'consumer':<12} {'state':<19} "
                  f"{'end_reason':<16} {'expended_mwh':>14} {'gained_mwh':>14} "
                  f"{'loss_mwh':>14} {'duration_s':>12}")
        lines = [header]
        for outcome in sorted(self.outcomes,
                              key=lambda o: (o.provider, o.consumer)):
            loss = outcome.loss_report
            if loss is None:
                lines.append(f"{outcome.provider:<12} {outcome.consumer:<12} "
                             f"{outcome.state:<19} {'-':<16} {'-':>14} {'-':>14} "
                             f"{'-':>14} {'-':>12}")
            else:
                lines.append(
                    f"{outcome.provider:<12} {outcome.consumer:<12} "
                    f"{outcome.state:<19} {outcome.end_reason or '-':<16} "
                    f"{loss['provider_expended_mwh']:>14.6f} "
                    f"{loss['consumer_gained_mwh']:>14.6f} "
                    f"{loss['loss_mwh']:>14.6f} "
                    f"{loss['duration_s']:>12.6f}")
        return "\n".join(lines) + "\n"


def run_scenario(script: ScenarioScript, coordinator=None,
                 data_dir: Optional[Path | str] = None) -> ScenarioResult:
    """Run a script embedded: agents, links and clock in this process.

    coordinator defaults to a fresh in-process service; pass an
    HttpCoordinatorClient to drive an external one instead.
    """
    clock = VirtualClock()
    own_service: Optional[CoordinatorService] = None
    if coordinator is None:
        own_service = CoordinatorService(data_dir=data_dir, clock=clock)
        coordinator = LocalCoordinatorClient(own_service)

    agents: dict[str, DeviceAgent] = {}
    for device in script.devices:
        profile = DeviceProfile(device_id=device.device_id,
                                display_name=device.display_name,
                                capacity_mwh=device.capacity_mwh,
                                microcell_id=script.microcell)
        config = AgentConfig(profile=profile,
                             initial_level_percent=device.level_percent,
                             params=script.params)
        agents[device.device_id] = DeviceAgent(config, coordinator, clock,
                                               embedded=True)
    for device_agent in agents.values():
        device_agent.start()

    for link in script.links:
        params = LinkParams(latency_ms=link.latency_ms,
                            disconnect_at_s=link.disconnect_at_s)
        end_a, end_b = pair(params, clock)
        agents[link.a].attach_link(end_a)
        agents[link.b].attach_link(end_b)

    command_errors: list[str] = []

    def runner(target: DeviceAgent, step: ScenarioStep):
        def run() -> None:
            try:
                target.submit(step.command)
            except (CommandRejected, ServiceError, ConnectionError) as exc:
                command_errors.append(
                    f"t={step.at_s}: {step.device} "
                    f"{type(step.command).__name__}: {exc}")
        return run

    for step in script.steps:
        clock.call_at(step.at_s, runner(agents[step.device], step))

    clock.run_until_idle(max_t_s=SCENARIO_HORIZON_S)

    outcomes = []
    seen = set()
    for device_agent in agents.values():
        txid = device_agent.last_transaction_id
        if txid is None or txid in seen:
            continue
        seen.add(txid)
        record = coordinator.get_transaction(txid)
        outcomes.append(TransactionOutcome(provider=record["provider_id"],
                                           consumer=record["consumer_id"],
                                           record=record))

    failures = [
        failure
        for expectation in script.expectations
        for failure in check_expectation(expectation, outcomes)
    ]
    protocol_errors = [
        f"{device_id}: {detail}"
        for device_id, device_agent in agents.items()
        for detail in device_agent.protocol_errors
    ]
    if own_service is not None:
        own_service.close()
    return ScenarioResult(outcomes=outcomes, failures=failures,
                          command_errors=command_errors,
                          protocol_errors=protocol_errors)


def check_expectation(exp: Expectation,
                      outcomes: list[TransactionOutcome]) -> list[str]:
    match = next((o for o in outcomes
                  if o.provider == exp.provider and o.consumer == exp.consumer),
                 None)
    prefix = f"{exp.provider}->{exp.consumer}"
    if match is None:
        return [f"{prefix}: no transaction found"]
    failures = []
    if exp.state is not None and match.state != exp.state:
        failures.append(f"{prefix}: state {match.state} != {exp.state}")
    if exp.end_reason is not None and match.end_reason != exp.end_reason:
        failures.append(f"{prefix}: end_reason {match.end_reason} != {exp.end_reason}")
    loss = match.loss_report
    numeric = [("expended_mwh", exp.expended_mwh, "provider_expended_mwh"),
               ("gained_mwh", exp.gained_mwh, "consumer_gained_mwh"),
               ("loss_mwh", exp.loss_mwh, "loss_mwh"),
               ("duration_s", exp.duration_s, "duration_s")]
    for label, expected, key in numeric:
        if expected is None:
            continue
        if loss is None:
            failures.append(f"{prefix}: {label} expected {expected} but "
                            "no loss report")
            continue
        got = loss[key]
        if abs(got - expected) > exp.tolerance_mwh:
            failures.append(f"{prefix}: {label} {got:.6f} != {expected:.6f} "
                            f"(delta {got - expected:+.6g})")
    if exp.samples_per_log is not None:
        for side in ("provider_report", "consumer_report"):
            report = match.record.get(side)
            count = len(report["log"]) if report else 0
            if count != exp.samples_per_log:
                failures.append(f"{prefix}: {side} has {count} samples, "
                                f"expected {exp.samples_per_log}")
    return failures
