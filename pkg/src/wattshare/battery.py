"""Deterministic discrete-time model of one provider-to-consumer energy transfer.

The provider battery drains at constant power; a fixed fraction of the
drained energy arrives at the consumer and the rest is the wireless loss.
Sessions advance in fixed sampling steps with an exact-landing final step,
so totals hit caps and durations precisely instead of overshooting to the
next sample boundary.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from enum import Enum
from typing import Optional, TextIO

from .domain import BatteryState, EnergyError, apply_delta

# 1 W running for 1 s equals 1000/3600 mWh.
MWH_PER_WATT_SECOND = 1000.0 / 3600.0

# Tolerance used when deciding that a constraint binds exactly at a step end.
BIND_EPS_S = 1e-9
BIND_EPS_MWH = 1e-9

TELEMETRY_CSV_HEADER = "t_s,level_percent,charge_mwh"


class RefuseToStartError(EnergyError):
    """The provider is already at or below its floor."""


class EndReason(Enum):
    CONSUMER_TARGET = "ConsumerTarget"
    PROVIDER_CAP = "ProviderCap"
    PROVIDER_FLOOR = "ProviderFloor"
    CONSUMER_FULL = "ConsumerFull"
    DURATION_ELAPSED = "DurationElapsed"
    ABORTED = "Aborted"


# Fixed priority when several constraints bind at the same instant.
_REASON_PRIORITY = (
    EndReason.DURATION_ELAPSED,
    EndReason.CONSUMER_TARGET,
    EndReason.PROVIDER_CAP,
    EndReason.PROVIDER_FLOOR,
    EndReason.CONSUMER_FULL,
)


@dataclass(frozen=True)
class TransferParams:
    """Knobs of the simulated wireless transfer.

    Defaults are invented ballparks for phone reverse wireless charging;
    only the 5-second sampling period is a platform-level constant.
    """

    drain_power_w: float = 3.0
    efficiency: float = 0.6
    sampling_period_s: float = 5.0
    provider_floor_percent: float = 20.0
    time_acceleration: Optional[float] = None  # None = pure virtual clock

    def __post_init__(self) -> None:
        if self.drain_power_w <= 0:
            raise EnergyError(f"drain_power_w must be > 0, got {self.drain_power_w}")
        if not 0 < self.efficiency <= 1:
            raise EnergyError(f"efficiency must be in (0, 1], got {self.efficiency}")
        if self.sampling_period_s <= 0:
            raise EnergyError(f"sampling_period_s must be > 0, got {self.sampling_period_s}")
        if not 0 <= self.provider_floor_percent < 100:
            raise EnergyError(
                f"provider_floor_percent must be in [0, 100), got {self.provider_floor_percent}"
            )
        if self.time_acceleration is not None and self.time_acceleration < 1:
            raise EnergyError(
                f"time_acceleration must be >= 1, got {self.time_acceleration}"
            )


class GoalMode(Enum):
    AMOUNT_TARGET = "AmountTarget"
    DURATION_TARGET = "DurationTarget"


@dataclass(frozen=True)
class TerminationGoal:
    """Either an amount goal (provider cap + consumer target) or a duration goal."""

    mode: GoalMode
    offer_cap_mwh: Optional[float] = None
    request_target_mwh: Optional[float] = None
    duration_s: Optional[float] = None

    def __post_init__(self) -> None:
        if self.mode is GoalMode.AMOUNT_TARGET:
            if self.offer_cap_mwh is None or self.request_target_mwh is None:
                raise EnergyError("amount goal needs offer_cap_mwh and request_target_mwh")
            if self.offer_cap_mwh <= 0 or self.request_target_mwh <= 0:
                raise EnergyError("amount goal fields must be positive")
            if self.duration_s is not None:
                raise EnergyError("amount goal must not carry duration_s")
        else:
            if self.duration_s is None or self.duration_s <= 0:
                raise EnergyError("duration goal needs duration_s > 0")
            if self.offer_cap_mwh is not None or self.request_target_mwh is not None:
                raise EnergyError("duration goal must not carry amount fields")

    @classmethod
    def amount(cls, offer_cap_mwh: float, request_target_mwh: float) -> "TerminationGoal":
        return cls(GoalMode.AMOUNT_TARGET, offer_cap_mwh=offer_cap_mwh,
                   request_target_mwh=request_target_mwh)

    @classmethod
    def duration(cls, duration_s: float) -> "TerminationGoal":
        return cls(GoalMode.DURATION_TARGET, duration_s=duration_s)


@dataclass(frozen=True)
class TelemetrySample:
    t_s: float
    level_percent: float
    charge_mwh: float


@dataclass(frozen=True)
class SessionTotals:
    provider_expended_mwh: float
    consumer_gained_mwh: float
    loss_mwh: float
    duration_s: float
    end_reason: EndReason


def drained_mwh(power_w: float, dt_s: float) -> float:
    """Energy in mWh drained by a constant power over dt seconds."""
    return power_w * dt_s * MWH_PER_WATT_SECOND


def take_sample(t_s: float, batt: BatteryState) -> TelemetrySample:
    return TelemetrySample(t_s=t_s, level_percent=batt.level_percent,
                           charge_mwh=batt.charge_mwh)


def step_transfer(
    provider: BatteryState,
    consumer: BatteryState,
    params: TransferParams,
    dt_s: float,
) -> tuple[BatteryState, BatteryState, float]:
    """Advance both batteries by one step of dt seconds; returns the step's loss."""
    if dt_s < 0:
        raise EnergyError(f"dt_s must be >= 0, got {dt_s}")
    if dt_s == 0:
        return provider, consumer, 0.0
    drop = drained_mwh(params.drain_power_w, dt_s)
    gain = params.efficiency * drop
    loss = (1.0 - params.efficiency) * drop
    return apply_delta(provider, -drop), apply_delta(consumer, gain), loss


def _floor_charge_mwh(provider: BatteryState, params: TransferParams) -> float:
    return provider.capacity_mwh * params.provider_floor_percent / 100.0


def should_terminate(
    expended_mwh: float,
    gained_mwh: float,
    provider: BatteryState,
    consumer: BatteryState,
    goal: TerminationGoal,
    params: TransferParams,
    elapsed_s: float,
) -> Optional[EndReason]:
    """First binding end reason in the fixed priority order, or None."""
    binding = set()
    if goal.mode is GoalMode.DURATION_TARGET and elapsed_s >= goal.duration_s - BIND_EPS_S:
        binding.add(EndReason.DURATION_ELAPSED)
    if goal.mode is GoalMode.AMOUNT_TARGET:
        if gained_mwh >= goal.request_target_mwh - BIND_EPS_MWH:
            binding.add(EndReason.CONSUMER_TARGET)
        if expended_mwh >= goal.offer_cap_mwh - BIND_EPS_MWH:
            binding.add(EndReason.PROVIDER_CAP)
    if provider.charge_mwh <= _floor_charge_mwh(provider, params) + BIND_EPS_MWH:
        binding.add(EndReason.PROVIDER_FLOOR)
    if consumer.charge_mwh >= consumer.capacity_mwh - BIND_EPS_MWH:
        binding.add(EndReason.CONSUMER_FULL)
    for reason in _REASON_PRIORITY:
        if reason in binding:
            return reason
    return None


def clamp_final_dt(
    provider: BatteryState,
    consumer: BatteryState,
    params: TransferParams,
    goal: TerminationGoal,
    expended_so_far_mwh: float,
    gained_so_far_mwh: float,
    elapsed_s: float,
) -> tuple[float, Optional[EndReason]]:
    """Largest step dt <= sampling_period_s that exceeds no constraint.

    Returns (dt, reason) where reason is set when some constraint becomes
    exactly binding after the step, picked by the fixed priority order.
    dt is 0 (with a reason) when a constraint already binds.
    """
    drain_rate = params.drain_power_w * MWH_PER_WATT_SECOND  # mWh per second
    gain_rate = params.efficiency * drain_rate

    bounds: list[tuple[float, EndReason]] = []
    if goal.mode is GoalMode.DURATION_TARGET:
        bounds.append((goal.duration_s - elapsed_s, EndReason.DURATION_ELAPSED))
    if goal.mode is GoalMode.AMOUNT_TARGET:
        bounds.append(
            ((goal.request_target_mwh - gained_so_far_mwh) / gain_rate,
             EndReason.CONSUMER_TARGET)
        )
        bounds.append(
            ((goal.offer_cap_mwh - expended_so_far_mwh) / drain_rate,
             EndReason.PROVIDER_CAP)
        )
    bounds.append(
        ((provider.charge_mwh - _floor_charge_mwh(provider, params)) / drain_rate,
         EndReason.PROVIDER_FLOOR)
    )
    bounds.append(
        ((consumer.capacity_mwh - consumer.charge_mwh) / gain_rate,
         EndReason.CONSUMER_FULL)
    )

    dt = min(params.sampling_period_s, min(max(0.0, b) for b, _ in bounds))
    binding = {reason for bound, reason in bounds if bound <= dt + BIND_EPS_S}
    reason = next((r for r in _REASON_PRIORITY if r in binding), None)
    return dt, reason


def simulate_session(
    provider0: BatteryState,
    consumer0: BatteryState,
    params: TransferParams,
    goal: TerminationGoal,
) -> tuple[list[TelemetrySample], list[TelemetrySample], SessionTotals]:
    """Run a whole transfer on the virtual clock.

    Both logs start with a sample at t=0, advance in sampling_period_s steps
    and end with a sample at the exact termination time.
    """
    if provider0.charge_mwh <= _floor_charge_mwh(provider0, params) + BIND_EPS_MWH:
        raise RefuseToStartError(
            f"provider at {provider0.level_percent:.3f}% is at or below the "
            f"{params.provider_floor_percent}% floor"
        )

    provider, consumer = provider0, consumer0
    provider_log = [take_sample(0.0, provider)]
    consumer_log = [take_sample(0.0, consumer)]
    expended = gained = 0.0
    t = 0.0

    # Termination is guaranteed: every goal mode bounds either t or the
    # provider's remaining headroom above the floor. The cap is defensive.
    for _ in range(10_000_000):
        dt, reason = clamp_final_dt(provider, consumer, params, goal,
                                    expended, gained, t)
        if dt > 0:
            drop = drained_mwh(params.drain_power_w, dt)
            gain = params.efficiency * drop
            provider, consumer, _ = step_transfer(provider, consumer, params, dt)
            expended += drop
            gained += gain
            t += dt
            provider_log.append(take_sample(t, provider))
            consumer_log.append(take_sample(t, consumer))
        if reason is not None:
            totals = SessionTotals(
                provider_expended_mwh=expended,
                consumer_gained_mwh=gained,
                loss_mwh=expended - gained,
                duration_s=t,
                end_reason=reason,
            )
            return provider_log, consumer_log, totals
    raise RuntimeError("simulation failed to terminate")


def format_telemetry_csv(samples: list[TelemetrySample]) -> str:
    """CSV export used by coordinator reports and the CLI (6 decimal places)."""
    lines = [TELEMETRY_CSV_HEADER]
    lines.extend(
        f"{s.t_s:.6f},{s.level_percent:.6f},{s.charge_mwh:.6f}" for s in samples
    )
    return "\n".join(lines) + "\n"


def write_telemetry_csv(samples: list[TelemetrySample], fp: TextIO | io.TextIOBase) -> None:
    fp.write(format_telemetry_csv(samples))
