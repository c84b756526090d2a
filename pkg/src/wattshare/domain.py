"""Core value types and energy arithmetic shared by every other module.

All internal bookkeeping is real-valued milliwatt-hours so conservation
checks stay exact; user-facing amounts are whole percentages of the owning
device's battery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

# Absolute slack for float dust when landing exactly on 0 or capacity.
CHARGE_SNAP_MWH = 1e-9


class EnergyError(ValueError):
    """Base class for energy bookkeeping violations."""


class InvalidCapacityError(EnergyError):
    pass


class InvalidEnergyError(EnergyError):
    pass


class BatteryDepletedError(EnergyError):
    """A delta would push the charge below zero."""


class BatteryOverfullError(EnergyError):
    """A delta would push the charge above capacity."""


class Role(Enum):
    PROVIDER = "Provider"
    CONSUMER = "Consumer"


class ListingState(Enum):
    OPEN = "Open"
    MATCHED = "Matched"
    WITHDRAWN = "Withdrawn"


@dataclass(frozen=True)
class EnergyAmount:
    """Whole-percent slice of the owning device's own battery."""

    percent: int

    def __post_init__(self) -> None:
        if isinstance(self.percent, bool) or not isinstance(self.percent, int):
            raise InvalidEnergyError(f"percent must be an integer, got {self.percent!r}")
        if not 1 <= self.percent <= 100:
            raise InvalidEnergyError(f"percent must be in 1..=100, got {self.percent}")


@dataclass(frozen=True)
class BatteryState:
    """A device battery's capacity and stored energy at one instant."""

    capacity_mwh: float
    charge_mwh: float

    def __post_init__(self) -> None:
        if self.capacity_mwh <= 0:
            raise InvalidCapacityError(f"capacity must be > 0, got {self.capacity_mwh}")
        if not 0 <= self.charge_mwh <= self.capacity_mwh:
            raise InvalidEnergyError(
                f"charge {self.charge_mwh} outside [0, {self.capacity_mwh}]"
            )

    @property
    def level_percent(self) -> float:
        return 100.0 * self.charge_mwh / self.capacity_mwh


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    display_name: str
    capacity_mwh: float
    microcell_id: str

    def __post_init__(self) -> None:
        if self.capacity_mwh <= 0:
            raise InvalidCapacityError(f"capacity must be > 0, got {self.capacity_mwh}")


@dataclass
class EnergyListing:
    """An open offer or request posted in one microcell."""

    listing_id: str
    device_id: str
    microcell_id: str
    role: Role
    amount: EnergyAmount
    created_at_s: float
    state: ListingState = field(default=ListingState.OPEN)

    def mark_matched(self) -> None:
        self._transition(ListingState.MATCHED)

    def mark_withdrawn(self) -> None:
        self._transition(ListingState.WITHDRAWN)

    def _transition(self, new_state: ListingState) -> None:
        # Only Open -> Matched and Open -> Withdrawn are legal.
        if self.state is not ListingState.OPEN:
            raise EnergyError(f"listing {self.listing_id} is {self.state.value}, not Open")
        self.state = new_state


def percent_to_energy(amount: EnergyAmount, capacity_mwh: float) -> float:
    """Energy in mWh corresponding to a percentage of the given capacity."""
    if capacity_mwh <= 0:
        raise InvalidCapacityError(f"capacity must be > 0, got {capacity_mwh}")
    return capacity_mwh * amount.percent / 100.0


def energy_to_percent(energy_mwh: float, capacity_mwh: float) -> float:
    """Real-valued (not rounded) percentage of capacity held by an energy amount."""
    if capacity_mwh <= 0:
        raise InvalidCapacityError(f"capacity must be > 0, got {capacity_mwh}")
    if energy_mwh < 0:
        raise InvalidEnergyError(f"energy must be >= 0, got {energy_mwh}")
    return 100.0 * energy_mwh / capacity_mwh


def apply_delta(batt: BatteryState, delta_mwh: float) -> BatteryState:
    """Add a signed energy delta, erroring instead of clamping out-of-range results.

    Results within CHARGE_SNAP_MWH of 0 or capacity are snapped exactly onto
    the bound so float dust from long step sequences does not masquerade as a
    conservation bug; genuine overshoot still raises.
    """
    new_charge = batt.charge_mwh + delta_mwh
    if new_charge < 0:
        if new_charge >= -CHARGE_SNAP_MWH:
            new_charge = 0.0
        else:
            raise BatteryDepletedError(
                f"delta {delta_mwh} would leave charge at {new_charge} mWh"
            )
    elif new_charge > batt.capacity_mwh:
        if new_charge <= batt.capacity_mwh + CHARGE_SNAP_MWH:
            new_charge = batt.capacity_mwh
        else:
            raise BatteryOverfullError(
                f"delta {delta_mwh} would leave charge at {new_charge} mWh "
                f"over capacity {batt.capacity_mwh}"
            )
    return BatteryState(capacity_mwh=batt.capacity_mwh, charge_mwh=new_charge)
