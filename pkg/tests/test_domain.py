import pytest
from hypothesis import given, strategies as st

from wattshare.domain import (
    BatteryState,
    BatteryDepletedError,
    BatteryOverfullError,
    EnergyAmount,
    EnergyListing,
    EnergyError,
    InvalidCapacityError,
    InvalidEnergyError,
    ListingState,
    Role,
    apply_delta,
    energy_to_percent,
    percent_to_energy,
)


class TestEnergyAmount:
    def test_valid_range(self):
        assert EnergyAmount(1).percent == 1
        assert EnergyAmount(100).percent == 100

    @pytest.mark.parametrize("bad", [0, 101, -5, 150])
    def test_out_of_range_rejected(self, bad):
        with pytest.raises(InvalidEnergyError):
            EnergyAmount(bad)

    def test_non_integer_rejected(self):
        with pytest.raises(InvalidEnergyError):
            EnergyAmount(10.5)  # type: ignore[arg-type]


class TestBatteryState:
    def test_level_percent(self):
        assert BatteryState(10000.0, 2500.0).level_percent == 25.0

    def test_charge_above_capacity_rejected(self):
        with pytest.raises(InvalidEnergyError):
            BatteryState(1000.0, 1000.1)

    def test_non_positive_capacity_rejected(self):
        with pytest.raises(InvalidCapacityError):
            BatteryState(0.0, 0.0)


class TestPercentConversions:
    def test_percent_to_energy_proportional(self):
        assert percent_to_energy(EnergyAmount(10), 10000.0) == 1000.0

    def test_percent_to_energy_full_scale(self):
        assert percent_to_energy(EnergyAmount(100), 15400.0) == 15400.0

    def test_percent_to_energy_one_percent(self):
        assert percent_to_energy(EnergyAmount(1), 10000.0) == 100.0

    def test_percent_to_energy_bad_capacity(self):
        with pytest.raises(InvalidCapacityError):
            percent_to_energy(EnergyAmount(10), 0.0)

    def test_energy_to_percent(self):
        assert energy_to_percent(600.0, 10000.0) == 6.0
        assert energy_to_percent(0.0, 123.0) == 0.0
        assert energy_to_percent(15400.0, 15400.0) == 100.0

    def test_energy_to_percent_negative_energy(self):
        with pytest.raises(InvalidEnergyError):
            energy_to_percent(-1.0, 100.0)

    @given(
        percent=st.integers(min_value=1, max_value=100),
        capacity=st.floats(min_value=1e-6, max_value=1e6,
                           allow_nan=False, allow_infinity=False),
    )
    def test_round_trip(self, percent, capacity):
        amount = EnergyAmount(percent)
        back = energy_to_percent(percent_to_energy(amount, capacity), capacity)
        assert back == pytest.approx(percent, rel=1e-9)


class TestApplyDelta:
    def test_negative_delta(self):
        # Independent check: expected value is plain addition.
        expected = 5000.0 + (-4.1667)
        batt = apply_delta(BatteryState(10000.0, 5000.0), -4.1667)
        assert batt.charge_mwh == pytest.approx(expected, abs=1e-9)
        assert batt.charge_mwh == pytest.approx(4995.8333, abs=1e-9)

    def test_zero_delta(self):
        batt = BatteryState(10000.0, 5000.0)
        assert apply_delta(batt, 0.0) == batt

    def test_depleted(self):
        with pytest.raises(BatteryDepletedError):
            apply_delta(BatteryState(10000.0, 100.0), -200.0)

    def test_overfull(self):
        with pytest.raises(BatteryOverfullError):
            apply_delta(BatteryState(10000.0, 9999.0), 2.0)

    def test_float_dust_snaps_to_bounds(self):
        batt = apply_delta(BatteryState(100.0, 1e-10), -2e-10)
        assert batt.charge_mwh == 0.0
        batt = apply_delta(BatteryState(100.0, 100.0 - 1e-10), 2e-10)
        assert batt.charge_mwh == 100.0

    @given(
        capacity=st.floats(min_value=1.0, max_value=1e6,
                           allow_nan=False, allow_infinity=False),
        frac=st.floats(min_value=0.0, max_value=1.0,
                       allow_nan=False, allow_infinity=False),
        delta=st.floats(min_value=-1e6, max_value=1e6,
                        allow_nan=False, allow_infinity=False),
    )
    def test_never_produces_out_of_range_state(self, capacity, frac, delta):
        batt = BatteryState(capacity, capacity * frac)
        try:
            out = apply_delta(batt, delta)
        except (BatteryDepletedError, BatteryOverfullError):
            return
        assert 0.0 <= out.charge_mwh <= out.capacity_mwh


class TestEnergyListing:
    def _listing(self):
        return EnergyListing("l1", "dev1", "m1", Role.PROVIDER, EnergyAmount(10), 0.0)

    def test_open_to_matched(self):
        listing = self._listing()
        listing.mark_matched()
        assert listing.state is ListingState.MATCHED

    def test_open_to_withdrawn(self):
        listing = self._listing()
        listing.mark_withdrawn()
        assert listing.state is ListingState.WITHDRAWN

    def test_matched_cannot_move(self):
        listing = self._listing()
        listing.mark_matched()
        with pytest.raises(EnergyError):
            listing.mark_withdrawn()
        with pytest.raises(EnergyError):
            listing.mark_matched()
