import random

import pytest
from hypothesis import given, settings, strategies as st

from wattshare.battery import (
    EndReason,
    GoalMode,
    RefuseToStartError,
    TelemetrySample,
    TerminationGoal,
    TransferParams,
    clamp_final_dt,
    drained_mwh,
    format_telemetry_csv,
    should_terminate,
    simulate_session,
    step_transfer,
)
from wattshare.domain import BatteryState, EnergyError


# ---------------------------------------------------------------------------
# Independent oracles. Closed-form energy integration, written against the
# physical definition (P watts for t seconds = P*t/3600 Wh) rather than by
# calling the code under test.
# ---------------------------------------------------------------------------

def oracle_energy_mwh(power_w: float, seconds: float) -> float:
    watt_hours = power_w * seconds / 3600.0
    return watt_hours * 1000.0


def oracle_amount_session(cap_mwh: float, power_w: float, efficiency: float,
                          period_s: float):
    """Closed form for a provider-cap-bound session, plus brute-force stepping."""
    duration_s = cap_mwh / 1000.0 * 3600.0 / power_w
    expended = cap_mwh
    gained = efficiency * cap_mwh
    # Brute force: whole periods then an exact remainder step.
    t, spent = 0.0, 0.0
    steps = 0
    while spent + oracle_energy_mwh(power_w, period_s) <= cap_mwh + 1e-9:
        spent += oracle_energy_mwh(power_w, period_s)
        t += period_s
        steps += 1
    if spent < cap_mwh - 1e-9:
        t += (cap_mwh - spent) / 1000.0 * 3600.0 / power_w
        steps += 1
    n_samples = steps + 1  # one sample at t=0
    assert t == pytest.approx(duration_s, abs=1e-6)
    return expended, gained, expended - gained, duration_s, n_samples


def oracle_duration_session(duration_s: float, power_w: float, efficiency: float,
                            period_s: float):
    expended = oracle_energy_mwh(power_w, duration_s)
    gained = efficiency * expended
    full, rem = divmod(duration_s, period_s)
    n_samples = int(full) + 1 + (1 if rem > 1e-9 else 0)
    return expended, gained, expended - gained, duration_s, n_samples


DEFAULT_PARAMS = TransferParams(drain_power_w=3.0, efficiency=0.6,
                                sampling_period_s=5.0, provider_floor_percent=20.0)


class TestStepTransfer:
    def test_default_step(self):
        # Oracle: 3 W for 5 s = 15 J = 15/3600 Wh = 4.166667 mWh.
        drop = oracle_energy_mwh(3.0, 5.0)
        assert drop == pytest.approx(4.16667, abs=1e-5)
        p0 = BatteryState(10000.0, 8000.0)
        c0 = BatteryState(10000.0, 3000.0)
        p1, c1, loss = step_transfer(p0, c0, DEFAULT_PARAMS, 5.0)
        assert p0.charge_mwh - p1.charge_mwh == pytest.approx(drop, rel=1e-9)
        assert c1.charge_mwh - c0.charge_mwh == pytest.approx(0.6 * drop, rel=1e-9)
        assert loss == pytest.approx(0.4 * drop, rel=1e-9)

    def test_lossless(self):
        params = TransferParams(efficiency=1.0)
        _, _, loss = step_transfer(BatteryState(10000, 8000),
                                   BatteryState(10000, 3000), params, 5.0)
        assert loss == 0.0

    def test_zero_dt(self):
        p0 = BatteryState(10000, 8000)
        c0 = BatteryState(10000, 3000)
        p1, c1, loss = step_transfer(p0, c0, DEFAULT_PARAMS, 0.0)
        assert (p1, c1, loss) == (p0, c0, 0.0)

    def test_conservation_randomized(self):
        # >= 10^4 randomized cases: gain = eta*drop and loss = (1-eta)*drop
        # within 1e-9 relative. Consumer starts empty so its delta is exact;
        # the small abs slack covers one ulp of the provider's 10 Ah battery.
        rng = random.Random(20260810)
        for _ in range(10_000):
            power = rng.uniform(1e-6, 10.0)
            eta = rng.uniform(1e-9, 1.0)
            dt = rng.uniform(0.0, 60.0)
            params = TransferParams(drain_power_w=power, efficiency=eta,
                                    provider_floor_percent=0.0)
            provider = BatteryState(1e4, 1e4)
            consumer = BatteryState(1e4, 0.0)
            p1, c1, loss = step_transfer(provider, consumer, params, dt)
            drop = provider.charge_mwh - p1.charge_mwh
            gain = c1.charge_mwh - consumer.charge_mwh
            assert drop == pytest.approx(drained_mwh(power, dt), rel=1e-9, abs=1e-11)
            assert gain == pytest.approx(eta * drop, rel=1e-9, abs=1e-11)
            assert loss == pytest.approx((1 - eta) * drop, rel=1e-9, abs=1e-11)


class TestClampFinalDt:
    def test_cap_nearly_reached(self):
        # Oracle: 2.5 mWh left at 3 W -> 2.5/1000*3600/3 = 3.0 s.
        goal = TerminationGoal.amount(offer_cap_mwh=1000.0, request_target_mwh=1000.0)
        dt, reason = clamp_final_dt(BatteryState(10000, 8000), BatteryState(10000, 3000),
                                    DEFAULT_PARAMS, goal, 997.5, 598.5, 1196.0)
        assert dt == pytest.approx(3.0, abs=1e-9)
        assert reason is EndReason.PROVIDER_CAP

    def test_unconstrained(self):
        goal = TerminationGoal.amount(offer_cap_mwh=1000.0, request_target_mwh=1000.0)
        dt, reason = clamp_final_dt(BatteryState(10000, 8000), BatteryState(10000, 3000),
                                    DEFAULT_PARAMS, goal, 0.0, 0.0, 0.0)
        assert dt == 5.0
        assert reason is None

    def test_duration_already_elapsed(self):
        goal = TerminationGoal.duration(1800.0)
        dt, reason = clamp_final_dt(BatteryState(10000, 8000), BatteryState(10000, 3000),
                                    DEFAULT_PARAMS, goal, 1500.0, 900.0, 1800.0)
        assert dt == 0.0
        assert reason is EndReason.DURATION_ELAPSED


class TestShouldTerminate:
    def test_consumer_target_binding(self):
        goal = TerminationGoal.amount(2000.0, 1000.0)
        reason = should_terminate(1666.0, 1000.0, BatteryState(10000, 6000),
                                  BatteryState(10000, 4000), goal, DEFAULT_PARAMS, 100.0)
        assert reason is EndReason.CONSUMER_TARGET

    def test_provider_floor_binding(self):
        goal = TerminationGoal.amount(9000.0, 9000.0)
        reason = should_terminate(100.0, 60.0, BatteryState(10000, 2000.0),
                                  BatteryState(10000, 4000), goal, DEFAULT_PARAMS, 100.0)
        assert reason is EndReason.PROVIDER_FLOOR

    def test_nothing_binding(self):
        goal = TerminationGoal.amount(2000.0, 1200.0)
        reason = should_terminate(100.0, 60.0, BatteryState(10000, 8000),
                                  BatteryState(10000, 4000), goal, DEFAULT_PARAMS, 100.0)
        assert reason is None


class TestSimulateSession:
    def test_amount_scenario(self):
        # Oracle first: 10% of 10000 mWh at 3 W.
        exp, gain, loss, duration, n = oracle_amount_session(1000.0, 3.0, 0.6, 5.0)
        assert (exp, gain, loss) == (1000.0, 600.0, 400.0)
        assert duration == pytest.approx(1200.0)
        assert n == 241

        goal = TerminationGoal.amount(1000.0, 1000.0)
        plog, clog, totals = simulate_session(BatteryState(10000, 8000),
                                              BatteryState(10000, 3000),
                                              DEFAULT_PARAMS, goal)
        assert totals.end_reason is EndReason.PROVIDER_CAP
        assert totals.provider_expended_mwh == pytest.approx(exp, abs=1e-6)
        assert totals.consumer_gained_mwh == pytest.approx(gain, abs=1e-6)
        assert totals.loss_mwh == pytest.approx(loss, abs=1e-6)
        assert totals.duration_s == pytest.approx(duration, abs=1e-6)
        assert len(plog) == len(clog) == 241

    def test_duration_scenario(self):
        exp, gain, loss, duration, n = oracle_duration_session(1800.0, 3.0, 0.6, 5.0)
        assert (exp, gain, loss) == (1500.0, 900.0, 600.0)
        assert n == 361

        goal = TerminationGoal.duration(1800.0)
        plog, clog, totals = simulate_session(BatteryState(10000, 8000),
                                              BatteryState(10000, 3000),
                                              DEFAULT_PARAMS, goal)
        assert totals.end_reason is EndReason.DURATION_ELAPSED
        assert totals.provider_expended_mwh == pytest.approx(exp, abs=1e-6)
        assert totals.consumer_gained_mwh == pytest.approx(gain, abs=1e-6)
        assert totals.loss_mwh == pytest.approx(loss, abs=1e-6)
        assert len(plog) == len(clog) == 361
        assert plog[-1].t_s == pytest.approx(1800.0, abs=1e-9)

    def test_lossless_priority(self):
        # With eta=1 the consumer target and provider cap bind at once;
        # priority picks the consumer target.
        params = TransferParams(efficiency=1.0)
        goal = TerminationGoal.amount(1000.0, 1000.0)
        _, _, totals = simulate_session(BatteryState(10000, 8000),
                                        BatteryState(10000, 3000), params, goal)
        assert totals.end_reason is EndReason.CONSUMER_TARGET
        assert totals.loss_mwh == pytest.approx(0.0, abs=1e-9)

    def test_refuses_to_start_at_floor(self):
        goal = TerminationGoal.amount(100.0, 100.0)
        with pytest.raises(RefuseToStartError):
            simulate_session(BatteryState(10000, 2000.0), BatteryState(10000, 3000),
                             DEFAULT_PARAMS, goal)

    def test_provider_floor_ends_session(self):
        # Offer far more than the floor allows: floor binds first.
        goal = TerminationGoal.amount(9000.0, 9000.0)
        plog, _, totals = simulate_session(BatteryState(10000, 8000),
                                           BatteryState(10000, 0.0),
                                           DEFAULT_PARAMS, goal)
        assert totals.end_reason is EndReason.PROVIDER_FLOOR
        assert plog[-1].charge_mwh == pytest.approx(2000.0, abs=1e-6)

    def test_consumer_full_ends_session(self):
        goal = TerminationGoal.duration(36000.0)
        params = TransferParams(provider_floor_percent=0.0)
        _, clog, totals = simulate_session(BatteryState(100000, 90000),
                                           BatteryState(100.0, 0.0), params, goal)
        assert totals.end_reason is EndReason.CONSUMER_FULL
        assert clog[-1].charge_mwh == pytest.approx(100.0, abs=1e-9)

    def test_zero_length_session_when_binding_at_start(self):
        # Consumer already full: one sample at t=0 per log, nothing moves.
        goal = TerminationGoal.duration(600.0)
        plog, clog, totals = simulate_session(BatteryState(10000, 8000),
                                              BatteryState(10000, 10000),
                                              DEFAULT_PARAMS, goal)
        assert totals.end_reason is EndReason.CONSUMER_FULL
        assert totals.duration_s == 0.0
        assert totals.provider_expended_mwh == 0.0
        assert len(plog) == len(clog) == 1
        assert plog[0].t_s == 0.0

    def test_determinism_bit_identical(self):
        goal = TerminationGoal.duration(1800.0)
        runs = [
            simulate_session(BatteryState(10000, 8000), BatteryState(10000, 3000),
                             DEFAULT_PARAMS, goal)
            for _ in range(2)
        ]
        assert runs[0] == runs[1]

    def test_session_properties_randomized(self):
        rng = random.Random(991)
        for _ in range(60):
            power = rng.uniform(0.5, 8.0)
            eta = rng.uniform(0.3, 1.0)
            period = rng.choice([1.0, 2.5, 5.0, 7.0])
            cap_p = rng.uniform(5000.0, 20000.0)
            cap_c = rng.uniform(5000.0, 20000.0)
            p0 = BatteryState(cap_p, cap_p * rng.uniform(0.5, 1.0))
            c0 = BatteryState(cap_c, cap_c * rng.uniform(0.0, 0.5))
            params = TransferParams(drain_power_w=power, efficiency=eta,
                                    sampling_period_s=period)
            if rng.random() < 0.5:
                pct = rng.randint(1, 25)
                goal = TerminationGoal.amount(cap_p * pct / 100.0, cap_c * pct / 100.0)
            else:
                goal = TerminationGoal.duration(rng.uniform(30.0, 3000.0))

            plog, clog, totals = simulate_session(p0, c0, params, goal)

            # Session conservation.
            assert totals.consumer_gained_mwh == pytest.approx(
                eta * totals.provider_expended_mwh, abs=1e-6)
            assert totals.loss_mwh == pytest.approx(
                totals.provider_expended_mwh - totals.consumer_gained_mwh, abs=1e-12)
            assert totals.loss_mwh >= -1e-9

            # Monotonicity.
            for a, b in zip(plog, plog[1:]):
                assert b.charge_mwh <= a.charge_mwh
            for a, b in zip(clog, clog[1:]):
                assert b.charge_mwh >= a.charge_mwh

            # Sample cadence: fixed period except a final partial step.
            for log in (plog, clog):
                diffs = [b.t_s - a.t_s for a, b in zip(log, log[1:])]
                for d in diffs[:-1]:
                    assert d == pytest.approx(period, abs=1e-9)
                if diffs:
                    assert 0 < diffs[-1] <= period + 1e-9

            # Expended really is the provider's charge delta.
            assert totals.provider_expended_mwh == pytest.approx(
                plog[0].charge_mwh - plog[-1].charge_mwh, abs=1e-6)


@given(
    power=st.floats(min_value=1e-3, max_value=10.0, allow_nan=False),
    eta=st.floats(min_value=1e-3, max_value=1.0, allow_nan=False),
    dt=st.floats(min_value=0.0, max_value=60.0, allow_nan=False),
)
@settings(max_examples=300, deadline=None)
def test_step_conservation_property(power, eta, dt):
    params = TransferParams(drain_power_w=power, efficiency=eta,
                            provider_floor_percent=0.0)
    provider = BatteryState(1e4, 1e4)
    consumer = BatteryState(1e4, 0.0)
    p1, c1, loss = step_transfer(provider, consumer, params, dt)
    drop = provider.charge_mwh - p1.charge_mwh
    gain = c1.charge_mwh - consumer.charge_mwh
    assert gain == pytest.approx(eta * drop, rel=1e-9, abs=1e-11)
    assert loss == pytest.approx((1 - eta) * drop, rel=1e-9, abs=1e-11)


class TestParamsValidation:
    def test_bad_efficiency(self):
        with pytest.raises(EnergyError):
            TransferParams(efficiency=0.0)
        with pytest.raises(EnergyError):
            TransferParams(efficiency=1.5)

    def test_bad_goal(self):
        with pytest.raises(EnergyError):
            TerminationGoal(GoalMode.AMOUNT_TARGET, offer_cap_mwh=100.0)
        with pytest.raises(EnergyError):
            TerminationGoal(GoalMode.DURATION_TARGET, duration_s=-1.0)
        with pytest.raises(EnergyError):
            TerminationGoal(GoalMode.DURATION_TARGET, duration_s=10.0, offer_cap_mwh=5.0)


class TestTelemetryCsv:
    def test_format(self):
        samples = [TelemetrySample(0.0, 80.0, 8000.0),
                   TelemetrySample(5.0, 79.958333, 7995.833333)]
        text = format_telemetry_csv(samples)
        lines = text.strip().split("\n")
        assert lines[0] == "t_s,level_percent,charge_mwh"
        assert lines[1] == "0.000000,80.000000,8000.000000"
        assert lines[2] == "5.000000,79.958333,7995.833333"
