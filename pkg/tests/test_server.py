"""Coordinator HTTP API tests: status codes, payload shapes, SSE stream."""

import threading

import pytest

from wattshare.battery import TerminationGoal, TransferParams, simulate_session
from wattshare.client import (
    CoordinatorUnreachableError,
    HttpCoordinatorClient,
    SseReader,
    request_json,
)
from wattshare.coordinator import (
    ConflictError,
    CoordinatorService,
    ForbiddenError,
    NotFoundError,
    PartyReport,
    RequestValidationError,
)
from wattshare.domain import BatteryState, DeviceProfile, EnergyAmount, Role
from wattshare.server import CoordinatorServer


@pytest.fixture()
def server(tmp_path):
    srv = CoordinatorServer(CoordinatorService(data_dir=tmp_path), port=0)
    srv.start()
    yield srv
    srv.shutdown()


@pytest.fixture()
def client(server):
    return HttpCoordinatorClient(server.url)


def register(client, device_id, cell="m1", capacity=10000.0):
    return client.register_device(DeviceProfile(device_id, device_id, capacity, cell))


def session_reports(goal=None):
    goal = goal or TerminationGoal.amount(1000.0, 1000.0)
    plog, clog, totals = simulate_session(
        BatteryState(10000, 8000), BatteryState(10000, 3000), TransferParams(), goal)
    prov = PartyReport("prov", plog, BatteryState(10000, plog[-1].charge_mwh),
                       totals.end_reason)
    cons = PartyReport("cons", clog, BatteryState(10000, clog[-1].charge_mwh),
                       totals.end_reason)
    return prov, cons, totals


class TestDevicesApi:
    def test_register_returns_id(self, client):
        assert register(client, "dev-a") == "dev-a"

    def test_conflict_on_mismatched_profile(self, client):
        register(client, "dev-a")
        with pytest.raises(ConflictError):
            register(client, "dev-a", capacity=1.0)

    def test_validation_error_on_bad_capacity(self, server):
        with pytest.raises(RequestValidationError):
            request_json("POST", server.url + "/v1/devices",
                         {"device_id": "x", "capacity_mwh": -5,
                          "microcell_id": "m1"})


class TestListingsApi:
    def test_post_get_withdraw(self, client):
        register(client, "dev-a")
        listing = client.post_listing("dev-a", "m1", Role.PROVIDER, EnergyAmount(10))
        assert listing["state"] == "Open"
        rows = client.list_open("m1", Role.PROVIDER)
        assert [r["listing_id"] for r in rows] == [listing["listing_id"]]
        out = client.withdraw_listing(listing["listing_id"])
        assert out["state"] == "Withdrawn"
        assert client.list_open("m1") == []

    def test_second_listing_is_409(self, client):
        register(client, "dev-a")
        client.post_listing("dev-a", "m1", Role.PROVIDER, EnergyAmount(10))
        with pytest.raises(ConflictError) as err:
            client.post_listing("dev-a", "m1", Role.CONSUMER, EnergyAmount(10))
        assert err.value.code == "busy"
        assert err.value.http_status == 409

    def test_cell_mismatch_rejected(self, client):
        register(client, "dev-a", cell="m1")
        with pytest.raises(ConflictError) as err:
            client.post_listing("dev-a", "m2", Role.PROVIDER, EnergyAmount(10))
        assert err.value.code == "locality"

    def test_unknown_device_404(self, client):
        with pytest.raises(NotFoundError):
            client.post_listing("ghost", "m1", Role.PROVIDER, EnergyAmount(10))


class TestTransactionsApi:
    def _matched(self, client, goal_mode="AmountTarget", duration_s=None):
        register(client, "prov")
        register(client, "cons")
        client.post_listing("prov", "m1", Role.PROVIDER, EnergyAmount(10))
        client.post_listing("cons", "m1", Role.CONSUMER, EnergyAmount(10))
        return client.create_transaction("cons", "prov", EnergyAmount(10),
                                         goal_mode, duration_s)

    def test_create_and_get(self, client):
        txid = self._matched(client)
        record = client.get_transaction(txid)
        assert record["state"] == "Created"
        assert record["provider_id"] == "prov"

    def test_unknown_transaction_404(self, client):
        with pytest.raises(NotFoundError):
            client.get_transaction("nope")

    def test_full_report_cycle_and_loss_report(self, client):
        txid = self._matched(client)
        prov, cons, totals = session_reports()
        assert client.submit_report(txid, prov) == "AwaitingReports"
        assert client.submit_report(txid, cons) == "Reconciled"
        record = client.get_transaction(txid)
        assert record["loss_report"]["loss_mwh"] == pytest.approx(400.0, abs=1e-6)
        report = client.loss_report(txid, bucket_s=600.0)
        assert len(report["buckets"]) == 2
        assert sum(b["loss_mwh"] for b in report["buckets"]) == pytest.approx(
            400.0, abs=1e-6)

    def test_wrong_party_403(self, client):
        txid = self._matched(client)
        prov, _, totals = session_reports()
        stranger = PartyReport("stranger", prov.log, prov.final_battery,
                               prov.end_reason)
        with pytest.raises(ForbiddenError):
            client.submit_report(txid, stranger)

    def test_loss_report_before_reconcile_409(self, client):
        txid = self._matched(client)
        with pytest.raises(ConflictError) as err:
            client.loss_report(txid)
        assert err.value.code == "not-reconciled"

    def test_duration_transaction(self, client):
        txid = self._matched(client, goal_mode="DurationTarget", duration_s=1800.0)
        assert client.get_transaction(txid)["duration_s"] == 1800.0


class TestEventsApi:
    def test_sse_stream_delivers_ledger_records(self, server, client):
        register(client, "dev-a")
        reader = SseReader(server.url + "/v1/microcells/m1/events", timeout_s=5.0)
        received = []
        done = threading.Event()

        def consume():
            for event in reader.events():
                received.append(event)
                if event["kind"] == "listing-created":
                    done.set()
                    return

        thread = threading.Thread(target=consume, daemon=True)
        thread.start()
        client.post_listing("dev-a", "m1", Role.PROVIDER, EnergyAmount(10))
        assert done.wait(timeout=5.0), "no listing-created event within 5 s"
        reader.close()
        assert received[-1]["listing"]["device_id"] == "dev-a"


class TestErrors:
    def test_unknown_route_404(self, server):
        with pytest.raises(NotFoundError):
            request_json("GET", server.url + "/v1/bogus")

    def test_unreachable_coordinator(self):
        with pytest.raises(CoordinatorUnreachableError):
            request_json("GET", "http://127.0.0.1:1/v1/devices", timeout_s=0.5)
