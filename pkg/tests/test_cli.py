"""CLI surface: exit codes, report rendering, telemetry export."""

import json
import socket
import subprocess
import sys
from pathlib import Path

import pytest

from wattshare.cli import main
from wattshare.report import loss_report_chart, loss_report_csv
from wattshare.scenario import ScenarioScript, run_scenario

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "src/wattshare/scenarios"


@pytest.fixture(scope="module")
def reconciled_data(tmp_path_factory):
    """A data dir holding one reconciled 30-minute transaction."""
    data_dir = tmp_path_factory.mktemp("ledger")
    script = ScenarioScript.from_file(SCENARIO_DIR / "demo_30min.json")
    result = run_scenario(script, data_dir=data_dir)
    assert result.ok
    txid = result.outcomes[0].record["transaction_id"]
    return data_dir, txid


class TestScenarioCommand:
    def test_bundled_by_name(self, capsys):
        assert main(["scenario", "demo_amount", "--embedded"]) == 0
        out = capsys.readouterr().out
        assert "1000.000000" in out
        assert "ProviderCap" in out

    def test_exit_2_on_parse_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{", encoding="utf-8")
        assert main(["scenario", str(bad)]) == 2

    def test_exit_2_on_missing_scenario(self):
        assert main(["scenario", "no_such_thing"]) == 2

    def test_exit_1_on_expectation_failure(self, tmp_path, capsys):
        with open(SCENARIO_DIR / "demo_amount.json", encoding="utf-8") as fp:
            obj = json.load(fp)
        obj["expectations"][0]["expended_mwh"] = 123.0
        path = tmp_path / "wrong.json"
        path.write_text(json.dumps(obj), encoding="utf-8")
        assert main(["scenario", str(path)]) == 1
        err = capsys.readouterr().err
        assert "expectation-failed" in err

    def test_export_dir_writes_telemetry(self, tmp_path, capsys):
        assert main(["scenario", "demo_amount", "--embedded",
                     "--export-dir", str(tmp_path / "logs")]) == 0
        provider_csv = tmp_path / "logs" / "phone-a_provider.csv"
        consumer_csv = tmp_path / "logs" / "phone-b_consumer.csv"
        assert provider_csv.exists() and consumer_csv.exists()
        lines = provider_csv.read_text().strip().split("\n")
        assert lines[0] == "t_s,level_percent,charge_mwh"
        assert len(lines) == 1 + 241
        assert lines[1] == "0.000000,80.000000,8000.000000"


class TestReportCommand:
    def test_csv_output(self, reconciled_data, capsys):
        data_dir, txid = reconciled_data
        assert main(["report", txid, "--data", str(data_dir),
                     "--bucket-s", "300"]) == 0
        out = capsys.readouterr().out
        lines = out.strip().split("\n")
        assert lines[0] == "start_s,end_s,expended_mwh,gained_mwh,loss_mwh"
        assert len(lines) == 7  # 6 buckets
        # Re-parsed and re-summed equals the totals exactly as printed.
        loss_sum = sum(float(line.split(",")[4]) for line in lines[1:])
        assert f"{loss_sum:.6f}" == "600.000000"
        for line in lines[1:]:
            assert line.split(",")[4] == "100.000000"

    def test_chart_output(self, reconciled_data, capsys):
        data_dir, txid = reconciled_data
        assert main(["report", txid, "--data", str(data_dir),
                     "--format", "chart"]) == 0
        out = capsys.readouterr().out
        assert "loss" in out
        assert "!" in out  # the loss bars
        assert "600.000000" in out

    def test_figure_rendering(self, reconciled_data, tmp_path, capsys):
        data_dir, txid = reconciled_data
        figure = tmp_path / "loss.png"
        assert main(["report", txid, "--data", str(data_dir),
                     "--figure", str(figure)]) == 0
        assert figure.exists()
        assert figure.stat().st_size > 1000
        assert figure.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_unknown_transaction_exit_1(self, reconciled_data, capsys):
        data_dir, _ = reconciled_data
        assert main(["report", "deadbeef", "--data", str(data_dir)]) == 1

    def test_not_reconciled_exit_1(self, tmp_path, capsys):
        # A transaction with no reports yet: build one via the service.
        from wattshare.coordinator import CoordinatorService
        from wattshare.domain import DeviceProfile, EnergyAmount, Role
        svc = CoordinatorService(data_dir=tmp_path)
        svc.register_device(DeviceProfile("p", "p", 1000.0, "m1"))
        svc.register_device(DeviceProfile("c", "c", 1000.0, "m1"))
        svc.post_listing("p", Role.PROVIDER, EnergyAmount(10))
        svc.post_listing("c", Role.CONSUMER, EnergyAmount(10))
        txid = svc.create_transaction("c", "p", EnergyAmount(10), "AmountTarget")
        svc.close()
        assert main(["report", txid, "--data", str(tmp_path)]) == 1

    def test_needs_a_source(self, capsys):
        assert main(["report", "whatever"]) == 2


class TestRenderHelpers:
    def test_bucket_wider_than_duration_single_row(self, reconciled_data):
        from wattshare.coordinator import CoordinatorService
        data_dir, txid = reconciled_data
        svc = CoordinatorService(data_dir=data_dir)
        report = svc.loss_report(txid, 10_000.0)
        svc.close()
        csv_text = loss_report_csv(report)
        assert len(csv_text.strip().split("\n")) == 2
        chart = loss_report_chart(report)
        assert "600.000000" in chart


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class TestScenarioAgainstRemoteCoordinator:
    def test_scenario_drives_running_server(self, tmp_path, capsys):
        from wattshare.coordinator import CoordinatorService
        from wattshare.server import CoordinatorServer
        server = CoordinatorServer(CoordinatorService(data_dir=tmp_path), port=0)
        server.start()
        try:
            assert main(["scenario", "demo_amount",
                         "--coordinator-url", server.url]) == 0
            out = capsys.readouterr().out
            assert "1000.000000" in out
            # The transaction landed on the remote server's ledger.
            txns = [record["transaction"]
                    for record in _ledger_records(tmp_path)
                    if record["kind"] == "transaction-reconciled"]
            assert len(txns) == 1
            assert txns[0]["loss_report"]["loss_mwh"] == pytest.approx(
                400.0, abs=1e-6)
        finally:
            server.shutdown()


def _ledger_records(data_dir: Path):
    with open(data_dir / "ledger.jsonl", encoding="utf-8") as fp:
        return [json.loads(line) for line in fp if line.strip()]


class TestServeCommand:
    def test_busy_port_exits_2(self, tmp_path):
        blocker = socket.socket()
        blocker.bind(("127.0.0.1", 0))
        blocker.listen(1)
        port = blocker.getsockname()[1]
        try:
            proc = subprocess.run(
                [sys.executable, "-m", "wattshare.cli", "serve",
                 "--port", str(port), "--data", str(tmp_path)],
                capture_output=True, text=True, timeout=30)
        finally:
            blocker.close()
        assert proc.returncode == 2
        assert "cannot bind" in proc.stderr
