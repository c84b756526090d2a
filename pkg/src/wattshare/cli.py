"""Command line entry point.

Subcommands: serve (coordinator API), agent (one standalone device),
scenario (scripted end-to-end run), report (loss report rendering).
Machine-readable output goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import errno
import json
import logging
import sys
from pathlib import Path

from .agent import AgentConfig, AgentMode
from .battery import TransferParams, format_telemetry_csv, TelemetrySample
from .client import CoordinatorUnreachableError, HttpCoordinatorClient
from .coordinator import CoordinatorService, ServiceError
from .domain import DeviceProfile
from .report import loss_report_chart, loss_report_csv, render_loss_figure
from .scenario import ScenarioParseError, ScenarioScript, run_scenario
from .server import CoordinatorServer

log = logging.getLogger(__name__)

BUNDLED_SCENARIOS = ("demo_amount", "demo_30min", "demo_disconnect")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wattshare",
        description="Peer-to-peer wireless energy sharing platform")
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the coordinator API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8080)
    serve.add_argument("--data", default="./data", help="ledger directory")
    serve.add_argument("--console", action="store_true",
                       help="also serve the operator console at /console")
    serve.add_argument("--console-dir", default="frontend/dist",
                       help="directory with the built console assets")

    agent = sub.add_parser("agent", help="run one standalone device agent")
    agent.add_argument("--coordinator-url", required=True)
    agent.add_argument("--microcell", default="m1")
    agent.add_argument("--device-id", required=True)
    agent.add_argument("--display-name", default=None)
    agent.add_argument("--capacity-mwh", type=float, default=10000.0)
    agent.add_argument("--level", type=float, default=80.0,
                       help="initial battery level percent")
    agent.add_argument("--power-w", type=float, default=3.0)
    agent.add_argument("--efficiency", type=float, default=0.6)
    agent.add_argument("--period-s", type=float, default=5.0)
    agent.add_argument("--floor-percent", type=float, default=20.0)
    agent.add_argument("--control-port", type=int, default=0)
    agent.add_argument("--mode", choices=["scripted", "interactive"],
                       default="scripted")
    agent.add_argument("--link-listen", type=int, default=None,
                       help="listen for the peer link on this TCP port")
    agent.add_argument("--link-connect", default=None, metavar="HOST:PORT",
                       help="dial the peer link at this address")
    agent.add_argument("--accel", type=float, default=1.0,
                       help="simulated seconds per wall second")

    scenario = sub.add_parser("scenario", help="run a scripted scenario")
    scenario.add_argument("script", help="scenario JSON path or a bundled name: "
                          + ", ".join(BUNDLED_SCENARIOS))
    scenario.add_argument("--coordinator-url", default=None,
                          help="drive an already-running coordinator")
    scenario.add_argument("--embedded", action="store_true",
                          help="run coordinator in-process (default when no "
                               "--coordinator-url is given)")
    scenario.add_argument("--data", default=None,
                          help="ledger directory for the embedded coordinator")
    scenario.add_argument("--export-dir", default=None,
                          help="write per-party telemetry CSVs here")

    report = sub.add_parser("report", help="render a transaction's loss report")
    report.add_argument("transaction_id")
    report.add_argument("--coordinator-url", default=None)
    report.add_argument("--data", default=None,
                        help="read the ledger directly instead of the API")
    report.add_argument("--bucket-s", type=float, default=300.0)
    report.add_argument("--format", choices=["csv", "chart"], default="csv")
    report.add_argument("--figure", default=None, metavar="PATH",
                        help="also save a rendered figure (png/svg/pdf)")
    return parser


def cmd_serve(args) -> int:
    try:
        service = CoordinatorService(data_dir=Path(args.data))
        server = CoordinatorServer(
            service, host=args.host, port=args.port,
            console_dir=Path(args.console_dir) if args.console else None)
    except OSError as exc:
        if exc.errno in (errno.EADDRINUSE, errno.EACCES):
            print(f"error: cannot bind port {args.port}: {exc}", file=sys.stderr)
            return 2
        raise
    print(f"coordinator listening on {server.url} (data: {args.data})",
          file=sys.stderr)
    if args.console:
        print(f"console at {server.url}/console", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        print("shutting down", file=sys.stderr)
        server.shutdown()
    return 0


def cmd_agent(args) -> int:
    from .control import StandaloneAgent

    profile = DeviceProfile(
        device_id=args.device_id,
        display_name=args.display_name or args.device_id,
        capacity_mwh=args.capacity_mwh,
        microcell_id=args.microcell,
    )
    config = AgentConfig(
        profile=profile,
        initial_level_percent=args.level,
        params=TransferParams(
            drain_power_w=args.power_w,
            efficiency=args.efficiency,
            sampling_period_s=args.period_s,
            provider_floor_percent=args.floor_percent,
            time_acceleration=args.accel if args.accel > 1 else None,
        ),
        coordinator_url=args.coordinator_url,
        control_port=args.control_port,
        mode=AgentMode.INTERACTIVE if args.mode == "interactive" else AgentMode.SCRIPTED,
    )
    try:
        runtime = StandaloneAgent(
            config,
            link_listen_port=args.link_listen,
            link_connect=args.link_connect,
            acceleration=args.accel,
        )
    except (CoordinatorUnreachableError, ServiceError) as exc:
        print(f"error: agent startup failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: cannot bind: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"device_id": args.device_id,
                      "control_url": runtime.control_url,
                      "link_port": runtime.link_port}))
    sys.stdout.flush()
    try:
        runtime.wait()
    except KeyboardInterrupt:
        pass
    runtime.shutdown()
    return 0


def _load_scenario(name: str) -> ScenarioScript:
    path = Path(name)
    if path.exists():
        return ScenarioScript.from_file(path)
    stem = name.removesuffix(".json")
    if stem in BUNDLED_SCENARIOS:
        from importlib import resources
        text = (resources.files("wattshare") / "scenarios" / f"{stem}.json") \
            .read_text(encoding="utf-8")
        return ScenarioScript.from_dict(json.loads(text))
    raise ScenarioParseError(f"no scenario file or bundled scenario named {name!r}")


def _export_logs(outcomes, export_dir: Path) -> None:
    export_dir.mkdir(parents=True, exist_ok=True)
    for outcome in outcomes:
        for side in ("provider_report", "consumer_report"):
            party = outcome.record.get(side)
            if party is None:
                continue
            samples = [TelemetrySample(s["t_s"], s["level_percent"], s["charge_mwh"])
                       for s in party["log"]]
            name = f"{party['device_id']}_{side.removesuffix('_report')}.csv"
            (export_dir / name).write_text(format_telemetry_csv(samples),
                                           encoding="utf-8")


def cmd_scenario(args) -> int:
    try:
        script = _load_scenario(args.script)
    except (ScenarioParseError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    coordinator = None
    if args.coordinator_url and not args.embedded:
        coordinator = HttpCoordinatorClient(args.coordinator_url)
    try:
        result = run_scenario(script, coordinator=coordinator,
                              data_dir=Path(args.data) if args.data else None)
    except CoordinatorUnreachableError as exc:
        print(f"error: coordinator unreachable: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(result.summary_table())
    if args.export_dir:
        _export_logs(result.outcomes, Path(args.export_dir))
    for line in result.protocol_errors:
        print(f"protocol-error: {line}", file=sys.stderr)
    if result.command_errors or result.failures:
        for line in result.command_errors:
            print(f"command-error: {line}", file=sys.stderr)
        for line in result.failures:
            print(f"expectation-failed: {line}", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    try:
        if args.data:
            service = CoordinatorService(data_dir=Path(args.data))
            report = service.loss_report(args.transaction_id, args.bucket_s)
        elif args.coordinator_url:
            client = HttpCoordinatorClient(args.coordinator_url)
            report = client.loss_report(args.transaction_id, args.bucket_s)
        else:
            print("error: need --coordinator-url or --data", file=sys.stderr)
            return 2
    except (ServiceError, CoordinatorUnreachableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(loss_report_csv(report) if args.format == "csv"
                     else loss_report_chart(report))
    if args.figure:
        out = render_loss_figure(report, args.figure)
        print(f"figure written to {out}", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=getattr(logging, args.log_level.upper()),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    handlers = {"serve": cmd_serve, "agent": cmd_agent,
                "scenario": cmd_scenario, "report": cmd_report}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
