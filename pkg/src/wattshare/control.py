"""Local control surface and process runtime for a device agent.

The control API is how scripts and the operator console drive a live agent:
POST a command, read a status snapshot, or follow the SSE stream of status
changes and pending-request prompts. StandaloneAgent wires a DeviceAgent to
the wall clock, a real coordinator URL and a TCP link for multi-process runs.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from queue import Empty, Full, Queue
from typing import Iterator, Optional

from .agent import AgentConfig, CommandRejected, DeviceAgent, parse_command
from .client import HttpCoordinatorClient
from .clock import WallClock
from .coordinator import ConflictError, RequestValidationError, ServiceError
from .httpd import ApiHttpServer, HttpRequest, HttpResponse
from .link import LinkParams, TcpListener, tcp_connect

log = logging.getLogger(__name__)

SSE_KEEPALIVE_S = 10.0
EVENT_BUFFER = 256
LINK_CONNECT_RETRY_S = 0.2
LINK_CONNECT_TIMEOUT_S = 30.0


class AgentControlServer:
    """HTTP control API bound to one agent."""

    def __init__(self, agent: DeviceAgent, host: str = "127.0.0.1",
                 port: int = 0):
        self.agent = agent
        self.http = ApiHttpServer(host, port)
        self.http.add("GET", "/status", self._get_status)
        self.http.add("POST", "/control/command", self._post_command)
        self.http.add("GET", "/events", self._get_events)
        self._subscribers: list[Queue] = []
        self._sub_lock = threading.Lock()
        agent.add_listener(self._fanout)

    @property
    def url(self) -> str:
        return self.http.url

    def start(self) -> None:
        self.http.start()

    def shutdown(self) -> None:
        with self._sub_lock:
            for q in self._subscribers:
                try:
                    q.put_nowait(None)
                except Full:
                    pass
            self._subscribers.clear()
        self.http.shutdown()

    def _fanout(self, kind: str, payload: dict) -> None:
        with self._sub_lock:
            subscribers = list(self._subscribers)
        for q in subscribers:
            try:
                q.put_nowait((kind, payload))
            except Full:
                with self._sub_lock:
                    if q in self._subscribers:
                        self._subscribers.remove(q)

    def _get_status(self, req: HttpRequest) -> HttpResponse:
        return HttpResponse.json(self.agent.status_dict())

    def _post_command(self, req: HttpRequest) -> HttpResponse:
        body = req.json()
        try:
            command = parse_command(body)
        except (KeyError, TypeError, ValueError) as exc:
            raise RequestValidationError("invalid command", str(exc)) from exc
        try:
            self.agent.submit(command)
        except CommandRejected as exc:
            raise ConflictError("invalid-in-state", str(exc)) from exc
        except ServiceError:
            raise
        return HttpResponse.json({"ok": True, "status": self.agent.status_dict()})

    def _get_events(self, req: HttpRequest) -> HttpResponse:
        q: Queue = Queue(maxsize=EVENT_BUFFER)
        with self._sub_lock:
            self._subscribers.append(q)
        # Late joiners get one status snapshot up front.
        q.put(("status", self.agent.status_dict()))

        def stream() -> Iterator[bytes]:
            try:
                while True:
                    try:
                        item = q.get(timeout=SSE_KEEPALIVE_S)
                    except Empty:
                        yield b": keepalive\n\n"
                        continue
                    if item is None:
                        return
                    kind, payload = item
                    data = json.dumps(payload, separators=(",", ":"))
                    if kind == "status":
                        yield f"data: {data}\n\n".encode("utf-8")
                    else:
                        yield f"event: {kind}\ndata: {data}\n\n".encode("utf-8")
            finally:
                with self._sub_lock:
                    if q in self._subscribers:
                        self._subscribers.remove(q)

        return HttpResponse.sse(stream())


class StandaloneAgent:
    """One agent as a long-running process component.

    Wall clock (optionally accelerated), HTTP coordinator client, TCP link
    (listen or connect side) and the control API. The provider side of a
    pairing listens; the consumer dials, standing in for the demo's
    Bluetooth proximity pairing.
    """

    def __init__(self, config: AgentConfig, host: str = "127.0.0.1",
                 link_listen_port: Optional[int] = None,
                 link_connect: Optional[str] = None,
                 acceleration: float = 1.0):
        if config.coordinator_url is None:
            raise ValueError("standalone agent needs a coordinator_url")
        self.clock = WallClock(acceleration)
        self.coordinator = HttpCoordinatorClient(config.coordinator_url)
        self.agent = DeviceAgent(config, self.coordinator, self.clock,
                                 embedded=False)
        self.agent.start()  # raises CoordinatorUnreachableError when down
        self.control = AgentControlServer(self.agent, host,
                                          config.control_port or 0)
        self.control.start()
        self.link_listener: Optional[TcpListener] = None
        self._link_thread: Optional[threading.Thread] = None
        if link_listen_port is not None:
            self.link_listener = TcpListener(link_listen_port, LinkParams())
            self._link_thread = threading.Thread(target=self._accept_link,
                                                 daemon=True, name="link-accept")
            self._link_thread.start()
        elif link_connect is not None:
            host_part, _, port_part = link_connect.partition(":")
            self._link_thread = threading.Thread(
                target=self._dial_link, args=(host_part, int(port_part)),
                daemon=True, name="link-dial")
            self._link_thread.start()

    def _accept_link(self) -> None:
        try:
            endpoint = self.link_listener.accept(timeout_s=None)
        except OSError:
            return
        self.agent.attach_link_async(endpoint)

    def _dial_link(self, host: str, port: int) -> None:
        deadline = time.monotonic() + LINK_CONNECT_TIMEOUT_S
        while time.monotonic() < deadline:
            try:
                endpoint = tcp_connect(host, port, LinkParams())
            except OSError:
                time.sleep(LINK_CONNECT_RETRY_S)
                continue
            self.agent.attach_link_async(endpoint)
            return
        log.error("could not reach peer link at %s:%s", host, port)

    @property
    def control_url(self) -> str:
        return self.control.url

    @property
    def link_port(self) -> Optional[int]:
        return self.link_listener.port if self.link_listener else None

    def wait(self, poll_s: float = 0.2) -> None:
        """Block until a Shutdown command stops the agent."""
        while not self.agent._stopped:
            time.sleep(poll_s)

    def shutdown(self) -> None:
        self.agent.stop()
        self.control.shutdown()
        if self.link_listener is not None:
            self.link_listener.close()
        if self.agent.endpoint is not None:
            try:
                self.agent.endpoint.inject_disconnect()
            except Exception:  # endpoint may already be gone
                pass


def run_agent(config: AgentConfig, **kwargs) -> StandaloneAgent:
    """Start a standalone agent; returns its control handle."""
    return StandaloneAgent(config, **kwargs)
