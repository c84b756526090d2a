"""Simulated proximity transport standing in for the demo's Bluetooth hop.

Two interchangeable backends share one contract: ordered, exactly-once frame
delivery until the link dies, then link-down everywhere. The in-process pair
backs unit tests and embedded scenarios (latency runs on the virtual clock);
the TCP pair backs multi-process demos. Wire format on both: a 4-byte
big-endian payload length followed by the payload bytes.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional

LENGTH_PREFIX = struct.Struct(">I")
DEFAULT_MAX_FRAME_BYTES = 65536


class LinkError(Exception):
    pass


class LinkDownError(LinkError):
    """The link is dead (injected fault, peer close, or scheduled drop)."""


class FrameTooLargeError(LinkError):
    pass


@dataclass(frozen=True)
class LinkParams:
    latency_ms: float = 20.0
    disconnect_at_s: Optional[float] = None
    max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError(f"latency_ms must be >= 0, got {self.latency_ms}")
        if self.max_frame_bytes < 1024:
            raise ValueError(f"max_frame_bytes must be >= 1024, got {self.max_frame_bytes}")


@dataclass(frozen=True)
class Frame:
    payload: bytes


def encode_frame(frame: Frame) -> bytes:
    return LENGTH_PREFIX.pack(len(frame.payload)) + frame.payload


class FrameDecoder:
    """Incremental decoder for a length-prefixed byte stream."""

    def __init__(self, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES):
        self._buf = bytearray()
        self._max = max_frame_bytes

    def feed(self, data: bytes) -> list[Frame]:
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < LENGTH_PREFIX.size:
                break
            (length,) = LENGTH_PREFIX.unpack_from(self._buf)
            if length > self._max:
                raise FrameTooLargeError(f"announced payload of {length} bytes")
            end = LENGTH_PREFIX.size + length
            if len(self._buf) < end:
                break
            frames.append(Frame(bytes(self._buf[LENGTH_PREFIX.size:end])))
            del self._buf[:end]
        return frames


_DOWN = object()  # queue sentinel waking blocked receivers on link death


class LinkEndpoint:
    """One side of a point-to-point link.

    Frames are consumed either by blocking recv_frame() calls or, when a
    receiver callback is installed, by direct delivery on the producing
    context (the embedded event loop). The internal queue gives FIFO
    cross-thread handoff for the blocking style.
    """

    def __init__(self, params: LinkParams, name: str = ""):
        self.params = params
        self.name = name
        self._rx: queue.Queue = queue.Queue()
        self._alive = True
        # Reentrant: delivery callbacks may themselves trigger sends, and the
        # install-time flush below must exclude concurrent reader delivery to
        # keep FIFO order.
        self._lock = threading.RLock()
        self._on_frame: Optional[Callable[[Frame], None]] = None
        self._on_link_down: Optional[Callable[[], None]] = None

    # -- consumption --------------------------------------------------------

    def set_receiver(self, on_frame: Callable[[Frame], None],
                     on_link_down: Callable[[], None]) -> None:
        with self._lock:
            self._on_frame = on_frame
            self._on_link_down = on_link_down
            # Frames (or a death notice) that arrived before the receiver
            # was installed are flushed through it now, preserving order.
            while True:
                try:
                    item = self._rx.get_nowait()
                except queue.Empty:
                    break
                if item is _DOWN:
                    on_link_down()
                else:
                    on_frame(item)

    @property
    def alive(self) -> bool:
        return self._alive

    def recv_frame(self, timeout_s: float) -> Optional[Frame]:
        """Next in-order frame, None on timeout, LinkDownError once drained."""
        if not self._alive and self._rx.empty():
            raise LinkDownError("link is down")
        try:
            item = self._rx.get(timeout=timeout_s if timeout_s > 0 else 0.000001)
        except queue.Empty:
            if not self._alive:
                raise LinkDownError("link is down") from None
            return None
        if item is _DOWN:
            raise LinkDownError("link is down")
        return item

    # -- internal delivery ---------------------------------------------------

    def _deliver(self, frame: Frame) -> None:
        with self._lock:
            if not self._alive:
                return
            if self._on_frame is None:
                self._rx.put(frame)
                return
            self._on_frame(frame)

    def _mark_down(self) -> None:
        with self._lock:
            if not self._alive:
                return
            self._alive = False
            self._rx.put(_DOWN)
            if self._on_link_down is not None:
                self._on_link_down()

    # overridden per backend
    def send_frame(self, frame: Frame) -> None:
        raise NotImplementedError

    def inject_disconnect(self) -> None:
        raise NotImplementedError


class _InProcCore:
    """Shared liveness state of an in-process endpoint pair."""

    def __init__(self, params: LinkParams, clock=None):
        self.params = params
        self.clock = clock
        self.alive = True
        self.endpoints: list[InProcEndpoint] = []
        if params.disconnect_at_s is not None:
            if clock is not None:
                clock.call_at(params.disconnect_at_s, self.kill)
            elif params.disconnect_at_s <= 0:
                self.alive = False

    def kill(self) -> None:
        if not self.alive:
            return
        self.alive = False
        for ep in self.endpoints:
            ep._mark_down()


class InProcEndpoint(LinkEndpoint):
    def __init__(self, core: _InProcCore, name: str):
        super().__init__(core.params, name)
        self._core = core
        self._peer: Optional[InProcEndpoint] = None
        self._alive = core.alive

    def send_frame(self, frame: Frame) -> None:
        if not self._core.alive or not self._alive:
            raise LinkDownError("link is down")
        if len(frame.payload) > self.params.max_frame_bytes:
            raise FrameTooLargeError(
                f"{len(frame.payload)} bytes > max {self.params.max_frame_bytes}")
        peer = self._peer
        assert peer is not None
        if self._core.clock is not None:
            # Frames still in flight when the link dies are dropped: the
            # delivery callback re-checks liveness at delivery time.
            def deliver() -> None:
                if self._core.alive:
                    peer._deliver(frame)
            self._core.clock.call_later(self.params.latency_ms / 1000.0, deliver)
        else:
            peer._deliver(frame)

    def inject_disconnect(self) -> None:
        self._core.kill()


def pair(params: LinkParams, clock=None) -> tuple[InProcEndpoint, InProcEndpoint]:
    """Two connected in-process endpoints with ordered exactly-once delivery."""
    core = _InProcCore(params, clock)
    a = InProcEndpoint(core, "a")
    b = InProcEndpoint(core, "b")
    a._peer, b._peer = b, a
    core.endpoints.extend([a, b])
    return a, b


# ---------------------------------------------------------------------------
# TCP backend
# ---------------------------------------------------------------------------

class TcpEndpoint(LinkEndpoint):
    def __init__(self, sock: socket.socket, params: LinkParams, name: str = ""):
        super().__init__(params, name)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"link-reader-{name}")
        self._reader.start()

    def _read_loop(self) -> None:
        decoder = FrameDecoder(self.params.max_frame_bytes)
        try:
            while True:
                data = self._sock.recv(65536)
                if not data:
                    break
                for frame in decoder.feed(data):
                    self._deliver(frame)
        except (OSError, FrameTooLargeError):
            pass
        self._mark_down()

    def send_frame(self, frame: Frame) -> None:
        if not self._alive:
            raise LinkDownError("link is down")
        if len(frame.payload) > self.params.max_frame_bytes:
            raise FrameTooLargeError(
                f"{len(frame.payload)} bytes > max {self.params.max_frame_bytes}")
        try:
            with self._send_lock:
                self._sock.sendall(encode_frame(frame))
        except OSError as exc:
            self._mark_down()
            raise LinkDownError(str(exc)) from exc

    def inject_disconnect(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._mark_down()


class TcpListener:
    """Accepts one peer for a provider-side link endpoint."""

    def __init__(self, port: int, params: LinkParams, host: str = "127.0.0.1"):
        self.params = params
        self._srv = socket.create_server((host, port))
        self.port = self._srv.getsockname()[1]

    def accept(self, timeout_s: Optional[float] = None) -> TcpEndpoint:
        self._srv.settimeout(timeout_s)
        conn, _ = self._srv.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return TcpEndpoint(conn, self.params, "listener")

    def close(self) -> None:
        self._srv.close()


def tcp_connect(host: str, port: int, params: LinkParams,
                timeout_s: float = 5.0) -> TcpEndpoint:
    sock = socket.create_connection((host, port), timeout=timeout_s)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpEndpoint(sock, params, "connector")
