"""Minimal HTTP/1.1 + JSON server plumbing shared by coordinator and agents.

Built on the stdlib ThreadingHTTPServer: handlers are plain functions from
request to response, long-lived server-sent-event responses stream from a
generator, and service errors map onto {code, message, detail} bodies.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterator, Optional
from urllib.parse import parse_qsl, urlsplit

from .coordinator import RequestValidationError, ServiceError

log = logging.getLogger(__name__)

_CORS_HEADERS = {
    "Access-Control-Allow-Origin": "*",
    "Access-Control-Allow-Methods": "GET, POST, PUT, DELETE, OPTIONS",
    "Access-Control-Allow-Headers": "Content-Type",
}


class MethodNotAllowedError(ServiceError):
    http_status = 405

    def __init__(self, message: str):
        super().__init__("method-not-allowed", message)


@dataclass
class HttpRequest:
    method: str
    path: str
    params: dict[str, str]
    query: dict[str, str]
    body: bytes

    def json(self) -> dict:
        try:
            obj = json.loads(self.body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RequestValidationError("request body is not valid JSON",
                                         str(exc)) from exc
        if not isinstance(obj, dict):
            raise RequestValidationError("request body must be a JSON object")
        return obj


@dataclass
class HttpResponse:
    status: int = 200
    body: Optional[bytes] = None
    content_type: str = "application/json"
    headers: dict[str, str] = field(default_factory=dict)
    stream: Optional[Iterator[bytes]] = None

    @classmethod
    def json(cls, obj, status: int = 200) -> "HttpResponse":
        return cls(status=status,
                   body=(json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8"))

    @classmethod
    def text(cls, text: str, status: int = 200) -> "HttpResponse":
        return cls(status=status, body=text.encode("utf-8"),
                   content_type="text/plain; charset=utf-8")

    @classmethod
    def sse(cls, events: Iterator[bytes]) -> "HttpResponse":
        return cls(status=200, content_type="text/event-stream", stream=events,
                   headers={"Cache-Control": "no-cache"})


Handler = Callable[[HttpRequest], HttpResponse]


def _compile(pattern: str) -> re.Pattern:
    regex = re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", pattern)
    return re.compile(f"^{regex}$")


class ApiHttpServer:
    """Routes (method, path pattern) pairs onto handler functions."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._routes: list[tuple[str, re.Pattern, Handler]] = []
        outer = self

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # noqa: N802
                log.debug("%s %s", self.address_string(), fmt % args)

            def _handle(self, method: str) -> None:
                split = urlsplit(self.path)
                query = dict(parse_qsl(split.query))
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                try:
                    response = outer._dispatch(method, split.path, query, body)
                except ServiceError as exc:
                    response = HttpResponse.json(
                        {"code": exc.code, "message": exc.message,
                         "detail": exc.detail},
                        status=exc.http_status)
                except Exception as exc:  # pragma: no cover - defensive
                    log.exception("handler failure for %s %s", method, self.path)
                    response = HttpResponse.json(
                        {"code": "internal", "message": str(exc), "detail": ""},
                        status=500)
                self._write(response)

            def _write(self, response: HttpResponse) -> None:
                try:
                    self.send_response(response.status)
                    for key, value in {**_CORS_HEADERS, **response.headers}.items():
                        self.send_header(key, value)
                    self.send_header("Content-Type", response.content_type)
                    if response.stream is not None:
                        self.send_header("Connection", "close")
                        self.end_headers()
                        for chunk in response.stream:
                            self.wfile.write(chunk)
                            self.wfile.flush()
                    else:
                        body = response.body or b""
                        self.send_header("Content-Length", str(len(body)))
                        self.end_headers()
                        self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    if response.stream is not None:
                        response.stream.close()

            def do_GET(self):  # noqa: N802
                self._handle("GET")

            def do_POST(self):  # noqa: N802
                self._handle("POST")

            def do_PUT(self):  # noqa: N802
                self._handle("PUT")

            def do_DELETE(self):  # noqa: N802
                self._handle("DELETE")

            def do_OPTIONS(self):  # noqa: N802
                self._write(HttpResponse(status=204, body=b"",
                                         content_type="text/plain"))

        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.daemon_threads = True
        self.host, self.port = self._httpd.server_address[:2]
        self._thread: Optional[threading.Thread] = None

    def add(self, method: str, pattern: str, handler: Handler) -> None:
        self._routes.append((method.upper(), _compile(pattern), handler))

    def _dispatch(self, method: str, path: str, query: dict, body: bytes) -> HttpResponse:
        matched_path = False
        for route_method, regex, handler in self._routes:
            match = regex.match(path)
            if match is None:
                continue
            matched_path = True
            if route_method != method:
                continue
            request = HttpRequest(method=method, path=path,
                                  params=match.groupdict(), query=query, body=body)
            return handler(request)
        if matched_path:
            raise MethodNotAllowedError(f"{method} not allowed on {path}")
        from .coordinator import NotFoundError
        raise NotFoundError(f"no route for {path}")

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name=f"httpd-{self.port}", daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
