"""HTTP/1.1 + JSON API in front of a CoordinatorService.

Endpoints mirror the service operations one-to-one; the microcell event
stream is exposed as server-sent events whose payloads are exactly the
ledger records. Optionally also serves the operator console's static files.
"""

from __future__ import annotations

import json
import mimetypes
from pathlib import Path
from typing import Iterator, Optional

from .coordinator import (
    CoordinatorService,
    ConflictError,
    NotFoundError,
    PartyReport,
    RequestValidationError,
)
from .domain import DeviceProfile, EnergyAmount, InvalidEnergyError, Role
from .httpd import ApiHttpServer, HttpRequest, HttpResponse

SSE_KEEPALIVE_S = 10.0


def _required(obj: dict, name: str):
    if name not in obj:
        raise RequestValidationError(f"missing field {name}")
    return obj[name]


def _parse_role(text: str) -> Role:
    try:
        return Role(text)
    except ValueError:
        raise RequestValidationError("invalid role", text) from None


def _parse_amount(value) -> EnergyAmount:
    if isinstance(value, bool) or not isinstance(value, int):
        raise RequestValidationError("amount_percent must be an integer",
                                     repr(value))
    try:
        return EnergyAmount(value)
    except InvalidEnergyError as exc:
        raise RequestValidationError("invalid amount_percent", str(exc)) from exc


class CoordinatorServer:
    """Binds the service to a localhost port; start()/shutdown() lifecycle."""

    def __init__(self, service: CoordinatorService, host: str = "127.0.0.1",
                 port: int = 0, console_dir: Optional[Path | str] = None):
        self.service = service
        self.console_dir = Path(console_dir) if console_dir else None
        self.http = ApiHttpServer(host, port)
        self._register_routes()

    # -- route handlers -------------------------------------------------------

    def _register_routes(self) -> None:
        add = self.http.add
        add("POST", "/v1/devices", self._post_device)
        add("POST", "/v1/microcells/{cell}/listings", self._post_listing)
        add("GET", "/v1/microcells/{cell}/listings", self._get_listings)
        add("DELETE", "/v1/listings/{listing_id}", self._delete_listing)
        add("POST", "/v1/transactions", self._post_transaction)
        add("PUT", "/v1/transactions/{txid}/reports", self._put_report)
        add("GET", "/v1/transactions/{txid}", self._get_transaction)
        add("GET", "/v1/transactions/{txid}/loss-report", self._get_loss_report)
        add("GET", "/v1/microcells/{cell}/events", self._get_events)
        if self.console_dir is not None:
            add("GET", "/console", self._console_index)
            add("GET", "/console/", self._console_index)
            add("GET", "/console/{asset}", self._console_asset)

    def _post_device(self, req: HttpRequest) -> HttpResponse:
        body = req.json()
        capacity = _required(body, "capacity_mwh")
        if not isinstance(capacity, (int, float)) or capacity <= 0:
            raise RequestValidationError("capacity_mwh must be > 0", repr(capacity))
        profile = DeviceProfile(
            device_id=str(body.get("device_id") or ""),
            display_name=str(body.get("display_name") or body.get("device_id") or ""),
            capacity_mwh=float(capacity),
            microcell_id=str(_required(body, "microcell_id")),
        )
        device_id = self.service.register_device(profile)
        return HttpResponse.json({"device_id": device_id})

    def _post_listing(self, req: HttpRequest) -> HttpResponse:
        body = req.json()
        device_id = str(_required(body, "device_id"))
        role = _parse_role(str(_required(body, "role")))
        amount = _parse_amount(_required(body, "amount_percent"))
        profile = self.service.get_device(device_id)
        if profile.microcell_id != req.params["cell"]:
            raise ConflictError(
                "locality",
                f"device {device_id} belongs to microcell {profile.microcell_id}")
        listing = self.service.post_listing(device_id, role, amount)
        return HttpResponse.json(listing)

    def _get_listings(self, req: HttpRequest) -> HttpResponse:
        role = _parse_role(req.query["role"]) if "role" in req.query else None
        rows = self.service.list_open(req.params["cell"], role)
        return HttpResponse.json(rows)

    def _delete_listing(self, req: HttpRequest) -> HttpResponse:
        return HttpResponse.json(
            self.service.withdraw_listing(req.params["listing_id"]))

    def _post_transaction(self, req: HttpRequest) -> HttpResponse:
        body = req.json()
        duration = body.get("duration_s")
        if duration is not None:
            if isinstance(duration, bool) or not isinstance(duration, (int, float)):
                raise RequestValidationError("duration_s must be a number")
            duration = float(duration)
        txid = self.service.create_transaction(
            consumer_id=str(_required(body, "consumer_id")),
            provider_id=str(_required(body, "provider_id")),
            amount=_parse_amount(_required(body, "amount_percent")),
            goal_mode=str(_required(body, "goal_mode")),
            duration_s=duration,
        )
        return HttpResponse.json({"transaction_id": txid})

    def _put_report(self, req: HttpRequest) -> HttpResponse:
        report = PartyReport.from_dict(req.json())
        state = self.service.submit_report(req.params["txid"], report)
        return HttpResponse.json({"state": state})

    def _get_transaction(self, req: HttpRequest) -> HttpResponse:
        return HttpResponse.json(self.service.get_transaction(req.params["txid"]))

    def _get_loss_report(self, req: HttpRequest) -> HttpResponse:
        bucket_s: Optional[float] = None
        if "bucket_s" in req.query:
            try:
                bucket_s = float(req.query["bucket_s"])
            except ValueError:
                raise RequestValidationError("bucket_s must be a number",
                                             req.query["bucket_s"]) from None
        return HttpResponse.json(
            self.service.loss_report(req.params["txid"], bucket_s))

    def _get_events(self, req: HttpRequest) -> HttpResponse:
        sub = self.service.subscribe(req.params["cell"])

        def stream() -> Iterator[bytes]:
            try:
                while True:
                    try:
                        event = sub.get(timeout_s=SSE_KEEPALIVE_S)
                    except EOFError:
                        return
                    if event is None:
                        yield b": keepalive\n\n"
                    else:
                        payload = json.dumps(event, separators=(",", ":"))
                        yield f"data: {payload}\n\n".encode("utf-8")
            finally:
                sub.close()

        return HttpResponse.sse(stream())

    # -- console static assets --------------------------------------------------

    def _console_index(self, req: HttpRequest) -> HttpResponse:
        return self._serve_asset("index.html")

    def _console_asset(self, req: HttpRequest) -> HttpResponse:
        return self._serve_asset(req.params["asset"])

    def _serve_asset(self, name: str) -> HttpResponse:
        assert self.console_dir is not None
        path = (self.console_dir / name).resolve()
        if not str(path).startswith(str(self.console_dir.resolve())) or not path.is_file():
            raise NotFoundError(f"no console asset {name}")
        content_type = mimetypes.guess_type(name)[0] or "application/octet-stream"
        return HttpResponse(body=path.read_bytes(), content_type=content_type)

    # -- lifecycle ----------------------------------------------------------------

    @property
    def url(self) -> str:
        return self.http.url

    def start(self) -> None:
        self.http.start()

    def serve_forever(self) -> None:
        self.http.serve_forever()

    def shutdown(self) -> None:
        self.http.shutdown()
        self.service.close()
