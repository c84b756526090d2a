"""Coordinator access for agents and tooling.

Two interchangeable clients share one surface: LocalCoordinatorClient calls
a CoordinatorService in-process (embedded scenarios), HttpCoordinatorClient
speaks the JSON API and translates error bodies back into the same
ServiceError types, so callers handle failures uniformly.
"""

from __future__ import annotations

import http.client
import json
import urllib.error
import urllib.request
from typing import Iterator, Optional
from urllib.parse import urlencode, urlsplit

from .coordinator import (
    ConflictError,
    CoordinatorService,
    ForbiddenError,
    NotFoundError,
    PartyReport,
    RequestValidationError,
    ServiceError,
)
from .domain import DeviceProfile, EnergyAmount, Role


class CoordinatorUnreachableError(ConnectionError):
    pass


_STATUS_ERRORS = {
    400: RequestValidationError,
    403: ForbiddenError,
    404: NotFoundError,
}


def _error_from_response(status: int, body: bytes) -> ServiceError:
    try:
        obj = json.loads(body.decode("utf-8"))
        code, message, detail = obj["code"], obj["message"], obj.get("detail", "")
    except Exception:
        code, message, detail = "http-error", f"HTTP {status}", body.decode("utf-8", "replace")
    if status == 409:
        return ConflictError(code, message, detail)
    cls = _STATUS_ERRORS.get(status)
    if cls is not None:
        return cls(message, detail)
    err = ServiceError(code, message, detail)
    err.http_status = status
    return err


def request_json(method: str, url: str, body: Optional[dict] = None,
                 timeout_s: float = 10.0) -> dict | list:
    data = None
    headers = {}
    if body is not None:
        data = json.dumps(body).encode("utf-8")
        headers["Content-Type"] = "application/json"
    req = urllib.request.Request(url, data=data, headers=headers, method=method)
    try:
        with urllib.request.urlopen(req, timeout=timeout_s) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        raise _error_from_response(exc.code, exc.read()) from exc
    except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
        raise CoordinatorUnreachableError(f"{method} {url}: {exc}") from exc


class HttpCoordinatorClient:
    def __init__(self, base_url: str, timeout_s: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s

    def _call(self, method: str, path: str, body: Optional[dict] = None):
        return request_json(method, self.base_url + path, body, self.timeout_s)

    def register_device(self, profile: DeviceProfile) -> str:
        out = self._call("POST", "/v1/devices", {
            "device_id": profile.device_id,
            "display_name": profile.display_name,
            "capacity_mwh": profile.capacity_mwh,
            "microcell_id": profile.microcell_id,
        })
        return out["device_id"]

    def post_listing(self, device_id: str, microcell_id: str, role: Role,
                     amount: EnergyAmount) -> dict:
        return self._call("POST", f"/v1/microcells/{microcell_id}/listings", {
            "device_id": device_id,
            "role": role.value,
            "amount_percent": amount.percent,
        })

    def list_open(self, microcell_id: str, role: Optional[Role] = None) -> list:
        query = f"?{urlencode({'role': role.value})}" if role else ""
        return self._call("GET", f"/v1/microcells/{microcell_id}/listings{query}")

    def withdraw_listing(self, listing_id: str) -> dict:
        return self._call("DELETE", f"/v1/listings/{listing_id}")

    def create_transaction(self, consumer_id: str, provider_id: str,
                           amount: EnergyAmount, goal_mode: str,
                           duration_s: Optional[float] = None) -> str:
        body = {
            "consumer_id": consumer_id,
            "provider_id": provider_id,
            "amount_percent": amount.percent,
            "goal_mode": goal_mode,
        }
        if duration_s is not None:
            body["duration_s"] = duration_s
        return self._call("POST", "/v1/transactions", body)["transaction_id"]

    def submit_report(self, transaction_id: str, report: PartyReport) -> str:
        out = self._call("PUT", f"/v1/transactions/{transaction_id}/reports",
                         report.to_dict())
        return out["state"]

    def get_transaction(self, transaction_id: str) -> dict:
        return self._call("GET", f"/v1/transactions/{transaction_id}")

    def loss_report(self, transaction_id: str,
                    bucket_s: Optional[float] = None) -> dict:
        query = f"?bucket_s={bucket_s}" if bucket_s is not None else ""
        return self._call("GET", f"/v1/transactions/{transaction_id}/loss-report{query}")


class LocalCoordinatorClient:
    """Direct in-process calls; ServiceError propagates unchanged."""

    def __init__(self, service: CoordinatorService):
        self.service = service

    def register_device(self, profile: DeviceProfile) -> str:
        return self.service.register_device(profile)

    def post_listing(self, device_id: str, microcell_id: str, role: Role,
                     amount: EnergyAmount) -> dict:
        profile = self.service.get_device(device_id)
        if profile.microcell_id != microcell_id:
            raise ConflictError("locality",
                                f"device {device_id} belongs to microcell "
                                f"{profile.microcell_id}")
        return self.service.post_listing(device_id, role, amount)

    def list_open(self, microcell_id: str, role: Optional[Role] = None) -> list:
        return self.service.list_open(microcell_id, role)

    def withdraw_listing(self, listing_id: str) -> dict:
        return self.service.withdraw_listing(listing_id)

    def create_transaction(self, consumer_id: str, provider_id: str,
                           amount: EnergyAmount, goal_mode: str,
                           duration_s: Optional[float] = None) -> str:
        return self.service.create_transaction(consumer_id, provider_id, amount,
                                               goal_mode, duration_s)

    def submit_report(self, transaction_id: str, report: PartyReport) -> str:
        return self.service.submit_report(transaction_id, report)

    def get_transaction(self, transaction_id: str) -> dict:
        return self.service.get_transaction(transaction_id)

    def loss_report(self, transaction_id: str,
                    bucket_s: Optional[float] = None) -> dict:
        return self.service.loss_report(transaction_id, bucket_s)


class SseReader:
    """Blocking reader for a server-sent-event stream (tests and tooling)."""

    def __init__(self, url: str, timeout_s: float = 10.0):
        split = urlsplit(url)
        self._conn = http.client.HTTPConnection(split.hostname, split.port,
                                                timeout=timeout_s)
        path = split.path + (f"?{split.query}" if split.query else "")
        self._conn.request("GET", path)
        self._resp = self._conn.getresponse()
        if self._resp.status != 200:
            body = self._resp.read()
            self._conn.close()
            raise _error_from_response(self._resp.status, body)

    def events(self) -> Iterator[dict]:
        """Yield decoded `data:` payloads; keepalive comments are skipped."""
        for raw in self._resp:
            line = raw.decode("utf-8").strip()
            if line.startswith("data:"):
                yield json.loads(line[len("data:"):].strip())

    def next_event(self) -> dict:
        return next(self.events())

    def close(self) -> None:
        self._conn.close()
