"""Serving the built operator console from the coordinator."""

import urllib.request
from pathlib import Path

import pytest

from wattshare.coordinator import CoordinatorService
from wattshare.server import CoordinatorServer

DIST = Path(__file__).resolve().parent.parent / "frontend" / "dist"

pytestmark = pytest.mark.skipif(
    not (DIST / "index.html").exists(),
    reason="console not built (run `npm run build` in frontend/)")


@pytest.fixture()
def server(tmp_path):
    srv = CoordinatorServer(CoordinatorService(data_dir=tmp_path), port=0,
                            console_dir=DIST)
    srv.start()
    yield srv
    srv.shutdown()


def fetch(url):
    with urllib.request.urlopen(url, timeout=10) as resp:
        return resp.status, resp.headers.get("Content-Type"), resp.read()


def test_index_served(server):
    status, content_type, body = fetch(server.url + "/console")
    assert status == 200
    assert "text/html" in content_type
    assert b'id="app"' in body


def test_js_and_css_served(server):
    status, content_type, body = fetch(server.url + "/console/main.js")
    assert status == 200
    assert "javascript" in content_type
    assert b"sendCommand" in body or b"renderApp" in body
    status, content_type, _ = fetch(server.url + "/console/styles.css")
    assert status == 200
    assert "text/css" in content_type


def test_missing_asset_404(server):
    with pytest.raises(urllib.error.HTTPError) as err:
        fetch(server.url + "/console/nope.js")
    assert err.value.code == 404


def test_traversal_refused(server):
    with pytest.raises(urllib.error.HTTPError) as err:
        fetch(server.url + "/console/..%2F..%2Fpyproject.toml")
    assert err.value.code == 404
