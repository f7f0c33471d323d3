import json
import threading
import urllib.request

import pytest

from ctxsec.harness.service import build_service, serve

START = 1718265600000


@pytest.fixture
def service():
    return build_service({"scenario": "bob", "clock": "fixed", "now": START + 1000})


def _post_report(service, device, attribute, value, at=START + 1000):
    report = service.pipeline.make_report(device, attribute, value, at)
    return service.handle("POST", "/reports", json.dumps(report.to_json()))


def test_post_report_grows_cib(service):
    before = len(service.pipeline.acquisition.cib)
    status, body = _post_report(service, "bob-phone", "location", [48.85660, 2.35220])
    assert status == 202
    assert body["cib_size"] == before + 1 == len(service.pipeline.acquisition.cib)


def test_replayed_report_conflict(service):
    ssid = sorted(service.pipeline.scenario.normalization["network"]["ssids"])[0]
    report = service.pipeline.make_report("bob-phone", "network", ssid, START + 1000)
    assert service.handle("POST", "/reports", json.dumps(report.to_json()))[0] == 202
    status, body = service.handle("POST", "/reports", json.dumps(report.to_json()))
    assert (status, body["error"]) == (409, "ReplayedSequence")


def test_bad_report_body(service):
    assert service.handle("POST", "/reports", "{not json")[0] == 400
    assert service.handle("POST", "/reports", json.dumps({"device_id": "x"}))[0] == 400


def test_current_context_after_reports(service):
    sc = service.pipeline.scenario
    home = next(e for name, events in sc.phases if name == "home" for e in events if e.kind == "device_report")
    _post_report(service, home.data["device"], home.data["attribute"], home.data["value"])
    status, body = service.handle("GET", "/context/current?user=bob")
    assert status == 200 and set(body["current"]) == {"bob"}


def test_delete_token_then_check_denies(service):
    status, token = service.handle("POST", "/tokens", json.dumps(
        {"subject": "hospital-hcs", "resource": "glucose", "operations": ["read"], "constraint": "*"}))
    assert status == 201
    tid = token["token_id"]
    assert service.handle("POST", f"/tokens/{tid}/check", json.dumps({"label": "at_home"}))[1]["allow"]
    assert service.handle("DELETE", f"/tokens/{tid}")[0] == 200
    status, decision = service.handle("POST", f"/tokens/{tid}/check", json.dumps({"label": "at_home"}))
    assert status == 200 and decision == {"allow": False, "reason": "revoked"}


def test_unknown_token_404(service):
    assert service.handle("DELETE", "/tokens/nope")[0] == 404


def test_ledger_verify(service):
    status, body = service.handle("GET", "/ledger/verify")
    assert status == 200 and body["valid"] is True and body["length"] == len(service.pipeline.trust)


def test_preferences_and_events(service):
    status, prefs = service.handle("PUT", "/preferences/bob", json.dumps({"default": {"min_factors": 1}}))
    assert status == 200 and prefs["default"]["min_factors"] == 1
    assert service.handle("PUT", "/preferences/eve", json.dumps({}))[0] == 404
    status, events = service.handle("GET", "/events?after=0&user=bob")
    assert status == 200 and isinstance(events, list)


def test_routing_errors(service):
    assert service.handle("GET", "/nothing")[0] == 404
    assert service.handle("GET", "/reports")[0] == 405


def test_http_roundtrip():
    server = serve({"scenario": "bob", "port": 0, "clock": "fixed", "now": START})
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        host, port = server.server_address[:2]
        with urllib.request.urlopen(f"http://{host}:{port}/ledger/verify") as resp:
            assert resp.status == 200
            assert json.loads(resp.read())["valid"] is True
    finally:
        server.shutdown()
        server.server_close()
