"""HTTP front end. Each endpoint maps one-to-one onto a pipeline operation.

:class:`Service` is transport-free (``handle(method, path, body)``), so
it can be tested without sockets; :func:`serve` puts it behind the
standard-library threading HTTP server.
"""

from __future__ import annotations

import json
import logging
import re
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable
from urllib.parse import parse_qs, urlsplit

from .. import errors
from ..ingestion import ContextReport
from .pipeline import Pipeline
from .scenario import load_scenario

log = logging.getLogger(__name__)

ERROR_STATUS: dict[type, int] = {
    errors.UnknownDevice: 404,
    errors.UnknownUser: 404,
    errors.UnknownToken: 404,
    errors.UnknownSubject: 404,
    errors.BadSignature: 401,
    errors.ReplayedSequence: 409,
    errors.ContractViolation: 409,
    errors.DuplicateDevice: 409,
    errors.ClockSkewExceeded: 422,
    errors.UnnormalizableValue: 422,
    errors.InvalidWindow: 400,
    errors.LintError: 400,
}


def status_for(exc: Exception) -> int:
    for cls in type(exc).__mro__:
        if cls in ERROR_STATUS:
            return ERROR_STATUS[cls]
    return 400 if isinstance(exc, errors.ContextSecurityError) else 500


class Service:
    def __init__(self, pipeline: Pipeline, clock: Callable[[], int] | None = None):
        self.pipeline = pipeline
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.routes: list[tuple[str, re.Pattern, Callable]] = [
            ("POST", re.compile(r"/reports"), self.post_report),
            ("GET", re.compile(r"/context/current"), self.get_current),
            ("GET", re.compile(r"/events"), self.get_events),
            ("PUT", re.compile(r"/preferences/(?P<user>[^/]+)"), self.put_preferences),
            ("POST", re.compile(r"/tokens"), self.post_token),
            ("DELETE", re.compile(r"/tokens/(?P<token_id>[^/]+)"), self.delete_token),
            ("POST", re.compile(r"/tokens/(?P<token_id>[^/]+)/check"), self.check_token),
            ("GET", re.compile(r"/ledger/verify"), self.verify_ledger),
        ]

    def handle(self, method: str, path: str, body: bytes | str | None = None) -> tuple[int, Any]:
        parts = urlsplit(path)
        query = {k: v[-1] for k, v in parse_qs(parts.query).items()}
        allowed = False
        for verb, pattern, fn in self.routes:
            m = pattern.fullmatch(parts.path)
            if not m:
                continue
            allowed = True
            if verb != method:
                continue
            try:
                payload = json.loads(body) if body else {}
            except json.JSONDecodeError as exc:
                return 400, {"error": "ParseError", "message": exc.msg}
            try:
                return fn(payload, query, **m.groupdict())
            except (errors.ContextSecurityError, KeyError, ValueError, TypeError) as exc:
                name = type(exc).__name__
                status = status_for(exc) if isinstance(exc, errors.ContextSecurityError) else 400
                return status, {"error": name, "message": str(exc)}
        return (405, {"error": "MethodNotAllowed"}) if allowed else (404, {"error": "NotFound"})

    # -- endpoints -----------------------------------------------------------

    def post_report(self, body, query):
        report = ContextReport.from_json(body)
        now = self.clock()
        p = self.pipeline
        with p.lock:
            record = p.submit_report(report, now)
            user = p._user_of(report.device_id)
            if user in p.users:
                p.reason(user, now)
        return 202, {"accepted": True, "record": record.summary(), "cib_size": len(p.acquisition.cib)}

    def get_current(self, body, query):
        p = self.pipeline
        out = {}
        for user, state in sorted(p.users.items()):
            if "user" in query and query["user"] != user:
                continue
            current = state.cb.current
            out[user] = current.summary() if current else None
        return 200, {"current": out}

    def get_events(self, body, query):
        after = int(query.get("after", 0))
        events = [e.to_json() for e in self.pipeline.dispatcher.broker.published if e.seq > after]
        if "user" in query:
            events = [e for e in events if e["user"] == query["user"]]
        return 200, events

    def put_preferences(self, body, query, user):
        prefs = self.pipeline.update_preferences(user, body, self.clock())
        return 200, prefs.to_json()

    def post_token(self, body, query):
        token = self.pipeline.grant_token(body, self.clock())
        return 201, token.to_json()

    def delete_token(self, body, query, token_id):
        token = self.pipeline.revoke_token(token_id, self.clock())
        return 200, token.to_json()

    def check_token(self, body, query, token_id):
        decision = self.pipeline.mechanisms.authz.check_token(
            token_id, body["label"], int(body.get("now", self.clock())), operation=body.get("operation"),
        )
        return 200, {"allow": decision.allow, "reason": decision.reason}

    def verify_ledger(self, body, query):
        return 200, {"valid": self.pipeline.trust.verify_chain(), "length": len(self.pipeline.trust)}


def _handler_for(service: Service):
    class Handler(BaseHTTPRequestHandler):
        def _dispatch(self):
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length else None
            status, payload = service.handle(self.command, self.path, body)
            if self.path.startswith("/events") and isinstance(payload, list):
                data = "".join(json.dumps(e, sort_keys=True) + "\n" for e in payload).encode()
                ctype = "application/x-ndjson"
            else:
                data = json.dumps(payload, sort_keys=True).encode()
                ctype = "application/json"
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        do_GET = do_POST = do_PUT = do_DELETE = _dispatch

        def log_message(self, fmt, *args):
            log.info("%s - %s", self.address_string(), fmt % args)

    return Handler


def build_service(config: dict, base_dir: Path | None = None) -> Service:
    """Config keys: ``scenario`` (declarations to load), ``seed``, ``clock`` (``wall``|``fixed``), ``now``."""
    scenario_ref = config.get("scenario", "bob")
    if base_dir is not None and not Path(scenario_ref).is_absolute() and (base_dir / scenario_ref).exists():
        scenario_ref = str(base_dir / scenario_ref)
    scenario = load_scenario(scenario_ref)
    pipeline = Pipeline(scenario, config.get("seed"))
    clock = None
    if config.get("clock") == "fixed":
        fixed = int(config.get("now", scenario.start))
        clock = lambda: fixed  # noqa: E731
    return Service(pipeline, clock)


def serve(config: dict, base_dir: Path | None = None) -> ThreadingHTTPServer:
    service = build_service(config, base_dir)
    server = ThreadingHTTPServer((config.get("host", "127.0.0.1"), int(config.get("port", 8080))), _handler_for(service))
    server.service = service
    return server
