"""Scenario files: declarations plus a time-ordered event script."""

from __future__ import annotations

import json
import json.decoder
import json.scanner
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from ..errors import ParseError, UnresolvedReference

EVENT_KINDS = ("device_report", "user_action", "app_request", "advance_clock")
USER_ACTIONS = ("preference_change", "token_grant", "token_revoke", "ownership_transfer")
BUILTIN = ("bob",)


class _Located(dict):
    """dict that remembers the source line of its opening brace."""

    line: int = 0


def _located_decoder() -> json.JSONDecoder:
    decoder = json.JSONDecoder()

    def parse_object(s_and_end, *args):
        s, end = s_and_end
        obj, new_end = json.decoder.JSONObject(s_and_end, *args)
        located = _Located(obj)
        located.line = s.count("\n", 0, end) + 1
        return located, new_end

    decoder.parse_object = parse_object
    decoder.scan_once = json.scanner.py_make_scanner(decoder)
    return decoder


def _line(obj: Any) -> int | None:
    return getattr(obj, "line", None)


@dataclass(frozen=True)
class ScenarioEvent:
    t: int
    kind: str
    data: dict
    phase: str = ""
    line: int | None = None


@dataclass
class Scenario:
    name: str
    seed: int
    start: int
    config: dict
    users: list[dict]
    devices: list[dict]
    normalization: dict
    qoc: list[dict]
    rules: list[dict]
    threats: list[dict]
    preferences: list[dict]
    policies: list[dict]
    phases: list[tuple[str, list[ScenarioEvent]]] = field(default_factory=list)

    @property
    def events(self) -> list[ScenarioEvent]:
        return [e for _, events in self.phases for e in events]

    @property
    def phase_names(self) -> list[str]:
        return [name for name, _ in self.phases]


def _require(doc: dict, name: str, kind: type, where: str) -> Any:
    if name not in doc:
        raise ParseError(f"{where}: missing field {name!r}", _line(doc))
    value = doc[name]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ParseError(f"{where}.{name}: expected {kind.__name__}", _line(doc))
    return value


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        doc = _located_decoder().decode(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: {exc.msg}", exc.lineno) from None
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: top level must be an object", 1)

    users = doc.get("users", [])
    devices = doc.get("devices", [])
    user_ids = set()
    for u in users:
        user_ids.add(_require(u, "id", str, "users[]"))
    device_ids = set()
    for d in devices:
        device_ids.add(_require(d, "id", str, "devices[]"))
        owner = _require(d, "owner", str, f"devices[{d['id']}]")
        if owner not in user_ids:
            raise UnresolvedReference(f"line {_line(d)}: device {d['id']!r} owner {owner!r} is not declared")

    start = doc.get("start", 0)
    phases: list[tuple[str, list[ScenarioEvent]]] = []
    raw_phases = doc.get("phases")
    if raw_phases is None:
        raw_phases = [{"name": "main", "events": doc.get("events", [])}]
    last_t = None
    granted: set[str] = set()
    for p in raw_phases:
        name = _require(p, "name", str, "phases[]")
        events = []
        for e in _require(p, "events", list, f"phases[{name}]"):
            if not isinstance(e, dict):
                raise ParseError(f"phase {name}: events must be objects")
            t = _require(e, "t", int, "event")
            kind = _require(e, "kind", str, "event")
            if kind not in EVENT_KINDS:
                raise ParseError(f"unknown event kind {kind!r}", _line(e))
            if last_t is not None and t < last_t:
                raise ParseError(f"events out of order: t={t} after t={last_t}", _line(e))
            last_t = t
            _check_refs(e, kind, user_ids, device_ids, granted)
            events.append(ScenarioEvent(t, kind, dict(e), name, _line(e)))
        phases.append((name, events))

    return Scenario(
        name=doc.get("name", source),
        seed=int(doc.get("seed", 0)),
        start=int(start),
        config=dict(doc.get("config", {})),
        users=[dict(u) for u in users],
        devices=[dict(d) for d in devices],
        normalization=doc.get("normalization", {}),
        qoc=list(doc.get("qoc", [])),
        rules=list(doc.get("rules", [])),
        threats=list(doc.get("threats", [])),
        preferences=list(doc.get("preferences", [])),
        policies=list(doc.get("policies", [])),
        phases=phases,
    )


def _check_refs(e: dict, kind: str, users: set, devices: set, granted: set) -> None:
    line = _line(e)

    def need(value, pool, what):
        if value not in pool:
            raise UnresolvedReference(f"line {line}: undeclared {what} {value!r}")

    if kind == "device_report":
        need(_require(e, "device", str, "device_report"), devices, "device")
        _require(e, "attribute", str, "device_report")
        if "value" not in e:
            raise ParseError("device_report: missing field 'value'", line)
    elif kind == "user_action":
        action = _require(e, "action", str, "user_action")
        if action not in USER_ACTIONS:
            raise ParseError(f"unknown user action {action!r}", line)
        if "user" in e:
            need(e["user"], users, "user")
        if action == "preference_change":
            need(_require(e, "user", str, action), users, "user")
            _require(e, "delta", dict, action)
        elif action == "token_grant":
            need(_require(e, "subject", str, action), devices | users, "subject")
            _require(e, "resource", str, action)
            if "token_id" in e:
                granted.add(e["token_id"])
        elif action == "token_revoke":
            need(_require(e, "token_id", str, action), granted, "token")
        elif action == "ownership_transfer":
            need(_require(e, "device", str, action), devices, "device")
            need(_require(e, "new_owner", str, action), users, "user")
            if "signer" in e:
                need(e["signer"], users, "user")
    elif kind == "app_request":
        need(_require(e, "requester", str, "app_request"), devices, "device")
        need(_require(e, "user", str, "app_request"), users, "user")
        _require(e, "resource", str, "app_request")
        if e.get("token") is not None:
            need(e["token"], granted, "token")


def load_scenario(path: str | Path) -> Scenario:
    """Load a scenario file; a bare built-in name such as ``bob`` also works."""
    p = Path(path)
    if not p.exists() and str(path) in BUILTIN:
        text = resources.files("ctxsec.scenarios").joinpath(f"{path}.json").read_text(encoding="utf-8")
        return parse_scenario(text, str(path))
    if not p.exists() and p.stem in BUILTIN and p.suffix == ".json":
        return load_scenario(p.stem)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    return parse_scenario(text, str(path))


def builtin_path(name: str = "bob") -> Path:
    return Path(str(resources.files("ctxsec.scenarios").joinpath(f"{name}.json")))
