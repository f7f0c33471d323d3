"""Risk assessment, user preferences and the context dispatcher."""

from __future__ import annotations

import fnmatch
import json
import threading
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .errors import UnknownUser
from .reasoning import ContextSnapshot, HighLevelContext

LEVELS = (("low", 0.25), ("medium", 0.5), ("high", 0.8))


def risk_level(score: float) -> str:
    for name, upper in LEVELS:
        if score < upper:
            return name
    return "critical"


# -- threats -----------------------------------------------------------------


@dataclass(frozen=True)
class ThreatEntry:
    id: str
    when: tuple[dict, ...]
    severity: float

    def __post_init__(self):
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"threat {self.id}: severity {self.severity} outside [0, 1]")

    def applies(self, hlc: HighLevelContext, snapshot: ContextSnapshot | None) -> bool:
        values = snapshot.values() if snapshot is not None else {}
        return all(_condition_holds(c, hlc.label, values) for c in self.when)


def _condition_holds(cond: dict, label: str, values: Mapping[str, Any]) -> bool:
    if "label" in cond:
        actual = label
        target = cond["label"] if "value" not in cond else cond["value"]
    else:
        if cond["key"] not in values:
            return False
        actual = values[cond["key"]]
        target = cond["value"]
    op = cond.get("op", "eq")
    if op == "eq":
        return actual == target
    if op == "in":
        return actual in target
    if op == "glob":
        return isinstance(actual, str) and fnmatch.fnmatchcase(actual, target)
    if op == "gte":
        return actual >= target
    if op == "lte":
        return actual <= target
    raise ValueError(f"unknown operator {op!r}")


def load_catalog(source: str | Path | Iterable[dict]) -> list[ThreatEntry]:
    if isinstance(source, (str, Path)):
        source = json.loads(Path(source).read_text(encoding="utf-8"))
    catalog = []
    seen = set()
    for item in source:
        when = item["when"]
        entry = ThreatEntry(item["id"], tuple(when if isinstance(when, list) else [when]), float(item["severity"]))
        if entry.id in seen:
            raise ValueError(f"duplicate threat id {entry.id!r}")
        seen.add(entry.id)
        catalog.append(entry)
    return catalog


@dataclass(frozen=True)
class RiskAssessment:
    score: float
    level: str
    matched: frozenset[str]

    def summary(self) -> dict:
        return {"score": round(self.score, 6), "level": self.level, "matched": sorted(self.matched)}


def combine_severities(severities: Iterable[float]) -> float:
    """1 - prod(1 - s), computed exactly so the result ignores input order."""
    survival = Fraction(1)
    for s in severities:
        survival *= 1 - Fraction(s)
    return float(1 - survival)


def assess_risk(hlc: HighLevelContext, snapshot: ContextSnapshot | None, catalog: Iterable[ThreatEntry]) -> RiskAssessment:
    matched = [t for t in catalog if t.applies(hlc, snapshot)]
    score = combine_severities(t.severity for t in matched)
    return RiskAssessment(score, risk_level(score), frozenset(t.id for t in matched))


# -- preferences ---------------------------------------------------------------


@dataclass(frozen=True)
class PreferenceEntry:
    privacy: Mapping[str, dict] = field(default_factory=dict)
    min_factors: int = 0
    consent: Mapping[str, bool] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"privacy": dict(self.privacy), "min_factors": self.min_factors, "consent": dict(self.consent)}

    @classmethod
    def from_json(cls, data: Mapping) -> "PreferenceEntry":
        factors = int(data.get("min_factors", 0))
        if factors not in (0, 1, 2):
            raise ValueError(f"min_factors must be 0, 1 or 2, got {factors}")
        return cls(dict(data.get("privacy", {})), factors, dict(data.get("consent", {})))

    def merged(self, delta: Mapping) -> "PreferenceEntry":
        base = self.to_json()
        for name in ("privacy", "consent"):
            if name in delta:
                updated = dict(base[name])
                for attr, value in delta[name].items():
                    if value is None:
                        updated.pop(attr, None)
                    else:
                        updated[attr] = value
                base[name] = updated
        if "min_factors" in delta:
            base["min_factors"] = delta["min_factors"]
        return PreferenceEntry.from_json(base)


@dataclass(frozen=True)
class PreferenceSlice:
    user_id: str
    label: str
    matched: str  # "exact", "pattern:<glob>" or "default"
    entry: PreferenceEntry

    def summary(self) -> dict:
        return {"user": self.user_id, "matched": self.matched, **self.entry.to_json()}


_GLOB_CHARS = frozenset("*?[")


def _is_pattern(key: str) -> bool:
    return any(ch in _GLOB_CHARS for ch in key)


@dataclass
class PreferenceSet:
    user_id: str
    entries: dict[str, PreferenceEntry] = field(default_factory=dict)
    default: PreferenceEntry = field(default_factory=PreferenceEntry)

    def lookup(self, label: str) -> PreferenceSlice:
        if label in self.entries and not _is_pattern(label):
            return PreferenceSlice(self.user_id, label, "exact", self.entries[label])
        patterns = [p for p in self.entries if _is_pattern(p) and fnmatch.fnmatchcase(label, p)]
        if patterns:
            # more literal characters = more specific
            best = min(patterns, key=lambda p: (-sum(ch not in _GLOB_CHARS for ch in p), p))
            return PreferenceSlice(self.user_id, label, f"pattern:{best}", self.entries[best])
        return PreferenceSlice(self.user_id, label, "default", self.default)

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "default": self.default.to_json(),
            "contexts": {k: v.to_json() for k, v in sorted(self.entries.items())},
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "PreferenceSet":
        return cls(
            user_id=data["user_id"],
            entries={k: PreferenceEntry.from_json(v) for k, v in data.get("contexts", {}).items()},
            default=PreferenceEntry.from_json(data.get("default", {})),
        )


class PreferenceStore:
    def __init__(self, sets: Iterable[PreferenceSet] = ()):
        self._sets = {s.user_id: s for s in sets}

    def register(self, prefs: PreferenceSet) -> None:
        self._sets[prefs.user_id] = prefs

    def __contains__(self, user_id: str) -> bool:
        return user_id in self._sets

    def get(self, user_id: str) -> PreferenceSet:
        try:
            return self._sets[user_id]
        except KeyError:
            raise UnknownUser(user_id) from None

    def get_preferences(self, user_id: str, label: str) -> PreferenceSlice:
        return self.get(user_id).lookup(label)

    def update(self, user_id: str, delta: Mapping[str, Mapping]) -> PreferenceSet:
        """Apply ``{label-or-pattern-or-"default": partial entry}``."""
        prefs = self.get(user_id)
        updated = PreferenceSet(user_id, dict(prefs.entries), prefs.default)
        for target, change in delta.items():
            if target == "default":
                updated.default = updated.default.merged(change)
            else:
                updated.entries[target] = updated.entries.get(target, PreferenceEntry()).merged(change)
        self._sets[user_id] = updated
        return updated


# -- publish / subscribe ---------------------------------------------------------


@dataclass(frozen=True)
class ContextEvent:
    seq: int
    user_id: str
    hlc: HighLevelContext
    risk: RiskAssessment
    preferences: PreferenceSlice
    snapshot: ContextSnapshot | None = None
    republished: bool = False

    @property
    def label(self) -> str:
        return self.hlc.label

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "user": self.user_id,
            "context": self.hlc.summary(),
            "risk": self.risk.summary(),
            "preferences": self.preferences.summary(),
            "snapshot_at": self.snapshot.at if self.snapshot is not None else None,
            "republished": self.republished,
        }


class Subscription:
    def __init__(self, pattern: str, callback: Callable[[ContextEvent], None] | None = None):
        self.pattern = pattern
        self.callback = callback
        self._queue: deque[ContextEvent] = deque()
        self.received: list[ContextEvent] = []

    def matches(self, label: str) -> bool:
        return self.pattern == "*" or fnmatch.fnmatchcase(label, self.pattern)

    def deliver(self, event: ContextEvent) -> None:
        self.received.append(event)
        if self.callback is not None:
            self.callback(event)
        else:
            self._queue.append(event)

    def drain(self) -> list[ContextEvent]:
        out = list(self._queue)
        self._queue.clear()
        return out


class Broker:
    """In-process, exactly-once, in-order topic fan-out."""

    def __init__(self):
        self._subs: list[Subscription] = []
        self._lock = threading.Lock()
        self.published: list[ContextEvent] = []

    def subscribe(self, pattern: str = "*", callback: Callable[[ContextEvent], None] | None = None) -> Subscription:
        sub = Subscription(pattern, callback)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            self._subs.remove(sub)

    def publish(self, event: ContextEvent) -> int:
        with self._lock:
            self.published.append(event)
            targets = [s for s in self._subs if s.matches(event.label)]
        for sub in targets:
            sub.deliver(event)
        return len(targets)


class ContextDispatcher:
    """Enrich accepted contexts with risk and preferences, then publish."""

    def __init__(self, catalog: Iterable[ThreatEntry], preferences: PreferenceStore, broker: Broker | None = None):
        self.catalog = list(catalog)
        self.preferences = preferences
        self.broker = broker if broker is not None else Broker()
        self._seq: dict[str, int] = {}
        self.current: dict[str, ContextEvent] = {}

    def _next_seq(self, user_id: str) -> int:
        self._seq[user_id] = self._seq.get(user_id, 0) + 1
        return self._seq[user_id]

    def enrich(self, user_id: str, hlc: HighLevelContext, snapshot: ContextSnapshot | None) -> ContextEvent:
        risk = assess_risk(hlc, snapshot, self.catalog)
        prefs = self.preferences.get_preferences(user_id, hlc.label)
        return ContextEvent(self._next_seq(user_id), user_id, hlc, risk, prefs, snapshot)

    def dispatch(self, user_id: str, hlc: HighLevelContext, snapshot: ContextSnapshot | None) -> ContextEvent:
        event = self.enrich(user_id, hlc, snapshot)
        self.current[user_id] = event
        self.broker.publish(event)
        return event

    def update_preferences(self, user_id: str, delta: Mapping[str, Mapping]) -> tuple[PreferenceSet, ContextEvent | None]:
        prefs = self.preferences.update(user_id, delta)
        current = self.current.get(user_id)
        if current is None:
            return prefs, None
        event = ContextEvent(
            self._next_seq(user_id),
            user_id,
            current.hlc,
            current.risk,
            prefs.lookup(current.hlc.label),
            current.snapshot,
            republished=True,
        )
        self.current[user_id] = event
        self.broker.publish(event)
        return prefs, event
