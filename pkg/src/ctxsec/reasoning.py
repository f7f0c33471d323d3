"""Context modelling and reasoning.

Snapshots are key-value views over the CIB at a point in time. A
classifier is an ordered list of conjunctive rules; rules come either from
a hand-written rule file or from the ID3 trainer below.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Container, Iterable, Mapping, Sequence

from . import qoc
from .errors import EmptyTrainingSet
from .ingestion import ContextInformationBase, LowLevelContext

log = logging.getLogger(__name__)

UNKNOWN = "unknown"
_GAIN_DIGITS = 12


@dataclass(frozen=True)
class ContextSnapshot:
    at: int
    entries: Mapping[str, LowLevelContext]
    completeness: float
    required_keys: tuple[str, ...] = ()
    conflicts: int = 0

    def values(self) -> dict[str, Any]:
        return {k: e.value for k, e in self.entries.items()}


@dataclass(frozen=True)
class HighLevelContext:
    label: str
    confidence: float
    contributing: frozenset[str]
    derived_at: int

    def summary(self) -> dict:
        return {
            "label": self.label,
            "confidence": round(self.confidence, 6),
            "contributing": sorted(self.contributing),
            "derived_at": self.derived_at,
        }


def build_snapshot(
    cib: ContextInformationBase,
    t: int,
    required_keys: Sequence[str],
    key_configs: Mapping[str, qoc.KeyConfig],
    reputation: Callable[[str], float] = lambda _source: 0.5,
    sources: Container[str] | None = None,
) -> ContextSnapshot:
    if not required_keys:
        raise ValueError("required_keys must be non-empty")
    entries: dict[str, LowLevelContext] = {}
    conflicts = 0
    for key in sorted(required_keys):
        config = key_configs[key]
        window = config.conflict_window_ms
        records = [
            replace(r, qoc=qoc.score(r, t, config, reputation(r.source)))
            for r in cib.query(key, t - window, t)
            if sources is None or r.source in sources
        ]
        if not records:
            continue
        conflicts += len(qoc.detect_conflicts(records, window))
        entries[key] = qoc.resolve(records, config.conflict_policy)
    present = len(entries)
    return ContextSnapshot(
        at=t,
        entries=entries,
        completeness=present / len(set(required_keys)),
        required_keys=tuple(sorted(set(required_keys))),
        conflicts=conflicts,
    )


# -- rules ----------------------------------------------------------------


@dataclass(frozen=True)
class Condition:
    key: str
    op: str
    value: Any

    def __post_init__(self):
        if self.op not in ("eq", "in"):
            raise ValueError(f"unsupported condition op {self.op!r}")

    def holds(self, values: Mapping[str, Any]) -> bool:
        # eq with value None matches an absent key (trainer output)
        if self.key not in values:
            return self.op == "eq" and self.value is None
        actual = values[self.key]
        if self.op == "eq":
            return actual == self.value
        return actual in self.value

    def to_json(self) -> dict:
        return {"key": self.key, "op": self.op, "value": self.value}


@dataclass(frozen=True)
class Rule:
    label: str
    confidence: float
    conditions: tuple[Condition, ...] = ()

    def matches(self, values: Mapping[str, Any]) -> bool:
        return all(c.holds(values) for c in self.conditions)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "confidence": self.confidence,
            "conditions": [c.to_json() for c in self.conditions],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Rule":
        conf = float(data["confidence"])
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"rule {data['label']!r}: confidence outside [0, 1]")
        return cls(
            label=data["label"],
            confidence=conf,
            conditions=tuple(Condition(c["key"], c.get("op", "eq"), c["value"]) for c in data.get("conditions", [])),
        )


@dataclass(frozen=True)
class Classifier:
    rules: tuple[Rule, ...]

    @property
    def labels(self) -> set[str]:
        return {r.label for r in self.rules} | {UNKNOWN}

    def to_json(self) -> list[dict]:
        return [r.to_json() for r in self.rules]

    @classmethod
    def from_json(cls, data: Iterable[dict]) -> "Classifier":
        return cls(tuple(Rule.from_json(d) for d in data))

    @classmethod
    def from_file(cls, path: str | Path) -> "Classifier":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def infer(snapshot: ContextSnapshot, classifier: Classifier) -> HighLevelContext:
    if not snapshot.entries or not classifier.rules:
        return HighLevelContext(UNKNOWN, 0.0, frozenset(), snapshot.at)
    values = snapshot.values()
    best: tuple[float, str, frozenset[str]] | None = None
    for rule in classifier.rules:
        if not rule.matches(values):
            continue
        keys = frozenset(c.key for c in rule.conditions if c.key in snapshot.entries)
        importances = [
            snapshot.entries[k].qoc.importance if snapshot.entries[k].qoc is not None else 1.0 for k in sorted(keys)
        ]
        weight = math.fsum(importances) / len(importances) if importances else 1.0
        conf = rule.confidence * weight
        if best is None or conf > best[0] or (conf == best[0] and rule.label < best[1]):
            best = (conf, rule.label, keys)
    if best is None:
        return HighLevelContext(UNKNOWN, 0.0, frozenset(), snapshot.at)
    return HighLevelContext(best[1], best[0], best[2], snapshot.at)


# -- training ---------------------------------------------------------------


def _entropy(labels: Sequence[str]) -> float:
    n = len(labels)
    counts = sorted(Counter(labels).values())
    return -math.fsum((c / n) * math.log2(c / n) for c in counts)


def _majority(labels: Sequence[str]) -> tuple[str, float]:
    counts = Counter(labels)
    label = min(counts, key=lambda l: (-counts[l], l))
    return label, counts[label] / len(labels)


def _tree_rules(rows: list[tuple[dict, str]], attributes: list[str], path: tuple[Condition, ...]) -> list[Rule]:
    labels = [label for _, label in rows]
    leaf_label, purity = _majority(labels)
    if purity == 1.0 or not attributes:
        return [Rule(leaf_label, purity, path)]
    # identical attribute vectors cannot be split further
    signatures = {tuple(row.get(a) for a in attributes) for row, _ in rows}
    if len(signatures) == 1:
        return [Rule(leaf_label, purity, path)]
    base = _entropy(labels)
    n = len(rows)
    best_attr, best_gain = None, -math.inf
    for attr in sorted(attributes):
        parts: dict[Any, list[str]] = {}
        for row, label in rows:
            parts.setdefault(row.get(attr), []).append(label)
        remainder = math.fsum(len(p) / n * _entropy(p) for p in parts.values())
        gain = round(base - remainder, _GAIN_DIGITS)
        if gain > best_gain:
            best_attr, best_gain = attr, gain
    rest = [a for a in attributes if a != best_attr]
    values = sorted({row.get(best_attr) for row, _ in rows}, key=lambda v: (v is not None, json.dumps(v, sort_keys=True)))
    rules: list[Rule] = []
    for v in values:
        subset = [(row, label) for row, label in rows if row.get(best_attr) == v]
        rules.extend(_tree_rules(subset, rest, path + (Condition(best_attr, "eq", v),)))
    return rules


def train(labeled: Iterable[tuple[ContextSnapshot | Mapping[str, Any], str]]) -> Classifier:
    """Fit an information-gain decision tree and flatten it into rules.

    Gain ties go to the alphabetically first attribute. Leaves predict the
    majority label (ties to the lexicographically smallest) with
    confidence equal to the leaf purity.
    """
    rows = []
    for sample, label in labeled:
        values = sample.values() if isinstance(sample, ContextSnapshot) else dict(sample)
        rows.append((values, label))
    if not rows:
        raise EmptyTrainingSet("no labeled examples")
    attributes = sorted({k for values, _ in rows for k in values})
    return Classifier(tuple(_tree_rules(rows, attributes, ())))


def load_training_file(path: str | Path) -> list[tuple[dict, str]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [(item["entries"], item["label"]) for item in data]


# -- context base -----------------------------------------------------------


class ContextBase:
    """Append-only store of accepted high-level contexts."""

    def __init__(self):
        self._entries: list[HighLevelContext] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(list(self._entries))

    @property
    def current(self) -> HighLevelContext | None:
        return self._entries[-1] if self._entries else None

    def append(self, hlc: HighLevelContext) -> None:
        self._entries.append(hlc)


def commit_hlc(cb: ContextBase, hlc: HighLevelContext, accepted: bool) -> str:
    if accepted:
        cb.append(hlc)
        return "stored"
    log.info("discarded high-level context %s (confidence %.3f)", hlc.label, hlc.confidence)
    return "discarded"
