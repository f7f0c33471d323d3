"""Quality of context: scoring, conflict detection and resolution, validation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .ingestion import LowLevelContext

DEFAULT_CONFLICT_WINDOW_MS = 10_000
DEFAULT_THRESHOLD = 0.5


class ConflictPolicy(str, Enum):
    UP_TO_DATENESS = "up_to_dateness"
    HIGHEST_RELIABILITY = "highest_reliability"
    WEIGHTED_VOTE = "weighted_vote"


@dataclass(frozen=True)
class QoCVector:
    timeliness: float
    reliability: float
    completeness: float
    importance: float

    def __post_init__(self):
        for name in ("timeliness", "reliability", "completeness", "importance"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def mean(self) -> float:
        return math.fsum((self.timeliness, self.reliability, self.completeness, self.importance)) / 4

    def as_dict(self) -> dict:
        return {
            "timeliness": self.timeliness,
            "reliability": self.reliability,
            "completeness": self.completeness,
            "importance": self.importance,
        }


@dataclass(frozen=True)
class KeyConfig:
    key: str
    lifetime_ms: int
    importance: float = 1.0
    conflict_policy: ConflictPolicy = ConflictPolicy.UP_TO_DATENESS
    conflict_window_ms: int = DEFAULT_CONFLICT_WINDOW_MS

    def __post_init__(self):
        if self.lifetime_ms <= 0:
            raise ValueError(f"{self.key}: lifetime_ms must be positive")
        if not 0.0 <= self.importance <= 1.0:
            raise ValueError(f"{self.key}: importance outside [0, 1]")
        object.__setattr__(self, "conflict_policy", ConflictPolicy(self.conflict_policy))

    @classmethod
    def from_json(cls, data: dict) -> "KeyConfig":
        return cls(
            key=data["key"],
            lifetime_ms=int(data["lifetime_ms"]),
            importance=float(data.get("importance", 1.0)),
            conflict_policy=ConflictPolicy(data.get("conflict_policy", "up_to_dateness")),
            conflict_window_ms=int(data.get("conflict_window_ms", DEFAULT_CONFLICT_WINDOW_MS)),
        )


def load_key_configs(source: str | Path | Iterable[dict]) -> dict[str, KeyConfig]:
    if isinstance(source, (str, Path)):
        source = json.loads(Path(source).read_text(encoding="utf-8"))
    configs = [KeyConfig.from_json(d) for d in source]
    return {c.key: c for c in configs}


def timeliness(age_ms: float, lifetime_ms: float) -> float:
    return max(0.0, 1.0 - max(age_ms, 0) / lifetime_ms)


def score(llc: LowLevelContext, now: int, key_config: KeyConfig, source_reputation: float) -> QoCVector:
    return QoCVector(
        timeliness=timeliness(now - llc.observed_at, key_config.lifetime_ms),
        reliability=source_reputation,
        completeness=1.0,
        importance=key_config.importance,
    )


@dataclass(frozen=True)
class Conflict:
    records: tuple[LowLevelContext, ...]

    def __len__(self) -> int:
        return len(self.records)


def _value_key(value) -> str:
    return json.dumps(value, sort_keys=True)


def _rank(record: LowLevelContext) -> tuple:
    # deterministic order: newest first, then source, value, unit, then quality
    q = record.qoc
    quality = (-q.reliability, -q.timeliness, -q.completeness, -q.importance) if q is not None else (1.0,) * 4
    return (-record.observed_at, record.source, _value_key(record.value), record.unit or "") + quality


def detect_conflicts(records: Sequence[LowLevelContext], window_ms: int = DEFAULT_CONFLICT_WINDOW_MS) -> list[Conflict]:
    """Group records that disagree within ``window_ms`` of each other.

    Two records conflict when their timestamps differ by at most the
    window and their values differ; groups are the connected components
    of that relation.
    """
    keys = {r.key for r in records}
    if len(keys) > 1:
        raise ValueError(f"records span several keys: {sorted(keys)}")
    ordered = sorted(records, key=lambda r: (r.observed_at, r.source, _value_key(r.value)))
    parent = list(range(len(ordered)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    in_conflict = set()
    for i, a in enumerate(ordered):
        for j in range(i + 1, len(ordered)):
            b = ordered[j]
            if b.observed_at - a.observed_at > window_ms:
                break
            if a.value != b.value:
                in_conflict.update((i, j))
                parent[find(i)] = find(j)
    groups: dict[int, list[LowLevelContext]] = {}
    for i in sorted(in_conflict):
        groups.setdefault(find(i), []).append(ordered[i])
    return [Conflict(tuple(g)) for g in sorted(groups.values(), key=lambda g: (g[0].observed_at, g[0].source))]


def _reliability(record: LowLevelContext) -> float:
    return record.qoc.reliability if record.qoc is not None else 0.0


def resolve(conflict: Conflict | Sequence[LowLevelContext], policy: ConflictPolicy | str) -> LowLevelContext:
    records = conflict.records if isinstance(conflict, Conflict) else tuple(conflict)
    if not records:
        raise ValueError("cannot resolve an empty conflict")
    policy = ConflictPolicy(policy)
    if policy is ConflictPolicy.UP_TO_DATENESS:
        return min(records, key=_rank)
    if policy is ConflictPolicy.HIGHEST_RELIABILITY:
        return min(records, key=lambda r: (-_reliability(r),) + _rank(r))
    # weighted vote: fsum is exactly rounded, so totals do not depend on input order
    support: dict[str, list[LowLevelContext]] = {}
    for r in records:
        support.setdefault(_value_key(r.value), []).append(r)
    best = {v: min(rs, key=lambda r: (-_reliability(r),) + _rank(r)) for v, rs in support.items()}
    totals = {v: math.fsum(_reliability(r) for r in rs) for v, rs in support.items()}
    winner = min(totals, key=lambda v: (-totals[v], -_reliability(best[v])) + _rank(best[v]))
    return best[winner]


def validate_hlc(hlc, qoc_vectors: Sequence[QoCVector], threshold: float = DEFAULT_THRESHOLD) -> bool:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    if not qoc_vectors:
        return threshold <= 0.0
    quality = math.fsum(v.mean() for v in qoc_vectors) / len(qoc_vectors)
    return hlc.confidence * quality >= threshold
