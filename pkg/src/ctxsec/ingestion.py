"""Context acquisition: verify, normalize and store raw device reports."""

from __future__ import annotations

import bisect
import json
import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .encoding import b64d, b64e, canonical_json
from .errors import (
    BadSignature,
    ClockSkewExceeded,
    InvalidWindow,
    ReplayedSequence,
    UnknownDevice,
    UnnormalizableValue,
)

log = logging.getLogger(__name__)

DEFAULT_CLOCK_SKEW_MS = 5_000
UNMAPPED_LOCATION = "outdoor_unmapped"


@dataclass(frozen=True)
class ContextReport:
    device_id: str
    attribute: str
    raw_value: Any
    observed_at: int
    sequence: int
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        raw = list(self.raw_value) if isinstance(self.raw_value, tuple) else self.raw_value
        return canonical_json(
            {
                "device_id": self.device_id,
                "attribute": self.attribute,
                "raw_value": raw,
                "observed_at": self.observed_at,
                "sequence": self.sequence,
            }
        )

    def to_json(self) -> dict:
        raw = list(self.raw_value) if isinstance(self.raw_value, tuple) else self.raw_value
        return {
            "device_id": self.device_id,
            "attribute": self.attribute,
            "raw_value": raw,
            "observed_at": self.observed_at,
            "sequence": self.sequence,
            "signature": b64e(self.signature),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ContextReport":
        missing = {"device_id", "attribute", "raw_value", "observed_at", "sequence", "signature"} - set(data)
        if missing:
            raise ValueError(f"report missing fields: {sorted(missing)}")
        return cls(
            device_id=str(data["device_id"]),
            attribute=str(data["attribute"]),
            raw_value=data["raw_value"],
            observed_at=int(data["observed_at"]),
            sequence=int(data["sequence"]),
            signature=b64d(data["signature"]),
        )

    def signed_by(self, keypair) -> "ContextReport":
        return ContextReport(
            self.device_id, self.attribute, self.raw_value, self.observed_at, self.sequence,
            keypair.sign(self.signed_bytes()),
        )


@dataclass(frozen=True)
class LowLevelContext:
    key: str
    value: Any
    unit: str | None
    observed_at: int
    source: str
    qoc: Any = None  # QoCVector, attached by the qoc stage

    def summary(self) -> dict:
        return {"key": self.key, "value": self.value, "unit": self.unit,
                "observed_at": self.observed_at, "source": self.source}


# -- normalization ------------------------------------------------------


def point_in_polygon(lat: float, lon: float, polygon: Sequence[Sequence[float]]) -> bool:
    """Even-odd ray cast; points on an edge count as inside."""
    inside = False
    n = len(polygon)
    for i in range(n):
        y1, x1 = polygon[i]
        y2, x2 = polygon[(i + 1) % n]
        # on-edge check
        cross = (x2 - x1) * (lat - y1) - (y2 - y1) * (lon - x1)
        if (
            abs(cross) <= 1e-12
            and min(x1, x2) <= lon <= max(x1, x2)
            and min(y1, y2) <= lat <= max(y1, y2)
        ):
            return True
        if (y1 > lat) != (y2 > lat):
            x_at = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
            if lon < x_at:
                inside = not inside
    return inside


def _parse_hour(raw: Any) -> float:
    if isinstance(raw, str):
        hh, _, mm = raw.partition(":")
        return int(hh) + (int(mm) / 60 if mm else 0)
    return float(raw)


class NormalizationTables:
    """Per-attribute rules turning raw readings into canonical values.

    Table document shape (keyed by attribute name)::

        {"location": {"type": "geofence", "fences": [{"name", "polygon"}], "default": ...},
         "network": {"type": "ssid", "ssids": {ssid: tag}, "classes": {tag: class}},
         "motion": {"type": "threshold", "unit": "m/s", "bands": [[upper, label], ...]},
         "time_of_day": {"type": "period", "bands": [[start_h, end_h, label], ...]},
         "glucose": {"type": "numeric", "unit": "mg/dL", "range": [lo, hi]}}
    """

    TYPES = ("geofence", "ssid", "threshold", "period", "numeric")

    def __init__(self, tables: dict[str, dict]):
        for attribute, table in tables.items():
            if table.get("type") not in self.TYPES:
                raise ValueError(f"{attribute}: unknown table type {table.get('type')!r}")
        self.tables = tables

    @classmethod
    def from_file(cls, path: str | Path) -> "NormalizationTables":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def vocabulary(self, attribute: str) -> set[str] | None:
        """Canonical values for categorical keys; ``None`` for numeric ones."""
        table = self.tables.get(attribute)
        if table is None:
            return set()
        kind = table["type"]
        if kind == "geofence":
            return {f["name"] for f in table["fences"]} | {table.get("default", UNMAPPED_LOCATION)}
        if kind == "ssid":
            return set(table["classes"].values())
        if kind == "threshold":
            return {label for _, label in table["bands"]}
        if kind == "period":
            return {band[2] for band in table["bands"]}
        return None

    def unit(self, attribute: str) -> str | None:
        table = self.tables.get(attribute, {})
        return table.get("unit")

    def normalize(self, attribute: str, raw_value: Any) -> Any:
        table = self.tables.get(attribute)
        if table is None:
            raise UnnormalizableValue(f"no normalization rule for {attribute!r}")
        try:
            return getattr(self, "_norm_" + table["type"])(table, raw_value)
        except UnnormalizableValue:
            raise
        except (TypeError, ValueError, KeyError, IndexError) as exc:
            raise UnnormalizableValue(f"{attribute}: {raw_value!r} ({exc})") from None

    def _norm_geofence(self, table: dict, raw: Any) -> str:
        lat, lon = (float(c) for c in raw)
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise UnnormalizableValue(f"coordinate out of range: {raw!r}")
        for fence in table["fences"]:
            if point_in_polygon(lat, lon, fence["polygon"]):
                return fence["name"]
        return table.get("default", UNMAPPED_LOCATION)

    def _norm_ssid(self, table: dict, raw: Any) -> str:
        tag = table["ssids"].get(raw, table.get("default_tag"))
        if tag is None or tag not in table["classes"]:
            raise UnnormalizableValue(f"unknown network {raw!r}")
        return table["classes"][tag]

    def _norm_threshold(self, table: dict, raw: Any) -> str:
        v = float(raw)
        if math.isnan(v) or v < 0:
            raise UnnormalizableValue(f"bad reading {raw!r}")
        for upper, label in table["bands"]:
            if upper is None or v < upper:
                return label
        raise UnnormalizableValue(f"{raw!r} above every band")

    def _norm_period(self, table: dict, raw: Any) -> str:
        hour = _parse_hour(raw)
        for start, end, label in table["bands"]:
            if start <= hour < end:
                return label
        raise UnnormalizableValue(f"hour {raw!r} outside every period")

    def _norm_numeric(self, table: dict, raw: Any) -> float | int:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise UnnormalizableValue(f"not numeric: {raw!r}")
        lo, hi = table.get("range", [-math.inf, math.inf])
        if not lo <= raw <= hi:
            raise UnnormalizableValue(f"{raw!r} outside [{lo}, {hi}]")
        return raw


# -- context information base --------------------------------------------


class ContextInformationBase:
    """Append-only store of low-level context, indexed by key and time."""

    def __init__(self):
        self._records: list[LowLevelContext] = []
        self._index: dict[str, list[tuple[int, str, int]]] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(list(self._records))

    def append(self, record: LowLevelContext) -> None:
        with self._lock:
            pos = len(self._records)
            self._records.append(record)
            bisect.insort(self._index.setdefault(record.key, []), (record.observed_at, record.source, pos))

    def query(self, key: str, t0: int, t1: int) -> list[LowLevelContext]:
        if t0 > t1:
            raise InvalidWindow(f"[{t0}, {t1}]")
        with self._lock:
            entries = self._index.get(key, [])
            lo = bisect.bisect_left(entries, (t0,))
            hi = bisect.bisect_left(entries, (t1 + 1,))
            return [self._records[pos] for _, _, pos in entries[lo:hi]]

    def latest(self, key: str, at: int) -> LowLevelContext | None:
        with self._lock:
            entries = self._index.get(key, [])
            hi = bisect.bisect_left(entries, (at + 1,))
            return self._records[entries[hi - 1][2]] if hi else None


def query_cib(cib: ContextInformationBase, key: str, window: tuple[int, int]) -> list[LowLevelContext]:
    return cib.query(key, *window)


# -- acquisition ---------------------------------------------------------


class ContextAcquisition:
    """Serial ingestion stage in front of the CIB."""

    def __init__(self, trust, tables: NormalizationTables, cib: ContextInformationBase | None = None,
                 clock_skew_ms: int = DEFAULT_CLOCK_SKEW_MS):
        self.trust = trust
        self.tables = tables
        self.cib = cib if cib is not None else ContextInformationBase()
        self.clock_skew_ms = clock_skew_ms
        self._lock = threading.Lock()

    def normalize(self, attribute: str, raw_value: Any) -> Any:
        return self.tables.normalize(attribute, raw_value)

    def ingest_report(self, report: ContextReport, now: int) -> LowLevelContext:
        with self._lock:
            if report.device_id not in self.trust.devices:
                raise UnknownDevice(report.device_id)
            check = self.trust.check_report(report)
            if not check.ok:
                if check.reason == "BadSignature":
                    raise BadSignature(report.device_id)
                raise ReplayedSequence(f"{report.device_id} sequence {report.sequence}")
            if report.observed_at > now + self.clock_skew_ms:
                raise ClockSkewExceeded(
                    f"observed_at {report.observed_at} is more than {self.clock_skew_ms} ms ahead of {now}"
                )
            value = self.tables.normalize(report.attribute, report.raw_value)
            self.trust.commit_sequence(report.device_id, report.sequence)
            record = LowLevelContext(
                key=report.attribute,
                value=value,
                unit=self.tables.unit(report.attribute),
                observed_at=report.observed_at,
                source=report.device_id,
            )
            self.cib.append(record)
            log.debug("ingested %s=%r from %s", record.key, value, record.source)
            return record
