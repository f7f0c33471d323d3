"""Device trust management backed by a hash-chained ledger.

The ledger is single-node and in-process. Every append goes through a
contract rule keyed on the entry kind; the registry, ownership and token
state can all be rebuilt by replaying entries in order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from . import crypto
from .encoding import b64d, b64e, canonical_json
from .errors import ContractViolation, DuplicateDevice, UnknownDevice

log = logging.getLogger(__name__)

ZERO_HASH = bytes(32)
INITIAL_REPUTATION = 0.5
DEFAULT_ALPHA = 0.1
DEFAULT_CHECKPOINT_EVERY = 100

ENTRY_KINDS = ("register", "ownership_transfer", "token_grant", "token_revoke", "reputation_checkpoint")


@dataclass(frozen=True)
class LedgerBlock:
    index: int
    prev_hash: bytes
    timestamp: int
    entry: dict
    hash: bytes

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "prev_hash": b64e(self.prev_hash),
            "timestamp": self.timestamp,
            "entry": self.entry,
            "hash": b64e(self.hash),
        }

    @classmethod
    def from_json(cls, data: dict) -> "LedgerBlock":
        return cls(
            index=data["index"],
            prev_hash=b64d(data["prev_hash"]),
            timestamp=data["timestamp"],
            entry=data["entry"],
            hash=b64d(data["hash"]),
        )


def block_digest(index: int, prev_hash: bytes, timestamp: int, entry: dict) -> bytes:
    h = hashlib.sha256()
    h.update(index.to_bytes(8, "big", signed=True))
    h.update(prev_hash)
    h.update(timestamp.to_bytes(8, "big", signed=True))
    h.update(canonical_json(entry))
    return h.digest()


def verify_blocks(blocks: Iterable[LedgerBlock]) -> bool:
    """True iff every stored hash and every back-link recomputes."""
    prev = ZERO_HASH
    for position, block in enumerate(blocks):
        try:
            if block.index != position or block.prev_hash != prev:
                return False
            if block.hash != block_digest(block.index, block.prev_hash, block.timestamp, block.entry):
                return False
        except (TypeError, ValueError, OverflowError, AttributeError):
            return False
        prev = block.hash
    return True


def transfer_message(device_id: str, current_owner: str, new_owner: str, nonce: int) -> bytes:
    """Bytes the current owner signs to hand a device over."""
    return canonical_json(
        {
            "op": "ownership_transfer",
            "device_id": device_id,
            "from": current_owner,
            "to": new_owner,
            "nonce": nonce,
        }
    )


@dataclass
class DeviceRecord:
    device_id: str
    public_key: bytes
    owner: str
    reputation: float = INITIAL_REPUTATION
    last_sequence: int = -1
    agreement_key: bytes | None = None
    transfers: int = 0


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok


ContractRule = Callable[["TrustLedger", dict], str | None]


def _rule_register(trust: "TrustLedger", entry: dict) -> str | None:
    if entry.get("role") == "owner":
        if entry["subject"] in trust.owners:
            return f"owner {entry['subject']!r} already registered"
        return None
    if entry["subject"] in trust.devices:
        return f"device {entry['subject']!r} already registered"
    return None


def _rule_transfer(trust: "TrustLedger", entry: dict) -> str | None:
    record = trust.devices.get(entry["device_id"])
    if record is None:
        return "unknown device"
    if entry["from"] != record.owner:
        return "transfer not issued by the current owner"
    owner_key = trust.owners.get(record.owner)
    if owner_key is None:
        return f"owner {record.owner!r} has no registered key"
    msg = transfer_message(record.device_id, record.owner, entry["to"], record.transfers)
    if not crypto.verify(owner_key, b64d(entry["signature"]), msg):
        return "signature does not verify against the current owner key"
    return None


def _rule_token_grant(trust: "TrustLedger", entry: dict) -> str | None:
    if entry["token_id"] in trust.token_entries:
        return f"token {entry['token_id']!r} already granted"
    return None


def _rule_token_revoke(trust: "TrustLedger", entry: dict) -> str | None:
    grant = trust.token_entries.get(entry["token_id"])
    if grant is None:
        return "unknown token"
    if entry["token_id"] in trust.revoked_tokens:
        return "token already revoked"
    return None


def _rule_checkpoint(trust: "TrustLedger", entry: dict) -> str | None:
    values = entry.get("reputations", {})
    if any(not 0.0 <= v <= 1.0 for v in values.values()):
        return "reputation outside [0, 1]"
    return None


CONTRACT_RULES: dict[str, ContractRule] = {
    "register": _rule_register,
    "ownership_transfer": _rule_transfer,
    "token_grant": _rule_token_grant,
    "token_revoke": _rule_token_revoke,
    "reputation_checkpoint": _rule_checkpoint,
}


class TrustLedger:
    """Device registry, reputation store and the chain that records them."""

    def __init__(
        self,
        alpha: float = DEFAULT_ALPHA,
        checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY,
        genesis_timestamp: int = 0,
    ):
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        self.alpha = alpha
        self.checkpoint_every = checkpoint_every
        self.devices: dict[str, DeviceRecord] = {}
        self.owners: dict[str, bytes] = {}
        self.token_entries: dict[str, dict] = {}
        self.revoked_tokens: set[str] = set()
        self._updates_since_checkpoint = 0
        self._lock = threading.RLock()
        self._listeners: list[Callable[[LedgerBlock], None]] = []
        genesis_entry = {"kind": "genesis"}
        self.blocks: list[LedgerBlock] = [
            LedgerBlock(
                0,
                ZERO_HASH,
                genesis_timestamp,
                genesis_entry,
                block_digest(0, ZERO_HASH, genesis_timestamp, genesis_entry),
            )
        ]

    def __len__(self) -> int:
        return len(self.blocks)

    def subscribe(self, listener: Callable[[LedgerBlock], None]) -> None:
        self._listeners.append(listener)

    # -- chain --------------------------------------------------------

    def append(self, entry: dict, timestamp: int = 0) -> LedgerBlock:
        kind = entry.get("kind")
        rule = CONTRACT_RULES.get(kind)
        if rule is None:
            raise ContractViolation(f"no contract rule for entry kind {kind!r}")
        with self._lock:
            reason = rule(self, entry)
            if reason is not None:
                raise ContractViolation(f"{kind}: {reason}")
            # round-trip through JSON so the stored entry is exactly what gets hashed
            entry = json.loads(canonical_json(entry))
            prev = self.blocks[-1]
            index = prev.index + 1
            block = LedgerBlock(
                index, prev.hash, timestamp, entry, block_digest(index, prev.hash, timestamp, entry)
            )
            self.blocks.append(block)
            self._apply(entry)
        for listener in self._listeners:
            listener(block)
        return block

    def _apply(self, entry: dict) -> None:
        kind = entry["kind"]
        if kind == "register":
            if entry["role"] == "owner":
                self.owners[entry["subject"]] = b64d(entry["public_key"])
            else:
                agreement = entry.get("agreement_key")
                self.devices[entry["subject"]] = DeviceRecord(
                    device_id=entry["subject"],
                    public_key=b64d(entry["public_key"]),
                    owner=entry["owner"],
                    agreement_key=b64d(agreement) if agreement else None,
                )
        elif kind == "ownership_transfer":
            record = self.devices[entry["device_id"]]
            record.owner = entry["to"]
            record.transfers += 1
        elif kind == "token_grant":
            self.token_entries[entry["token_id"]] = entry
        elif kind == "token_revoke":
            self.revoked_tokens.add(entry["token_id"])

    def verify_chain(self) -> bool:
        with self._lock:
            return verify_blocks(list(self.blocks))

    def export_jsonl(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    def to_jsonl(self) -> str:
        return "".join(canonical_json(b.to_json()).decode("utf-8") + "\n" for b in self.blocks)

    # -- registry -----------------------------------------------------

    def register_owner(self, user_id: str, public_key: bytes, at: int = 0) -> None:
        self.append(
            {"kind": "register", "role": "owner", "subject": user_id, "public_key": b64e(public_key)},
            at,
        )

    def register_device(
        self,
        owner: str,
        public_key: bytes,
        device_id: str | None = None,
        agreement_key: bytes | None = None,
        at: int = 0,
    ) -> DeviceRecord:
        if device_id is None:
            device_id = "dev-" + hashlib.sha256(public_key).hexdigest()[:12]
        if device_id in self.devices:
            raise DuplicateDevice(device_id)
        entry: dict[str, Any] = {
            "kind": "register",
            "role": "device",
            "subject": device_id,
            "owner": owner,
            "public_key": b64e(public_key),
            "reputation": INITIAL_REPUTATION,
        }
        if agreement_key is not None:
            entry["agreement_key"] = b64e(agreement_key)
        self.append(entry, at)
        return self.devices[device_id]

    def device(self, device_id: str) -> DeviceRecord:
        try:
            return self.devices[device_id]
        except KeyError:
            raise UnknownDevice(device_id) from None

    def reputation(self, device_id: str) -> float:
        return self.device(device_id).reputation

    def check_report(self, report) -> VerifyResult:
        """Signature and sequence check without consuming the sequence number."""
        record = self.devices.get(report.device_id)
        if record is None:
            return VerifyResult(False, "UnknownDevice")
        if not crypto.verify(record.public_key, report.signature, report.signed_bytes()):
            return VerifyResult(False, "BadSignature")
        if report.sequence <= record.last_sequence:
            return VerifyResult(False, "Replay")
        return VerifyResult(True)

    def verify_report(self, report) -> VerifyResult:
        with self._lock:
            result = self.check_report(report)
            if result.ok:
                self.devices[report.device_id].last_sequence = report.sequence
            return result

    def commit_sequence(self, device_id: str, sequence: int) -> None:
        with self._lock:
            record = self.device(device_id)
            record.last_sequence = max(record.last_sequence, sequence)

    def update_reputation(self, device_id: str, qoc_mean: float, at: int = 0) -> float:
        if not 0.0 <= qoc_mean <= 1.0:
            raise ValueError("qoc_mean must be in [0, 1]")
        with self._lock:
            record = self.device(device_id)
            updated = (1.0 - self.alpha) * record.reputation + self.alpha * qoc_mean
            record.reputation = min(1.0, max(0.0, updated))
            self._updates_since_checkpoint += 1
            if self.checkpoint_every and self._updates_since_checkpoint >= self.checkpoint_every:
                self._updates_since_checkpoint = 0
                self.append(
                    {
                        "kind": "reputation_checkpoint",
                        "reputations": {d: r.reputation for d, r in sorted(self.devices.items())},
                    },
                    at,
                )
            return record.reputation

    def transfer_ownership(self, device_id: str, new_owner: str, signature: bytes, at: int = 0) -> DeviceRecord:
        record = self.device(device_id)
        self.append(
            {
                "kind": "ownership_transfer",
                "device_id": device_id,
                "from": record.owner,
                "to": new_owner,
                "signature": b64e(signature),
            },
            at,
        )
        return record

    def transfer_nonce(self, device_id: str) -> int:
        return self.device(device_id).transfers


def load_jsonl(path: str | Path) -> list[LedgerBlock]:
    blocks = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            blocks.append(LedgerBlock.from_json(json.loads(line)))
    return blocks


def replay_token_state(blocks: Iterable[LedgerBlock]) -> dict[str, str]:
    """Token status (``active``/``revoked``) rebuilt from grant/revoke entries."""
    state: dict[str, str] = {}
    for block in blocks:
        kind = block.entry.get("kind")
        if kind == "token_grant":
            state[block.entry["token_id"]] = "active"
        elif kind == "token_revoke":
            state[block.entry["token_id"]] = "revoked"
    return state
