"""Enforcement services: authentication, authorization, communication, privacy."""

from __future__ import annotations

import fnmatch
import hashlib
import hmac
import math
import random
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from . import crypto
from .encoding import b64d, b64e, canonical_json
from .errors import (
    InvalidTransform,
    NonceReuse,
    StaleEpoch,
    TamperDetected,
    UnknownDevice,
    UnknownPeer,
    UnknownSubject,
    UnknownToken,
)
from .trust import TrustLedger

FACTOR_CLASSES = {1: ("knowledge",), 2: ("knowledge", "possession")}


# -- authentication ---------------------------------------------------------------


def _factor_digest(subject: str, factor: str, secret: str) -> bytes:
    return hashlib.sha256(f"{subject}\x00{factor}\x00{secret}".encode("utf-8")).digest()


class Authentication:
    def __init__(self):
        self._credentials: dict[str, dict[str, bytes]] = {}

    def enroll(self, subject: str, factors: Mapping[str, str]) -> None:
        self._credentials[subject] = {f: _factor_digest(subject, f, s) for f, s in factors.items()}

    def authenticate(self, subject: str, required_factors: int, presented: Mapping[str, str]) -> bool:
        if subject not in self._credentials:
            raise UnknownSubject(subject)
        if required_factors not in FACTOR_CLASSES:
            raise ValueError("required_factors must be 1 or 2")
        stored = self._credentials[subject]
        if any(f not in presented for f in FACTOR_CLASSES[required_factors]):
            return False
        results = [
            f in stored and hmac.compare_digest(stored[f], _factor_digest(subject, f, secret))
            for f, secret in sorted(presented.items())
        ]
        return all(results)


# -- authorization ------------------------------------------------------------------


@dataclass(frozen=True)
class AuthorizationToken:
    token_id: str
    subject: str
    resource: str
    operations: frozenset[str]
    context_constraint: str
    expiry: int
    status: str = "active"

    def to_json(self) -> dict:
        return {
            "token_id": self.token_id,
            "subject": self.subject,
            "resource": self.resource,
            "operations": sorted(self.operations),
            "context_constraint": self.context_constraint,
            "expiry": self.expiry,
            "status": self.status,
        }


@dataclass(frozen=True)
class Decision:
    allow: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.allow

    def __str__(self) -> str:
        return "allow" if self.allow else f"deny({self.reason})"


class Authorization:
    """Token registry whose state lives entirely in the trust ledger."""

    def __init__(self, trust: TrustLedger):
        self.trust = trust

    def _next_id(self) -> str:
        return f"tok-{len(self.trust.token_entries) + 1:04d}"

    def grant_token(
        self,
        subject: str,
        resource: str,
        operations: Iterable[str],
        constraint: str = "*",
        expiry: int = 2**62,
        token_id: str | None = None,
        at: int = 0,
    ) -> AuthorizationToken:
        token_id = token_id or self._next_id()
        self.trust.append(
            {
                "kind": "token_grant",
                "token_id": token_id,
                "subject": subject,
                "resource": resource,
                "operations": sorted(set(operations)),
                "constraint": constraint,
                "expiry": int(expiry),
            },
            at,
        )
        return self.token(token_id)

    def revoke_token(self, token_id: str, at: int = 0) -> AuthorizationToken:
        if token_id not in self.trust.token_entries:
            raise UnknownToken(token_id)
        self.trust.append({"kind": "token_revoke", "token_id": token_id}, at)
        return self.token(token_id)

    def token(self, token_id: str) -> AuthorizationToken:
        entry = self.trust.token_entries.get(token_id)
        if entry is None:
            raise UnknownToken(token_id)
        return AuthorizationToken(
            token_id=token_id,
            subject=entry["subject"],
            resource=entry["resource"],
            operations=frozenset(entry["operations"]),
            context_constraint=entry["constraint"],
            expiry=entry["expiry"],
            status="revoked" if token_id in self.trust.revoked_tokens else "active",
        )

    def check_token(
        self,
        token_id: str,
        label: str,
        now: int,
        operation: str | None = None,
        resource: str | None = None,
        subject: str | None = None,
    ) -> Decision:
        token = self.token(token_id)
        if token.status != "active":
            return Decision(False, "revoked")
        if now >= token.expiry:
            return Decision(False, "expired")
        if not fnmatch.fnmatchcase(label, token.context_constraint):
            return Decision(False, "context")
        if operation is not None and operation not in token.operations:
            return Decision(False, "operation")
        if resource is not None and resource != token.resource:
            return Decision(False, "resource")
        if subject is not None and subject != token.subject:
            return Decision(False, "subject")
        return Decision(True)


# -- communication ------------------------------------------------------------------


@dataclass(frozen=True)
class SessionKey:
    device_id: str
    epoch: int
    key: bytes
    created_at: int


@dataclass(frozen=True)
class Envelope:
    channel_id: str
    epoch: int
    nonce: bytes
    ct: bytes
    tag: bytes
    aad: bytes

    def to_json(self) -> dict:
        return {
            "channel_id": self.channel_id,
            "epoch": self.epoch,
            "nonce": b64e(self.nonce),
            "ct": b64e(self.ct),
            "tag": b64e(self.tag),
            "aad": b64e(self.aad),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Envelope":
        return cls(
            data["channel_id"], int(data["epoch"]), b64d(data["nonce"]), b64d(data["ct"]),
            b64d(data["tag"]), b64d(data["aad"]),
        )


@dataclass
class SecureChannel:
    channel_id: str
    peers: tuple[str, str]
    shared: bytes = field(repr=False)
    send_counter: int = 0
    seen_nonces: set[bytes] = field(default_factory=set, repr=False)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class Communication:
    """Session keys per device and payload-level secure channels."""

    def __init__(self, trust: TrustLedger, rng: random.Random):
        self.trust = trust
        self.rng = rng
        self._sessions: dict[str, list[SessionKey]] = {}
        self._agreement_keys: dict[str, Any] = {}
        self._channels: dict[str, SecureChannel] = {}

    def add_agreement_key(self, principal: str, private_key) -> None:
        """Private half of a principal's agreement key, held for simulated peers."""
        self._agreement_keys[principal] = private_key

    def session(self, device_id: str, at: int = 0) -> SessionKey:
        if device_id not in self.trust.devices:
            raise UnknownDevice(device_id)
        history = self._sessions.setdefault(device_id, [])
        if not history:
            history.append(SessionKey(device_id, 0, self.rng.randbytes(crypto.KEY_SIZE), at))
        return history[-1]

    def renew_session_key(self, device_id: str, at: int = 0) -> SessionKey:
        current = self.session(device_id, at)
        renewed = SessionKey(device_id, current.epoch + 1, self.rng.randbytes(crypto.KEY_SIZE), at)
        self._sessions[device_id].append(renewed)
        return renewed

    def _session_at(self, device_id: str, epoch: int) -> SessionKey:
        return self._sessions[device_id][epoch]

    def establish_channel(self, a: str, b: str, at: int = 0) -> SecureChannel:
        for peer in (a, b):
            record = self.trust.devices.get(peer)
            if record is None or record.agreement_key is None:
                raise UnknownPeer(peer)
        private_a = self._agreement_keys.get(a)
        private_b = self._agreement_keys.get(b)
        if private_a is None and private_b is None:
            raise UnknownPeer(f"no agreement key held for {a} or {b}")
        if private_a is not None:
            shared = crypto.agree(private_a, self.trust.devices[b].agreement_key)
        else:
            shared = crypto.agree(private_b, self.trust.devices[a].agreement_key)
        # the stored key for the other side must be the one registered on the ledger
        if private_a is not None and private_b is not None:
            if crypto.agree(private_b, self.trust.devices[a].agreement_key) != shared:
                raise UnknownPeer("agreement keys do not match the registered public keys")
        self.session(a, at)
        channel_id = f"ch-{len(self._channels) + 1:04d}"
        channel = SecureChannel(channel_id, (a, b), shared)
        self._channels[channel_id] = channel
        return channel

    def channel(self, channel_id: str) -> SecureChannel:
        try:
            return self._channels[channel_id]
        except KeyError:
            raise UnknownPeer(f"no channel {channel_id}") from None

    def _channel_key(self, channel: SecureChannel, epoch: int) -> bytes:
        session = self._session_at(channel.peers[0], epoch)
        info = canonical_json({"channel": channel.channel_id, "peers": list(channel.peers), "epoch": epoch})
        return crypto.derive_key(channel.shared, session.key, info)

    @staticmethod
    def _associated(channel_id: str, epoch: int, aad: bytes) -> bytes:
        return canonical_json({"channel_id": channel_id, "epoch": epoch}) + b"\x00" + aad

    def seal(self, channel: SecureChannel, payload: bytes, aad: bytes = b"") -> Envelope:
        with channel.lock:
            epoch = self.session(channel.peers[0]).epoch
            channel.send_counter += 1
            nonce = b"\x00\x00\x00\x01" + channel.send_counter.to_bytes(8, "big")
            ct, tag = crypto.seal(
                self._channel_key(channel, epoch), nonce, payload,
                self._associated(channel.channel_id, epoch, aad),
            )
            return Envelope(channel.channel_id, epoch, nonce, ct, tag, aad)

    def unseal(self, channel: SecureChannel, envelope: Envelope) -> bytes:
        with channel.lock:
            if envelope.channel_id != channel.channel_id:
                raise TamperDetected("envelope addressed to another channel")
            current = self.session(channel.peers[0]).epoch
            if not isinstance(envelope.epoch, int) or envelope.epoch < 0 or envelope.epoch > current:
                raise TamperDetected("envelope epoch out of range")
            plaintext = crypto.open_sealed(
                self._channel_key(channel, envelope.epoch),
                envelope.nonce, envelope.ct, envelope.tag,
                self._associated(channel.channel_id, envelope.epoch, envelope.aad),
            )
            if plaintext is None:
                raise TamperDetected("authentication tag mismatch")
            if envelope.epoch < current:
                raise StaleEpoch(f"sealed under epoch {envelope.epoch}, current is {current}")
            if envelope.nonce in channel.seen_nonces:
                raise NonceReuse(b64e(envelope.nonce))
            channel.seen_nonces.add(envelope.nonce)
            return plaintext


# -- privacy --------------------------------------------------------------------------


class _Suppressed:
    def __repr__(self) -> str:
        return "SUPPRESSED"


SUPPRESSED = _Suppressed()


@dataclass(frozen=True)
class ScheduledRelease:
    value: Any
    release_at: int


@dataclass(frozen=True)
class PrivacyTransform:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    KINDS = ("suppress", "generalize", "pseudonymize", "noise", "delay")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidTransform(f"unknown transform {self.kind!r}")
        p = self.params
        try:
            if self.kind == "generalize" and not float(p["width"]) > 0:
                raise InvalidTransform("bucket width must be > 0")
            if self.kind == "noise" and not float(p["bound"]) >= 0:
                raise InvalidTransform("noise bound must be >= 0")
            if self.kind == "delay" and not int(p["delay_ms"]) >= 0:
                raise InvalidTransform("delay must be >= 0")
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidTransform(f"{self.kind}: bad parameters {dict(p)!r}") from exc

    @classmethod
    def from_json(cls, data: Mapping) -> "PrivacyTransform":
        data = dict(data)
        kind = data.pop("kind", None)
        return cls(kind, data)

    def to_json(self) -> dict:
        return {"kind": self.kind, **self.params}


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def bucket(value: float, width: float) -> tuple[float, float]:
    lo = math.floor(value / width) * width
    return lo, lo + width


def apply_privacy(
    value: Any,
    transform: PrivacyTransform,
    user_key: bytes = b"",
    now: int = 0,
    rng: random.Random | None = None,
) -> Any:
    kind = transform.kind
    if kind == "suppress":
        return SUPPRESSED
    if kind == "generalize":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidTransform("generalize needs a numeric value")
        lo, hi = bucket(value, float(transform.params["width"]))
        return f"[{_fmt(lo)},{_fmt(hi)})"
    if kind == "pseudonymize":
        digest = hmac.new(user_key, canonical_json(value), hashlib.sha256).hexdigest()
        return "ps_" + digest[:32]
    if kind == "noise":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidTransform("noise needs a numeric value")
        if rng is None:
            raise InvalidTransform("noise needs the run's random generator")
        b = float(transform.params["bound"])
        return value + rng.uniform(-b, b)
    return ScheduledRelease(value, now + int(transform.params["delay_ms"]))


# -- facade ---------------------------------------------------------------------------


class Mechanisms:
    """Handle passed to the enforcer; owns the run's seeded generator."""

    def __init__(self, trust: TrustLedger, seed: int = 0):
        self.trust = trust
        self.rng = random.Random(seed)
        self.authn = Authentication()
        self.authz = Authorization(trust)
        self.comm = Communication(trust, self.rng)
        self._user_keys: dict[str, bytes] = {}

    def set_user_key(self, user_id: str, key: bytes) -> None:
        self._user_keys[user_id] = key

    def user_key(self, user_id: str) -> bytes:
        return self._user_keys.get(user_id, hashlib.sha256(f"pseudonym:{user_id}".encode()).digest())

    def apply_privacy(self, value: Any, transform: PrivacyTransform, user_id: str, now: int) -> Any:
        return apply_privacy(value, transform, self.user_key(user_id), now, self.rng)
