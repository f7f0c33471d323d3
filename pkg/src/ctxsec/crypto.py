"""Thin wrapper over the primitives the service relies on.

Signing is Ed25519, key agreement is X25519 followed by HKDF-SHA256, and
payload sealing is ChaCha20-Poly1305. Callers only see the three
contracts (sign/verify, agree/derive, seal/open) so the suite can be
swapped without touching the rest of the package.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

TAG_SIZE = 16
NONCE_SIZE = 12
KEY_SIZE = 32


@dataclass(frozen=True)
class KeyPair:
    """Signing and key-agreement keys belonging to one principal."""

    signing: Ed25519PrivateKey
    agreement: X25519PrivateKey

    @property
    def public_key(self) -> bytes:
        return self.signing.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    @property
    def agreement_public_key(self) -> bytes:
        return self.agreement.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, data: bytes) -> bytes:
        return self.signing.sign(data)


def derive_keypair(seed: int | str, name: str) -> KeyPair:
    """Deterministic key pair for simulated principals.

    Only meant for scenario replay; real devices bring their own keys.
    """
    material = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    sign_seed = hashlib.sha256(b"sign" + material).digest()
    agree_seed = hashlib.sha256(b"agree" + material).digest()
    return KeyPair(
        Ed25519PrivateKey.from_private_bytes(sign_seed),
        X25519PrivateKey.from_private_bytes(agree_seed),
    )


def verify(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


def agree(private: X25519PrivateKey, peer_public: bytes) -> bytes:
    return private.exchange(X25519PublicKey.from_public_bytes(peer_public))


def derive_key(shared: bytes, salt: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=salt, info=info).derive(shared)


def seal(key: bytes, nonce: bytes, plaintext: bytes, associated: bytes) -> tuple[bytes, bytes]:
    """Return ``(ciphertext, tag)``."""
    out = ChaCha20Poly1305(key).encrypt(nonce, plaintext, associated)
    return out[:-TAG_SIZE], out[-TAG_SIZE:]


def open_sealed(key: bytes, nonce: bytes, ciphertext: bytes, tag: bytes, associated: bytes) -> bytes | None:
    """Decrypt and authenticate; ``None`` when the tag does not verify."""
    if len(nonce) != NONCE_SIZE or len(tag) != TAG_SIZE:
        return None
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ciphertext + tag, associated)
    except InvalidTag:
        return None
