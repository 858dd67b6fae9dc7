"""Cryptographic primitives behind every binding, signature and channel.

A single suite is fixed: SHA-256, Ed25519, X25519, ChaCha20-Poly1305 and
HKDF-SHA256.  Its id travels in every wire structure so a peer running a
different suite is rejected instead of silently misparsed.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass, field

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
from cryptography.hazmat.primitives.kdf.hkdf import HKDF, HKDFExpand

from .errors import DecryptFailure

DIGEST_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
AEAD_KEY_SIZE = 32
AEAD_NONCE_SIZE = 12


@dataclass(frozen=True)
class CipherSuite:
    id: str
    hash: str
    signature: str
    key_agreement: str
    aead: str


DEFAULT_SUITE = CipherSuite(
    id="sras-1:sha256:ed25519:x25519:chacha20poly1305",
    hash="sha256",
    signature="ed25519",
    key_agreement="x25519",
    aead="chacha20poly1305",
)
SUITE_ID = DEFAULT_SUITE.id


class Digest32(bytes):
    """A 32-byte hash value.  Compares equal to the plain bytes it wraps."""

    def __new__(cls, value: bytes = b"\x00" * DIGEST_SIZE):
        value = bytes(value)
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def __repr__(self) -> str:
        return f"Digest32({self.hex()})"


def digest(data: bytes) -> Digest32:
    return Digest32(hashlib.sha256(data).digest())


@dataclass(frozen=True)
class SigningKeyPair:
    """Ed25519 key pair.  Only the public half is exposed as bytes."""

    public: bytes
    _private: Ed25519PrivateKey = field(repr=False, compare=False)

    def sign(self, msg: bytes) -> bytes:
        return self._private.sign(msg)

    def __reduce__(self):
        raise TypeError("SigningKeyPair is not serializable")


def generate_keypair(seed: bytes | None = None) -> SigningKeyPair:
    """Fresh key pair; a seed makes derivation deterministic (tests only)."""
    if seed is None:
        private = Ed25519PrivateKey.generate()
    else:
        private = Ed25519PrivateKey.from_private_bytes(
            hashlib.sha256(b"sras-keygen\x00" + bytes(seed)).digest()
        )
    public = private.public_key().public_bytes_raw()
    return SigningKeyPair(public=public, _private=private)


def sign(key: SigningKeyPair, msg: bytes) -> bytes:
    return key.sign(msg)


def verify(public_key: bytes, msg: bytes, sig: bytes) -> bool:
    if len(public_key) != PUBLIC_KEY_SIZE or len(sig) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(sig), bytes(msg))
    except (InvalidSignature, ValueError):
        return False
    return True


# -- key agreement ----------------------------------------------------------


@dataclass(frozen=True)
class EphemeralKey:
    public: bytes
    _private: X25519PrivateKey = field(repr=False, compare=False)

    def exchange(self, peer_public: bytes) -> bytes:
        try:
            return self._private.exchange(X25519PublicKey.from_public_bytes(bytes(peer_public)))
        except ValueError as exc:
            raise DecryptFailure(f"bad key share: {exc}") from exc

    def __reduce__(self):
        raise TypeError("EphemeralKey is not serializable")


def generate_ephemeral() -> EphemeralKey:
    private = X25519PrivateKey.generate()
    return EphemeralKey(public=private.public_key().public_bytes_raw(), _private=private)


# -- key derivation and MACs ------------------------------------------------


def hkdf_extract(salt: bytes, ikm: bytes) -> bytes:
    return hmac.new(salt or b"\x00" * DIGEST_SIZE, ikm, hashlib.sha256).digest()


def hkdf_expand(prk: bytes, label: str, context: bytes, length: int = 32) -> bytes:
    info = b"sras " + label.encode() + b"\x00" + context
    return HKDFExpand(algorithm=hashes.SHA256(), length=length, info=info).derive(prk)


def hkdf(ikm: bytes, salt: bytes, label: str, length: int = 32) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=length, salt=salt, info=b"sras " + label.encode()
    ).derive(ikm)


def mac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def mac_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)


# -- AEAD -------------------------------------------------------------------


def seal(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def open_sealed(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag as exc:
        raise DecryptFailure("authentication tag mismatch") from exc


def random_bytes(n: int) -> bytes:
    return os.urandom(n)
