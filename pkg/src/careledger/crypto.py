"""Cryptographic primitives: content hashing, signatures, AEAD, key wrapping.

Concrete choices behind the module interface:

* content hashing   — SHA-256, lowercase 64-char hex canonical form
* signatures        — Ed25519 (EUF-CMA, deterministic, 64-byte signatures)
* file sealing      — AES-256-GCM, 96-bit random nonce prepended, 16-byte tag
* key wrapping      — sealed box: ephemeral X25519 + HKDF-SHA256 + AES-256-GCM

File keys are generated per file, never per user, so revoking one file never
exposes another.  All operations are pure apart from OS entropy reads and are
safe for unrestricted concurrent use.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import CryptoDecodeError, DecryptionError

NONCE_LEN = 12
TAG_LEN = 16
KEY_LEN = 32
SIG_LEN = 64

_WRAP_INFO = b"careledger file-key wrap v1"


def content_hash(data: bytes) -> bytes:
    """SHA-256 digest of ``data`` (32 bytes)."""
    return hashlib.sha256(data).digest()


def content_hash_hex(data: bytes) -> str:
    return content_hash(data).hex()


def _decode_hex(value: str, length: int, what: str) -> bytes:
    try:
        raw = bytes.fromhex(value)
    except (ValueError, TypeError) as exc:
        raise CryptoDecodeError(f"{what} is not valid hex") from exc
    if len(raw) != length:
        raise CryptoDecodeError(f"{what} must be {length} bytes, got {len(raw)}")
    return raw


@dataclass(frozen=True)
class KeyPair:
    """Signing (Ed25519) plus key-agreement (X25519) key material for one user."""

    user_id: str
    sign_public: bytes
    sign_private: bytes
    enc_public: bytes
    enc_private: bytes

    def public_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "sign_public": self.sign_public.hex(),
            "enc_public": self.enc_public.hex(),
        }

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "sign_public": self.sign_public.hex(),
            "sign_private": self.sign_private.hex(),
            "enc_public": self.enc_public.hex(),
            "enc_private": self.enc_private.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyPair":
        return cls(
            user_id=d["user_id"],
            sign_public=_decode_hex(d["sign_public"], 32, "sign_public"),
            sign_private=_decode_hex(d["sign_private"], 32, "sign_private"),
            enc_public=_decode_hex(d["enc_public"], 32, "enc_public"),
            enc_private=_decode_hex(d["enc_private"], 32, "enc_private"),
        )


def generate_keypair(user_id: str) -> KeyPair:
    """Generate fresh Ed25519 + X25519 keys for ``user_id`` from OS entropy."""
    if not user_id:
        raise ValueError("user_id must be non-empty")
    sk = Ed25519PrivateKey.generate()
    ek = X25519PrivateKey.generate()
    return KeyPair(
        user_id=user_id,
        sign_public=sk.public_key().public_bytes_raw(),
        sign_private=sk.private_bytes_raw(),
        enc_public=ek.public_key().public_bytes_raw(),
        enc_private=ek.private_bytes_raw(),
    )


def new_file_key() -> bytes:
    """Fresh 32-byte symmetric key for sealing exactly one file."""
    return os.urandom(KEY_LEN)


def sign(sign_private: bytes, message: bytes) -> bytes:
    if len(sign_private) != 32:
        raise CryptoDecodeError("signing key must be 32 bytes")
    return Ed25519PrivateKey.from_private_bytes(sign_private).sign(message)


def verify(sign_public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid Ed25519 signature over ``message``.

    Malformed encodings raise CryptoDecodeError rather than returning False,
    so a parsing problem is never mistaken for a bad signature.
    """
    if len(sign_public) != 32:
        raise CryptoDecodeError("verification key must be 32 bytes")
    if len(signature) != SIG_LEN:
        raise CryptoDecodeError(f"signature must be {SIG_LEN} bytes")
    try:
        Ed25519PublicKey.from_public_bytes(sign_public).verify(signature, message)
        return True
    except InvalidSignature:
        return False


@dataclass(frozen=True)
class SealedBlob:
    """AES-256-GCM output, serialized as nonce || ciphertext || tag."""

    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBlob":
        if len(raw) < NONCE_LEN + TAG_LEN:
            raise CryptoDecodeError("sealed blob shorter than nonce + tag")
        return cls(
            nonce=raw[:NONCE_LEN],
            ciphertext=raw[NONCE_LEN:-TAG_LEN],
            tag=raw[-TAG_LEN:],
        )


def aead_seal(file_key: bytes, plaintext: bytes, aad: bytes) -> SealedBlob:
    """Encrypt ``plaintext`` under ``file_key`` binding ``aad``; fresh nonce."""
    if len(file_key) != KEY_LEN:
        raise CryptoDecodeError(f"file key must be {KEY_LEN} bytes")
    nonce = os.urandom(NONCE_LEN)
    out = AESGCM(file_key).encrypt(nonce, plaintext, aad)
    return SealedBlob(nonce=nonce, ciphertext=out[:-TAG_LEN], tag=out[-TAG_LEN:])


def aead_open(file_key: bytes, blob: SealedBlob, aad: bytes) -> bytes:
    """Verify the tag and return the plaintext.

    Raises DecryptionError on any failure; wrong key, wrong aad, and
    tampering are indistinguishable to the caller.
    """
    if len(file_key) != KEY_LEN:
        raise CryptoDecodeError(f"file key must be {KEY_LEN} bytes")
    try:
        return AESGCM(file_key).decrypt(
            blob.nonce, blob.ciphertext + blob.tag, aad
        )
    except Exception as exc:
        raise DecryptionError("authenticated decryption failed") from exc


@dataclass(frozen=True)
class WrappedKey:
    """A 32-byte file key wrapped for one recipient's enc_public."""

    recipient_id: str
    wrapped_bytes: bytes

    def to_dict(self) -> dict:
        return {
            "recipient_id": self.recipient_id,
            "wrapped_bytes": self.wrapped_bytes.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WrappedKey":
        if set(d) != {"recipient_id", "wrapped_bytes"}:
            raise CryptoDecodeError("wrapped key must have exactly recipient_id and wrapped_bytes")
        value = d["wrapped_bytes"]
        if not isinstance(value, str) or value != value.lower():
            raise CryptoDecodeError("wrapped_bytes must be lowercase hex")
        try:
            raw = bytes.fromhex(value)
        except (ValueError, TypeError) as exc:
            raise CryptoDecodeError("wrapped_bytes is not valid hex") from exc
        return cls(recipient_id=d["recipient_id"], wrapped_bytes=raw)


def _wrap_kek(shared: bytes, eph_public: bytes, recipient_public: bytes) -> bytes:
    return HKDF(
        algorithm=SHA256(),
        length=KEY_LEN,
        salt=eph_public + recipient_public,
        info=_WRAP_INFO,
    ).derive(shared)


def wrap_file_key(enc_public: bytes, file_key: bytes, recipient_id: str) -> WrappedKey:
    """Seal ``file_key`` to ``enc_public``: ephemeral X25519 + AEAD.

    Wire layout: ephemeral_public(32) || nonce(12) || ciphertext+tag(48).
    Each call uses fresh ephemeral randomness, so two wraps of the same key
    differ yet both unwrap.
    """
    if len(file_key) != KEY_LEN:
        raise CryptoDecodeError(f"file key must be {KEY_LEN} bytes")
    if len(enc_public) != 32:
        raise CryptoDecodeError("enc_public must be 32 bytes")
    eph = X25519PrivateKey.generate()
    eph_public = eph.public_key().public_bytes_raw()
    shared = eph.exchange(X25519PublicKey.from_public_bytes(enc_public))
    kek = _wrap_kek(shared, eph_public, enc_public)
    nonce = os.urandom(NONCE_LEN)
    sealed = AESGCM(kek).encrypt(nonce, file_key, recipient_id.encode("utf-8"))
    return WrappedKey(
        recipient_id=recipient_id, wrapped_bytes=eph_public + nonce + sealed
    )


def unwrap_file_key(enc_private: bytes, wrapped: WrappedKey) -> bytes:
    """Recover the 32-byte file key; raises DecryptionError with wrong keys."""
    if len(enc_private) != 32:
        raise CryptoDecodeError("enc_private must be 32 bytes")
    raw = wrapped.wrapped_bytes
    if len(raw) < 32 + NONCE_LEN + TAG_LEN:
        raise CryptoDecodeError("wrapped key blob too short")
    eph_public, nonce, sealed = raw[:32], raw[32 : 32 + NONCE_LEN], raw[32 + NONCE_LEN :]
    priv = X25519PrivateKey.from_private_bytes(enc_private)
    shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_public))
    my_public = priv.public_key().public_bytes_raw()
    kek = _wrap_kek(shared, eph_public, my_public)
    try:
        return AESGCM(kek).decrypt(
            nonce, sealed, wrapped.recipient_id.encode("utf-8")
        )
    except Exception as exc:
        raise DecryptionError("file key unwrap failed") from exc
