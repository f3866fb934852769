"""Keys, detached signatures, canonical encoding and hashing.

Every other module goes through here for bytes-on-the-wire decisions: what
gets signed, what gets hashed and how keys look on disk.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import os
import secrets
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

SCHEME_ID = "ed25519"
SEED_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64

_HEX = frozenset("0123456789abcdef")


class CryptoError(Exception):
    """Bad key material, seeds or encodings."""


def b64decode_strict(text: str) -> bytes:
    """Decode standard base64, rejecting any non-canonical spelling.

    Lenient decoders ignore the unused low bits of the final character, so
    two different texts can map to the same bytes. Stored artifacts are
    hashed as text, and we want one text per byte string.
    """
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, ValueError) as exc:
        raise CryptoError(f"invalid base64: {exc}") from None
    if base64.b64encode(raw).decode("ascii") != text:
        raise CryptoError("non-canonical base64")
    return raw


def _b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


class Digest(str):
    """SHA-256 output as 64 lowercase hex characters."""

    __slots__ = ()

    def __new__(cls, value: str) -> "Digest":
        if len(value) != 64 or not _HEX.issuperset(value):
            raise CryptoError(f"not a SHA-256 hex digest: {value!r}")
        return super().__new__(cls, value)

    @property
    def hex(self) -> str:  # type: ignore[override]
        return str(self)


ZERO_DIGEST = Digest("0" * 64)


def hash_bytes(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).hexdigest())


@dataclass(frozen=True)
class PublicKey:
    raw: bytes
    scheme_id: str = SCHEME_ID

    def __post_init__(self) -> None:
        if self.scheme_id != SCHEME_ID:
            raise CryptoError(f"unsupported scheme {self.scheme_id!r}")
        if len(self.raw) != PUBLIC_KEY_SIZE:
            raise CryptoError(f"{SCHEME_ID} public key must be {PUBLIC_KEY_SIZE} bytes")

    def to_text(self) -> str:
        """Text form used inside records and identity bundles: ``ed25519:<b64>``."""
        return f"{self.scheme_id}:{_b64(self.raw)}"

    @classmethod
    def from_text(cls, text: str) -> "PublicKey":
        scheme, sep, body = text.strip().partition(":")
        if not sep:
            raise CryptoError("public key text lacks a scheme prefix")
        return cls(b64decode_strict(body), scheme)

    @property
    def fingerprint(self) -> Digest:
        return hash_bytes(self.raw)


@dataclass(frozen=True, repr=False)
class PrivateKey:
    seed: bytes
    scheme_id: str = SCHEME_ID

    def __post_init__(self) -> None:
        if self.scheme_id != SCHEME_ID:
            raise CryptoError(f"unsupported scheme {self.scheme_id!r}")
        if len(self.seed) != SEED_SIZE:
            raise CryptoError(f"{SCHEME_ID} private key must be {SEED_SIZE} bytes")

    def __repr__(self) -> str:
        return f"PrivateKey(scheme_id={self.scheme_id!r}, seed=<redacted>)"

    def _key(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.seed)

    def public_key(self) -> PublicKey:
        raw = self._key().public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return PublicKey(raw, self.scheme_id)

    def to_text(self) -> str:
        return f"{self.scheme_id}:{_b64(self.seed)}"

    @classmethod
    def from_text(cls, text: str) -> "PrivateKey":
        scheme, sep, body = text.strip().partition(":")
        if not sep:
            raise CryptoError("private key text lacks a scheme prefix")
        return cls(b64decode_strict(body), scheme)


@dataclass(frozen=True)
class KeyPair:
    public_key: PublicKey
    private_key: PrivateKey
    key_fingerprint: Digest


@dataclass(frozen=True)
class Signature:
    scheme_id: str
    bytes: bytes

    @property
    def encoding(self) -> str:
        return _b64(self.bytes)

    def to_text(self) -> str:
        return self.encoding

    @classmethod
    def from_text(cls, text: str, scheme_id: str = SCHEME_ID) -> "Signature":
        return cls(scheme_id, b64decode_strict(text))


def generate_keypair(seed: bytes | None = None) -> KeyPair:
    """Create an Ed25519 key pair; a fixed 32-byte seed makes it reproducible."""
    if seed is None:
        seed = secrets.token_bytes(SEED_SIZE)
    elif not isinstance(seed, (bytes, bytearray)) or len(seed) != SEED_SIZE:
        raise CryptoError(f"seed must be exactly {SEED_SIZE} bytes")
    private = PrivateKey(bytes(seed))
    public = private.public_key()
    return KeyPair(public, private, public.fingerprint)


def sign(private_key: PrivateKey, message: bytes) -> Signature:
    if not isinstance(private_key, PrivateKey):
        raise CryptoError("sign() needs a PrivateKey")
    try:
        key = private_key._key()
    except ValueError as exc:
        raise CryptoError(f"corrupt private key: {exc}") from None
    return Signature(private_key.scheme_id, key.sign(bytes(message)))


def verify(public_key: PublicKey, message: bytes, signature: Signature) -> bool:
    """True iff ``signature`` is a valid signature over ``message``. Never raises."""
    try:
        if public_key.scheme_id != SCHEME_ID or signature.scheme_id != SCHEME_ID:
            return False
        if len(signature.bytes) != SIGNATURE_SIZE:
            return False
        Ed25519PublicKey.from_public_bytes(public_key.raw).verify(
            signature.bytes, bytes(message)
        )
        return True
    except (InvalidSignature, ValueError, TypeError, AttributeError):
        return False


def _normalize(value: Any) -> Any:
    if isinstance(value, str):
        return unicodedata.normalize("NFC", value)
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        raise CryptoError("floats have no canonical encoding here")
    if isinstance(value, Mapping):
        out = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise CryptoError("object keys must be strings")
            nkey = unicodedata.normalize("NFC", key)
            if nkey in out:
                raise CryptoError(f"duplicate key after NFC normalization: {nkey!r}")
            out[nkey] = _normalize(item)
        return out
    if isinstance(value, (list, tuple)):
        return [_normalize(item) for item in value]
    raise CryptoError(f"cannot canonically encode {type(value).__name__}")


def canonical_encode(obj: Any) -> bytes:
    """UTF-8 JSON, sorted keys, no whitespace, NFC strings, integers only."""
    return json.dumps(
        _normalize(obj),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def canonical_bytes(record: Any) -> bytes:
    """Signing input for a device record (or any object exposing ``to_dict``)."""
    if hasattr(record, "to_dict"):
        record = record.to_dict()
    return canonical_encode(record)


# -- key files ---------------------------------------------------------------

def write_public_key(path: str | os.PathLike, key: PublicKey) -> None:
    Path(path).write_text(f"{key.scheme_id} public key\n{_b64(key.raw)}\n", encoding="ascii")


def write_private_key(path: str | os.PathLike, key: PrivateKey) -> None:
    # owner-only from the first byte; chmod after the fact would leave a window
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    with os.fdopen(fd, "w", encoding="ascii") as fh:
        fh.write(f"{key.scheme_id} private key\n{_b64(key.seed)}\n")


def _read_key_file(path: str | os.PathLike, kind: str) -> tuple[str, bytes]:
    try:
        lines = Path(path).read_text(encoding="ascii").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise CryptoError(f"cannot read key file {path}: {exc}") from None
    if len(lines) < 2:
        raise CryptoError(f"{path}: truncated key file")
    parts = lines[0].split()
    if len(parts) != 3 or parts[1:] != [kind, "key"]:
        raise CryptoError(f"{path}: expected a '<scheme> {kind} key' header")
    return parts[0], b64decode_strict(lines[1].strip())


def read_public_key(path: str | os.PathLike) -> PublicKey:
    scheme, raw = _read_key_file(path, "public")
    return PublicKey(raw, scheme)


def read_private_key(path: str | os.PathLike) -> PrivateKey:
    scheme, raw = _read_key_file(path, "private")
    return PrivateKey(raw, scheme)
