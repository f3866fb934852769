"""Hash-linked ledger of signed device records.

A chain is an immutable value: appending returns a new :class:`Blockchain`.
Structural checks (linkage, timestamps, hashes, first-claim uniqueness) live
here; checking a signature against the *current* owner key needs the identity
provider and is done by :mod:`chainpki.verifier`.
"""

from __future__ import annotations

import enum
import json
import os
import tempfile
import threading
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Iterator, Mapping, Optional

from .crypto import (
    ZERO_DIGEST,
    CryptoError,
    Digest,
    PublicKey,
    Signature,
    canonical_bytes,
    canonical_encode,
    hash_bytes,
    verify,
)

MAX_FIELD_BYTES = 256


class LedgerError(Exception):
    """Base class for ledger failures."""


class ChainFormatError(LedgerError):
    """A serialized chain could not be decoded into blocks."""


class BlockRejected(LedgerError):
    def __init__(self, cause: "FailureCause", detail: str, index: int | None = None):
        self.cause = cause
        self.detail = detail
        self.index = index
        where = f"block {index}: " if index is not None else ""
        super().__init__(f"{where}{cause.value}: {detail}")


class DuplicateDevice(BlockRejected):
    def __init__(self, node_id: str, index: int | None = None):
        self.node_id = node_id
        super().__init__(FailureCause.DUPLICATE, f"node_id {node_id!r} already registered", index)


class FailureCause(enum.Enum):
    STRUCTURE = "structure"
    LINKAGE = "linkage"
    TIMESTAMP = "timestamp"
    HASH = "hash"
    SIGNATURE = "signature"
    DUPLICATE = "duplicate"
    GENESIS = "genesis"


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    cause: Optional[FailureCause] = None
    index: Optional[int] = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return f"block {self.index}: {self.cause.value}: {self.detail}"


_PASS = ValidationResult(True)


def _fail(cause: FailureCause, index: int | None, detail: str) -> ValidationResult:
    return ValidationResult(False, cause, index, detail)


def _check_text(name: str, value: Any) -> None:
    if not isinstance(value, str) or not value:
        raise ValueError(f"{name} must be a non-empty string")
    if len(value.encode("utf-8")) > MAX_FIELD_BYTES:
        raise ValueError(f"{name} exceeds {MAX_FIELD_BYTES} UTF-8 bytes")
    if unicodedata.normalize("NFC", value) != value:
        raise ValueError(f"{name} is not NFC-normalized")


@dataclass(frozen=True)
class BlockMeta:
    index: int
    prev_hash: Digest
    timestamp: int

    def __post_init__(self) -> None:
        for name in ("index", "timestamp"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        object.__setattr__(self, "prev_hash", Digest(self.prev_hash))

    def to_dict(self) -> dict:
        return {"index": self.index, "prev_hash": str(self.prev_hash), "timestamp": self.timestamp}


@dataclass(frozen=True)
class DeviceRecord:
    node_id: str
    owner_username: str
    device_public_key: str

    def __post_init__(self) -> None:
        _check_text("node_id", self.node_id)
        _check_text("owner_username", self.owner_username)
        PublicKey.from_text(self.device_public_key)

    @classmethod
    def create(cls, node_id: str, owner_username: str, device_public_key: PublicKey | str) -> "DeviceRecord":
        """Build a record from loosely formed input (NFC-normalizes the names)."""
        if isinstance(device_public_key, PublicKey):
            device_public_key = device_public_key.to_text()
        return cls(
            unicodedata.normalize("NFC", node_id),
            unicodedata.normalize("NFC", owner_username),
            device_public_key,
        )

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "owner_username": self.owner_username,
            "device_public_key": self.device_public_key,
        }


def _signature_dict(sig: Signature | None) -> dict | None:
    if sig is None:
        return None
    return {"scheme": sig.scheme_id, "value": sig.encoding}


def compute_block_hash(meta: BlockMeta, data: DeviceRecord | None, signature: Signature | None) -> Digest:
    return hash_bytes(
        canonical_encode(
            {
                "meta": meta.to_dict(),
                "data": data.to_dict() if data is not None else None,
                "signature": _signature_dict(signature),
            }
        )
    )


@dataclass(frozen=True)
class Block:
    meta: BlockMeta
    data: Optional[DeviceRecord]
    signature: Optional[Signature]
    hash: Digest

    @property
    def index(self) -> int:
        return self.meta.index

    @property
    def is_genesis(self) -> bool:
        return self.meta.index == 0

    def recompute_hash(self) -> Digest:
        return compute_block_hash(self.meta, self.data, self.signature)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta.to_dict(),
            "data": self.data.to_dict() if self.data is not None else None,
            "signature": _signature_dict(self.signature),
            "hash": str(self.hash),
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "Block":
        try:
            if set(obj) != {"meta", "data", "signature", "hash"}:
                raise ValueError(f"unexpected block keys {sorted(obj)}")
            meta = obj["meta"]
            if set(meta) != {"index", "prev_hash", "timestamp"}:
                raise ValueError(f"unexpected meta keys {sorted(meta)}")
            data = obj["data"]
            if data is not None:
                if set(data) != {"node_id", "owner_username", "device_public_key"}:
                    raise ValueError(f"unexpected data keys {sorted(data)}")
                data = DeviceRecord(**data)
            sig = obj["signature"]
            if sig is not None:
                if set(sig) != {"scheme", "value"}:
                    raise ValueError(f"unexpected signature keys {sorted(sig)}")
                sig = Signature.from_text(sig["value"], sig["scheme"])
            return cls(BlockMeta(**meta), data, sig, Digest(obj["hash"]))
        except (TypeError, ValueError, KeyError, AttributeError, CryptoError) as exc:
            raise ChainFormatError(f"malformed block: {exc}") from None


@dataclass(frozen=True)
class Blockchain:
    """Ordered blocks starting at genesis, with a node_id -> position index."""

    blocks: tuple[Block, ...]
    _by_node: Mapping[str, int] = field(default=MappingProxyType({}), repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    def __getitem__(self, i: int) -> Block:
        return self.blocks[i]

    @property
    def genesis(self) -> Block:
        return self.blocks[0]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @classmethod
    def from_blocks(cls, blocks: Iterable[Block]) -> "Blockchain":
        """Wrap blocks as-is; no validation, so tampered chains can be represented."""
        blocks = tuple(blocks)
        if not blocks:
            raise LedgerError("a chain has at least a genesis block")
        index: dict[str, int] = {}
        for pos, block in enumerate(blocks):
            if block.data is not None:
                index.setdefault(block.data.node_id, pos)
        return cls(blocks, MappingProxyType(index))

    def to_dict(self) -> dict:
        return {"blocks": [b.to_dict() for b in self.blocks]}


def new_chain(genesis_timestamp: int = 0) -> Blockchain:
    meta = BlockMeta(0, ZERO_DIGEST, genesis_timestamp)
    genesis = Block(meta, None, None, compute_block_hash(meta, None, None))
    return Blockchain.from_blocks([genesis])


def make_block(chain: Blockchain, record: DeviceRecord, signature: Signature, timestamp: int) -> Block:
    """Build the next block on ``chain``. The signature is carried, not checked."""
    tip = chain.tip
    if timestamp < tip.meta.timestamp:
        raise BlockRejected(
            FailureCause.TIMESTAMP,
            f"timestamp {timestamp} precedes tip timestamp {tip.meta.timestamp}",
            tip.index + 1,
        )
    meta = BlockMeta(tip.index + 1, tip.hash, timestamp)
    return Block(meta, record, signature, compute_block_hash(meta, record, signature))


def _check_genesis(block: Block) -> ValidationResult:
    m = block.meta
    if m.index != 0 or m.prev_hash != ZERO_DIGEST:
        return _fail(FailureCause.GENESIS, m.index, "genesis must have index 0 and a zero prev_hash")
    if block.data is not None or block.signature is not None:
        return _fail(FailureCause.GENESIS, 0, "genesis carries no record or signature")
    if block.recompute_hash() != block.hash:
        return _fail(FailureCause.HASH, 0, "stored hash does not match contents")
    return _PASS


def validate_block(block: Block, prev: Block, owner_pk: PublicKey | None = None) -> ValidationResult:
    idx = block.meta.index
    if block.meta.index != prev.meta.index + 1 or block.meta.prev_hash != prev.hash:
        return _fail(FailureCause.LINKAGE, idx, f"does not extend block {prev.meta.index}")
    if block.meta.timestamp < prev.meta.timestamp:
        return _fail(FailureCause.TIMESTAMP, idx, "timestamp earlier than predecessor")
    if block.data is None or block.signature is None:
        return _fail(FailureCause.STRUCTURE, idx, "non-genesis block lacks record or signature")
    if block.recompute_hash() != block.hash:
        return _fail(FailureCause.HASH, idx, "stored hash does not match contents")
    if owner_pk is not None and not verify(owner_pk, canonical_bytes(block.data), block.signature):
        return _fail(FailureCause.SIGNATURE, idx, "signature does not verify under owner key")
    return _PASS


def validate_chain(chain: Blockchain) -> ValidationResult:
    """Structural validation of the whole chain, including first-claim uniqueness."""
    blocks = chain.blocks
    result = _check_genesis(blocks[0])
    if not result:
        return result
    seen: set[str] = set()
    for prev, block in zip(blocks, blocks[1:]):
        result = validate_block(block, prev)
        if not result:
            return result
        node_id = block.data.node_id
        if node_id in seen:
            return _fail(FailureCause.DUPLICATE, block.index, f"node_id {node_id!r} already registered")
        seen.add(node_id)
    return _PASS


def append_block(chain: Blockchain, block: Block) -> Blockchain:
    result = validate_block(block, chain.tip)
    if not result:
        raise BlockRejected(result.cause, result.detail, result.index)
    node_id = block.data.node_id
    if node_id in chain._by_node:
        raise DuplicateDevice(node_id, block.index)
    index = dict(chain._by_node)
    index[node_id] = len(chain.blocks)
    return Blockchain(chain.blocks + (block,), MappingProxyType(index))


def find_device(chain: Blockchain, node_id: str) -> Block | None:
    pos = chain._by_node.get(node_id)
    return None if pos is None else chain.blocks[pos]


def choose_chain(local: Blockchain, remote: Blockchain) -> Blockchain:
    """Longest-valid-chain rule; ties and invalid or foreign chains keep ``local``."""
    if len(remote) <= len(local):
        return local
    if remote.genesis.hash != local.genesis.hash:
        return local
    if not validate_chain(remote):
        return local
    return remote


class ChainHandle:
    """Shared mutable reference to a chain value: serialized appends, lock-free reads."""

    def __init__(self, chain: Blockchain):
        self._chain = chain
        self._lock = threading.Lock()

    @property
    def chain(self) -> Blockchain:
        return self._chain

    def append(self, block: Block) -> Blockchain:
        with self._lock:
            self._chain = append_block(self._chain, block)
            return self._chain

    def offer(self, remote: Blockchain) -> bool:
        """Adopt ``remote`` under :func:`choose_chain`; True if it replaced the local copy."""
        with self._lock:
            chosen = choose_chain(self._chain, remote)
            adopted = chosen is not self._chain
            self._chain = chosen
            return adopted


# -- persistence -------------------------------------------------------------


def dumps_chain(chain: Blockchain) -> bytes:
    return canonical_encode(chain.to_dict())


def loads_chain(data: bytes | str) -> Blockchain:
    try:
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        obj = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChainFormatError(f"not a JSON chain document: {exc}") from None
    if not isinstance(obj, dict) or set(obj) != {"blocks"} or not isinstance(obj["blocks"], list):
        raise ChainFormatError('expected {"blocks": [...]}')
    if not obj["blocks"]:
        raise ChainFormatError("chain document has no blocks")
    if not all(isinstance(b, dict) for b in obj["blocks"]):
        raise ChainFormatError("blocks must be JSON objects")
    return Blockchain.from_blocks(Block.from_dict(b) for b in obj["blocks"])


def load_chain(path: str | os.PathLike) -> Blockchain:
    return loads_chain(Path(path).read_bytes())


def save_chain(chain: Blockchain, path: str | os.PathLike) -> None:
    """Write atomically: temp file in the target directory, fsync, rename."""
    path = Path(path)
    payload = dumps_chain(chain)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
