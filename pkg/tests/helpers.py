"""Builders shared by the test modules."""

from __future__ import annotations

import random

from chainpki.crypto import KeyPair, generate_keypair
from chainpki.identity import IdentityProfile, MockProvider, Proof, ProofState
from chainpki.ledger import Block, Blockchain, BlockMeta, DeviceRecord, new_chain
from chainpki.crypto import Digest, PublicKey, Signature
from chainpki.verifier import register_device

T0 = 1_546_300_800


def seed(n: int) -> bytes:
    return bytes([n]) * 32


def keypair(n: int) -> KeyPair:
    return generate_keypair(seed(n))


ALICE = keypair(0)
BOB = keypair(2)
CAROL = keypair(3)
MALLORY = keypair(4)
DEVICE = keypair(1)


def profile(kp: KeyPair, username: str, states: list[ProofState], kinds=None) -> IdentityProfile:
    kinds = kinds or ["twitter", "github", "reddit", "facebook", "hackernews", "dns", "website"]
    return IdentityProfile(
        username,
        kp.public_key.to_text(),
        tuple(Proof(k, f"{username}@{k}", s) for k, s in zip(kinds, states)),
    )


V, P, B = ProofState.VALID, ProofState.PENDING, ProofState.BROKEN


def seeded_provider() -> MockProvider:
    provider = MockProvider()
    provider.register(profile(ALICE, "alice", [V, V, V]))
    provider.register(profile(BOB, "bob", [V, B]))
    provider.register(profile(CAROL, "carol", [V, V]))
    return provider


def record(node_id: str, owner: str, device: KeyPair = DEVICE) -> DeviceRecord:
    return DeviceRecord.create(node_id, owner, device.public_key)


def build_chain(n_blocks: int, owner: KeyPair = ALICE, username: str = "alice", prefix: str = "dev") -> Blockchain:
    chain = new_chain(T0)
    for i in range(n_blocks):
        chain = register_device(chain, owner.private_key, record(f"{prefix}-{i:03d}", username), T0 + i)
    return chain


def mutate_block(block: Block, rng: random.Random) -> tuple[Block, str]:
    """Change exactly one byte of one field of ``block``, keeping the hash as-is."""
    fields = ["meta.index", "meta.prev_hash", "meta.timestamp", "hash"]
    if block.data is not None:
        fields += ["data.node_id", "data.owner_username", "data.device_public_key", "signature"]
    name = rng.choice(fields)
    meta, data, sig, digest = block.meta, block.data, block.signature, block.hash

    def flip_char(text: str, alphabet: str) -> str:
        i = rng.randrange(len(text))
        choices = [c for c in alphabet if c != text[i]]
        return text[:i] + rng.choice(choices) + text[i + 1:]

    def flip_digit(n: int) -> int:
        text = str(n)
        i = rng.randrange(len(text))
        digits = "123456789" if i == 0 and len(text) > 1 else "0123456789"
        return int(text[:i] + rng.choice([d for d in digits if d != text[i]]) + text[i + 1:])

    hexd = "0123456789abcdef"
    if name == "meta.index":
        meta = BlockMeta(flip_digit(meta.index), meta.prev_hash, meta.timestamp)
    elif name == "meta.timestamp":
        meta = BlockMeta(meta.index, meta.prev_hash, flip_digit(meta.timestamp))
    elif name == "meta.prev_hash":
        meta = BlockMeta(meta.index, Digest(flip_char(meta.prev_hash, hexd)), meta.timestamp)
    elif name == "hash":
        digest = Digest(flip_char(digest, hexd))
    elif name == "signature":
        raw = bytearray(sig.bytes)
        raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
        sig = Signature(sig.scheme_id, bytes(raw))
    elif name == "data.device_public_key":
        raw = bytearray(PublicKey.from_text(data.device_public_key).raw)
        raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
        data = DeviceRecord(data.node_id, data.owner_username, PublicKey(bytes(raw)).to_text())
    else:
        attr = name.split(".")[1]
        value = flip_char(getattr(data, attr), "abcdefghijklmnopqrstuvwxyz0123456789-")
        data = DeviceRecord(**{**data.to_dict(), attr: value})
    return Block(meta, data, sig, digest), name
