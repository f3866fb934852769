"""Device ownership verification and registration.

Verification walks four stages in a fixed order and stops at the first one
that fails:

    block lookup -> owner lookup -> signature check -> proof policy

Provider failures are raised, never turned into a verdict, so a flaky network
cannot masquerade as a rejection (or the reverse).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping

from .crypto import CryptoError, PrivateKey, PublicKey, canonical_bytes, sign, verify
from .identity import IdentityProvider, count_valid_proofs, lookup_user, normalize_proof_type
from .identity import ProofState
from .ledger import Blockchain, DeviceRecord, append_block, find_device, make_block


class Verdict(enum.Enum):
    TRUSTED = "Trusted"
    REJECTED_NO_BLOCK = "RejectedNoBlock"
    REJECTED_UNKNOWN_USER = "RejectedUnknownUser"
    REJECTED_BAD_SIGNATURE = "RejectedBadSignature"
    REJECTED_INSUFFICIENT_PROOFS = "RejectedInsufficientProofs"

    def __str__(self) -> str:
        return self.value


class Stage(enum.Enum):
    BLOCK_LOOKUP = "block_lookup"
    USER_LOOKUP = "user_lookup"
    SIGNATURE_CHECK = "signature_check"
    PROOF_POLICY = "proof_policy"


# verdict reported when each stage fails
STAGE_FAILURE = {
    Stage.BLOCK_LOOKUP: Verdict.REJECTED_NO_BLOCK,
    Stage.USER_LOOKUP: Verdict.REJECTED_UNKNOWN_USER,
    Stage.SIGNATURE_CHECK: Verdict.REJECTED_BAD_SIGNATURE,
    Stage.PROOF_POLICY: Verdict.REJECTED_INSUFFICIENT_PROOFS,
}


@dataclass(frozen=True)
class TrustPolicy:
    min_valid_proofs: int = 2
    required_proof_types: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.min_valid_proofs < 0:
            raise ValueError("min_valid_proofs must be >= 0")
        object.__setattr__(
            self,
            "required_proof_types",
            frozenset(normalize_proof_type(t) for t in self.required_proof_types),
        )

    @classmethod
    def from_mapping(cls, conf: Mapping[str, Any]) -> "TrustPolicy":
        """Build from config keys ``min_valid_proofs`` and ``required_proof_types``."""
        kwargs: dict[str, Any] = {}
        if conf.get("min_valid_proofs") not in (None, ""):
            kwargs["min_valid_proofs"] = int(conf["min_valid_proofs"])
        types = conf.get("required_proof_types")
        if isinstance(types, str):
            types = [t for t in (s.strip() for s in types.split(",")) if t]
        if types:
            kwargs["required_proof_types"] = frozenset(types)
        return cls(**kwargs)


@dataclass(frozen=True)
class TraceStep:
    stage: Stage
    subject: str
    ok: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"stage": self.stage.value, "subject": self.subject, "ok": self.ok, "detail": self.detail}


@dataclass(frozen=True)
class VerificationOutcome:
    verdict: Verdict
    trace: tuple[TraceStep, ...] = field(default=())

    @property
    def trusted(self) -> bool:
        return self.verdict is Verdict.TRUSTED

    @property
    def stages(self) -> tuple[tuple[str, bool], ...]:
        return tuple((s.stage.value, s.ok) for s in self.trace)

    def to_dict(self) -> dict:
        return {"verdict": self.verdict.value, "trace": [s.to_dict() for s in self.trace]}


def _policy_check(profile, policy: TrustPolicy) -> tuple[bool, str]:
    valid = count_valid_proofs(profile)
    have = {p.proof_type for p in profile.proofs if p.state is ProofState.VALID}
    missing = sorted(policy.required_proof_types - have)
    ok = valid >= policy.min_valid_proofs and not missing
    detail = f"{valid} valid proofs, need {policy.min_valid_proofs}"
    if missing:
        detail += f"; missing {','.join(missing)}"
    return ok, detail


def verify_device(
    chain: Blockchain, provider: IdentityProvider, policy: TrustPolicy, node_id: str
) -> VerificationOutcome:
    trace: list[TraceStep] = []

    def reject(stage: Stage, subject: str, detail: str) -> VerificationOutcome:
        trace.append(TraceStep(stage, subject, False, detail))
        return VerificationOutcome(STAGE_FAILURE[stage], tuple(trace))

    block = find_device(chain, node_id)
    if block is None:
        return reject(Stage.BLOCK_LOOKUP, node_id, "no block registers this node")
    record = block.data
    trace.append(TraceStep(Stage.BLOCK_LOOKUP, node_id, True, f"block {block.index}"))

    owner = record.owner_username
    profile = lookup_user(provider, owner)
    if profile is None:
        return reject(Stage.USER_LOOKUP, owner, "identity provider has no such user")
    trace.append(TraceStep(Stage.USER_LOOKUP, owner, True, f"key {profile.key.fingerprint[:16]}"))

    try:
        owner_key = PublicKey.from_text(profile.public_key)
    except CryptoError as exc:
        return reject(Stage.SIGNATURE_CHECK, owner, f"owner key unusable: {exc}")
    if not verify(owner_key, canonical_bytes(record), block.signature):
        return reject(Stage.SIGNATURE_CHECK, owner, "block signature does not verify under owner's current key")
    trace.append(TraceStep(Stage.SIGNATURE_CHECK, owner, True, "signature verifies"))

    ok, detail = _policy_check(profile, policy)
    if not ok:
        return reject(Stage.PROOF_POLICY, owner, detail)
    trace.append(TraceStep(Stage.PROOF_POLICY, owner, True, detail))
    return VerificationOutcome(Verdict.TRUSTED, tuple(trace))


def register_device(
    chain: Blockchain, owner_private_key: PrivateKey, record: DeviceRecord, timestamp: int
) -> Blockchain:
    """Sign ``record`` as its owner and append it. Raises on duplicates or bad timing."""
    signature = sign(owner_private_key, canonical_bytes(record))
    return append_block(chain, make_block(chain, record, signature, timestamp))
