"""Deterministic in-process network of devices.

Each tick: scheduled events fire (e.g. an owner rotating keys), pings are
broadcast and every other node verifies the sender, then nodes gossip chains
under the longest-valid-chain rule. All randomness flows from one seeded
``random.Random`` so a :class:`SimConfig` fully determines the transcript.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .crypto import KeyPair, canonical_encode, generate_keypair
from .identity import IdentityProfile, MockProvider, Proof, ProofState
from .ledger import (
    Block,
    Blockchain,
    DeviceRecord,
    choose_chain,
    compute_block_hash,
    new_chain,
)
from .verifier import Stage, TrustPolicy, Verdict, VerificationOutcome, register_device, verify_device

SCENARIOS = ("uc1_signature_verification", "uc2_unreliable_proofs", "uc3_key_rotation", "convergence")

# 2019-01-01T00:00:00Z; simulated block times are this plus a tick offset
EPOCH = 1_546_300_800


class UnknownScenario(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    node_count: int = 10
    gossip_rounds_per_tick: int = 1
    rng_seed: int = 42
    scenario: str = "convergence"
    max_ticks: int = 50

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if self.gossip_rounds_per_tick < 0:
            raise ValueError("gossip_rounds_per_tick must be >= 0")

    def to_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "gossip_rounds_per_tick": self.gossip_rounds_per_tick,
            "rng_seed": self.rng_seed,
            "scenario": self.scenario,
            "max_ticks": self.max_ticks,
        }


@dataclass(frozen=True)
class PingMessage:
    sender_node_id: str


@dataclass(frozen=True)
class Decision:
    peer: str
    outcome: VerificationOutcome
    tick: int

    def to_dict(self) -> dict:
        return {"tick": self.tick, "peer": self.peer, **self.outcome.to_dict()}


@dataclass
class SimNode:
    node_id: str
    keypair: KeyPair
    local_chain: Blockchain
    policy: TrustPolicy = field(default_factory=TrustPolicy)
    decision_log: list[Decision] = field(default_factory=list)
    honest: bool = True

    def receive(self, ping: PingMessage, provider, tick: int) -> Decision:
        outcome = verify_device(self.local_chain, provider, self.policy, ping.sender_node_id)
        decision = Decision(ping.sender_node_id, outcome, tick)
        self.decision_log.append(decision)
        return decision


def gossip_exchange(a: SimNode, b: SimNode) -> tuple[SimNode, SimNode]:
    """Both sides apply the longest-valid-chain rule to the other's chain.

    Dishonest nodes offer their chain but never take one.
    """
    chain_a, chain_b = a.local_chain, b.local_chain
    if a.honest:
        a.local_chain = choose_chain(chain_a, chain_b)
    if b.honest:
        b.local_chain = choose_chain(chain_b, chain_a)
    return a, b


@dataclass
class Network:
    nodes: list[SimNode]
    provider: MockProvider
    rng: random.Random
    gossip_rounds_per_tick: int = 1
    neighbours: dict[str, list[str]] = field(default_factory=dict)
    adversaries: list[SimNode] = field(default_factory=list)
    pings: dict[int, list[str]] = field(default_factory=dict)
    events: dict[int, list[Callable[["Network"], None]]] = field(default_factory=dict)
    tick: int = 0
    adoptions: list[dict] = field(default_factory=list)
    length_history: list[list[int]] = field(default_factory=list)

    def node(self, node_id: str) -> SimNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def tips(self) -> list[str]:
        return [str(n.local_chain.tip.hash) for n in self.nodes]

    def converged(self) -> bool:
        return len(set(self.tips())) == 1

    def step(self) -> "Network":
        for event in self.events.get(self.tick, ()):
            event(self)
        for sender in self.pings.get(self.tick, ()):
            ping = PingMessage(sender)
            for node in self.nodes:
                if node.node_id != sender:
                    node.receive(ping, self.provider, self.tick)
        by_id = {n.node_id: n for n in self.nodes}
        for _ in range(self.gossip_rounds_per_tick):
            for node in self.rng.sample(self.nodes, len(self.nodes)):
                peers = self.neighbours.get(node.node_id)
                if peers:
                    self._exchange(node, by_id[self.rng.choice(peers)])
                for adversary in self.adversaries:
                    self._exchange(node, adversary)
        self.length_history.append([len(n.local_chain) for n in self.nodes])
        self.tick += 1
        return self

    def _exchange(self, a: SimNode, b: SimNode) -> None:
        before = {a.node_id: a.local_chain, b.node_id: b.local_chain}
        gossip_exchange(a, b)
        for who, other in ((a, b), (b, a)):
            if who.local_chain is not before[who.node_id]:
                self.adoptions.append(
                    {"tick": self.tick, "node": who.node_id, "from": other.node_id,
                     "length": len(who.local_chain), "honest_source": other.honest}
                )

    def transcript(self) -> bytes:
        """Canonical bytes of everything observable: decisions, adoptions, tips."""
        return canonical_encode(
            {
                "tick": self.tick,
                "nodes": [
                    {"node_id": n.node_id, "tip": str(n.local_chain.tip.hash),
                     "decisions": [d.to_dict() for d in n.decision_log]}
                    for n in self.nodes
                ],
                "adoptions": self.adoptions,
                "lengths": self.length_history,
            }
        )


def step(network: Network) -> Network:
    return network.step()


def ring(node_ids: list[str]) -> dict[str, list[str]]:
    n = len(node_ids)
    if n == 1:
        return {node_ids[0]: []}
    return {
        nid: sorted({node_ids[(i - 1) % n], node_ids[(i + 1) % n]})
        for i, nid in enumerate(node_ids)
    }


def seeded_keypair(seed: int, label: str) -> KeyPair:
    return generate_keypair(hashlib.sha256(f"chainpki-sim/{seed}/{label}".encode()).digest())


# -- scenarios ---------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


@dataclass
class ScenarioReport:
    scenario: str
    config: SimConfig
    ticks: int
    checks: list[Check]
    network: Network
    summary: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config": self.config.to_dict(),
            "ticks": self.ticks,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
            "summary": self.summary,
            "notes": self.notes,
            "nodes": [
                {
                    "node_id": n.node_id,
                    "chain_length": len(n.local_chain),
                    "tip_hash": str(n.local_chain.tip.hash),
                    "decisions": [d.to_dict() for d in n.decision_log],
                }
                for n in self.network.nodes
            ],
        }


def _profile(kp: KeyPair, username: str, proofs: list[tuple[str, ProofState]]) -> IdentityProfile:
    return IdentityProfile(
        username,
        kp.public_key.to_text(),
        tuple(Proof(kind, f"{username}_{kind}", state) for kind, state in proofs),
    )


def _device_ids(config: SimConfig) -> list[str]:
    return [f"dev-{i:02d}" for i in range(config.node_count)]


def _build_network(config: SimConfig, chain: Blockchain, provider: MockProvider) -> Network:
    ids = _device_ids(config)
    nodes = [SimNode(nid, seeded_keypair(config.rng_seed, nid), chain) for nid in ids]
    return Network(
        nodes,
        provider,
        random.Random(config.rng_seed),
        config.gossip_rounds_per_tick,
        neighbours=ring(ids),
    )


def _verdicts_from(net: Network, sender: str) -> list[Decision]:
    return [d for n in net.nodes for d in n.decision_log if d.peer == sender]


_VALID = ProofState.VALID
_PENDING = ProofState.PENDING
_BROKEN = ProofState.BROKEN

EXPECTED_UC1_STAGES = {
    Verdict.REJECTED_BAD_SIGNATURE: (
        (Stage.BLOCK_LOOKUP.value, True), (Stage.USER_LOOKUP.value, True), (Stage.SIGNATURE_CHECK.value, False)),
    Verdict.REJECTED_INSUFFICIENT_PROOFS: (
        (Stage.BLOCK_LOOKUP.value, True), (Stage.USER_LOOKUP.value, True),
        (Stage.SIGNATURE_CHECK.value, True), (Stage.PROOF_POLICY.value, False)),
    Verdict.TRUSTED: (
        (Stage.BLOCK_LOOKUP.value, True), (Stage.USER_LOOKUP.value, True),
        (Stage.SIGNATURE_CHECK.value, True), (Stage.PROOF_POLICY.value, True)),
}


def _uc1(config: SimConfig) -> ScenarioReport:
    if config.node_count < 4:
        raise ValueError("uc1 needs at least 4 nodes (3 senders and a receiver)")
    seed = config.rng_seed
    alice = seeded_keypair(seed, "owner/alice")
    bob = seeded_keypair(seed, "owner/bob")
    carol = seeded_keypair(seed, "owner/carol")
    mallory = seeded_keypair(seed, "owner/mallory")
    provider = MockProvider()
    provider.register(_profile(alice, "alice", [("twitter", _VALID), ("github", _VALID), ("reddit", _VALID)]))
    provider.register(_profile(bob, "bob", [("github", _VALID), ("twitter", _BROKEN)]))
    provider.register(_profile(carol, "carol", [("twitter", _VALID), ("github", _VALID)]))

    ids = _device_ids(config)
    # dev-00 claims carol as owner but was signed by mallory
    signer = {ids[0]: (mallory, "carol"), ids[1]: (bob, "bob")}
    chain = new_chain(EPOCH)
    for i, nid in enumerate(ids):
        kp, owner = signer.get(nid, (alice, "alice"))
        device = seeded_keypair(seed, nid)
        chain = register_device(chain, kp.private_key, DeviceRecord.create(nid, owner, device.public_key), EPOCH + i)

    net = _build_network(config, chain, provider)
    senders = ids[:3]
    net.pings[0] = list(senders)
    net.step()

    expected = [Verdict.REJECTED_BAD_SIGNATURE, Verdict.REJECTED_INSUFFICIENT_PROOFS, Verdict.TRUSTED]
    checks, observed = [], []
    for sender, want in zip(senders, expected):
        decisions = _verdicts_from(net, sender)
        verdicts = {d.outcome.verdict for d in decisions}
        stages = {d.outcome.stages for d in decisions}
        observed.append(decisions[0].outcome.verdict.value if decisions else None)
        checks.append(Check(
            f"{sender} -> {want.value}",
            verdicts == {want} and stages == {EXPECTED_UC1_STAGES[want]} and len(decisions) == config.node_count - 1,
            f"{len(decisions)} receivers, verdicts {sorted(v.value for v in verdicts)}",
        ))
    return ScenarioReport(
        "uc1_signature_verification", config, net.tick, checks, net,
        summary={"senders": senders, "verdicts": observed},
    )


def _uc2(config: SimConfig) -> ScenarioReport:
    if config.node_count < 3:
        raise ValueError("uc2 needs at least 3 nodes")
    seed = config.rng_seed
    eve = seeded_keypair(seed, "owner/eve")
    trent = seeded_keypair(seed, "owner/trent")
    alice = seeded_keypair(seed, "owner/alice")
    provider = MockProvider()
    provider.register(_profile(eve, "eve", [("twitter", _PENDING), ("reddit", _PENDING), ("facebook", _BROKEN)]))
    # freshly made social accounts: proofs check out, nobody follows them
    provider.register(_profile(trent, "trent", [("twitter", _VALID), ("reddit", _VALID)]))
    provider.register(_profile(alice, "alice", [("twitter", _VALID), ("github", _VALID), ("dns", _VALID)]))

    ids = _device_ids(config)
    owners = {ids[0]: (eve, "eve"), ids[1]: (trent, "trent")}
    chain = new_chain(EPOCH)
    for i, nid in enumerate(ids):
        kp, owner = owners.get(nid, (alice, "alice"))
        chain = register_device(chain, kp.private_key,
                                DeviceRecord.create(nid, owner, seeded_keypair(seed, nid).public_key), EPOCH + i)
    net = _build_network(config, chain, provider)
    net.pings[0] = [ids[0], ids[1]]
    net.step()

    eve_verdicts = {d.outcome.verdict for d in _verdicts_from(net, ids[0])}
    trent_verdicts = {d.outcome.verdict for d in _verdicts_from(net, ids[1])}
    checks = [Check(
        f"{ids[0]} (pending/broken proofs only) rejected",
        eve_verdicts == {Verdict.REJECTED_INSUFFICIENT_PROOFS},
        f"verdicts {sorted(v.value for v in eve_verdicts)}",
    )]
    return ScenarioReport(
        "uc2_unreliable_proofs", config, net.tick, checks, net,
        summary={
            "followers_available": False,
            "unreliable_sender_verdicts": sorted(v.value for v in eve_verdicts),
            "fresh_accounts_sender_verdicts": sorted(v.value for v in trent_verdicts),
        },
        notes=[
            "The lookup API exposes no follower counts, so trust rests on proof counts alone.",
            f"{ids[1]}'s owner holds valid proofs on brand-new accounts and is accepted "
            "under the default policy; proof counting cannot tell these apart.",
        ],
    )


def _uc3(config: SimConfig) -> ScenarioReport:
    if config.node_count < 2:
        raise ValueError("uc3 needs at least 2 nodes")
    seed = config.rng_seed
    dave = seeded_keypair(seed, "owner/dave")
    dave_new = seeded_keypair(seed, "owner/dave/rotated")
    provider = MockProvider()
    provider.register(_profile(dave, "dave", [("twitter", _VALID), ("github", _VALID), ("hackernews", _VALID)]))

    ids = _device_ids(config)
    chain = new_chain(EPOCH)
    for i, nid in enumerate(ids):
        chain = register_device(chain, dave.private_key,
                                DeviceRecord.create(nid, "dave", seeded_keypair(seed, nid).public_key), EPOCH + i)
    net = _build_network(config, chain, provider)
    rotation_tick, total_ticks = 2, 6
    sender = ids[0]
    for t in range(total_ticks):
        net.pings[t] = [sender]
    net.events[rotation_tick] = [lambda n: n.provider.replace_key("dave", dave_new.public_key)]
    for _ in range(total_ticks):
        net.step()

    decisions = _verdicts_from(net, sender)
    before = [d for d in decisions if d.tick < rotation_tick]
    after = [d for d in decisions if d.tick >= rotation_tick]
    bad = sum(d.outcome.verdict is Verdict.REJECTED_BAD_SIGNATURE for d in after)
    checks = [
        Check("before rotation: all Trusted",
              bool(before) and all(d.outcome.trusted for d in before), f"{len(before)} verifications"),
        Check("after rotation: all RejectedBadSignature",
              bool(after) and bad == len(after), f"{bad}/{len(after)} RejectedBadSignature"),
    ]
    return ScenarioReport(
        "uc3_key_rotation", config, net.tick, checks, net,
        summary={"rotation_tick": rotation_tick, "verifications_after_rotation": len(after),
                 "rejected_bad_signature_after_rotation": bad,
                 "rejected_fraction": bad / len(after) if after else 0.0},
        notes=["Registrations signed with the old key cannot be tied to the owner once the key is replaced."],
    )


def divergent_chains(config: SimConfig) -> tuple[list[Blockchain], KeyPair]:
    """Node i gets genesis plus i registrations of its own, so lengths run 1..n."""
    seed = config.rng_seed
    owner = seeded_keypair(seed, "owner/alice")
    genesis = new_chain(EPOCH)
    chains = []
    for i in range(config.node_count):
        chain = genesis
        for j in range(i):
            nid = f"n{i:02d}-dev-{j:02d}"
            rec = DeviceRecord.create(nid, "alice", seeded_keypair(seed, nid).public_key)
            chain = register_device(chain, owner.private_key, rec, EPOCH + j)
        chains.append(chain)
    return chains, owner


def forged_longer_chain(base: Blockchain, owner: KeyPair, extra: int, seed: int) -> Blockchain:
    """``base`` extended by ``extra`` blocks, then one early record rewritten.

    The rewritten block gets a fresh hash but its successors are not relinked,
    so the chain is longer than ``base`` but fails structural validation.
    """
    chain = base
    for j in range(extra):
        nid = f"adv-dev-{j:02d}"
        rec = DeviceRecord.create(nid, "alice", seeded_keypair(seed, nid).public_key)
        chain = register_device(chain, owner.private_key, rec, chain.tip.meta.timestamp + 1)
    blocks = list(chain.blocks)
    target = min(2, len(blocks) - 2)
    victim = blocks[target]
    forged = replace(victim.data, owner_username="mallory")
    blocks[target] = Block(victim.meta, forged, victim.signature,
                           compute_block_hash(victim.meta, forged, victim.signature))
    return Blockchain.from_blocks(blocks)


def _convergence(config: SimConfig) -> ScenarioReport:
    seed = config.rng_seed
    chains, owner = divergent_chains(config)
    provider = MockProvider()
    ids = _device_ids(config)
    nodes = [SimNode(nid, seeded_keypair(seed, nid), chains[i]) for i, nid in enumerate(ids)]
    longest = chains[-1]
    forged = forged_longer_chain(longest, owner, extra=5, seed=seed)
    adversary = SimNode("adversary", seeded_keypair(seed, "adversary"), forged, honest=False)
    net = Network(nodes, provider, random.Random(seed), config.gossip_rounds_per_tick,
                  neighbours=ring(ids), adversaries=[adversary])

    converged_at: Optional[int] = 0 if net.converged() else None
    while converged_at is None and net.tick < config.max_ticks:
        net.step()
        if net.converged():
            converged_at = net.tick

    history = [[len(c) for c in chains]] + net.length_history
    monotone = all(all(b >= a for a, b in zip(prev, cur)) for prev, cur in zip(history, history[1:]))
    adversary_adoptions = sum(1 for a in net.adoptions if a["from"] == adversary.node_id)
    tips = set(net.tips())
    checks = [
        Check("converged within node_count ticks",
              converged_at is not None and converged_at <= config.node_count,
              f"converged after {converged_at} ticks"),
        Check("converged on the longest honest chain",
              tips == {str(longest.tip.hash)}, f"{len(tips)} distinct tips"),
        Check("forged longer chain adopted by no node", adversary_adoptions == 0,
              f"{adversary_adoptions} adoptions of a length-{len(forged)} forged chain"),
        Check("chain length never decreases", monotone, ""),
    ]
    return ScenarioReport(
        "convergence", config, net.tick, checks, net,
        summary={"converged_at_tick": converged_at, "initial_lengths": [len(c) for c in chains],
                 "final_tip": sorted(tips)[0] if len(tips) == 1 else sorted(tips),
                 "adversary_chain_length": len(forged), "adversary_adoptions": adversary_adoptions},
        notes=["Registrations on the shorter forks are dropped once the longest chain wins."],
    )


_RUNNERS = {
    "uc1_signature_verification": _uc1,
    "uc2_unreliable_proofs": _uc2,
    "uc3_key_rotation": _uc3,
    "convergence": _convergence,
}


def run_scenario(scenario: str, config: SimConfig | None = None) -> ScenarioReport:
    try:
        runner = _RUNNERS[scenario]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}") from None
    config = replace(config or SimConfig(), scenario=scenario)
    return runner(config)
