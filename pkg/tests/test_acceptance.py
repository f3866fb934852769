"""Exit criteria. Each test prints one PASS/FAIL line in the terminal summary."""

import hashlib
import json
import os
import random
import subprocess
import sys

import pytest

from chainpki.identity import KeybaseProvider, serve_mock
from chainpki.ledger import Blockchain, new_chain, validate_chain
from chainpki.simnet import SimConfig, run_scenario
from chainpki.verifier import TrustPolicy, Verdict, register_device, verify_device

from helpers import ALICE, BOB, MALLORY, T0, build_chain, keypair, mutate_block, record, seeded_provider
from scripted import ALL_COMBINATIONS, expected_stages, expected_verdict, scripted_world
from test_crypto import RECORD_BYTES, RECORD_SHA256, NFC_RECORD_SHA256
from test_ledger import BLOCK_1_HASH, GENESIS_0_HASH

@pytest.fixture
def report(record_property):
    def _report(criterion: str, ok: bool, detail: str) -> None:
        record_property("detail", detail)
        assert ok, f"criterion {criterion}: {detail}"

    return _report


def test_criterion_1_tamper_evidence(report):
    chain = build_chain(49)  # 50 blocks including genesis
    assert len(chain) == 50 and validate_chain(chain)
    rng = random.Random(20190101)
    missed = []
    for trial in range(100):
        i = rng.randrange(len(chain))
        mutated, field = mutate_block(chain[i], rng)
        blocks = list(chain.blocks)
        blocks[i] = mutated
        if validate_chain(Blockchain.from_blocks(blocks)):
            missed.append((trial, i, field))
    report("1 tamper evidence", not missed, f"{100 - len(missed)}/100 mutations detected, misses={missed}")


EXPECTED_UC1 = [
    ("RejectedBadSignature", (("block_lookup", True), ("user_lookup", True), ("signature_check", False))),
    ("RejectedInsufficientProofs",
     (("block_lookup", True), ("user_lookup", True), ("signature_check", True), ("proof_policy", False))),
    ("Trusted", (("block_lookup", True), ("user_lookup", True), ("signature_check", True), ("proof_policy", True))),
]


def test_criterion_2_use_case_1(report):
    rep = run_scenario("uc1_signature_verification", SimConfig())
    observed = []
    for sender in rep.summary["senders"]:
        outcomes = {(d.outcome.verdict.value, d.outcome.stages)
                    for n in rep.network.nodes for d in n.decision_log if d.peer == sender}
        observed.append(sorted(outcomes))
    expected = [[e] for e in EXPECTED_UC1]
    report("2 use case #1", observed == expected and rep.summary["verdicts"] == [e[0] for e in EXPECTED_UC1],
           f"verdicts {rep.summary['verdicts']}")


def test_criterion_3_use_case_3(report):
    rep = run_scenario("uc3_key_rotation", SimConfig())
    after = [d for n in rep.network.nodes for d in n.decision_log if d.tick >= rep.summary["rotation_tick"]]
    bad = sum(d.outcome.verdict is Verdict.REJECTED_BAD_SIGNATURE for d in after)
    report("3 use case #3", bool(after) and bad == len(after),
           f"{bad}/{len(after)} post-rotation verifications RejectedBadSignature")


def test_criterion_4_convergence(report):
    rep = run_scenario("convergence", SimConfig(node_count=10, rng_seed=42))
    s = rep.summary
    ok = (
        s["initial_lengths"] == list(range(1, 11))
        and s["converged_at_tick"] is not None
        and s["converged_at_tick"] <= 10
        and len(set(rep.network.tips())) == 1
        and s["adversary_adoptions"] == 0
        and s["adversary_chain_length"] > 10
    )
    report("4 longest-chain convergence", ok,
           f"converged at tick {s['converged_at_tick']}, forged length-{s['adversary_chain_length']} "
           f"chain adopted by {s['adversary_adoptions']} nodes")


def test_criterion_5_state_machine_ordering(report):
    wrong = []
    for combo in ALL_COMBINATIONS:
        out = verify_device(*scripted_world(*combo))
        if out.verdict is not expected_verdict(combo) or out.stages != expected_stages(combo):
            wrong.append((combo, out.verdict.value))
    report("5 state-machine ordering", len(ALL_COMBINATIONS) == 16 and not wrong,
           f"{16 - len(wrong)}/16 combinations report the earliest failing stage")


_GOLDEN_PROGRAM = r"""
import hashlib, json, sys
sys.path.insert(0, "tests")
from chainpki.crypto import canonical_bytes, hash_bytes
from chainpki.ledger import DeviceRecord, new_chain
from chainpki.simnet import SCENARIOS, SimConfig, run_scenario
from helpers import DEVICE, build_chain
rec = DeviceRecord.create("dev-01", "alice", DEVICE.public_key)
nfc = DeviceRecord.create("capteur-été", "josé", DEVICE.public_key)
from chainpki.verifier import register_device
from chainpki.crypto import generate_keypair
chain = register_device(new_chain(0), generate_keypair(bytes(32)).private_key, rec, 1546300800)
print(json.dumps({
    "record_bytes": canonical_bytes(rec).decode(),
    "record_sha256": hash_bytes(canonical_bytes(rec)),
    "nfc_sha256": hash_bytes(canonical_bytes(nfc)),
    "genesis": new_chain(0).genesis.hash,
    "block1": chain[1].hash,
    "chain50": [b.hash for b in build_chain(49)],
    "transcripts": {s: hashlib.sha256(run_scenario(s, SimConfig(rng_seed=42)).network.transcript()).hexdigest()
                    for s in SCENARIOS},
}))
"""


def _independent_run(hashseed: str) -> dict:
    env = {**os.environ, "PYTHONHASHSEED": hashseed}
    out = subprocess.run([sys.executable, "-c", _GOLDEN_PROGRAM], capture_output=True, text=True, env=env,
                         check=True, cwd=os.path.dirname(os.path.dirname(__file__)))
    return json.loads(out.stdout)


def test_criterion_6_determinism_and_golden_vectors(report):
    a, b = _independent_run("1"), _independent_run("987654")
    golden_ok = (
        a["record_bytes"].encode() == RECORD_BYTES
        and a["record_sha256"] == RECORD_SHA256
        and a["nfc_sha256"] == NFC_RECORD_SHA256
        and a["genesis"] == GENESIS_0_HASH
        and a["block1"] == BLOCK_1_HASH
    )
    in_process = {s: hashlib.sha256(run_scenario(s, SimConfig(rng_seed=42)).network.transcript()).hexdigest()
                  for s in a["transcripts"]}
    same = a == b and a["transcripts"] == in_process
    report("6 determinism and golden vectors", golden_ok and same,
           f"golden={'match' if golden_ok else 'MISMATCH'}, runs identical={same}")


VERIFIER_CASES = ["dev-alice", "dev-bob", "dev-carol", "dev-ghost", "dev-nobody"]


def _verifier_suite(provider, backing):
    """The same verifier checks, run against whichever adapter is passed in."""
    c = new_chain(T0)
    c = register_device(c, ALICE.private_key, record("dev-alice", "alice"), T0 + 1)
    c = register_device(c, BOB.private_key, record("dev-bob", "bob"), T0 + 2)
    c = register_device(c, MALLORY.private_key, record("dev-carol", "carol"), T0 + 3)
    c = register_device(c, ALICE.private_key, record("dev-ghost", "ghost"), T0 + 4)
    results = [verify_device(c, provider, TrustPolicy(), n) for n in VERIFIER_CASES]
    backing.replace_key("alice", keypair(99).public_key)
    results.append(verify_device(c, provider, TrustPolicy(), "dev-alice"))
    return results


EXPECTED_WIRE = [
    Verdict.TRUSTED,
    Verdict.REJECTED_INSUFFICIENT_PROOFS,
    Verdict.REJECTED_BAD_SIGNATURE,
    Verdict.REJECTED_UNKNOWN_USER,
    Verdict.REJECTED_NO_BLOCK,
    Verdict.REJECTED_BAD_SIGNATURE,
]


def test_criterion_7_wire_contract(report):
    memory = seeded_provider()
    in_memory = _verifier_suite(memory, memory)
    backing = seeded_provider()
    with serve_mock(backing) as server:
        over_http = _verifier_suite(KeybaseProvider(server.url, timeout_ms=2000), backing)
    ok = [o.verdict for o in in_memory] == EXPECTED_WIRE and in_memory == over_http
    report("7 wire contract", ok,
           f"memory={[o.verdict.value for o in in_memory]} http identical={in_memory == over_http}")
