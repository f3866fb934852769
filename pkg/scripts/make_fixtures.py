#!/usr/bin/env python3
"""Write a mock identity-provider fixtures file plus matching owner keys.

Produces <dir>/fixtures.json and <dir>/<user>.key / .pub for alice (3 valid
proofs), bob (1 valid, 1 broken) and carol (2 valid), all from fixed seeds.
"""

import argparse
import hashlib
import json
from pathlib import Path

from chainpki.crypto import generate_keypair, write_private_key, write_public_key
from chainpki.identity import IdentityProfile, MockProvider, Proof, ProofState

USERS = {
    "alice": [("twitter", ProofState.VALID), ("github", ProofState.VALID), ("reddit", ProofState.VALID)],
    "bob": [("github", ProofState.VALID), ("twitter", ProofState.BROKEN)],
    "carol": [("twitter", ProofState.VALID), ("hackernews", ProofState.VALID)],
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("dir", nargs="?", default="demo")
    args = ap.parse_args()
    root = Path(args.dir)
    root.mkdir(parents=True, exist_ok=True)
    provider = MockProvider()
    for user, proofs in USERS.items():
        kp = generate_keypair(hashlib.sha256(f"demo/{user}".encode()).digest())
        for suffix in (".pub", ".key"):
            (root / f"{user}{suffix}").unlink(missing_ok=True)
        write_public_key(root / f"{user}.pub", kp.public_key)
        write_private_key(root / f"{user}.key", kp.private_key)
        provider.register(IdentityProfile(user, kp.public_key.to_text(),
                                          tuple(Proof(t, f"{user}_{t}", s) for t, s in proofs)))
    (root / "fixtures.json").write_text(json.dumps(provider.to_fixtures(), indent=2) + "\n")
    print(f"wrote {root / 'fixtures.json'} and keys for {', '.join(USERS)}")


if __name__ == "__main__":
    main()
