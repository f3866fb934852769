"""``chainpki`` command line.

Exit codes (stable):
    0   success / Trusted
    1   usage or I/O error
    2   chain failed validation
    3   simulation scenario did not meet its expected outcomes
    10  RejectedNoBlock
    11  RejectedUnknownUser
    12  RejectedBadSignature
    13  RejectedInsufficientProofs
    20  identity provider transport/protocol failure
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence

from . import __version__
from .crypto import CryptoError, generate_keypair, read_private_key, read_public_key
from .crypto import write_private_key, write_public_key
from .identity import (
    IdentityError,
    MockProvider,
    ProviderConfig,
    TransportError,
    make_provider,
    serve_mock,
)
from .ledger import (
    BlockRejected,
    ChainFormatError,
    DeviceRecord,
    load_chain,
    new_chain,
    save_chain,
    validate_chain,
)
from .simnet import SCENARIOS, SimConfig, UnknownScenario, run_scenario
from .verifier import TrustPolicy, Verdict, register_device, verify_device

log = logging.getLogger("chainpki")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID_CHAIN = 2
EXIT_SCENARIO_FAILED = 3
EXIT_PROVIDER = 20
VERDICT_EXIT = {
    Verdict.TRUSTED: 0,
    Verdict.REJECTED_NO_BLOCK: 10,
    Verdict.REJECTED_UNKNOWN_USER: 11,
    Verdict.REJECTED_BAD_SIGNATURE: 12,
    Verdict.REJECTED_INSUFFICIENT_PROOFS: 13,
}

CONFIG_ENV = "CHAINPKI_CONFIG"
CONFIG_SECTION = "chainpki"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


@dataclass
class CliConfig:
    chain_path: str = "chain.json"
    provider: str = "mock"
    provider_url: str = "http://127.0.0.1:8765"
    timeout_ms: int = 5000
    fixtures: Optional[str] = None
    min_valid_proofs: int = 2
    required_proof_types: str = ""
    output: str = "text"

    @property
    def policy(self) -> TrustPolicy:
        return TrustPolicy.from_mapping(
            {"min_valid_proofs": self.min_valid_proofs, "required_proof_types": self.required_proof_types}
        )

    @property
    def provider_config(self) -> ProviderConfig:
        return ProviderConfig(self.provider, self.provider_url, self.timeout_ms, fixtures=self.fixtures)


def load_config(args: argparse.Namespace, environ: dict | None = None) -> CliConfig:
    """Defaults, then the ``CHAINPKI_CONFIG`` file, then command-line flags."""
    environ = os.environ if environ is None else environ
    config = CliConfig()
    path = getattr(args, "config", None) or environ.get(CONFIG_ENV)
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise CliError(f"config file {path} not readable")
        if parser.has_section(CONFIG_SECTION):
            section = parser[CONFIG_SECTION]
            for f in fields(CliConfig):
                if f.name in section:
                    raw = section[f.name]
                    setattr(config, f.name, int(raw) if f.type in ("int", int) else raw)
    for f in fields(CliConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(config, f.name, value)
    if config.provider not in ("mock", "keybase"):
        raise CliError(f"provider must be mock or keybase, not {config.provider!r}")
    if config.output not in ("text", "json"):
        raise CliError(f"output must be text or json, not {config.output!r}")
    return config


def _emit(config: CliConfig, doc: dict, text: str) -> None:
    if config.output == "json":
        print(json.dumps(doc, sort_keys=True))
    else:
        print(text)


@contextlib.contextmanager
def chain_lock(chain_path: Path) -> Iterator[None]:
    lock = chain_path.with_name(chain_path.name + ".lock")
    try:
        fd = os.open(lock, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    except FileExistsError:
        raise CliError(f"{lock} exists: another writer holds {chain_path}") from None
    except OSError as exc:
        raise CliError(f"cannot create lock {lock}: {exc}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


def _load_chain(path: str):
    try:
        return load_chain(path)
    except FileNotFoundError:
        raise CliError(f"chain file {path} not found") from None
    except (OSError, ChainFormatError) as exc:
        raise CliError(f"cannot load chain {path}: {exc}", EXIT_INVALID_CHAIN
                       if isinstance(exc, ChainFormatError) else EXIT_USAGE) from None


# -- commands ----------------------------------------------------------------


def cmd_keygen(args: argparse.Namespace) -> int:
    prefix = Path(args.out)
    pub, sec = prefix.with_name(prefix.name + ".pub"), prefix.with_name(prefix.name + ".key")
    existing = [p for p in (pub, sec) if p.exists()]
    if existing and not args.force:
        raise CliError(f"refusing to overwrite {', '.join(map(str, existing))} (use --force)")
    seed = None
    if args.seed is not None:
        try:
            seed = bytes.fromhex(args.seed)
        except ValueError:
            raise CliError("--seed must be hex") from None
    try:
        kp = generate_keypair(seed)
    except CryptoError as exc:
        raise CliError(str(exc)) from None
    try:
        for p in existing:
            p.unlink()
        write_public_key(pub, kp.public_key)
        write_private_key(sec, kp.private_key)
    except OSError as exc:
        raise CliError(f"cannot write key files: {exc}") from None
    print(f"{kp.public_key.scheme_id} {kp.key_fingerprint}  {pub}  {sec}")
    return EXIT_OK


def cmd_register(args: argparse.Namespace) -> int:
    config = load_config(args)
    chain_path = Path(config.chain_path)
    try:
        owner_key = read_private_key(args.key)
        device_key = read_public_key(args.device_key)
    except CryptoError as exc:
        raise CliError(str(exc)) from None
    timestamp = args.timestamp if args.timestamp is not None else int(time.time())
    with chain_lock(chain_path):
        if chain_path.exists():
            chain = _load_chain(str(chain_path))
        elif args.init:
            chain = new_chain(args.genesis_timestamp)
        else:
            raise CliError(f"chain file {chain_path} not found (use --init to create it)")
        try:
            record = DeviceRecord.create(args.node_id, args.owner, device_key)
            chain = register_device(chain, owner_key, record, timestamp)
        except BlockRejected as exc:
            raise CliError(f"registration rejected: {exc}") from None
        except ValueError as exc:
            raise CliError(f"bad record: {exc}") from None
        try:
            save_chain(chain, chain_path)
        except OSError as exc:
            raise CliError(f"cannot write {chain_path}: {exc}") from None
    tip = chain.tip
    _emit(config, {"index": tip.index, "hash": str(tip.hash), "node_id": record.node_id},
          f"registered {record.node_id} as block {tip.index} ({tip.hash[:16]})")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    config = load_config(args)
    chain = _load_chain(config.chain_path)
    result = validate_chain(chain)
    if not result:
        raise CliError(f"chain invalid: {result}", EXIT_INVALID_CHAIN)
    try:
        provider = make_provider(config.provider_config)
        outcome = verify_device(chain, provider, config.policy, args.node_id)
    except TransportError as exc:
        print(f"chainpki: identity provider transport failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except IdentityError as exc:
        print(f"chainpki: identity provider protocol failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot set up provider: {exc}") from None
    lines = [f"{args.node_id}: {outcome.verdict.value}"]
    for s in outcome.trace:
        lines.append(f"  {s.stage.value:<16} {'ok ' if s.ok else 'FAIL'} {s.subject}  {s.detail}")
    _emit(config, {"node_id": args.node_id, **outcome.to_dict()}, "\n".join(lines))
    return VERDICT_EXIT[outcome.verdict]


def cmd_chain(args: argparse.Namespace) -> int:
    config = load_config(args)
    chain = _load_chain(config.chain_path)
    if args.action == "validate":
        result = validate_chain(chain)
        if result:
            _emit(config, {"valid": True, "length": len(chain)}, f"valid: {len(chain)} blocks")
            return EXIT_OK
        doc = {"valid": False, "index": result.index, "cause": result.cause.value, "detail": result.detail}
        _emit(config, doc, f"invalid: block {result.index}: {result.cause.value}: {result.detail}")
        return EXIT_INVALID_CHAIN
    rows = []
    for block in chain:
        data = block.data
        rows.append({
            "index": block.index,
            "node_id": data.node_id if data else None,
            "owner": data.owner_username if data else None,
            "timestamp": block.meta.timestamp,
            "hash": str(block.hash),
        })
    text = "\n".join(
        f"{r['index']:>5}  {r['node_id'] or '<genesis>':<24} {r['owner'] or '-':<20} {r['hash'][:16]}"
        for r in rows
    )
    _emit(config, {"blocks": rows}, text)
    return EXIT_OK


def cmd_mock_serve(args: argparse.Namespace) -> int:
    try:
        provider = MockProvider.from_fixtures(args.fixtures)
    except (OSError, ValueError, KeyError, TypeError, CryptoError) as exc:
        raise CliError(f"cannot load fixtures {args.fixtures}: {exc}") from None
    host, _, port = args.bind.rpartition(":")
    try:
        server = serve_mock(provider, host or "127.0.0.1", int(port), background=False)
    except (ValueError, TransportError) as exc:
        raise CliError(str(exc)) from None
    print(f"serving {len(provider.usernames())} users on {server.url}", flush=True)
    try:
        server.httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return EXIT_OK


def cmd_sim(args: argparse.Namespace) -> int:
    config = load_config(args)
    sim = SimConfig(
        node_count=args.nodes, gossip_rounds_per_tick=args.gossip_rounds,
        rng_seed=args.seed, scenario=args.scenario, max_ticks=args.max_ticks,
    )
    try:
        report = run_scenario(args.scenario, sim)
    except UnknownScenario as exc:
        raise CliError(f"{exc}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    doc = report.to_dict()
    out = Path(args.report or f"report-{args.scenario}.json")
    try:
        out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write report: {exc}") from None
    lines = [f"{report.scenario}: {'PASS' if report.passed else 'FAIL'} after {report.ticks} ticks -> {out}"]
    lines += [f"  [{'x' if c.passed else ' '}] {c.name}: {c.detail}" for c in report.checks]
    _emit(config, {"report": str(out), "passed": report.passed, "ticks": report.ticks}, "\n".join(lines))
    return EXIT_OK if report.passed else EXIT_SCENARIO_FAILED


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, chain: bool = True) -> None:
    p.add_argument("--config", help=f"INI config file (section [{CONFIG_SECTION}]); default ${CONFIG_ENV}")
    p.add_argument("--output", choices=("text", "json"), default=None)
    if chain:
        p.add_argument("--chain", dest="chain_path", default=None, help="chain file (default chain.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chainpki", description="Blockchain PKI for IoT device ownership.")
    parser.add_argument("--version", action="version", version=f"chainpki {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keygen", help="generate a key pair (<out>.pub, <out>.key)")
    p.add_argument("--out", required=True, help="path prefix for the key files")
    p.add_argument("--seed", help="32-byte seed as 64 hex chars (reproducible keys)")
    p.add_argument("--force", action="store_true", help="overwrite existing files")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("register", help="sign a device record as its owner and append it")
    _common(p)
    p.add_argument("--key", required=True, help="owner private key file")
    p.add_argument("--device-key", required=True, help="device public key file")
    p.add_argument("--node-id", required=True)
    p.add_argument("--owner", required=True, help="owner's identity-provider username")
    p.add_argument("--timestamp", type=int, help="block time, seconds since epoch (default now)")
    p.add_argument("--init", action="store_true", help="create the chain if the file is missing")
    p.add_argument("--genesis-timestamp", type=int, default=0)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("verify", help="run ownership verification for a node")
    _common(p)
    p.add_argument("--node-id", required=True)
    p.add_argument("--provider", choices=("mock", "keybase"), default=None)
    p.add_argument("--provider-url", default=None)
    p.add_argument("--timeout-ms", type=int, default=None)
    p.add_argument("--fixtures", default=None, help="use an in-memory mock loaded from this file")
    p.add_argument("--min-valid-proofs", type=int, default=None)
    p.add_argument("--required-proof-types", default=None, help="comma-separated, e.g. github,twitter")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("chain", help="inspect or validate a chain file")
    p.add_argument("action", choices=("inspect", "validate"))
    _common(p)
    p.set_defaults(func=cmd_chain)

    p = sub.add_parser("mock-serve", help="serve Keybase-style lookups from a fixtures file")
    p.add_argument("--bind", default="127.0.0.1:8765", help="host:port")
    p.add_argument("--fixtures", required=True)
    p.set_defaults(func=cmd_mock_serve)

    p = sub.add_parser("sim", help="run a simulated-network scenario")
    _common(p, chain=False)
    p.add_argument("scenario", help=", ".join(SCENARIOS))
    p.add_argument("--nodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--gossip-rounds", type=int, default=1)
    p.add_argument("--max-ticks", type=int, default=50)
    p.add_argument("--report", help="report path (default report-<scenario>.json)")
    p.set_defaults(func=cmd_sim)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"chainpki: {exc}", file=sys.stderr)
        if args.command == "sim" and "unknown scenario" in str(exc):
            parser.print_usage(sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
