"""Identity-provider boundary: Keybase-style user lookup.

Two providers share one contract. :class:`MockProvider` keeps profiles in
memory; :class:`KeybaseProvider` speaks the ``user/lookup`` HTTP endpoint,
either the real one or the local server started by :func:`serve_mock`.
"Not found" is ``None``; failures to get an answer are exceptions.
"""

from __future__ import annotations

import enum
import http.client
import json
import logging
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Protocol

from .crypto import CryptoError, PublicKey

log = logging.getLogger(__name__)

LOOKUP_PATH = "/_/api/1.0/user/lookup.json"
KEYBASE_URL = "https://keybase.io"

KNOWN_PROOF_TYPES = frozenset(
    {"twitter", "github", "reddit", "facebook", "hackernews", "dns", "website"}
)

# Keybase proof states: 1 ok; 2 temp failure, 4 looking, 6 posted, 11 unchecked
# are in flight; everything else (including numbers we don't know) is broken.
_PENDING_STATES = frozenset({2, 4, 6, 11})
_KEYBASE_NOT_FOUND = 205


class IdentityError(Exception):
    """The provider could not give a usable answer (retryable)."""


class TransportError(IdentityError):
    """Network, timeout or server-side failure."""


class ProtocolError(IdentityError):
    """The provider answered, but not in the expected shape."""


class ProofState(enum.Enum):
    VALID = "valid"
    PENDING = "pending"
    BROKEN = "broken"

    @classmethod
    def from_wire(cls, value: Any) -> "ProofState":
        if isinstance(value, bool):
            return cls.BROKEN
        if isinstance(value, int):
            if value == 1:
                return cls.VALID
            return cls.PENDING if value in _PENDING_STATES else cls.BROKEN
        if isinstance(value, str):
            try:
                return cls(value.lower())
            except ValueError:
                return cls.BROKEN
        return cls.BROKEN

    def to_wire(self) -> int:
        return {ProofState.VALID: 1, ProofState.PENDING: 4, ProofState.BROKEN: 3}[self]


def normalize_proof_type(name: str) -> str:
    """Known platform names pass through; anything else becomes ``other:<name>``."""
    name = name.strip().lower()
    if name in KNOWN_PROOF_TYPES or name.startswith("other:"):
        return name
    if name in ("generic_web_site", "https", "http", "web"):
        return "website"
    return f"other:{name}"


@dataclass(frozen=True)
class Proof:
    proof_type: str
    handle: str
    state: ProofState = ProofState.VALID

    def __post_init__(self) -> None:
        object.__setattr__(self, "proof_type", normalize_proof_type(self.proof_type))
        if not isinstance(self.state, ProofState):
            object.__setattr__(self, "state", ProofState.from_wire(self.state))


@dataclass(frozen=True)
class IdentityProfile:
    username: str
    public_key: str
    proofs: tuple[Proof, ...] = ()

    def __post_init__(self) -> None:
        if not self.username:
            raise ValueError("username must be non-empty")
        PublicKey.from_text(self.public_key)
        object.__setattr__(self, "proofs", tuple(self.proofs))

    @property
    def key(self) -> PublicKey:
        return PublicKey.from_text(self.public_key)

    def to_dict(self) -> dict:
        return {
            "username": self.username,
            "public_key": self.public_key,
            "proofs": [
                {"proof_type": p.proof_type, "handle": p.handle, "state": p.state.value}
                for p in self.proofs
            ],
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "IdentityProfile":
        proofs = tuple(
            Proof(p["proof_type"], p["handle"], ProofState.from_wire(p.get("state", "valid")))
            for p in obj.get("proofs", ())
        )
        return cls(obj["username"], obj["public_key"], proofs)


class IdentityProvider(Protocol):
    def lookup(self, username: str) -> Optional[IdentityProfile]: ...


def lookup_user(provider: IdentityProvider, username: str) -> Optional[IdentityProfile]:
    if not username:
        raise ValueError("username must be non-empty")
    return provider.lookup(username)


def count_valid_proofs(profile: IdentityProfile) -> int:
    return sum(1 for p in profile.proofs if p.state is ProofState.VALID)


class DuplicateUser(Exception):
    pass


class MockProvider:
    """In-memory provider. Registration also models key replacement."""

    def __init__(self, profiles: Mapping[str, IdentityProfile] | None = None):
        self._profiles: dict[str, IdentityProfile] = dict(profiles or {})
        self._lock = threading.Lock()

    def lookup(self, username: str) -> Optional[IdentityProfile]:
        return self._profiles.get(username)

    def register(self, profile: IdentityProfile, replace: bool = False) -> None:
        with self._lock:
            if profile.username in self._profiles and not replace:
                raise DuplicateUser(f"user {profile.username!r} already registered")
            # copy-on-write so readers never see a dict mid-update
            profiles = dict(self._profiles)
            profiles[profile.username] = profile
            self._profiles = profiles

    def replace_key(self, username: str, public_key: PublicKey | str) -> IdentityProfile:
        """Swap a user's key, keeping their proofs (a key rotation)."""
        current = self._profiles.get(username)
        if current is None:
            raise KeyError(username)
        text = public_key.to_text() if isinstance(public_key, PublicKey) else public_key
        updated = IdentityProfile(username, text, current.proofs)
        self.register(updated, replace=True)
        return updated

    def usernames(self) -> list[str]:
        return sorted(self._profiles)

    @classmethod
    def from_fixtures(cls, path: str | Path) -> "MockProvider":
        """Load ``{"users": [profile, ...]}``."""
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        provider = cls()
        for entry in doc["users"]:
            provider.register(IdentityProfile.from_dict(entry))
        return provider

    def to_fixtures(self) -> dict:
        return {"users": [self._profiles[u].to_dict() for u in self.usernames()]}


def mock_register(provider: MockProvider, profile: IdentityProfile, replace: bool = False) -> None:
    provider.register(profile, replace=replace)


# -- Keybase wire format -----------------------------------------------------


def profile_to_keybase(profile: IdentityProfile) -> dict:
    """The subset of a Keybase ``them`` entry this package reads."""
    return {
        "basics": {"username": profile.username},
        "public_keys": {"primary": {"bundle": profile.public_key}},
        "proofs_summary": {
            "all": [
                {"proof_type": p.proof_type, "nametag": p.handle, "state": p.state.to_wire()}
                for p in profile.proofs
            ]
        },
    }


def profile_from_keybase(entry: Mapping[str, Any]) -> IdentityProfile:
    try:
        username = entry["basics"]["username"]
        bundle = entry["public_keys"]["primary"]["bundle"]
        proofs = tuple(
            Proof(p["proof_type"], p.get("nametag", ""), ProofState.from_wire(p.get("state")))
            for p in entry.get("proofs_summary", {}).get("all", [])
        )
        return IdentityProfile(username, bundle, proofs)
    except (KeyError, TypeError, AttributeError, ValueError, CryptoError) as exc:
        raise ProtocolError(f"unusable profile entry: {exc!r}") from None


def lookup_response(profile: IdentityProfile | None) -> dict:
    return {"status": {"code": 0, "name": "OK"}, "them": [] if profile is None else [profile_to_keybase(profile)]}


def parse_lookup_response(body: bytes, username: str) -> Optional[IdentityProfile]:
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"lookup body is not JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("status"), dict):
        raise ProtocolError("lookup body lacks a status object")
    code = doc["status"].get("code")
    if code == _KEYBASE_NOT_FOUND:
        return None
    if code != 0:
        raise ProtocolError(f"lookup failed with status {doc['status']!r}")
    them = doc.get("them")
    if not isinstance(them, list):
        raise ProtocolError("lookup body lacks a 'them' list")
    entries = [e for e in them if e is not None]
    if not entries:
        return None
    profile = profile_from_keybase(entries[0])
    if profile.username.lower() != username.lower():
        raise ProtocolError(f"asked for {username!r}, got {profile.username!r}")
    return profile


class KeybaseProvider:
    """HTTP adapter for ``user/lookup``; works against keybase.io or the mock server."""

    def __init__(self, base_url: str = KEYBASE_URL, timeout_ms: int = 5000):
        self.base_url = base_url.rstrip("/")
        self.timeout_ms = timeout_ms

    def lookup(self, username: str) -> Optional[IdentityProfile]:
        query = urllib.parse.urlencode({"usernames": username})
        url = f"{self.base_url}{LOOKUP_PATH}?{query}"
        try:
            with urllib.request.urlopen(url, timeout=self.timeout_ms / 1000) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code >= 500:
                raise TransportError(f"{url}: HTTP {exc.code}") from None
            # Keybase reports lookup misses in the body; read it if there is one
            body = exc.read()
            if not body:
                raise ProtocolError(f"{url}: HTTP {exc.code}") from None
        except http.client.IncompleteRead as exc:
            raise ProtocolError(f"{url}: truncated body ({len(exc.partial)} bytes)") from None
        except (urllib.error.URLError, http.client.HTTPException, OSError, ValueError) as exc:
            raise TransportError(f"{url}: {exc}") from None
        return parse_lookup_response(body, username)


class CachedProvider:
    """TTL cache in front of another provider. ``ttl <= 0`` disables caching."""

    def __init__(self, inner: IdentityProvider, ttl: float = 60.0, clock: Callable[[], float] = time.monotonic):
        self.inner = inner
        self.ttl = ttl
        self.clock = clock
        self._entries: dict[str, tuple[float, Optional[IdentityProfile]]] = {}
        self._lock = threading.Lock()

    def lookup(self, username: str) -> Optional[IdentityProfile]:
        if self.ttl <= 0:
            return self.inner.lookup(username)
        now = self.clock()
        with self._lock:
            hit = self._entries.get(username)
        if hit is not None and now - hit[0] < self.ttl:
            return hit[1]
        profile = self.inner.lookup(username)
        with self._lock:
            self._entries[username] = (now, profile)
        return profile

    def invalidate(self, username: str | None = None) -> None:
        with self._lock:
            if username is None:
                self._entries.clear()
            else:
                self._entries.pop(username, None)


@dataclass
class ProviderConfig:
    provider: str = "mock"
    base_url: str = "http://127.0.0.1:8765"
    timeout_ms: int = 5000
    cache_ttl: float = 60.0
    fixtures: Optional[str] = None


def make_provider(config: ProviderConfig) -> IdentityProvider:
    if config.provider == "keybase":
        inner: IdentityProvider = KeybaseProvider(config.base_url or KEYBASE_URL, config.timeout_ms)
    elif config.provider == "mock":
        if config.fixtures:
            inner = MockProvider.from_fixtures(config.fixtures)
        else:
            inner = KeybaseProvider(config.base_url, config.timeout_ms)
    else:
        raise ValueError(f"unknown provider {config.provider!r}")
    return CachedProvider(inner, config.cache_ttl)


# -- mock HTTP server --------------------------------------------------------


class _LookupHandler(BaseHTTPRequestHandler):
    server: "_MockHTTPServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, format: str, *args: Any) -> None:
        log.debug("mock-serve: " + format, *args)

    def _send(self, status: int, body: bytes) -> None:
        fault = self.server.fault
        if fault == "truncate":
            body = body[: len(body) // 2]
        self.send_response(500 if fault == "error" else status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:
        url = urllib.parse.urlsplit(self.path)
        if url.path != LOOKUP_PATH:
            self._send(404, b'{"status":{"code":404,"name":"NOT_FOUND"}}')
            return
        names = urllib.parse.parse_qs(url.query).get("usernames", [])
        if len(names) != 1 or not names[0]:
            self._send(400, b'{"status":{"code":100,"name":"INPUT_ERROR","desc":"missing usernames"}}')
            return
        username = names[0].split(",")[0]
        doc = lookup_response(self.server.provider.lookup(username))
        self._send(200, json.dumps(doc, sort_keys=True).encode("utf-8"))


class _MockHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], provider: IdentityProvider):
        super().__init__(address, _LookupHandler)
        self.provider = provider
        self.fault: Optional[str] = None


@dataclass
class MockServer:
    """Handle for a running mock lookup server."""

    httpd: _MockHTTPServer
    thread: Optional[threading.Thread] = None
    _closed: bool = field(default=False, repr=False)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def set_fault(self, fault: Optional[str]) -> None:
        """Inject a failure: ``"truncate"`` (half a body) or ``"error"`` (HTTP 500)."""
        if fault not in (None, "truncate", "error"):
            raise ValueError(f"unknown fault {fault!r}")
        self.httpd.fault = fault

    def shutdown(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self.thread is not None:
            self.httpd.shutdown()
            self.thread.join()
        self.httpd.server_close()

    def __enter__(self) -> "MockServer":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.shutdown()


def serve_mock(provider: IdentityProvider, host: str = "127.0.0.1", port: int = 0, background: bool = True) -> MockServer:
    """Start serving lookups. ``port=0`` picks a free port; see ``MockServer.url``."""
    try:
        httpd = _MockHTTPServer((host, port), provider)
    except OSError as exc:
        raise TransportError(f"cannot bind {host}:{port}: {exc}") from None
    server = MockServer(httpd)
    if background:
        server.thread = threading.Thread(target=httpd.serve_forever, name="chainpki-mock", daemon=True)
        server.thread.start()
    return server
