import json
import socket
import urllib.error
import urllib.request

import pytest
from hypothesis import given, strategies as st

from chainpki.identity import (
    LOOKUP_PATH,
    CachedProvider,
    DuplicateUser,
    IdentityProfile,
    KeybaseProvider,
    MockProvider,
    Proof,
    ProofState,
    ProtocolError,
    ProviderConfig,
    TransportError,
    count_valid_proofs,
    lookup_user,
    make_provider,
    mock_register,
    parse_lookup_response,
    profile_from_keybase,
    profile_to_keybase,
    serve_mock,
)

from helpers import ALICE, BOB, B, P, V, keypair, profile


def get(url):
    try:
        with urllib.request.urlopen(url, timeout=2) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestProofs:
    def test_count_mixed(self):
        assert count_valid_proofs(profile(ALICE, "a", [V, B, V])) == 2

    def test_count_empty(self):
        assert count_valid_proofs(profile(ALICE, "a", [])) == 0

    def test_count_pending(self):
        assert count_valid_proofs(profile(ALICE, "a", [P, P, P])) == 0

    @pytest.mark.parametrize(
        "wire,state",
        [(1, V), (4, P), (6, P), (2, P), (3, B), (7, B), (99, B), (-1, B), ("valid", V), ("nonsense", B), (None, B), (True, B)],
    )
    def test_state_mapping(self, wire, state):
        assert ProofState.from_wire(wire) is state

    def test_unknown_proof_type(self):
        assert Proof("Mastodon", "x").proof_type == "other:mastodon"
        assert Proof("generic_web_site", "x").proof_type == "website"
        assert Proof("GitHub", "x").proof_type == "github"


class TestMockProvider:
    def test_seeded_lookup(self, mock_provider):
        alice = lookup_user(mock_provider, "alice")
        assert alice.key == ALICE.public_key
        assert count_valid_proofs(alice) == 3

    def test_unknown(self, mock_provider):
        assert lookup_user(mock_provider, "zed") is None

    def test_empty_username(self, mock_provider):
        with pytest.raises(ValueError):
            lookup_user(mock_provider, "")

    def test_register_and_duplicate(self):
        provider = MockProvider()
        mock_register(provider, profile(BOB, "bob", [V]))
        assert provider.lookup("bob").key == BOB.public_key
        with pytest.raises(DuplicateUser):
            mock_register(provider, profile(BOB, "bob", [V]))

    def test_replace_key(self):
        provider = MockProvider()
        mock_register(provider, profile(BOB, "bob", [V]))
        fresh = keypair(77)
        mock_register(provider, profile(fresh, "bob", [V]), replace=True)
        assert provider.lookup("bob").key == fresh.public_key
        provider.replace_key("bob", BOB.public_key)
        assert provider.lookup("bob").key == BOB.public_key
        assert count_valid_proofs(provider.lookup("bob")) == 1

    def test_fixtures_round_trip(self, tmp_path, mock_provider):
        path = tmp_path / "fx.json"
        path.write_text(json.dumps(mock_provider.to_fixtures()))
        loaded = MockProvider.from_fixtures(path)
        assert loaded.usernames() == ["alice", "bob", "carol"]
        assert loaded.lookup("bob") == mock_provider.lookup("bob")

    def test_profile_requires_parseable_key(self):
        with pytest.raises(Exception):
            IdentityProfile("x", "-----BEGIN PGP PUBLIC KEY BLOCK-----")


class TestWireFormat:
    def test_round_trip(self, mock_provider):
        alice = mock_provider.lookup("alice")
        assert profile_from_keybase(profile_to_keybase(alice)) == alice

    def test_shape(self, mock_provider):
        entry = profile_to_keybase(mock_provider.lookup("bob"))
        assert entry["basics"]["username"] == "bob"
        assert entry["public_keys"]["primary"]["bundle"] == BOB.public_key.to_text()
        assert entry["proofs_summary"]["all"][0] == {"proof_type": "twitter", "nametag": "bob@twitter", "state": 1}

    @pytest.mark.parametrize(
        "body",
        [b'{"status":{"code":0},"them":[]}', b'{"status":{"code":0},"them":[null]}', b'{"status":{"code":205,"name":"NOT_FOUND"}}'],
    )
    def test_not_found_spellings(self, body):
        assert parse_lookup_response(body, "zed") is None

    @pytest.mark.parametrize(
        "body",
        [b"", b"{", b"[]", b'{"them":[]}', b'{"status":{"code":0}}', b'{"status":{"code":100}}',
         b'{"status":{"code":0},"them":[{"basics":{}}]}'],
    )
    def test_protocol_errors(self, body):
        with pytest.raises(ProtocolError):
            parse_lookup_response(body, "alice")

    def test_mismatched_username(self, mock_provider):
        body = json.dumps({"status": {"code": 0}, "them": [profile_to_keybase(mock_provider.lookup("bob"))]})
        with pytest.raises(ProtocolError):
            parse_lookup_response(body.encode(), "alice")

    @given(st.binary(max_size=64))
    def test_garbage_is_protocol_error_or_absent(self, body):
        try:
            parse_lookup_response(body, "alice")
        except ProtocolError:
            pass


class TestMockServer:
    def test_seeded_user(self, mock_server):
        status, body = get(f"{mock_server.url}{LOOKUP_PATH}?usernames=alice")
        doc = json.loads(body)
        assert status == 200
        assert doc["status"]["code"] == 0
        assert doc["them"][0]["basics"]["username"] == "alice"

    def test_unknown_user_is_empty_them(self, mock_server):
        status, body = get(f"{mock_server.url}{LOOKUP_PATH}?usernames=zed")
        assert status == 200
        assert json.loads(body)["them"] == []

    def test_missing_usernames_is_400(self, mock_server):
        status, _ = get(f"{mock_server.url}{LOOKUP_PATH}")
        assert status == 400

    def test_adapter_lookup(self, mock_server):
        adapter = KeybaseProvider(mock_server.url)
        assert adapter.lookup("alice").key == ALICE.public_key
        assert adapter.lookup("zed") is None

    def test_truncated_body_is_protocol_error(self, mock_server):
        mock_server.set_fault("truncate")
        with pytest.raises(ProtocolError):
            KeybaseProvider(mock_server.url).lookup("alice")

    def test_truncated_unknown_user_is_not_absent(self, mock_server):
        mock_server.set_fault("truncate")
        with pytest.raises(ProtocolError):
            KeybaseProvider(mock_server.url).lookup("zed")

    def test_server_error_is_transport_error(self, mock_server):
        mock_server.set_fault("error")
        with pytest.raises(TransportError):
            KeybaseProvider(mock_server.url).lookup("alice")

    def test_connection_refused_is_transport_error(self):
        with pytest.raises(TransportError):
            KeybaseProvider(f"http://127.0.0.1:{free_port()}", timeout_ms=500).lookup("alice")

    def test_timeout_is_transport_error(self):
        with socket.socket() as listener:
            listener.bind(("127.0.0.1", 0))
            listener.listen(1)  # accepts, never answers
            port = listener.getsockname()[1]
            with pytest.raises(TransportError):
                KeybaseProvider(f"http://127.0.0.1:{port}", timeout_ms=200).lookup("alice")

    def test_shutdown_idempotent(self, mock_provider):
        server = serve_mock(mock_provider)
        server.shutdown()
        server.shutdown()

    def test_bind_failure(self, mock_server):
        port = int(mock_server.url.rsplit(":", 1)[1])
        with pytest.raises(TransportError):
            serve_mock(MockProvider(), "127.0.0.1", port)


class CountingProvider:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def lookup(self, username):
        self.calls += 1
        return self.inner.lookup(username)


class TestCache:
    def test_ttl(self, mock_provider):
        now = [0.0]
        inner = CountingProvider(mock_provider)
        cached = CachedProvider(inner, ttl=60, clock=lambda: now[0])
        cached.lookup("alice")
        cached.lookup("alice")
        cached.lookup("zed")
        cached.lookup("zed")
        assert inner.calls == 2
        now[0] = 61
        cached.lookup("alice")
        assert inner.calls == 3

    def test_bypass(self, mock_provider):
        inner = CountingProvider(mock_provider)
        cached = CachedProvider(inner, ttl=0)
        cached.lookup("alice")
        cached.lookup("alice")
        assert inner.calls == 2

    def test_invalidate(self, mock_provider):
        inner = CountingProvider(mock_provider)
        cached = CachedProvider(inner)
        cached.lookup("alice")
        cached.invalidate("alice")
        cached.lookup("alice")
        assert inner.calls == 2

    def test_errors_not_cached(self):
        class Flaky:
            calls = 0

            def lookup(self, username):
                self.calls += 1
                if self.calls == 1:
                    raise TransportError("down")
                return None

        flaky = Flaky()
        cached = CachedProvider(flaky)
        with pytest.raises(TransportError):
            cached.lookup("alice")
        assert cached.lookup("alice") is None


class TestMakeProvider:
    def test_mock_fixtures(self, tmp_path, mock_provider):
        path = tmp_path / "fx.json"
        path.write_text(json.dumps(mock_provider.to_fixtures()))
        provider = make_provider(ProviderConfig("mock", fixtures=str(path)))
        assert provider.lookup("alice").key == ALICE.public_key

    def test_mock_url(self, mock_server):
        provider = make_provider(ProviderConfig("mock", mock_server.url))
        assert provider.lookup("bob").key == BOB.public_key

    def test_keybase_default_url(self):
        provider = make_provider(ProviderConfig("keybase", ""))
        assert provider.inner.base_url == "https://keybase.io"

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_provider(ProviderConfig("ldap"))
