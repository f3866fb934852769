import pytest

from chainpki.identity import KeybaseProvider, MockProvider, serve_mock

from helpers import seeded_provider


@pytest.fixture
def mock_provider() -> MockProvider:
    return seeded_provider()


@pytest.fixture
def mock_server(mock_provider):
    server = serve_mock(mock_provider)
    yield server
    server.shutdown()


@pytest.fixture(params=["memory", "http"])
def provider(request, mock_provider):
    """The same seeded state behind either adapter; ``.backing`` mutates it."""
    if request.param == "memory":
        mock_provider.backing = mock_provider
        yield mock_provider
        return
    server = serve_mock(mock_provider)
    adapter = KeybaseProvider(server.url, timeout_ms=2000)
    adapter.backing = mock_provider
    yield adapter
    server.shutdown()


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whatever the capture mode."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_criterion_" in getattr(rep, "nodeid", "") and rep.when == "call":
                name = rep.nodeid.split("::")[-1].removeprefix("test_criterion_")
                detail = dict(rep.user_properties).get("detail", "")
                lines.append(f"{'PASS' if outcome == 'passed' else 'FAIL'}  criterion {name}: {detail}")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].split("_")[0])):
            terminalreporter.write_line(line)
