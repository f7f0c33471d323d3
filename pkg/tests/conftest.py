from __future__ import annotations

import pytest

from ctxsec.crypto import derive_keypair
from ctxsec.harness.scenario import builtin_path, load_scenario
from ctxsec.trust import TrustLedger

_acceptance: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): exit criterion for the primary component")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is not None and call.when == "call":
        outcome = "PASS" if call.excinfo is None else "FAIL"
        _acceptance.append((marker.args[0], outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        terminalreporter.write_line(f"{outcome}  {name}")


@pytest.fixture
def trust():
    return TrustLedger()


@pytest.fixture
def keys():
    return {name: derive_keypair(7, name) for name in ("alice", "bob", "carol", "dev-a", "dev-b", "dev-c")}


@pytest.fixture
def registered(trust, keys):
    """Ledger with owners alice/bob and two devices owned by alice."""
    trust.register_owner("alice", keys["alice"].public_key)
    trust.register_owner("bob", keys["bob"].public_key)
    for d in ("dev-a", "dev-b"):
        trust.register_device("alice", keys[d].public_key, d, keys[d].agreement_public_key)
    return trust


@pytest.fixture(scope="session")
def bob_scenario():
    return load_scenario(builtin_path("bob"))


@pytest.fixture
def mech(registered, keys):
    """Mechanisms over the registered ledger, holding dev-a's agreement key."""
    from ctxsec.mechanisms import Mechanisms

    m = Mechanisms(registered, seed=11)
    m.comm.add_agreement_key("dev-a", keys["dev-a"].agreement)
    return m
