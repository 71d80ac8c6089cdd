import socket
import time

import pytest

from sslsentry.chains import ChainComparison, ComparisonReason
from sslsentry.enforcer import (
    Action,
    DirectFetchError,
    EnforcementResult,
    OraclePinError,
    OracleUnreachableError,
)
from sslsentry.simlab import Behavior, Lab, Placement, UPSTREAM_HOST


@pytest.fixture(scope="module")
def clean_lab():
    with Lab(capture_oracle_requests=True) as lab:
        yield lab


@pytest.fixture(scope="module")
def mitm_upstream_lab():
    with Lab(placement=Placement.UPSTREAM_PATH) as lab:
        yield lab


@pytest.fixture(scope="module")
def mitm_oracle_lab():
    with Lab(placement=Placement.ORACLE_PATH) as lab:
        yield lab


def test_fetch_direct_returns_genuine_chain(clean_lab):
    chain = clean_lab.enforcer.fetch_chain_direct(UPSTREAM_HOST, 443)
    assert chain.raw() == clean_lab.upstream_identity.chain_ders()


def test_fetch_direct_captures_attacker_chain(mitm_upstream_lab):
    chain = mitm_upstream_lab.enforcer.fetch_chain_direct(UPSTREAM_HOST, 443)
    # captured, not rejected: the attacker's forged chain comes back as-is
    assert chain.raw() != mitm_upstream_lab.upstream_identity.chain_ders()
    assert "sslsentry root CA" in chain.entries[-1].issuer


def test_fetch_direct_closed_port(clean_lab):
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    with pytest.raises(DirectFetchError):
        clean_lab.enforcer.fetch_chain_direct("127.0.0.1", port)


def test_oracle_fetch_identity(clean_lab):
    chain = clean_lab.enforcer.fetch_chain_via_oracle(f"https://{UPSTREAM_HOST}/")
    assert chain.raw() == clean_lab.upstream_identity.chain_ders()


def test_oracle_link_mitm_is_pin_failure(mitm_oracle_lab):
    with pytest.raises(OraclePinError):
        mitm_oracle_lab.enforcer.fetch_chain_via_oracle(f"https://{UPSTREAM_HOST}/")


def test_oracle_down_is_unreachable(clean_lab):
    enforcer = clean_lab.enforcer
    original_port = enforcer.oracle_port
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    dead = probe.getsockname()[1]
    probe.close()
    enforcer.oracle_port = dead
    enforcer_host = enforcer.oracle_host
    enforcer.oracle_host = "127.0.0.1"
    try:
        with pytest.raises(OracleUnreachableError):
            enforcer.fetch_chain_via_oracle(f"https://{UPSTREAM_HOST}/")
    finally:
        enforcer.oracle_port = original_port
        enforcer.oracle_host = enforcer_host


def test_verify_target_clean_path_forwards_and_caches(clean_lab):
    enforcer = clean_lab.enforcer
    enforcer.cache.clear()
    before = clean_lab.counters.snapshot()
    result, reference = enforcer.verify_target(UPSTREAM_HOST, 443)
    after = clean_lab.counters.snapshot()
    assert result.action is Action.FORWARDED
    assert result.comparison.matched
    assert reference is not None
    assert (after[0] - before[0], after[1] - before[1]) == (1, 1)

    # cache hit: zero additional fetches
    result2, reference2 = enforcer.verify_target(UPSTREAM_HOST, 443)
    final = clean_lab.counters.snapshot()
    assert result2.action is Action.FORWARDED
    assert reference2.raw() == reference.raw()
    assert final == after


def test_verify_target_upstream_attacker_mismatch(mitm_upstream_lab):
    enforcer = mitm_upstream_lab.enforcer
    enforcer.cache.clear()
    result, reference = enforcer.verify_target(UPSTREAM_HOST, 443)
    assert result.action is Action.BLOCKED_MISMATCH
    assert result.comparison.reason is ComparisonReason.SIGNATURE_MISMATCH
    assert result.comparison.first_divergence == 0
    assert reference is None


def test_mismatch_taints_cache(mitm_upstream_lab):
    enforcer = mitm_upstream_lab.enforcer
    enforcer.verify_target(UPSTREAM_HOST, 443)
    before = mitm_upstream_lab.counters.snapshot()
    enforcer.verify_target(UPSTREAM_HOST, 443)
    after = mitm_upstream_lab.counters.snapshot()
    # tainted host bypasses the cache: both fetches happen again
    assert (after[0] - before[0], after[1] - before[1]) == (1, 1)


def test_cache_ttl_expiry():
    with Lab(cache_ttl=0.2) as lab:
        lab.enforcer.verify_target(UPSTREAM_HOST, 443)
        before = lab.counters.snapshot()
        lab.enforcer.verify_target(UPSTREAM_HOST, 443)
        assert lab.counters.snapshot() == before  # still cached
        time.sleep(0.25)
        lab.enforcer.verify_target(UPSTREAM_HOST, 443)
        after = lab.counters.snapshot()
        assert (after[0] - before[0], after[1] - before[1]) == (1, 1)


def test_enforce_returns_live_upstream_session(clean_lab):
    enforcer = clean_lab.enforcer
    enforcer.cache.clear()
    result, upstream = enforcer.enforce(UPSTREAM_HOST, 443)
    assert result.action is Action.FORWARDED
    assert upstream is not None
    upstream.sendall(b"GET /live HTTP/1.1\r\nHost: shop.test\r\nConnection: close\r\n\r\n")
    data = upstream.recv(65536)
    assert data.startswith(b"HTTP/1.1 200")
    upstream.close()


def test_enforce_blocked_yields_no_session(mitm_upstream_lab):
    result, upstream = mitm_upstream_lab.enforcer.enforce(UPSTREAM_HOST, 443)
    assert result.action is Action.BLOCKED_MISMATCH
    assert upstream is None


def test_oracle_link_privacy(clean_lab):
    """Only the target URL and method cross the oracle link."""
    secret = "credential=hunter2-not-for-the-oracle"
    client = clean_lab.client(Behavior.NAIVE, name="privacy-probe")
    clean_lab.run_client(client, payload=secret.encode(), path="/login")
    log = clean_lab.oracle.request_log
    assert log, "oracle saw no requests"
    for row in log:
        assert secret not in row["requestline"]
        assert all(secret not in v for v in row["headers"].values())
        assert row["requestline"].startswith("GET /getSSLCertificate?url=")


def test_enforcement_result_invariant():
    with pytest.raises(AssertionError):
        EnforcementResult(
            comparison=ChainComparison(matched=True),
            oracle_pin_ok=True,
            action=Action.BLOCKED_MISMATCH,
        )
    with pytest.raises(AssertionError):
        EnforcementResult(comparison=None, oracle_pin_ok=False, action=Action.FORWARDED)
