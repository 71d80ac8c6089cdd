import json
import socket
import ssl

import pytest

from sslsentry.ca import forge_leaf, generate_ca
from sslsentry.chains import compare_chains, deserialize_chain, normalize_order, parse_chain
from sslsentry.labpki import make_server_identity
from sslsentry.oracle import OracleRequest, OracleRequestError, OracleServer, get_ssl_certificate
from sslsentry.simlab import Router, SimUpstream
from sslsentry.tlsfetch import permissive_client_context

UPSTREAM = "shop.test"


@pytest.fixture(scope="module")
def world():
    identity = make_server_identity([UPSTREAM], org="ShopCo")
    upstream = SimUpstream(identity).start()
    router = Router()
    router.map(UPSTREAM, 443, "127.0.0.1", upstream.port)
    ca = generate_ca(30)
    oracle_leaf = forge_leaf(ca, "oracle.test")
    oracle = OracleServer(
        oracle_leaf.cert_pem(),
        oracle_leaf.key_pem(),
        dialer=router.dial,
        rate_limit_per_min=60,
    )
    oracle.start()
    yield {"identity": identity, "upstream": upstream, "router": router, "oracle": oracle}
    oracle.stop()
    upstream.stop()


def _oracle_get(port: int, path: str) -> tuple[int, bytes]:
    sock = socket.create_connection(("127.0.0.1", port), timeout=5)
    tls = permissive_client_context().wrap_socket(sock, server_hostname="oracle.test")
    tls.sendall(f"GET {path} HTTP/1.1\r\nHost: oracle.test\r\nConnection: close\r\n\r\n".encode())
    raw = b""
    while True:
        try:
            chunk = tls.recv(65536)
        except (OSError, ssl.SSLError):
            break
        if not chunk:
            break
        raw += chunk
    tls.close()
    head, _, body = raw.partition(b"\r\n\r\n")
    status = int(head.split(b"\r\n")[0].split()[1])
    return status, body


def test_chain_matches_upstream_bytewise(world):
    status, body = _oracle_get(
        world["oracle"].port, f"/getSSLCertificate?url=https%3A%2F%2F{UPSTREAM}%2F&method=GET"
    )
    assert status == 200
    chain = deserialize_chain(body.decode())
    assert chain.raw() == world["identity"].chain_ders()


def test_oracle_agrees_with_direct_fetch(world):
    status, body = _oracle_get(
        world["oracle"].port, f"/getSSLCertificate?url=https%3A%2F%2F{UPSTREAM}%2F&method=GET"
    )
    from sslsentry.tlsfetch import capture_chain

    direct = parse_chain(
        capture_chain(UPSTREAM, 443, 5.0, dialer=world["router"].dial)
    )
    oracle_chain = deserialize_chain(body.decode())
    assert compare_chains(normalize_order(direct), normalize_order(oracle_chain)).matched


def test_invalid_scheme_rejected(world):
    status, body = _oracle_get(
        world["oracle"].port, "/getSSLCertificate?url=http%3A%2F%2Fx%2F&method=GET"
    )
    assert status == 400
    assert json.loads(body) == {"error": "invalid-scheme"}


def test_invalid_method_rejected(world):
    status, body = _oracle_get(
        world["oracle"].port,
        f"/getSSLCertificate?url=https%3A%2F%2F{UPSTREAM}%2F&method=BREW",
    )
    assert status == 400
    assert json.loads(body) == {"error": "invalid-method"}


def test_missing_params(world):
    status, body = _oracle_get(world["oracle"].port, "/getSSLCertificate")
    assert status == 400
    assert json.loads(body) == {"error": "missing-params"}


def test_unreachable_target(world):
    # a port nothing listens on
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    dead_port = probe.getsockname()[1]
    probe.close()
    status, body = _oracle_get(
        world["oracle"].port,
        f"/getSSLCertificate?url=https%3A%2F%2F127.0.0.1%3A{dead_port}%2F&method=GET",
    )
    assert status == 502
    assert json.loads(body) == {"error": "unreachable"}


def test_plain_tcp_rejected(world):
    sock = socket.create_connection(("127.0.0.1", world["oracle"].port), timeout=5)
    sock.settimeout(5)
    sock.sendall(b"GET /getSSLCertificate HTTP/1.1\r\nHost: oracle.test\r\n\r\n")
    try:
        data = sock.recv(1024)
    except OSError:
        data = b""
    finally:
        sock.close()
    # a TLS server answers plain HTTP with an alert or a hangup, never HTTP
    assert not data.startswith(b"HTTP/")


def test_rate_limit_429():
    identity = make_server_identity(["rl.test"])
    upstream = SimUpstream(identity).start()
    router = Router()
    router.map("rl.test", 443, "127.0.0.1", upstream.port)
    ca = generate_ca(30)
    leaf = forge_leaf(ca, "oracle.test")
    oracle = OracleServer(
        leaf.cert_pem(), leaf.key_pem(), dialer=router.dial, rate_limit_per_min=3
    )
    oracle.start()
    try:
        statuses = [
            _oracle_get(oracle.port, "/getSSLCertificate?url=https%3A%2F%2Frl.test%2F&method=GET")[0]
            for _ in range(4)
        ]
        assert statuses[:3] == [200, 200, 200]
        assert statuses[3] == 429
    finally:
        oracle.stop()
        upstream.stop()


def test_get_ssl_certificate_validation():
    with pytest.raises(OracleRequestError) as exc:
        get_ssl_certificate(OracleRequest(url="ftp://x/", method="GET"))
    assert exc.value.code == "invalid-scheme"
    with pytest.raises(OracleRequestError) as exc:
        get_ssl_certificate(OracleRequest(url="https://x/", method="TRACE"))
    assert exc.value.code == "invalid-method"


def test_method_reaches_target_with_empty_body(world):
    before = len(world["upstream"].received)
    status, _ = _oracle_get(
        world["oracle"].port,
        f"/getSSLCertificate?url=https%3A%2F%2F{UPSTREAM}%2Fprobe&method=POST",
    )
    assert status == 200
    new = world["upstream"].received[before:]
    assert any(r.startswith(b"POST /probe") and r.endswith(b"\r\n\r\n") for r in new)
