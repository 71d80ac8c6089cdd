"""Protection of vulnerable flows: fetch the upstream chain directly and via
the pinned oracle, compare them positionwise, and only then let traffic flow.

The oracle link itself is guarded by an exact-leaf pin: the TLS session to
the oracle proceeds past the handshake only if the presented leaf is
byte-identical to the keystore certificate. A mismatch there means the
protector's own channel is under attack, which blocks the flow outright.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import ssl
import threading
import time
from dataclasses import dataclass
from urllib.parse import quote, urlsplit

from cryptography import x509
from cryptography.x509.verification import PolicyBuilder, Store, VerificationError

from .ca import PinnedKeystore
from .chains import (
    CertificateChain,
    ChainComparison,
    ChainError,
    compare_chains,
    deserialize_chain,
    normalize_order,
    parse_chain,
)
from .tlsfetch import (
    ChainCaptureError,
    Dialer,
    capture_chain,
    default_dialer,
    open_captured_tls,
)

logger = logging.getLogger(__name__)

DEFAULT_ORACLE_TIMEOUT = 10.0
DEFAULT_FETCH_TIMEOUT = 10.0
DEFAULT_CACHE_TTL = 600.0
ALLOWED_METHODS = ("GET", "POST", "HEAD", "PUT", "DELETE")


class Action(enum.Enum):
    FORWARDED = "Forwarded"
    BLOCKED_MISMATCH = "BlockedMismatch"
    BLOCKED_ORACLE_UNREACHABLE = "BlockedOracleUnreachable"
    BLOCKED_PIN_FAILURE = "BlockedPinFailure"


class EnforcementError(Exception):
    pass


class DirectFetchError(EnforcementError):
    """The direct chain fetch itself failed (TCP/TLS level)."""


class OracleUnreachableError(EnforcementError):
    pass


class OraclePinError(EnforcementError):
    pass


class OracleProtocolError(EnforcementError):
    pass


class UpstreamTrustError(EnforcementError):
    """The oracle-vouched chain itself fails trust validation (misconfigured
    trust material, or the oracle host is compromised — out of threat model)."""


@dataclass(frozen=True)
class EnforcementResult:
    comparison: ChainComparison | None
    oracle_pin_ok: bool
    action: Action

    def __post_init__(self) -> None:
        forwarded = (
            self.comparison is not None and self.comparison.matched and self.oracle_pin_ok
        )
        assert forwarded == (self.action is Action.FORWARDED)

    @property
    def divergence_index(self) -> int | None:
        return self.comparison.first_divergence if self.comparison else None

    @property
    def reason(self) -> str | None:
        if self.action is Action.FORWARDED:
            return None
        if self.comparison is not None and self.comparison.reason is not None:
            return self.comparison.reason.value
        return self.action.value


class FetchCounters:
    """Counts the extra network work enforcement performs (for the bench)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.direct = 0
        self.oracle = 0

    def count_direct(self) -> None:
        with self._lock:
            self.direct += 1

    def count_oracle(self) -> None:
        with self._lock:
            self.oracle += 1

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return (self.direct, self.oracle)


class ChainCache:
    """Compared-OK chains per (host, port) with TTL; hosts that ever produced
    a mismatch are tainted and never served from cache again."""

    def __init__(self, ttl: float = DEFAULT_CACHE_TTL):
        self.ttl = ttl
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, int], tuple[CertificateChain, float]] = {}
        self._tainted: set[tuple[str, int]] = set()

    def get(self, host: str, port: int) -> CertificateChain | None:
        key = (host, port)
        with self._lock:
            if key in self._tainted:
                return None
            hit = self._entries.get(key)
            if hit is None or hit[1] < time.monotonic():
                return None
            return hit[0]

    def put(self, host: str, port: int, chain: CertificateChain) -> None:
        key = (host, port)
        with self._lock:
            if key not in self._tainted:
                self._entries[key] = (chain, time.monotonic() + self.ttl)

    def taint(self, host: str, port: int) -> None:
        key = (host, port)
        with self._lock:
            self._tainted.add(key)
            self._entries.pop(key, None)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self._tainted.clear()


class Enforcer:
    def __init__(
        self,
        keystore: PinnedKeystore,
        oracle_endpoint: str,
        upstream_trust_pem: bytes | None = None,
        use_system_trust: bool = True,
        cache_ttl: float = DEFAULT_CACHE_TTL,
        oracle_timeout: float = DEFAULT_ORACLE_TIMEOUT,
        fetch_timeout: float = DEFAULT_FETCH_TIMEOUT,
        dialer: Dialer = default_dialer,
        oracle_dialer: Dialer | None = None,
        counters: FetchCounters | None = None,
    ):
        self.keystore = keystore
        parts = urlsplit(oracle_endpoint)
        if parts.scheme != "https" or parts.hostname is None:
            raise ValueError(f"oracle endpoint must be an https URL, got {oracle_endpoint!r}")
        self.oracle_host = parts.hostname
        self.oracle_port = parts.port or 443
        self.cache = ChainCache(ttl=cache_ttl)
        self.oracle_timeout = oracle_timeout
        self.fetch_timeout = fetch_timeout
        self.dialer = dialer
        self.oracle_dialer = oracle_dialer or dialer
        self.counters = counters or FetchCounters()
        self._trust_store = self._build_trust_store(upstream_trust_pem, use_system_trust)

    @staticmethod
    def _build_trust_store(trust_pem: bytes | None, use_system_trust: bool) -> Store:
        anchors: list[x509.Certificate] = []
        if use_system_trust:
            sys_ctx = ssl.create_default_context()
            for der in sys_ctx.get_ca_certs(binary_form=True):
                try:
                    anchors.append(x509.load_der_x509_certificate(der))
                except ValueError:
                    continue
        if trust_pem is not None:
            anchors.extend(x509.load_pem_x509_certificates(trust_pem))
        if not anchors:
            raise ValueError("no trust anchors configured for upstream validation")
        return Store(anchors)

    def _validate_trust(self, chain: CertificateChain, host: str) -> None:
        """Path-validate the wire chain against the configured trust anchors."""
        try:
            subject: x509.verification.Subject = x509.IPAddress(ipaddress.ip_address(host))
        except ValueError:
            subject = x509.DNSName(host)
        verifier = PolicyBuilder().store(self._trust_store).build_server_verifier(subject)
        certs = [x509.load_der_x509_certificate(der) for der in chain.raw()]
        try:
            verifier.verify(certs[0], certs[1:])
        except VerificationError as exc:
            raise UpstreamTrustError(f"verified chain fails trust validation: {exc}") from exc

    # -- chain acquisition -----------------------------------------------------

    def fetch_chain_direct(self, host: str, port: int) -> CertificateChain:
        """The chain presented by whoever answers (host, port), unvalidated."""
        self.counters.count_direct()
        try:
            ders = capture_chain(host, port, self.fetch_timeout, dialer=self.dialer)
        except ChainCaptureError as exc:
            raise DirectFetchError(str(exc)) from exc
        return parse_chain(ders)

    def fetch_chain_via_oracle(self, target_url: str, method: str = "GET") -> CertificateChain:
        """Ask the pinned oracle what chain it sees for ``target_url``.

        Nothing beyond the target URL and method ever goes over this link,
        and nothing at all is sent unless the pin verifies.
        """
        self.counters.count_oracle()
        try:
            tls, ders = open_captured_tls(
                self.oracle_host,
                self.oracle_port,
                self.oracle_timeout,
                dialer=self.oracle_dialer,
            )
        except ChainCaptureError as exc:
            raise OracleUnreachableError(str(exc)) from exc
        try:
            if ders[0] != self.keystore.oracle_der:
                raise OraclePinError(
                    "oracle link presented a leaf that does not match the pinned certificate"
                )
            request = (
                f"GET /getSSLCertificate?url={quote(target_url, safe='')}"
                f"&method={quote(method)} HTTP/1.1\r\n"
                f"Host: {self.oracle_host}\r\n"
                "Connection: close\r\n\r\n"
            )
            tls.sendall(request.encode("ascii"))
            raw = _read_until_closed(tls, self.oracle_timeout)
        except OraclePinError:
            raise
        except (OSError, ssl.SSLError) as exc:
            raise OracleUnreachableError(f"oracle request failed: {exc}") from exc
        finally:
            try:
                tls.close()
            except OSError:
                pass
        status, body = _parse_http_response(raw)
        if status != 200:
            raise OracleProtocolError(f"oracle returned {status}: {body[:200]!r}")
        try:
            return deserialize_chain(body.decode("utf-8"))
        except (ChainError, UnicodeDecodeError) as exc:
            raise OracleProtocolError(f"oracle returned malformed chain: {exc}") from exc

    # -- enforcement -----------------------------------------------------------

    def verify_target(
        self, host: str, port: int, method: str = "GET"
    ) -> tuple[EnforcementResult, CertificateChain | None]:
        """Run the dual-fetch comparison for (host, port).

        Returns the result plus the trusted reference chain to hold the
        forwarding session to. A fresh cache entry skips both fetches.
        """
        cached = self.cache.get(host, port)
        if cached is not None:
            # matched within TTL; raw_identical is a measured diagnostic and
            # nothing was measured on this hit
            return (
                EnforcementResult(
                    comparison=ChainComparison(matched=True),
                    oracle_pin_ok=True,
                    action=Action.FORWARDED,
                ),
                cached,
            )

        direct = normalize_order(self.fetch_chain_direct(host, port))
        target_url = f"https://{host}:{port}/" if port != 443 else f"https://{host}/"
        try:
            oracle_chain = normalize_order(self.fetch_chain_via_oracle(target_url, method))
        except OraclePinError:
            return (
                EnforcementResult(
                    comparison=None, oracle_pin_ok=False, action=Action.BLOCKED_PIN_FAILURE
                ),
                None,
            )
        except (OracleUnreachableError, OracleProtocolError):
            return (
                EnforcementResult(
                    comparison=None,
                    oracle_pin_ok=True,
                    action=Action.BLOCKED_ORACLE_UNREACHABLE,
                ),
                None,
            )

        comparison = compare_chains(direct, oracle_chain)
        if not comparison.matched:
            self.cache.taint(host, port)
            return (
                EnforcementResult(
                    comparison=comparison, oracle_pin_ok=True, action=Action.BLOCKED_MISMATCH
                ),
                None,
            )
        self.cache.put(host, port, oracle_chain)
        return (
            EnforcementResult(
                comparison=comparison, oracle_pin_ok=True, action=Action.FORWARDED
            ),
            oracle_chain,
        )

    def open_upstream_session(
        self, host: str, port: int, reference: CertificateChain
    ) -> tuple[ssl.SSLSocket | None, ChainComparison]:
        """Open the forwarding TLS session and hold it to the reference chain.

        The handshake itself is permissive so the presented chain can be
        compared honestly; only a session matching the reference AND passing
        trust validation is returned. A mismatching session is closed and the
        mismatch comparison returned instead.
        """
        try:
            tls, ders = open_captured_tls(
                host, port, self.fetch_timeout, server_hostname=host, dialer=self.dialer
            )
        except ChainCaptureError as exc:
            raise DirectFetchError(f"upstream session failed: {exc}") from exc
        session_chain = normalize_order(parse_chain(ders))
        comparison = compare_chains(session_chain, reference)
        if not comparison.matched:
            tls.close()
            self.cache.taint(host, port)
            return None, comparison
        try:
            self._validate_trust(session_chain, host)
        except UpstreamTrustError:
            tls.close()
            raise
        return tls, comparison

    def enforce(
        self, host: str, port: int, method: str = "GET"
    ) -> tuple[EnforcementResult, ssl.SSLSocket | None]:
        """Full enforcement for a terminated flow: verify, then open the
        validated upstream session for relaying. Only Forwarded yields a
        session."""
        result, reference = self.verify_target(host, port, method)
        if result.action is not Action.FORWARDED:
            return result, None
        upstream, session_comparison = self.open_upstream_session(host, port, reference)
        if upstream is None:
            return (
                EnforcementResult(
                    comparison=session_comparison,
                    oracle_pin_ok=True,
                    action=Action.BLOCKED_MISMATCH,
                ),
                None,
            )
        return result, upstream


def _read_until_closed(sock: ssl.SSLSocket, timeout: float) -> bytes:
    sock.settimeout(timeout)
    chunks = []
    while True:
        try:
            chunk = sock.recv(65536)
        except (OSError, ssl.SSLError):
            break
        if not chunk:
            break
        chunks.append(chunk)
    return b"".join(chunks)


def _parse_http_response(raw: bytes) -> tuple[int, bytes]:
    head, sep, body = raw.partition(b"\r\n\r\n")
    if not sep:
        raise OracleProtocolError("oracle response truncated")
    status_line = head.split(b"\r\n", 1)[0]
    parts = status_line.split()
    if len(parts) < 2 or not parts[1].isdigit():
        raise OracleProtocolError(f"bad oracle status line: {status_line!r}")
    return int(parts[1]), body
