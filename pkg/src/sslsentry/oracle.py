"""The trusted chain oracle: an HTTPS-only service with a single endpoint
that connects to a requested URL and reports the certificate chain it was
presented, serialized in the shared JSON wire format."""

from __future__ import annotations

import json
import logging
import socket
import ssl
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .chains import ChainError, parse_chain, serialize_chain
from .tlsfetch import (
    ChainCaptureError,
    Dialer,
    default_dialer,
    open_captured_tls,
    server_context_from_pem,
)

logger = logging.getLogger(__name__)

ENDPOINT_PATH = "/getSSLCertificate"
ALLOWED_METHODS = {"GET", "POST", "HEAD", "PUT", "DELETE"}
DEFAULT_FETCH_TIMEOUT = 10.0
DEFAULT_RATE_LIMIT = 60


class OracleRequestError(Exception):
    def __init__(self, code: str, status: int = 400):
        super().__init__(code)
        self.code = code
        self.status = status


@dataclass(frozen=True)
class OracleRequest:
    url: str
    method: str = "GET"

    def validated(self) -> "OracleRequest":
        if self.method.upper() not in ALLOWED_METHODS:
            raise OracleRequestError("invalid-method")
        parts = urlsplit(self.url)
        if parts.scheme != "https":
            raise OracleRequestError("invalid-scheme")
        if not parts.hostname:
            raise OracleRequestError("invalid-url")
        return OracleRequest(url=self.url, method=self.method.upper())


@dataclass(frozen=True)
class OracleResponse:
    chain_json: str
    fetched_at: float


def get_ssl_certificate(
    req: OracleRequest,
    dialer: Dialer = default_dialer,
    timeout: float = DEFAULT_FETCH_TIMEOUT,
) -> OracleResponse:
    """Connect to the request's URL, capture the presented chain pre-validation,
    issue the named method with an empty body, discard the reply, and return
    the serialized chain."""
    req = req.validated()
    parts = urlsplit(req.url)
    host = parts.hostname
    port = parts.port or 443
    path = parts.path or "/"
    if parts.query:
        path += "?" + parts.query
    try:
        tls, ders = open_captured_tls(host, port, timeout, server_hostname=host, dialer=dialer)
    except ChainCaptureError as exc:
        code = exc.kind if exc.kind in ("unreachable", "timeout") else "handshake-failed"
        status = 504 if code == "timeout" else 502
        raise OracleRequestError(code, status=status) from exc
    try:
        # the chain is already in hand; the method request is best-effort
        request = (
            f"{req.method} {path} HTTP/1.1\r\nHost: {host}\r\n"
            "Connection: close\r\nContent-Length: 0\r\n\r\n"
        )
        tls.settimeout(timeout)
        tls.sendall(request.encode("ascii"))
        try:
            tls.recv(65536)
        except (OSError, ssl.SSLError):
            pass
    except (OSError, ssl.SSLError):
        pass
    finally:
        try:
            tls.close()
        except OSError:
            pass
    try:
        chain = parse_chain(ders)
    except ChainError as exc:
        raise OracleRequestError("bad-chain", status=502) from exc
    return OracleResponse(chain_json=serialize_chain(chain), fetched_at=time.time())


class _RateLimiter:
    def __init__(self, per_minute: int):
        self.per_minute = per_minute
        self._lock = threading.Lock()
        self._hits: dict[str, deque[float]] = defaultdict(deque)

    def allow(self, peer: str) -> bool:
        now = time.monotonic()
        with self._lock:
            hits = self._hits[peer]
            while hits and now - hits[0] > 60.0:
                hits.popleft()
            if len(hits) >= self.per_minute:
                return False
            hits.append(now)
            return True


class OracleServer:
    """HTTPS service exposing GET /getSSLCertificate?url=...&method=...

    Plain-TCP clients fail at the TLS accept and never reach the handler.
    ``capture_requests`` keeps raw request lines + headers for test
    inspection of what actually crosses this link.
    """

    def __init__(
        self,
        cert_pem: bytes,
        key_pem: bytes,
        bind: str = "127.0.0.1",
        port: int = 0,
        fetch_timeout: float = DEFAULT_FETCH_TIMEOUT,
        rate_limit_per_min: int = DEFAULT_RATE_LIMIT,
        dialer: Dialer = default_dialer,
        capture_requests: bool = False,
    ):
        self._ctx = server_context_from_pem(cert_pem, key_pem)
        self.fetch_timeout = fetch_timeout
        self.dialer = dialer
        self.rate_limiter = _RateLimiter(rate_limit_per_min)
        self.request_log: list[dict] = []
        self._capture = capture_requests
        self._thread: threading.Thread | None = None

        oracle = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # quiet; the event log is elsewhere
                logger.debug("oracle: " + fmt, *args)

            def _reply(self, status: int, payload: str) -> None:
                body = payload.encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.send_header("Connection", "close")
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self) -> None:
                if oracle._capture:
                    oracle.request_log.append(
                        {
                            "requestline": self.requestline,
                            "headers": dict(self.headers.items()),
                            "peer": self.client_address[0],
                        }
                    )
                if not oracle.rate_limiter.allow(self.client_address[0]):
                    self._reply(429, '{"error":"rate-limited"}')
                    return
                parts = urlsplit(self.path)
                if parts.path != ENDPOINT_PATH:
                    self._reply(404, '{"error":"not-found"}')
                    return
                params = parse_qs(parts.query)
                url = params.get("url", [None])[0]
                method = params.get("method", ["GET"])[0]
                if url is None:
                    self._reply(400, '{"error":"missing-params"}')
                    return
                try:
                    response = get_ssl_certificate(
                        OracleRequest(url=url, method=method),
                        dialer=oracle.dialer,
                        timeout=oracle.fetch_timeout,
                    )
                except OracleRequestError as exc:
                    self._reply(exc.status, json.dumps({"error": exc.code}))
                    return
                except Exception as exc:  # pragma: no cover - defensive
                    logger.warning("oracle fetch failed unexpectedly: %s", exc)
                    self._reply(500, '{"error":"internal"}')
                    return
                self._reply(200, response.chain_json)

        class _Server(ThreadingHTTPServer):
            daemon_threads = True

            def handle_error(self, request, client_address):
                # TLS handshake failures from non-TLS or probing clients
                logger.debug("oracle connection error from %s", client_address)

        self._httpd = _Server((bind, port), Handler)
        self._httpd.socket = self._ctx.wrap_socket(self._httpd.socket, server_side=True)

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="oracle", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
