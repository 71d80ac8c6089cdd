"""Low-level TLS plumbing: dialers, raw presented-chain capture, and SSL
context construction from in-memory material.

Chain capture deliberately skips trust-store validation: the question the
rest of the system asks is "what did whoever answered this connection
present", not "do I trust it".
"""

from __future__ import annotations

import os
import socket
import ssl
import tempfile
from typing import Callable, Protocol

Dialer = Callable[[str, int, float], socket.socket]


class ChainCaptureError(Exception):
    """TCP or TLS failure while capturing a presented chain.

    ``kind`` is one of "unreachable", "timeout", "handshake-failed",
    "no-chain", "unsupported".
    """

    def __init__(self, message: str, kind: str = "handshake-failed"):
        super().__init__(message)
        self.kind = kind


def default_dialer(host: str, port: int, timeout: float) -> socket.socket:
    return socket.create_connection((host, port), timeout=timeout)


def permissive_client_context() -> ssl.SSLContext:
    """A client context that completes handshakes against any certificate."""
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    return ctx


def presented_chain_der(tls_sock: ssl.SSLSocket) -> list[bytes]:
    """The certificate chain the peer presented, in wire order, as DER."""
    sslobj = getattr(tls_sock, "_sslobj", None)
    if sslobj is None or not hasattr(sslobj, "get_unverified_chain"):
        raise ChainCaptureError(
            "this Python build cannot expose the unverified peer chain", kind="unsupported"
        )
    chain = sslobj.get_unverified_chain()
    if not chain:
        raise ChainCaptureError("peer presented no certificates", kind="no-chain")
    return [cert.public_bytes(ssl._ssl.ENCODING_DER) for cert in chain]


def open_captured_tls(
    host: str,
    port: int,
    timeout: float,
    server_hostname: str | None = None,
    dialer: Dialer = default_dialer,
    context: ssl.SSLContext | None = None,
) -> tuple[ssl.SSLSocket, list[bytes]]:
    """Connect, handshake, and return (tls socket, presented DER chain).

    The caller owns the socket. With the default permissive context the
    handshake succeeds against anything, so the captured chain reflects
    whoever actually answered.
    """
    ctx = context if context is not None else permissive_client_context()
    try:
        raw = dialer(host, port, timeout)
    except socket.timeout as exc:
        raise ChainCaptureError(f"connect to {host}:{port} timed out", kind="timeout") from exc
    except OSError as exc:
        raise ChainCaptureError(f"cannot reach {host}:{port}: {exc}", kind="unreachable") from exc
    try:
        raw.settimeout(timeout)
        tls = ctx.wrap_socket(raw, server_hostname=server_hostname or host)
        chain = presented_chain_der(tls)
        return tls, chain
    except ChainCaptureError:
        raw.close()
        raise
    except socket.timeout as exc:
        raw.close()
        raise ChainCaptureError(
            f"TLS handshake with {host}:{port} timed out", kind="timeout"
        ) from exc
    except (OSError, ssl.SSLError) as exc:
        raw.close()
        raise ChainCaptureError(f"TLS handshake with {host}:{port} failed: {exc}") from exc


def capture_chain(
    host: str,
    port: int,
    timeout: float,
    server_hostname: str | None = None,
    dialer: Dialer = default_dialer,
) -> list[bytes]:
    """Fetch-and-close variant of :func:`open_captured_tls`."""
    tls, chain = open_captured_tls(host, port, timeout, server_hostname, dialer)
    try:
        tls.close()
    except OSError:
        pass
    return chain


class TlsIdentity(Protocol):
    def cert_pem(self) -> bytes: ...
    def key_pem(self) -> bytes: ...


def server_context_from_pem(
    cert_pem: bytes, key_pem: bytes, chain_pems: tuple[bytes, ...] = ()
) -> ssl.SSLContext:
    """Build a TLS server context from in-memory PEM material.

    The ssl module only loads cert chains from files, so the material makes a
    brief trip through unlinked temp files.
    """
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    cert_fd, cert_path = tempfile.mkstemp(suffix=".pem")
    key_fd, key_path = tempfile.mkstemp(suffix=".pem")
    try:
        with os.fdopen(cert_fd, "wb") as fh:
            fh.write(cert_pem)
            for extra in chain_pems:
                fh.write(extra)
        with os.fdopen(key_fd, "wb") as fh:
            fh.write(key_pem)
        ctx.load_cert_chain(cert_path, key_path)
    finally:
        os.unlink(cert_path)
        os.unlink(key_path)
    return ctx
