"""Active pen-testing of client TLS validation.

Presents a leaf forged by the interception CA to the connecting client and
classifies the client from its handshake behavior: a client that completes
the handshake and sends application data trusted us and is vulnerable; a
client that sends a fatal alert, hangs up, or goes silent resisted the test.
"""

from __future__ import annotations

import enum
import json
import logging
import socket
import ssl
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .ca import CaMaterial, ForgedLeaf, forge_leaf
from .tlsfetch import server_context_from_pem
from .whitelist import ClientDescriptor, WhitelistStore, make_entry

logger = logging.getLogger(__name__)

DEFAULT_DECISION_WINDOW = 5.0


class VerdictValue(enum.Enum):
    VULNERABLE = "Vulnerable"
    PENPROOF = "PenProof"
    UNTESTED = "Untested"


class Evidence(enum.Enum):
    HANDSHAKE_COMPLETED_WITH_APP_DATA = "HandshakeCompletedWithAppData"
    HANDSHAKE_ABORTED = "HandshakeAborted"
    CONNECTION_CLOSED_SILENT = "ConnectionClosedSilent"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class Verdict:
    value: VerdictValue
    evidence: Evidence | None
    decided_at: float

    def __post_init__(self) -> None:
        if self.value is VerdictValue.VULNERABLE:
            assert self.evidence is Evidence.HANDSHAKE_COMPLETED_WITH_APP_DATA
        elif self.value is VerdictValue.PENPROOF:
            assert self.evidence in (
                Evidence.HANDSHAKE_ABORTED,
                Evidence.CONNECTION_CLOSED_SILENT,
                Evidence.TIMEOUT,
            )


@dataclass
class PentestOutcome:
    """Verdict plus, for vulnerable clients, the live terminated TLS session."""

    verdict: Verdict
    tls_socket: ssl.SSLSocket | None = None
    initial_data: bytes = b""
    app_bytes_seen: int = 0


class ForgedLeafCache:
    """Per-host forged leaf + ready server context, shared across flows."""

    def __init__(self, ca: CaMaterial):
        self.ca = ca
        self._lock = threading.Lock()
        self._by_host: dict[str, tuple[ForgedLeaf, ssl.SSLContext]] = {}

    def context_for(self, host: str, upstream_leaf=None) -> tuple[ForgedLeaf, ssl.SSLContext]:
        with self._lock:
            hit = self._by_host.get(host)
            if hit is not None:
                return hit
        leaf = forge_leaf(self.ca, host, upstream_leaf=upstream_leaf)
        ctx = server_context_from_pem(
            leaf.cert_pem(), leaf.key_pem(), chain_pems=(self.ca.root_pem(),)
        )
        with self._lock:
            return self._by_host.setdefault(host, (leaf, ctx))


def _verdict(value: VerdictValue, evidence: Evidence | None) -> Verdict:
    return Verdict(value=value, evidence=evidence, decided_at=time.time())


def pentest(
    client_sock: socket.socket,
    target_host: str,
    leaf_cache: ForgedLeafCache,
    upstream_leaf=None,
    decision_window: float = DEFAULT_DECISION_WINDOW,
) -> PentestOutcome:
    """Run the forged-certificate handshake against a connected client.

    The caller has already answered the CONNECT; the next bytes on the wire
    are the client's TLS ClientHello — or nothing, which classifies nothing
    (Untested) and lets the next request retry.
    """
    client_sock.settimeout(decision_window)
    try:
        first = client_sock.recv(1, socket.MSG_PEEK)
    except (OSError, socket.timeout):
        return PentestOutcome(verdict=_verdict(VerdictValue.UNTESTED, None))
    if first == b"":
        return PentestOutcome(verdict=_verdict(VerdictValue.UNTESTED, None))

    _, ctx = leaf_cache.context_for(target_host, upstream_leaf=upstream_leaf)
    deadline = time.monotonic() + decision_window
    try:
        tls = ctx.wrap_socket(client_sock, server_side=True)
    except ssl.SSLError:
        # fatal alert or mid-handshake hangup: the client refused our leaf
        return PentestOutcome(verdict=_verdict(VerdictValue.PENPROOF, Evidence.HANDSHAKE_ABORTED))
    except socket.timeout:
        return PentestOutcome(verdict=_verdict(VerdictValue.PENPROOF, Evidence.TIMEOUT))
    except (ConnectionError, EOFError, OSError):
        return PentestOutcome(verdict=_verdict(VerdictValue.PENPROOF, Evidence.HANDSHAKE_ABORTED))

    remaining = max(deadline - time.monotonic(), 0.05)
    tls.settimeout(remaining)
    try:
        data = tls.recv(65536)
    except socket.timeout:
        tls.close()
        return PentestOutcome(verdict=_verdict(VerdictValue.PENPROOF, Evidence.TIMEOUT))
    except (ssl.SSLError, ConnectionError, OSError):
        tls.close()
        return PentestOutcome(
            verdict=_verdict(VerdictValue.PENPROOF, Evidence.CONNECTION_CLOSED_SILENT)
        )
    if data == b"":
        tls.close()
        return PentestOutcome(
            verdict=_verdict(VerdictValue.PENPROOF, Evidence.CONNECTION_CLOSED_SILENT)
        )
    return PentestOutcome(
        verdict=_verdict(
            VerdictValue.VULNERABLE, Evidence.HANDSHAKE_COMPLETED_WITH_APP_DATA
        ),
        tls_socket=tls,
        initial_data=data,
        app_bytes_seen=len(data),
    )


class VerdictLog:
    """Append-only JSON lines record of every decided verdict."""

    def __init__(self, path: Path | str | None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._memory: list[dict] = []

    def append(self, client: ClientDescriptor, verdict: Verdict) -> None:
        row = {
            "client": client.name,
            "version": client.version,
            "verdict": verdict.value.value,
            "evidence": verdict.evidence.value if verdict.evidence else None,
            "ts": verdict.decided_at,
        }
        with self._lock:
            self._memory.append(row)
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(row, separators=(",", ":")) + "\n")

    def rows(self) -> list[dict]:
        with self._lock:
            return list(self._memory)

    @staticmethod
    def read_file(path: Path | str) -> list[dict]:
        rows = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
        return rows


class VerdictRecorder:
    """Applies verdicts to the whitelist and the verdict log.

    Store write failures never disturb flow handling: the insert is kept in
    memory and retried on the next recorded verdict.
    """

    def __init__(self, store: WhitelistStore, log: VerdictLog):
        self.store = store
        self.log = log
        self._lock = threading.Lock()
        self._retry: list = []

    def record(self, client: ClientDescriptor, verdict: Verdict) -> None:
        if verdict.value is VerdictValue.UNTESTED:
            raise ValueError("untested verdicts are not recorded")
        self.log.append(client, verdict)
        if verdict.value is not VerdictValue.PENPROOF:
            return
        entry = make_entry(client.name, client.version, first_url=client.first_url)
        with self._lock:
            pending = self._retry + [entry]
            self._retry = []
            for item in pending:
                try:
                    if self.store.lookup(item.descriptor.name, item.descriptor.version) is None:
                        self.store.insert(item)
                except Exception as exc:
                    logger.warning("whitelist insert failed, will retry: %s", exc)
                    self._retry.append(item)
