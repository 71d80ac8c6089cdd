"""The interception proxy shell.

Accepts HTTP CONNECT tunnels, attributes each one to a local client process,
and walks the flow through the protection workflow: whitelisted clients pass
straight through (or get enforcement if they opted in), everyone else gets
pen-tested, and vulnerable clients' traffic only reaches the network after
the enforcer's chain checks agree with the pinned oracle.
"""

from __future__ import annotations

import enum
import itertools
import logging
import select
import socket
import ssl
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from .enforcer import Action, DirectFetchError, Enforcer, EnforcementResult, UpstreamTrustError
from .events import EventBus
from .ident import PortResolver
from .pentest import (
    ForgedLeafCache,
    PentestOutcome,
    VerdictRecorder,
    VerdictValue,
    pentest,
)
from .tlsfetch import Dialer, default_dialer
from .whitelist import ClientDescriptor, WhitelistStore

logger = logging.getLogger(__name__)

MAX_HEAD = 16 * 1024
DEFAULT_PENDING_TIMEOUT = 30.0
RELAY_IDLE_TIMEOUT = 30.0


class MalformedRequestError(Exception):
    pass


class Phase(enum.Enum):
    CONNECTING = "Connecting"
    PENTESTING = "Pentesting"
    ENFORCING = "Enforcing"
    FORWARDING = "Forwarding"
    PENDING_DECISION = "PendingDecision"
    CLOSED = "Closed"


# Legal phase edges; no back edges exist by construction.
PHASE_TRANSITIONS: dict[Phase, set[Phase]] = {
    Phase.CONNECTING: {Phase.PENTESTING, Phase.FORWARDING, Phase.ENFORCING, Phase.CLOSED},
    Phase.PENTESTING: {Phase.ENFORCING, Phase.PENDING_DECISION, Phase.CLOSED},
    Phase.PENDING_DECISION: {Phase.ENFORCING, Phase.CLOSED},
    Phase.ENFORCING: {Phase.FORWARDING, Phase.CLOSED},
    Phase.FORWARDING: {Phase.CLOSED},
    Phase.CLOSED: set(),
}


class Mode(enum.Enum):
    AUTOMATIC = "automatic"
    SELECTIVE = "selective"
    MANUAL = "manual"


@dataclass(frozen=True)
class PolicyMode:
    mode: Mode = Mode.AUTOMATIC
    manual_selection: frozenset[str] = frozenset()
    pending_timeout: float = DEFAULT_PENDING_TIMEOUT


class Route(enum.Enum):
    PASSTHROUGH = "passthrough"
    PENTEST = "pentest"
    ENFORCED_PASSTHROUGH = "enforced-passthrough"


_flow_ids = itertools.count(1)


@dataclass
class FlowRecord:
    flow_id: int
    client: ClientDescriptor | None
    client_port: int
    target_host: str
    target_port: int
    phase: Phase = Phase.CONNECTING
    verdict_at_time: VerdictValue = VerdictValue.UNTESTED
    enforcement: EnforcementResult | None = None
    timings: dict[str, float] = field(default_factory=dict)
    bytes_up: int = 0
    bytes_down: int = 0
    error: str | None = None

    def transition(self, new_phase: Phase) -> None:
        if new_phase not in PHASE_TRANSITIONS[self.phase]:
            raise RuntimeError(f"illegal phase transition {self.phase} -> {new_phase}")
        self.phase = new_phase

    @property
    def client_label(self) -> str:
        if self.client is None:
            return f"unknown:{self.client_port}"
        return self.client.name

    def snapshot(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "client": self.client_label,
            "version": self.client.version if self.client else "",
            "client_port": self.client_port,
            "target_host": self.target_host,
            "target_port": self.target_port,
            "phase": self.phase.value,
            "verdict": self.verdict_at_time.value,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "error": self.error,
        }


def parse_connect(head: bytes) -> tuple[str, int]:
    """Parse a CONNECT request head into (host, port)."""
    try:
        request_line = head.split(b"\r\n", 1)[0].decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedRequestError("request line not ASCII") from exc
    parts = request_line.split()
    if len(parts) != 3 or parts[0] != "CONNECT" or not parts[2].startswith("HTTP/"):
        raise MalformedRequestError(f"not a CONNECT request: {request_line!r}")
    target = parts[1]
    if target.startswith("["):  # bracketed IPv6 literal
        host_part, sep, port_part = target.rpartition("]:")
        if not sep:
            raise MalformedRequestError(f"malformed CONNECT target {target!r}")
        host = host_part.lstrip("[")
        port_str = port_part
    else:
        host, sep, port_str = target.rpartition(":")
        if not sep:
            raise MalformedRequestError(f"malformed CONNECT target {target!r}")
    if not host:
        raise MalformedRequestError(f"malformed CONNECT target {target!r}")
    try:
        port = int(port_str)
    except ValueError as exc:
        raise MalformedRequestError(f"bad port in CONNECT target {target!r}") from exc
    if not (1 <= port <= 65535):
        raise MalformedRequestError(f"port out of range in CONNECT target {target!r}")
    return host, port


class DecisionBroker:
    """Pending operator decisions for flows awaiting allow/block.

    Flows block in :meth:`request`; operators resolve via :meth:`submit`.
    Timeout resolves to block (fail closed). Decisions are idempotent per
    flow; anything after resolution or expiry is answered "expired".
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._pending: dict[int, dict] = {}
        self._resolved: dict[int, str] = {}

    def request(self, flow_id: int, timeout: float) -> str:
        event = threading.Event()
        entry = {"event": event, "action": None, "deadline": time.time() + timeout}
        with self._lock:
            self._pending[flow_id] = entry
        event.wait(timeout)
        with self._lock:
            self._pending.pop(flow_id, None)
            action = entry["action"] or "block"
            self._resolved[flow_id] = action
            return action

    def submit(self, flow_id: int, action: str) -> str:
        if action not in ("allow", "block"):
            return "invalid"
        with self._lock:
            entry = self._pending.get(flow_id)
            if entry is not None:
                if entry["action"] is None:
                    entry["action"] = action
                    entry["event"].set()
                    return "accepted"
                # decided but the flow thread has not collected it yet
                return "accepted" if entry["action"] == action else "expired"
            if self._resolved.get(flow_id) == action:
                return "accepted"
            return "expired"

    def pending(self) -> list[dict]:
        with self._lock:
            return [
                {"flow_id": fid, "deadline": e["deadline"]}
                for fid, e in self._pending.items()
            ]


def relay_bidirectional(
    client_side: socket.socket,
    upstream_side: socket.socket,
    idle_timeout: float = RELAY_IDLE_TIMEOUT,
    tap_up: "Callable[[bytes], None] | None" = None,
) -> tuple[int, int]:
    """Relay until either side closes or the link idles out.

    Single-threaded by design: an OpenSSL session object must never see
    concurrent calls from two threads (the classic two-pump pattern corrupts
    its internals). select() drives readiness at the fd level and
    SSLSocket.pending() covers plaintext already buffered inside the TLS
    layer, which the fd cannot show. Returns (bytes_up, bytes_down);
    ``tap_up`` observes client-to-upstream chunks.
    """
    pairs = {client_side: upstream_side, upstream_side: client_side}
    up = down = 0
    for s in pairs:
        s.settimeout(0.05)
    deadline = time.monotonic() + idle_timeout
    closed = False
    try:
        while not closed and time.monotonic() < deadline:
            ready = [
                s for s in pairs if isinstance(s, ssl.SSLSocket) and s.pending() > 0
            ]
            if not ready:
                try:
                    ready, _, _ = select.select(list(pairs), [], [], 0.1)
                except (OSError, ValueError):
                    break
            for src in ready:
                dst = pairs[src]
                try:
                    data = src.recv(65536)
                except (TimeoutError, socket.timeout, ssl.SSLWantReadError):
                    continue
                except (OSError, ssl.SSLError):
                    closed = True
                    break
                if not data:
                    closed = True
                    break
                if src is client_side:
                    up += len(data)
                    if tap_up is not None:
                        tap_up(data)
                else:
                    down += len(data)
                try:
                    dst.settimeout(idle_timeout)
                    dst.sendall(data)
                except (OSError, ssl.SSLError):
                    closed = True
                    break
                finally:
                    try:
                        dst.settimeout(0.05)
                    except OSError:
                        pass
                deadline = time.monotonic() + idle_timeout
    finally:
        for s in pairs:
            try:
                s.close()
            except OSError:
                pass
    return up, down


class ProxyServer:
    """Thread-per-flow CONNECT proxy wired to the protection pipeline."""

    def __init__(
        self,
        leaf_cache: ForgedLeafCache,
        store: WhitelistStore,
        resolver: PortResolver,
        recorder: VerdictRecorder,
        enforcer: Enforcer,
        bus: EventBus,
        policy: PolicyMode | None = None,
        bind: str = "127.0.0.1",
        port: int = 0,
        decision_window: float = 5.0,
        mirror_upstream: bool = False,
        dialer: Dialer = default_dialer,
        upstream_connect_timeout: float = 10.0,
        relay_idle_timeout: float = RELAY_IDLE_TIMEOUT,
    ):
        self.leaf_cache = leaf_cache
        self.store = store
        self.resolver = resolver
        self.recorder = recorder
        self.enforcer = enforcer
        self.bus = bus
        self.policy = policy or PolicyMode()
        self.decision_window = decision_window
        self.mirror_upstream = mirror_upstream
        self.dialer = dialer
        self.upstream_connect_timeout = upstream_connect_timeout
        self.relay_idle_timeout = relay_idle_timeout
        self.decisions = DecisionBroker()
        self.flows: dict[int, FlowRecord] = {}
        self._flows_lock = threading.Lock()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((bind, port))
        self._listener.listen(128)
        self._stop = threading.Event()
        self._accept_thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._listener.getsockname()[1]

    def set_policy(self, policy: PolicyMode) -> None:
        self.policy = policy
        self.bus.emit(
            "mode_changed",
            mode=policy.mode.value,
            manual_selection=sorted(policy.manual_selection),
            pending_timeout=policy.pending_timeout,
        )

    def start(self) -> None:
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="proxy-accept", daemon=True
        )
        self._accept_thread.start()

    def stop(self) -> None:
        self._stop.set()
        for action in (
            lambda: self._listener.shutdown(socket.SHUT_RDWR),
            self._listener.close,
        ):
            try:
                action()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, addr = self._listener.accept()
            except OSError:
                break
            threading.Thread(
                target=self._handle_connection, args=(sock, addr), daemon=True
            ).start()

    # -- connection handling ---------------------------------------------------

    @staticmethod
    def _read_head(sock: socket.socket) -> bytes:
        head = b""
        while b"\r\n\r\n" not in head:
            if len(head) > MAX_HEAD:
                raise MalformedRequestError("request head too large")
            byte = sock.recv(1)
            if not byte:
                raise MalformedRequestError("connection closed before request head")
            head += byte
        return head

    def _resolve_client(self, peer_port: int, target: str) -> ClientDescriptor | None:
        try:
            owner = self.resolver.resolve(peer_port)
        except Exception as exc:
            logger.warning("identity resolution failed for port %d: %s", peer_port, exc)
            return None
        if owner is None or not owner.process_name:
            return None
        return ClientDescriptor(
            name=owner.process_name, version=owner.version, first_url=target
        )

    def _handle_connection(self, sock: socket.socket, addr) -> None:
        sock.settimeout(30.0)
        try:
            head = self._read_head(sock)
        except (MalformedRequestError, OSError):
            sock.close()
            return
        if head.startswith(b"CONNECT"):
            try:
                host, port = parse_connect(head)
            except MalformedRequestError:
                try:
                    sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
                finally:
                    sock.close()
                return
            flow = self.accept_tunnel(host, port, addr[1])
            try:
                self._run_flow(flow, sock)
            except Exception as exc:
                logger.exception("flow %d crashed", flow.flow_id)
                self._close_flow(flow, error=f"internal: {exc}")
                try:
                    sock.close()
                except OSError:
                    pass
        else:
            self._plain_http_passthrough(sock, head, addr)

    def accept_tunnel(self, host: str, port: int, client_port: int) -> FlowRecord:
        flow = FlowRecord(
            flow_id=next(_flow_ids),
            client=self._resolve_client(client_port, f"https://{host}:{port}/"),
            client_port=client_port,
            target_host=host,
            target_port=port,
        )
        flow.timings["start"] = time.time()
        with self._flows_lock:
            self.flows[flow.flow_id] = flow
        self.bus.emit(
            "flow_opened",
            flow_id=flow.flow_id,
            client=flow.client_label,
            version=flow.client.version if flow.client else "",
            client_port=client_port,
            target_host=host,
            target_port=port,
        )
        return flow

    def route_flow(self, flow: FlowRecord) -> Route:
        """Decide the flow's path: whitelist check under the active policy."""
        policy = self.policy
        client = flow.client
        if policy.mode is Mode.MANUAL:
            if client is None or client.name not in policy.manual_selection:
                return Route.PASSTHROUGH
        if client is not None:
            try:
                entry = self.store.lookup(client.name, client.version)
            except Exception as exc:
                logger.warning("whitelist lookup failed, treating as untested: %s", exc)
                entry = None
            if entry is not None:
                flow.verdict_at_time = VerdictValue.PENPROOF
                if entry.enforce_anyway:
                    return Route.ENFORCED_PASSTHROUGH
                return Route.PASSTHROUGH
        return Route.PENTEST

    def _run_flow(self, flow: FlowRecord, sock: socket.socket) -> None:
        route = self.route_flow(flow)
        self.bus.emit("flow_routed", flow_id=flow.flow_id, route=route.value)
        if route is Route.PASSTHROUGH:
            self._forward_passthrough(flow, sock)
        elif route is Route.ENFORCED_PASSTHROUGH:
            self._enforced_passthrough(flow, sock)
        else:
            self._pentest_flow(flow, sock)

    # -- passthrough -------------------------------------------------------------

    def _dial_upstream_raw(self, flow: FlowRecord) -> socket.socket | None:
        try:
            return self.dialer(
                flow.target_host, flow.target_port, self.upstream_connect_timeout
            )
        except OSError as exc:
            flow.error = f"upstream unreachable: {exc}"
            return None

    def _forward_passthrough(self, flow: FlowRecord, sock: socket.socket) -> None:
        upstream = self._dial_upstream_raw(flow)
        if upstream is None:
            sock.close()
            self._close_flow(flow, error=flow.error)
            return
        flow.transition(Phase.FORWARDING)
        sock.sendall(b"HTTP/1.1 200 Connection Established\r\n\r\n")
        flow.timings["handshake_done"] = time.time()
        up, down = relay_bidirectional(sock, upstream, self.relay_idle_timeout)
        flow.bytes_up += up
        flow.bytes_down += down
        self._close_flow(flow)

    def _enforced_passthrough(self, flow: FlowRecord, sock: socket.socket) -> None:
        """Whitelisted client that opted into monitoring: run the chain checks,
        then relay the client's own TLS untouched."""
        flow.transition(Phase.ENFORCING)
        try:
            result, _ = self.enforcer.verify_target(flow.target_host, flow.target_port)
        except (DirectFetchError, UpstreamTrustError) as exc:
            self._emit_enforcement_error(flow, exc)
            sock.close()
            self._close_flow(flow, error=str(exc))
            return
        flow.enforcement = result
        self._emit_enforcement(flow, result)
        if result.action is not Action.FORWARDED:
            sock.close()
            self._close_flow(flow, error=result.action.value)
            return
        upstream = self._dial_upstream_raw(flow)
        if upstream is None:
            sock.close()
            self._close_flow(flow, error=flow.error)
            return
        flow.transition(Phase.FORWARDING)
        sock.sendall(b"HTTP/1.1 200 Connection Established\r\n\r\n")
        up, down = relay_bidirectional(sock, upstream, self.relay_idle_timeout)
        flow.bytes_up += up
        flow.bytes_down += down
        self._close_flow(flow)

    # -- pentest & enforcement -----------------------------------------------------

    def _prefetch_upstream_leaf(self, flow: FlowRecord):
        if not self.mirror_upstream:
            return None
        try:
            from cryptography import x509

            from .tlsfetch import capture_chain

            ders = capture_chain(
                flow.target_host, flow.target_port, 3.0, dialer=self.dialer
            )
            return x509.load_der_x509_certificate(ders[0])
        except Exception:
            return None

    def _pentest_flow(self, flow: FlowRecord, sock: socket.socket) -> None:
        flow.transition(Phase.PENTESTING)
        sock.sendall(b"HTTP/1.1 200 Connection Established\r\n\r\n")
        outcome = pentest(
            sock,
            flow.target_host,
            self.leaf_cache,
            upstream_leaf=self._prefetch_upstream_leaf(flow),
            decision_window=self.decision_window,
        )
        verdict = outcome.verdict
        flow.verdict_at_time = verdict.value
        self.bus.emit(
            "pentest_verdict",
            flow_id=flow.flow_id,
            client=flow.client_label,
            version=flow.client.version if flow.client else "",
            verdict=verdict.value.value,
            evidence=verdict.evidence.value if verdict.evidence else None,
        )
        if verdict.value is VerdictValue.UNTESTED:
            sock.close()
            self._close_flow(flow, error="untested: no client hello")
            return
        if flow.client is not None:
            self.recorder.record(flow.client, verdict)
        if verdict.value is VerdictValue.PENPROOF:
            # the client aborted; this is its one failed request
            sock.close()
            self._close_flow(flow)
            return

        # vulnerable: the forged-leaf TLS session is live
        assert outcome.tls_socket is not None
        flow.timings["handshake_done"] = time.time()
        policy = self.policy
        if policy.mode in (Mode.SELECTIVE, Mode.MANUAL):
            flow.transition(Phase.PENDING_DECISION)
            deadline = time.time() + policy.pending_timeout
            self.bus.emit(
                "decision_requested",
                flow_id=flow.flow_id,
                client=flow.client_label,
                deadline=deadline,
                timeout=policy.pending_timeout,
            )
            action = self.decisions.request(flow.flow_id, policy.pending_timeout)
            self.bus.emit("decision_resolved", flow_id=flow.flow_id, action=action)
            if action != "allow":
                outcome.tls_socket.close()
                self._close_flow(flow, error="blocked by operator decision")
                return
        self._enforce_terminated(flow, outcome)

    def _enforce_terminated(self, flow: FlowRecord, outcome: PentestOutcome) -> None:
        client_tls = outcome.tls_socket
        flow.transition(Phase.ENFORCING)
        try:
            result, upstream = self.enforcer.enforce(flow.target_host, flow.target_port)
        except (DirectFetchError, UpstreamTrustError) as exc:
            self._emit_enforcement_error(flow, exc)
            client_tls.close()
            self._close_flow(flow, error=str(exc))
            return
        flow.enforcement = result
        self._emit_enforcement(flow, result)
        if result.action is not Action.FORWARDED or upstream is None:
            client_tls.close()
            self._close_flow(flow, error=result.action.value)
            return
        try:
            upstream.sendall(outcome.initial_data)
            flow.bytes_up += len(outcome.initial_data)
            flow.timings["first_byte"] = time.time()
        except OSError as exc:
            client_tls.close()
            upstream.close()
            self._close_flow(flow, error=f"upstream write failed: {exc}")
            return
        flow.transition(Phase.FORWARDING)
        up, down = relay_bidirectional(client_tls, upstream, self.relay_idle_timeout)
        flow.bytes_up += up
        flow.bytes_down += down
        self._close_flow(flow)

    # -- plain HTTP --------------------------------------------------------------

    def _plain_http_passthrough(self, sock: socket.socket, head: bytes, addr) -> None:
        """Non-TLS proxy request: relayed untouched, just logged."""
        try:
            request_line = head.split(b"\r\n", 1)[0].decode("ascii", "replace")
            host, port = _extract_plain_target(head)
        except MalformedRequestError:
            try:
                sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
            finally:
                sock.close()
            return
        self.bus.emit(
            "http_passthrough", client_port=addr[1], request_line=request_line, target_host=host
        )
        try:
            upstream = self.dialer(host, port, self.upstream_connect_timeout)
        except OSError:
            try:
                sock.sendall(b"HTTP/1.1 502 Bad Gateway\r\n\r\n")
            finally:
                sock.close()
            return
        try:
            upstream.sendall(head)
            relay_bidirectional(sock, upstream, self.relay_idle_timeout)
        except OSError:
            pass
        finally:
            for s in (sock, upstream):
                try:
                    s.close()
                except OSError:
                    pass

    # -- bookkeeping ---------------------------------------------------------------

    def _emit_enforcement(self, flow: FlowRecord, result: EnforcementResult) -> None:
        self.bus.emit(
            "enforcement",
            flow_id=flow.flow_id,
            action=result.action.value,
            reason=result.reason,
            divergence_index=result.divergence_index,
        )

    def _emit_enforcement_error(self, flow: FlowRecord, exc: Exception) -> None:
        self.bus.emit(
            "enforcement",
            flow_id=flow.flow_id,
            action="error",
            reason=str(exc),
            divergence_index=None,
        )

    def _close_flow(self, flow: FlowRecord, error: str | None = None) -> None:
        if flow.phase is Phase.CLOSED:
            return
        if error is not None:
            flow.error = error
        flow.transition(Phase.CLOSED)
        flow.timings["end"] = time.time()
        self.bus.emit(
            "flow_closed",
            flow_id=flow.flow_id,
            bytes_up=flow.bytes_up,
            bytes_down=flow.bytes_down,
            verdict=flow.verdict_at_time.value,
            error=flow.error,
        )

    def flow_snapshots(self) -> list[dict]:
        with self._flows_lock:
            return [f.snapshot() for f in self.flows.values()]


def _extract_plain_target(head: bytes) -> tuple[str, int]:
    request_line = head.split(b"\r\n", 1)[0].decode("ascii", "replace")
    parts = request_line.split()
    if len(parts) != 3:
        raise MalformedRequestError(f"bad request line {request_line!r}")
    uri = parts[1]
    if uri.startswith("http://"):
        rest = uri[len("http://") :]
        hostport = rest.split("/", 1)[0]
    else:
        hostport = ""
        for line in head.split(b"\r\n")[1:]:
            if line.lower().startswith(b"host:"):
                hostport = line.split(b":", 1)[1].strip().decode("ascii", "replace")
                break
        if not hostport:
            raise MalformedRequestError("no Host header in plain HTTP request")
    if ":" in hostport:
        host, _, port_str = hostport.rpartition(":")
        try:
            return host, int(port_str)
        except ValueError as exc:
            raise MalformedRequestError(f"bad port {hostport!r}") from exc
    return hostport, 80
