"""Localhost admin API: the dashboard's window into the proxy.

Read-and-decide only: an ordered event stream (SSE with event ids, resumable
via Last-Event-ID or ?since=), the decision endpoint, whitelist management,
and live policy mode control. Never exposed beyond loopback by default.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .proxy import Mode, PolicyMode, ProxyServer

logger = logging.getLogger(__name__)


class AdminApi:
    def __init__(self, proxy: ProxyServer, bind: str = "127.0.0.1", port: int = 0):
        self.proxy = proxy
        self._stopping = threading.Event()
        api = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                logger.debug("admin: " + fmt, *args)

            def _json(self, status: int, payload) -> None:
                body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                self.wfile.write(body)

            def _read_body(self):
                length = int(self.headers.get("Content-Length", "0") or "0")
                raw = self.rfile.read(length) if length else b"{}"
                try:
                    return json.loads(raw.decode("utf-8"))
                except (ValueError, UnicodeDecodeError):
                    return None

            def do_OPTIONS(self) -> None:
                self.send_response(204)
                self.send_header("Access-Control-Allow-Origin", "*")
                self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
                self.send_header("Access-Control-Allow-Headers", "Content-Type, Last-Event-ID")
                self.send_header("Content-Length", "0")
                self.end_headers()

            def do_GET(self) -> None:
                parts = urlsplit(self.path)
                params = parse_qs(parts.query)
                if parts.path == "/events":
                    self._stream_events(params)
                elif parts.path == "/events.json":
                    since = int(params.get("since", ["0"])[0])
                    events = api.proxy.bus.events_since(since)
                    self._json(
                        200,
                        [json.loads(e.to_json()) for e in events],
                    )
                elif parts.path == "/whitelist":
                    rows = [
                        {
                            "name": e.descriptor.name,
                            "version": e.descriptor.version,
                            "first_url": e.descriptor.first_url,
                            "inserted_at": e.inserted_at,
                            "enforce_anyway": e.enforce_anyway,
                        }
                        for e in api.proxy.store.entries()
                    ]
                    self._json(200, rows)
                elif parts.path == "/mode":
                    policy = api.proxy.policy
                    self._json(
                        200,
                        {
                            "mode": policy.mode.value,
                            "manual_selection": sorted(policy.manual_selection),
                            "pending_timeout": policy.pending_timeout,
                        },
                    )
                elif parts.path == "/flows":
                    self._json(200, api.proxy.flow_snapshots())
                elif parts.path == "/decisions":
                    self._json(200, api.proxy.decisions.pending())
                else:
                    self._json(404, {"error": "not-found"})

            def _stream_events(self, params) -> None:
                last_id = 0
                header_id = self.headers.get("Last-Event-ID")
                if header_id and header_id.isdigit():
                    last_id = int(header_id)
                if "since" in params:
                    try:
                        last_id = int(params["since"][0])
                    except ValueError:
                        pass
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                try:
                    while not api._stopping.is_set():
                        events = api.proxy.bus.wait_for_events(last_id, timeout=1.0)
                        if not events:
                            self.wfile.write(b": keepalive\n\n")
                            self.wfile.flush()
                            continue
                        for ev in events:
                            payload = (
                                f"id: {ev.event_id}\ndata: {ev.to_json()}\n\n".encode("utf-8")
                            )
                            self.wfile.write(payload)
                            last_id = ev.event_id
                        self.wfile.flush()
                except (OSError, ValueError):
                    pass  # client went away

            def do_POST(self) -> None:
                parts = urlsplit(self.path)
                body = self._read_body()
                if body is None:
                    self._json(400, {"error": "bad-json"})
                    return
                if parts.path == "/decision":
                    flow_id = body.get("flow_id")
                    action = str(body.get("action", "")).lower()
                    if not isinstance(flow_id, int) or action not in ("allow", "block"):
                        self._json(400, {"error": "bad-request"})
                        return
                    status = api.proxy.decisions.submit(flow_id, action)
                    code = 200 if status == "accepted" else 409
                    self._json(code, {"status": status})
                elif parts.path == "/whitelist":
                    op = body.get("op")
                    name, version = body.get("name", ""), body.get("version", "")
                    if op == "remove":
                        ok = api.proxy.store.remove(name, version)
                    elif op == "set_enforce_anyway":
                        ok = api.proxy.store.set_enforce_anyway(
                            name, version, bool(body.get("value", False))
                        )
                    else:
                        self._json(400, {"error": "bad-op"})
                        return
                    api.proxy.bus.emit(
                        "whitelist_changed", op=op, name=name, version=version, ok=ok
                    )
                    self._json(200 if ok else 404, {"ok": ok})
                elif parts.path == "/mode":
                    try:
                        mode = Mode(str(body.get("mode", "")).lower())
                    except ValueError:
                        self._json(400, {"error": "bad-mode"})
                        return
                    selection = frozenset(body.get("manual_selection", []))
                    timeout = float(
                        body.get("pending_timeout", api.proxy.policy.pending_timeout)
                    )
                    api.proxy.set_policy(
                        PolicyMode(
                            mode=mode, manual_selection=selection, pending_timeout=timeout
                        )
                    )
                    self._json(200, {"ok": True})
                else:
                    self._json(404, {"error": "not-found"})

        class _Server(ThreadingHTTPServer):
            daemon_threads = True

        self._httpd = _Server((bind, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="admin-api", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._stopping.set()
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
