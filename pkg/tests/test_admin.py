import json
import socket
import threading
import time
import urllib.request

import pytest

from sslsentry.proxy import Mode, PolicyMode
from sslsentry.simlab import Behavior, Lab
from sslsentry.whitelist import make_entry


@pytest.fixture()
def lab():
    with Lab(policy=PolicyMode(mode=Mode.SELECTIVE, pending_timeout=5.0), admin=True) as lab:
        yield lab


def _get(port, path):
    with urllib.request.urlopen(f"http://127.0.0.1:{port}{path}", timeout=5) as resp:
        return resp.status, json.loads(resp.read())


def _post(port, path, payload):
    body = json.dumps(payload).encode()
    request = urllib.request.Request(
        f"http://127.0.0.1:{port}{path}", data=body, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(request, timeout=5) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_events_json_snapshot(lab):
    client = lab.client(Behavior.STRICT, name="snap-app")
    lab.run_client(client)
    lab.wait_event("flow_closed")
    status, events = _get(lab.admin.port, "/events.json?since=0")
    assert status == 200
    names = [e["event"] for e in events]
    assert "flow_opened" in names
    assert "pentest_verdict" in names
    ids = [e["event_id"] for e in events]
    assert ids == sorted(ids)
    # resume: only events after the given id
    status, tail = _get(lab.admin.port, f"/events.json?since={ids[-2]}")
    assert [e["event_id"] for e in tail] == ids[-1:]


def test_decision_flow_through_api(lab):
    client = lab.client(Behavior.NAIVE, name="ui-approved")
    outcome = {}

    def run():
        outcome["result"] = lab.run_client(client, payload=b"login=1")

    worker = threading.Thread(target=run, daemon=True)
    worker.start()
    pending = None
    deadline = time.monotonic() + 5
    while not pending and time.monotonic() < deadline:
        _, pending = _get(lab.admin.port, "/decisions")
        time.sleep(0.02)
    assert pending, "no pending decision appeared"
    flow_id = pending[0]["flow_id"]
    status, reply = _post(lab.admin.port, "/decision", {"flow_id": flow_id, "action": "allow"})
    assert status == 200
    assert reply == {"status": "accepted"}
    worker.join(timeout=10)
    assert outcome["result"].ok
    enforcement = lab.wait_event("enforcement", flow_id=flow_id)
    assert enforcement["action"] == "Forwarded"


def test_decision_after_timeout_expired(lab):
    status, reply = _post(lab.admin.port, "/decision", {"flow_id": 424242, "action": "allow"})
    assert status == 409
    assert reply == {"status": "expired"}


def test_decision_bad_request(lab):
    status, reply = _post(lab.admin.port, "/decision", {"flow_id": "x", "action": "maybe"})
    assert status == 400


def test_whitelist_admin_roundtrip(lab):
    lab.store.insert(make_entry("adminapp", "1.0", first_url="https://shop.test/"))
    status, rows = _get(lab.admin.port, "/whitelist")
    assert status == 200
    assert rows[0]["name"] == "adminapp"
    assert rows[0]["enforce_anyway"] is False

    status, reply = _post(
        lab.admin.port,
        "/whitelist",
        {"op": "set_enforce_anyway", "name": "adminapp", "version": "1.0", "value": True},
    )
    assert status == 200 and reply["ok"]
    assert lab.store.lookup("adminapp", "1.0").enforce_anyway is True

    status, reply = _post(
        lab.admin.port, "/whitelist", {"op": "remove", "name": "adminapp", "version": "1.0"}
    )
    assert status == 200 and reply["ok"]
    assert lab.store.lookup("adminapp", "1.0") is None

    status, reply = _post(
        lab.admin.port, "/whitelist", {"op": "remove", "name": "ghost", "version": "9"}
    )
    assert status == 404


def test_mode_change_via_api(lab):
    status, mode_doc = _get(lab.admin.port, "/mode")
    assert mode_doc["mode"] == "selective"
    status, reply = _post(
        lab.admin.port, "/mode", {"mode": "automatic", "manual_selection": []}
    )
    assert status == 200
    assert lab.proxy.policy.mode is Mode.AUTOMATIC
    event = lab.wait_event("mode_changed")
    assert event["mode"] == "automatic"
    # automatic mode: vulnerable flow must not pend
    client = lab.client(Behavior.NAIVE, name="auto-app")
    result = lab.run_client(client, payload=b"x=1")
    assert result.ok
    assert lab.last_event("decision_requested") is None


def test_flows_snapshot(lab):
    client = lab.client(Behavior.STRICT, name="flows-app")
    lab.run_client(client)
    lab.wait_event("flow_closed")
    status, flows = _get(lab.admin.port, "/flows")
    assert status == 200
    assert any(f["client"] == "flows-app" and f["phase"] == "Closed" for f in flows)


def _read_sse_events(sock, want: int, timeout: float = 5.0) -> list[dict]:
    sock.settimeout(timeout)
    buffer = b""
    events = []
    deadline = time.monotonic() + timeout
    while len(events) < want and time.monotonic() < deadline:
        try:
            chunk = sock.recv(65536)
        except TimeoutError:
            break
        if not chunk:
            break
        buffer += chunk
        while b"\n\n" in buffer:
            frame, _, buffer = buffer.partition(b"\n\n")
            event_id, data = None, None
            for line in frame.split(b"\n"):
                if line.startswith(b"id: "):
                    event_id = int(line[4:])
                elif line.startswith(b"data: "):
                    data = json.loads(line[6:])
            if data is not None:
                data["_sse_id"] = event_id
                events.append(data)
    return events


def test_sse_stream_and_resume(lab):
    client = lab.client(Behavior.STRICT, name="sse-app")
    lab.run_client(client)
    lab.wait_event("flow_closed")

    sock = socket.create_connection(("127.0.0.1", lab.admin.port), timeout=5)
    sock.sendall(b"GET /events HTTP/1.1\r\nHost: localhost\r\nAccept: text/event-stream\r\n\r\n")
    first = _read_sse_events(sock, want=4)
    assert len(first) >= 4
    assert first[0]["_sse_id"] == first[0]["event_id"]
    sock.close()

    # reconnect with Last-Event-ID resumes exactly after the gap
    resume_from = first[1]["event_id"]
    sock = socket.create_connection(("127.0.0.1", lab.admin.port), timeout=5)
    sock.sendall(
        f"GET /events HTTP/1.1\r\nHost: localhost\r\nLast-Event-ID: {resume_from}\r\n\r\n".encode()
    )
    resumed = _read_sse_events(sock, want=2)
    sock.close()
    assert resumed[0]["event_id"] == resume_from + 1
