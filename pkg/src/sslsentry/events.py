"""Structured flow event stream shared by the proxy, CLI and dashboard."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from typing import IO, Any


@dataclass(frozen=True)
class Event:
    event_id: int
    ts: float
    event: str
    fields: dict[str, Any]

    def to_json(self) -> str:
        doc: dict[str, Any] = {"event_id": self.event_id, "ts": self.ts, "event": self.event}
        doc.update(self.fields)
        return json.dumps(doc, separators=(",", ":"), sort_keys=True)


class EventBus:
    """Append-only, id-ordered event log with blocking reads for streaming."""

    def __init__(self, sink: IO[str] | None = None):
        self._events: list[Event] = []
        self._cond = threading.Condition()
        self._next_id = 1
        self._sink = sink

    def emit(self, event: str, **fields: Any) -> Event:
        with self._cond:
            ev = Event(event_id=self._next_id, ts=time.time(), event=event, fields=fields)
            self._next_id += 1
            self._events.append(ev)
            if self._sink is not None:
                self._sink.write(ev.to_json() + "\n")
                self._sink.flush()
            self._cond.notify_all()
        return ev

    def events_since(self, event_id: int = 0) -> list[Event]:
        """All events with id strictly greater than ``event_id``."""
        with self._cond:
            # ids are dense and 1-based, so slicing beats scanning
            start = max(event_id, 0)
            return self._events[start:]

    def wait_for_events(self, event_id: int, timeout: float | None = None) -> list[Event]:
        """Block until at least one event newer than ``event_id`` exists."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while self._next_id <= event_id + 1:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return []
                self._cond.wait(remaining)
            return self._events[event_id:]

    @property
    def last_id(self) -> int:
        with self._cond:
            return self._next_id - 1
