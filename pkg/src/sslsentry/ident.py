"""Socket-to-process attribution via the kernel's per-socket tables.

Maps the source port of an intercepted connection to the owning process by
parsing /proc/net/tcp (and tcp6), then following the socket inode to a pid.
Resolution is pluggable so the rest of the system works on platforms without
procfs and so tests can inject a synthetic table.
"""

from __future__ import annotations

import glob
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Protocol

logger = logging.getLogger(__name__)

TCP_ESTABLISHED = 0x01


@dataclass(frozen=True)
class SocketRow:
    local_port: int
    state: int
    uid: int
    inode: int


@dataclass(frozen=True)
class ProcTcpTable:
    rows: tuple[SocketRow, ...]
    rejected: int


@dataclass(frozen=True)
class SocketOwner:
    local_port: int
    uid: int
    inode: int
    process_name: str
    pid: int
    version: str = "unknown"


def parse_proc_tcp(text: str) -> ProcTcpTable:
    """Parse kernel socket-table text; malformed rows are skipped and counted.

    Addresses are little-endian hex "ADDR:PORT"; only the port half matters
    here. Works for both the IPv4 and IPv6 table variants since the column
    layout is identical.
    """
    rows: list[SocketRow] = []
    rejected = 0
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("sl"):
            continue
        parts = stripped.split()
        try:
            local = parts[1]
            port = int(local.rsplit(":", 1)[1], 16)
            state = int(parts[3], 16)
            uid = int(parts[7])
            inode = int(parts[9])
            if not (0 <= port <= 0xFFFF):
                raise ValueError(f"port out of range: {port}")
            rows.append(SocketRow(local_port=port, state=state, uid=uid, inode=inode))
        except (IndexError, ValueError):
            rejected += 1
    return ProcTcpTable(rows=tuple(rows), rejected=rejected)


class PortResolver(Protocol):
    def resolve(self, port: int) -> SocketOwner | None: ...


class ProcfsResolver:
    """Resolves ports through /proc/net/tcp{,6} and /proc/<pid>/fd scanning."""

    def __init__(
        self,
        proc_root: str = "/proc",
        version_map: dict[str, str] | None = None,
        cache_ttl: float = 1.0,
    ):
        self.proc_root = proc_root
        self.version_map = version_map or {}
        self.cache_ttl = cache_ttl
        self._lock = threading.Lock()
        self._cached: ProcTcpTable | None = None
        self._cached_at = 0.0

    def _read_tables(self, force: bool = False) -> ProcTcpTable | None:
        with self._lock:
            now = time.monotonic()
            if (
                not force
                and self._cached is not None
                and now - self._cached_at < self.cache_ttl
            ):
                return self._cached
            rows: list[SocketRow] = []
            rejected = 0
            found_any = False
            for name in ("net/tcp", "net/tcp6"):
                path = os.path.join(self.proc_root, name)
                try:
                    with open(path, "r") as fh:
                        table = parse_proc_tcp(fh.read())
                except OSError as exc:
                    logger.debug("cannot read %s: %s", path, exc)
                    continue
                found_any = True
                rows.extend(table.rows)
                rejected += table.rejected
            if not found_any:
                logger.warning("no kernel socket tables readable under %s", self.proc_root)
                return None
            self._cached = ProcTcpTable(rows=tuple(rows), rejected=rejected)
            self._cached_at = now
            return self._cached

    def _inode_to_pid(self, inode: int) -> int | None:
        target = f"socket:[{inode}]"
        for fd_path in glob.glob(os.path.join(self.proc_root, "[0-9]*", "fd", "[0-9]*")):
            try:
                if os.readlink(fd_path) == target:
                    return int(fd_path.split(os.sep)[-3])
            except OSError:
                continue
        return None

    def _process_name(self, pid: int) -> str:
        try:
            with open(os.path.join(self.proc_root, str(pid), "comm"), "r") as fh:
                return fh.read().strip()
        except OSError:
            return ""

    def _match(self, table: ProcTcpTable, port: int) -> SocketRow | None:
        for row in table.rows:
            if row.local_port == port and row.state == TCP_ESTABLISHED:
                return row
        return None

    def resolve(self, port: int) -> SocketOwner | None:
        table = self._read_tables()
        if table is None:
            return None
        row = self._match(table, port)
        if row is None:
            # new connections are never in a cached snapshot; read fresh once
            table = self._read_tables(force=True)
            row = self._match(table, port) if table else None
        if row is None:
            return None
        pid = self._inode_to_pid(row.inode)
        if pid is None:
            return None
        name = self._process_name(pid)
        if not name:
            return None
        return SocketOwner(
            local_port=port,
            uid=row.uid,
            inode=row.inode,
            process_name=name,
            pid=pid,
            version=self.version_map.get(name, "unknown"),
        )


class StaticTableResolver:
    """Injectable resolver: tests and the simulation lab register ports here."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._by_port: dict[int, SocketOwner] = {}

    def register(self, port: int, name: str, version: str = "unknown", uid: int = 0) -> None:
        with self._lock:
            self._by_port[port] = SocketOwner(
                local_port=port,
                uid=uid,
                inode=0,
                process_name=name,
                pid=0,
                version=version,
            )

    def unregister(self, port: int) -> None:
        with self._lock:
            self._by_port.pop(port, None)

    def resolve(self, port: int) -> SocketOwner | None:
        with self._lock:
            return self._by_port.get(port)


class NullResolver:
    """Fallback for platforms with no attribution source at all."""

    def resolve(self, port: int) -> SocketOwner | None:
        return None


def format_proc_tcp_row(sl: int, local_port: int, state: int, uid: int, inode: int) -> str:
    """Render one synthetic table row in the kernel's format (test support)."""
    return (
        f"{sl:4d}: 0100007F:{local_port:04X} 00000000:0000 {state:02X} "
        f"00000000:00000000 00:00000000 00000000 {uid:5d}        0 {inode} 1 0000000000000000 20 4 30 10 -1"
    )
