"""Encrypted, tamper-evident persistence of pen-test-proof clients.

One authenticated-encrypted file holds the whole whitelist as a JSON array.
Readers work against immutable in-memory snapshots; writers serialize through
a lock and publish a new snapshot after an atomic write-temp-then-rename.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

MAGIC = b"MTHY"
FORMAT_VERSION = 1
NONCE_SIZE = 12
KEY_SIZE = 32


class StoreError(Exception):
    pass


class StoreTamperedError(StoreError):
    """Authentication failed: the file was modified or the key is wrong."""


@dataclass(frozen=True)
class ClientDescriptor:
    """Identity of the program behind a flow; keyed on (name, version)."""

    name: str
    version: str
    first_url: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("client name must be non-empty")

    @property
    def key(self) -> tuple[str, str]:
        return (self.name, self.version)


@dataclass(frozen=True)
class WhitelistEntry:
    descriptor: ClientDescriptor
    inserted_at: float
    enforce_anyway: bool = False


def _encode_entries(entries: list[WhitelistEntry]) -> bytes:
    rows = [
        {
            "name": e.descriptor.name,
            "version": e.descriptor.version,
            "first_url": e.descriptor.first_url,
            "inserted_at": e.inserted_at,
            "enforce_anyway": e.enforce_anyway,
        }
        for e in entries
    ]
    return json.dumps(rows, sort_keys=True).encode("utf-8")


def _decode_entries(raw: bytes) -> list[WhitelistEntry]:
    try:
        rows = json.loads(raw.decode("utf-8"))
        return [
            WhitelistEntry(
                descriptor=ClientDescriptor(
                    name=r["name"], version=r["version"], first_url=r.get("first_url", "")
                ),
                inserted_at=float(r["inserted_at"]),
                enforce_anyway=bool(r["enforce_anyway"]),
            )
            for r in rows
        ]
    except (ValueError, KeyError, TypeError) as exc:
        raise StoreError(f"store payload malformed: {exc}") from exc


class WhitelistStore:
    """Handle over the encrypted whitelist file."""

    def __init__(self, path: Path, key: bytes):
        if len(key) != KEY_SIZE:
            raise StoreError(f"store key must be {KEY_SIZE} bytes, got {len(key)}")
        self.path = Path(path)
        self._aead = AESGCM(key)
        self._lock = threading.Lock()
        self._snapshot: dict[tuple[str, str], WhitelistEntry] = {}
        if self.path.exists():
            self._snapshot = self._load()

    # -- persistence ---------------------------------------------------------

    def _aad(self) -> bytes:
        return MAGIC + bytes([FORMAT_VERSION])

    def _load(self) -> dict[tuple[str, str], WhitelistEntry]:
        blob = self.path.read_bytes()
        if len(blob) < len(MAGIC) + 1 + NONCE_SIZE or blob[: len(MAGIC)] != MAGIC:
            raise StoreTamperedError("store tampered: bad header")
        if blob[len(MAGIC)] != FORMAT_VERSION:
            raise StoreTamperedError("store tampered: unknown format version")
        nonce = blob[len(MAGIC) + 1 : len(MAGIC) + 1 + NONCE_SIZE]
        ciphertext = blob[len(MAGIC) + 1 + NONCE_SIZE :]
        try:
            raw = self._aead.decrypt(nonce, ciphertext, self._aad())
        except InvalidTag as exc:
            raise StoreTamperedError("store tampered: authentication failed") from exc
        return {e.descriptor.key: e for e in _decode_entries(raw)}

    def _persist(self, snapshot: dict[tuple[str, str], WhitelistEntry]) -> None:
        nonce = secrets.token_bytes(NONCE_SIZE)
        ciphertext = self._aead.encrypt(nonce, _encode_entries(list(snapshot.values())), self._aad())
        blob = MAGIC + bytes([FORMAT_VERSION]) + nonce + ciphertext
        tmp = self.path.with_name(self.path.name + f".tmp{os.getpid()}")
        tmp.write_bytes(blob)
        os.replace(tmp, self.path)

    # -- operations ------------------------------------------------------------

    def lookup(self, name: str, version: str) -> WhitelistEntry | None:
        return self._snapshot.get((name, version))

    def insert(self, entry: WhitelistEntry) -> None:
        with self._lock:
            new = dict(self._snapshot)
            new[entry.descriptor.key] = entry
            self._persist(new)
            self._snapshot = new

    def remove(self, name: str, version: str) -> bool:
        with self._lock:
            if (name, version) not in self._snapshot:
                return False
            new = dict(self._snapshot)
            del new[(name, version)]
            self._persist(new)
            self._snapshot = new
            return True

    def set_enforce_anyway(self, name: str, version: str, value: bool) -> bool:
        with self._lock:
            entry = self._snapshot.get((name, version))
            if entry is None:
                return False
            new = dict(self._snapshot)
            new[(name, version)] = replace(entry, enforce_anyway=value)
            self._persist(new)
            self._snapshot = new
            return True

    def entries(self) -> list[WhitelistEntry]:
        return sorted(self._snapshot.values(), key=lambda e: e.descriptor.key)

    def clear(self) -> None:
        with self._lock:
            self._persist({})
            self._snapshot = {}

    def __len__(self) -> int:
        return len(self._snapshot)


def open_store(path: Path | str, key: bytes) -> WhitelistStore:
    """Open (decrypt + authenticate) the store; absent file means empty store."""
    return WhitelistStore(Path(path), key)


def make_entry(
    name: str, version: str, first_url: str = "", enforce_anyway: bool = False
) -> WhitelistEntry:
    return WhitelistEntry(
        descriptor=ClientDescriptor(name=name, version=version, first_url=first_url),
        inserted_at=time.time(),
        enforce_anyway=enforce_anyway,
    )
