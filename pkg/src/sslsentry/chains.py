"""X.509 certificate chain parsing, ordering, comparison and serialization.

Chains are value objects: parsing and normalization produce immutable
structures, and the comparison rule keys on certificate signature bytes,
position by position, after leaf-first ordering. A chain whose entries
cannot be uniquely ordered by issuer/subject linking is flagged rather than
rejected, and the comparator treats the flag as a mismatch (fail-closed).
"""

from __future__ import annotations

import base64
import binascii
import enum
import json
from dataclasses import dataclass, field
from datetime import datetime

from cryptography import x509
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat


class ChainError(Exception):
    """Base class for chain handling failures."""


class ChainParseError(ChainError):
    """A wire element could not be parsed as a DER certificate."""


class ComparisonReason(enum.Enum):
    LENGTH_MISMATCH = "LengthMismatch"
    SIGNATURE_MISMATCH = "SignatureMismatch"
    UNLINKABLE_CHAIN = "UnlinkableChain"


@dataclass(frozen=True)
class CertEntry:
    """One parsed certificate plus the exact bytes it arrived as."""

    raw_der: bytes
    subject: str
    issuer: str
    signature_bytes: bytes
    public_key_info: bytes
    not_before: datetime
    not_after: datetime

    @classmethod
    def from_der(cls, der: bytes) -> "CertEntry":
        try:
            cert = x509.load_der_x509_certificate(der)
            spki = cert.public_key().public_bytes(
                Encoding.DER, PublicFormat.SubjectPublicKeyInfo
            )
            return cls(
                raw_der=der,
                subject=cert.subject.rfc4514_string(),
                issuer=cert.issuer.rfc4514_string(),
                signature_bytes=cert.signature,
                public_key_info=spki,
                not_before=cert.not_valid_before_utc,
                not_after=cert.not_valid_after_utc,
            )
        except Exception as exc:
            raise ChainParseError(f"unparseable certificate: {exc}") from exc


@dataclass(frozen=True)
class CertificateChain:
    """Ordered list of certificates; ``unlinkable`` marks a failed ordering."""

    entries: tuple[CertEntry, ...]
    unlinkable: bool = False

    def __post_init__(self) -> None:
        if not self.entries:
            raise ChainParseError("certificate chain must be non-empty")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def leaf(self) -> CertEntry:
        return self.entries[0]

    def raw(self) -> list[bytes]:
        return [e.raw_der for e in self.entries]


@dataclass(frozen=True)
class ChainComparison:
    """Outcome of the positionwise signature comparison of two chains.

    ``raw_identical`` records whole-DER equality as a diagnostic; it never
    decides ``matched``.
    """

    matched: bool
    first_divergence: int | None = None
    reason: ComparisonReason | None = None
    raw_identical: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        if self.matched and (self.first_divergence is not None or self.reason is not None):
            raise ValueError("matched comparison cannot carry divergence or reason")
        if not self.matched and self.reason is None:
            raise ValueError("mismatch comparison must carry a reason")


def parse_chain(wire: list[bytes]) -> CertificateChain:
    """Parse a list of DER blobs into a chain, in the given order.

    Fails closed: any unparseable element rejects the whole chain.
    """
    if not wire:
        raise ChainParseError("certificate chain must be non-empty")
    return CertificateChain(entries=tuple(CertEntry.from_der(der) for der in wire))


def normalize_order(chain: CertificateChain) -> CertificateChain:
    """Reorder entries leaf-first by issuer/subject linking, dropping duplicates.

    Returns the chain flagged ``unlinkable`` when no unique leaf-first linking
    exists (missing links, forks, or duplicate subjects); never raises.
    """
    seen: set[bytes] = set()
    entries: list[CertEntry] = []
    for e in chain.entries:
        if e.raw_der not in seen:
            seen.add(e.raw_der)
            entries.append(e)

    if len(entries) == 1:
        return CertificateChain(entries=tuple(entries))

    # The leaf is the unique entry that issues nothing else in the set.
    leaves = [
        e
        for e in entries
        if not any(o is not e and o.issuer == e.subject for o in entries)
    ]
    if len(leaves) != 1:
        return CertificateChain(entries=chain.entries, unlinkable=True)

    ordered = [leaves[0]]
    remaining = [e for e in entries if e is not leaves[0]]
    while remaining:
        nxt = [e for e in remaining if e.subject == ordered[-1].issuer]
        if len(nxt) != 1:
            return CertificateChain(entries=chain.entries, unlinkable=True)
        ordered.append(nxt[0])
        remaining.remove(nxt[0])
    return CertificateChain(entries=tuple(ordered))


def compare_chains(a: CertificateChain, b: CertificateChain) -> ChainComparison:
    """Compare two normalized chains by per-position signature bytes.

    Matched iff equal length and every position's signature bytes are equal.
    Either chain flagged unlinkable forces a mismatch. The length check
    precedes the elementwise check.
    """
    raw_identical = len(a) == len(b) and all(
        x.raw_der == y.raw_der for x, y in zip(a.entries, b.entries)
    )
    if a.unlinkable or b.unlinkable:
        return ChainComparison(
            matched=False,
            reason=ComparisonReason.UNLINKABLE_CHAIN,
            raw_identical=raw_identical,
        )
    if len(a) != len(b):
        return ChainComparison(
            matched=False,
            reason=ComparisonReason.LENGTH_MISMATCH,
            raw_identical=raw_identical,
        )
    for i, (x, y) in enumerate(zip(a.entries, b.entries)):
        if x.signature_bytes != y.signature_bytes:
            return ChainComparison(
                matched=False,
                first_divergence=i,
                reason=ComparisonReason.SIGNATURE_MISMATCH,
                raw_identical=raw_identical,
            )
    return ChainComparison(matched=True, raw_identical=raw_identical)


def serialize_chain(chain: CertificateChain) -> str:
    """Serialize to the wire JSON form: {"chain":["<base64 DER>",...]}.

    Standard base64 alphabet with padding, compact separators, chain order
    preserved. ``deserialize_chain`` is the exact inverse.
    """
    if not chain.entries:
        raise ChainParseError("certificate chain must be non-empty")
    encoded = [base64.b64encode(der).decode("ascii") for der in chain.raw()]
    return json.dumps({"chain": encoded}, separators=(",", ":"))


def deserialize_chain(text: str) -> CertificateChain:
    """Parse the wire JSON form back into a chain."""
    try:
        obj = json.loads(text)
        items = obj["chain"]
        if not isinstance(items, list):
            raise TypeError("chain is not a list")
        wire = [base64.b64decode(s, validate=True) for s in items]
    except ChainError:
        raise
    except (KeyError, TypeError, ValueError, binascii.Error) as exc:
        raise ChainParseError(f"malformed chain document: {exc}") from exc
    return parse_chain(wire)
