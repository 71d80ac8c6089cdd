"""Local certificate authority: root material, hostname-matching forged
leaves for interception, and the tamper-evident pinned oracle keystore."""

from __future__ import annotations

import hmac
import hashlib
import ipaddress
import re
import secrets
import struct
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, rsa
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

CA_COMMON_NAME = "sslsentry root CA"
DEFAULT_LEAF_VALIDITY = timedelta(days=30)
LEAF_BACKDATE = timedelta(hours=1)

# Named key-strength profiles. EC P-256 is the default: leaf forging happens
# on the accept path, and EC keygen is orders of magnitude cheaper than RSA.
KEY_PROFILES = {
    "default": lambda: ec.generate_private_key(ec.SECP256R1()),
    "ec-p256": lambda: ec.generate_private_key(ec.SECP256R1()),
    "rsa-2048": lambda: rsa.generate_private_key(public_exponent=65537, key_size=2048),
}

_DNS_LABEL = re.compile(r"^(?!-)[a-zA-Z0-9-]{1,63}(?<!-)$")


class CaError(Exception):
    """Base class for certificate-authority failures."""


class KeyGenerationError(CaError):
    pass


class CaExpiredError(CaError):
    pass


class MalformedHostError(CaError):
    pass


class KeystoreError(Exception):
    """Base class for pinned-keystore failures."""


class KeystoreTamperedError(KeystoreError):
    pass


class KeystoreFormatError(KeystoreError):
    pass


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class CaMaterial:
    """Root certificate, its private key, and the monotonic serial counter."""

    root_certificate: x509.Certificate
    root_private_key: ec.EllipticCurvePrivateKey | rsa.RSAPrivateKey
    key_profile: str = "default"
    _serial: int = 1
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def next_serial(self) -> int:
        with self._lock:
            serial = self._serial
            self._serial += 1
            return serial

    def root_pem(self) -> bytes:
        return self.root_certificate.public_bytes(serialization.Encoding.PEM)

    def root_der(self) -> bytes:
        return self.root_certificate.public_bytes(serialization.Encoding.DER)

    def key_pem(self) -> bytes:
        return self.root_private_key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )


@dataclass(frozen=True)
class ForgedLeaf:
    certificate: x509.Certificate
    private_key: ec.EllipticCurvePrivateKey | rsa.RSAPrivateKey
    target_host: str

    def cert_pem(self) -> bytes:
        return self.certificate.public_bytes(serialization.Encoding.PEM)

    def key_pem(self) -> bytes:
        return self.private_key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )


@dataclass(frozen=True)
class PinnedKeystore:
    """The exact oracle leaf certificate plus the MAC that authenticated it."""

    oracle_certificate: x509.Certificate
    oracle_der: bytes
    integrity_digest: bytes


def generate_ca(
    validity_days: int,
    key_profile: str = "default",
    seed: int | None = None,
) -> CaMaterial:
    """Create a fresh self-signed CA root.

    ``seed`` fixes the serial sequence for reproducible tests; key material
    itself always comes from the system CSPRNG.
    """
    if validity_days < 1:
        raise CaError(f"validity_days must be >= 1, got {validity_days}")
    if key_profile not in KEY_PROFILES:
        raise KeyGenerationError(f"unknown key profile {key_profile!r}")
    try:
        key = KEY_PROFILES[key_profile]()
    except Exception as exc:
        raise KeyGenerationError(f"key generation failed: {exc}") from exc

    first_serial = seed if seed is not None else secrets.randbits(40) | 1
    name = x509.Name(
        [
            x509.NameAttribute(NameOID.ORGANIZATION_NAME, "sslsentry"),
            x509.NameAttribute(NameOID.COMMON_NAME, CA_COMMON_NAME),
        ]
    )
    now = _utcnow()
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(first_serial)
        .not_valid_before(now - LEAF_BACKDATE)
        .not_valid_after(now + timedelta(days=validity_days))
        .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=False,
                content_commitment=False,
                key_encipherment=False,
                data_encipherment=False,
                key_agreement=False,
                key_cert_sign=True,
                crl_sign=True,
                encipher_only=False,
                decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(
            x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False
        )
        .sign(key, hashes.SHA256())
    )
    return CaMaterial(
        root_certificate=cert,
        root_private_key=key,
        key_profile=key_profile,
        _serial=first_serial + 1,
    )


def _validate_host(host: str) -> ipaddress.IPv4Address | ipaddress.IPv6Address | None:
    """Return the parsed IP for IP literals, None for valid DNS names."""
    if not host or len(host) > 253:
        raise MalformedHostError(f"malformed host {host!r}")
    try:
        return ipaddress.ip_address(host)
    except ValueError:
        pass
    labels = host.rstrip(".").split(".")
    if not labels or not all(_DNS_LABEL.match(label) for label in labels):
        raise MalformedHostError(f"malformed host {host!r}")
    return None


def forge_leaf(
    ca: CaMaterial,
    target_host: str,
    upstream_leaf: x509.Certificate | None = None,
) -> ForgedLeaf:
    """Issue a leaf for ``target_host`` signed by our CA.

    When the genuine upstream leaf is supplied, its subject, validity window
    and alternative names are mirrored; the public key and the issuer are
    always ours. Without it, the subject is just the host and the validity
    window is now-1h .. now+30d.
    """
    ip = _validate_host(target_host)
    now = _utcnow()
    root = ca.root_certificate
    if not (root.not_valid_before_utc <= now <= root.not_valid_after_utc):
        raise CaExpiredError("CA certificate is outside its validity window")

    try:
        key = KEY_PROFILES[ca.key_profile]()
    except Exception as exc:
        raise KeyGenerationError(f"key generation failed: {exc}") from exc

    host_san: x509.GeneralName = (
        x509.IPAddress(ip) if ip is not None else x509.DNSName(target_host)
    )
    san_entries: list[x509.GeneralName] = [host_san]
    if upstream_leaf is not None:
        subject = upstream_leaf.subject
        not_before = upstream_leaf.not_valid_before_utc
        not_after = upstream_leaf.not_valid_after_utc
        if not (not_before <= now <= not_after):
            not_before, not_after = now - LEAF_BACKDATE, now + DEFAULT_LEAF_VALIDITY
        try:
            upstream_san = upstream_leaf.extensions.get_extension_for_class(
                x509.SubjectAlternativeName
            ).value
            for entry in upstream_san:
                if entry != host_san:
                    san_entries.append(entry)
        except x509.ExtensionNotFound:
            pass
    else:
        subject = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, target_host)])
        not_before = now - LEAF_BACKDATE
        not_after = now + DEFAULT_LEAF_VALIDITY

    cert = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(ca.root_certificate.subject)
        .public_key(key.public_key())
        .serial_number(ca.next_serial())
        .not_valid_before(not_before)
        .not_valid_after(not_after)
        .add_extension(x509.SubjectAlternativeName(san_entries), critical=False)
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(
            x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False
        )
        .add_extension(
            x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False
        )
        .add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(
                ca.root_private_key.public_key()
            ),
            critical=False,
        )
        .sign(ca.root_private_key, hashes.SHA256())
    )
    return ForgedLeaf(certificate=cert, private_key=key, target_host=target_host)


# --- pinned oracle keystore ------------------------------------------------
#
# File format: 4-byte big-endian length, DER certificate, 32-byte HMAC-SHA256
# trailer computed over everything before it with a configuration-supplied key.

_LEN = struct.Struct(">I")
MAC_SIZE = 32


def serialize_keystore(oracle_cert_der: bytes, mac_key: bytes) -> bytes:
    payload = _LEN.pack(len(oracle_cert_der)) + oracle_cert_der
    return payload + hmac.new(mac_key, payload, hashlib.sha256).digest()


def verify_keystore(store_bytes: bytes, mac_key: bytes) -> PinnedKeystore:
    """Authenticate and parse the keystore; any failure is fatal to startup."""
    if len(store_bytes) < _LEN.size + MAC_SIZE + 1:
        raise KeystoreFormatError("keystore too short")
    (der_len,) = _LEN.unpack(store_bytes[: _LEN.size])
    if len(store_bytes) != _LEN.size + der_len + MAC_SIZE:
        raise KeystoreFormatError("keystore length field does not match file size")
    payload = store_bytes[: _LEN.size + der_len]
    trailer = store_bytes[_LEN.size + der_len :]
    expected = hmac.new(mac_key, payload, hashlib.sha256).digest()
    if not hmac.compare_digest(expected, trailer):
        raise KeystoreTamperedError("keystore tampered: integrity digest mismatch")
    der = payload[_LEN.size :]
    try:
        cert = x509.load_der_x509_certificate(der)
    except Exception as exc:
        raise KeystoreFormatError(f"keystore certificate unparseable: {exc}") from exc
    return PinnedKeystore(oracle_certificate=cert, oracle_der=der, integrity_digest=trailer)


# --- disk persistence for the CLI -------------------------------------------

CA_CERT_FILE = "ca.pem"
CA_KEY_FILE = "ca.key"
CA_SERIAL_FILE = "ca.serial"
SERIAL_RESERVATION = 1_000_000


def save_ca(ca: CaMaterial, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / CA_CERT_FILE).write_bytes(ca.root_pem())
    key_path = directory / CA_KEY_FILE
    key_path.write_bytes(ca.key_pem())
    key_path.chmod(0o600)
    (directory / CA_SERIAL_FILE).write_text(str(ca._serial))


def load_ca(directory: Path) -> CaMaterial:
    cert = x509.load_pem_x509_certificate((directory / CA_CERT_FILE).read_bytes())
    key = serialization.load_pem_private_key(
        (directory / CA_KEY_FILE).read_bytes(), password=None
    )
    serial_path = directory / CA_SERIAL_FILE
    stored = int(serial_path.read_text())
    # Reserve a serial block up front so a reloaded CA never reuses serials
    # without paying a disk write per forge.
    serial_path.write_text(str(stored + SERIAL_RESERVATION))
    profile = "rsa-2048" if isinstance(key, rsa.RSAPrivateKey) else "default"
    return CaMaterial(
        root_certificate=cert, root_private_key=key, key_profile=profile, _serial=stored
    )
