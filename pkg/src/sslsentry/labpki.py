"""Synthetic PKI material for the simulation lab and tests.

Builds self-contained server identities (root CA, optional intermediates,
leaf) that play the role of the genuine internet PKI on loopback. Distinct
from :mod:`sslsentry.ca`, which is the interception CA.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

_serial_counter = [1000]


def _next_serial() -> int:
    _serial_counter[0] += 1
    return _serial_counter[0]


def _now() -> datetime:
    return datetime.now(timezone.utc)


def _name(cn: str, org: str = "simlab") -> x509.Name:
    return x509.Name(
        [
            x509.NameAttribute(NameOID.ORGANIZATION_NAME, org),
            x509.NameAttribute(NameOID.COMMON_NAME, cn),
        ]
    )


def make_ca(cn: str, issuer: tuple[x509.Certificate, ec.EllipticCurvePrivateKey] | None = None):
    """Create a CA cert+key; self-signed when ``issuer`` is None."""
    key = ec.generate_private_key(ec.SECP256R1())
    subject = _name(cn)
    issuer_name = subject if issuer is None else issuer[0].subject
    signing_key = key if issuer is None else issuer[1]
    cert = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer_name)
        .public_key(key.public_key())
        .serial_number(_next_serial())
        .not_valid_before(_now() - timedelta(hours=1))
        .not_valid_after(_now() + timedelta(days=365))
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
        .add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(signing_key.public_key()),
            critical=False,
        )
        .sign(signing_key, hashes.SHA256())
    )
    return cert, key


def issue_leaf(
    issuer_cert: x509.Certificate,
    issuer_key: ec.EllipticCurvePrivateKey,
    hosts: list[str],
    org: str = "simlab",
):
    """Issue a server leaf for ``hosts`` from the given CA."""
    key = ec.generate_private_key(ec.SECP256R1())
    san: list[x509.GeneralName] = []
    for host in hosts:
        try:
            san.append(x509.IPAddress(ipaddress.ip_address(host)))
        except ValueError:
            san.append(x509.DNSName(host))
    cert = (
        x509.CertificateBuilder()
        .subject_name(_name(hosts[0], org))
        .issuer_name(issuer_cert.subject)
        .public_key(key.public_key())
        .serial_number(_next_serial())
        .not_valid_before(_now() - timedelta(hours=1))
        .not_valid_after(_now() + timedelta(days=90))
        .add_extension(x509.SubjectAlternativeName(san), critical=False)
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(
            x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False
        )
        .add_extension(
            x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False
        )
        .add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(issuer_key.public_key()),
            critical=False,
        )
        .sign(issuer_key, hashes.SHA256())
    )
    return cert, key


@dataclass(frozen=True)
class ServerIdentity:
    """Full identity a synthetic server presents: leaf first, root last."""

    hosts: tuple[str, ...]
    chain: tuple[x509.Certificate, ...]
    leaf_key: ec.EllipticCurvePrivateKey
    root: x509.Certificate

    @property
    def leaf(self) -> x509.Certificate:
        return self.chain[0]

    def chain_ders(self) -> list[bytes]:
        return [c.public_bytes(serialization.Encoding.DER) for c in self.chain]

    def chain_pems(self) -> tuple[bytes, ...]:
        return tuple(c.public_bytes(serialization.Encoding.PEM) for c in self.chain)

    def leaf_pem(self) -> bytes:
        return self.leaf.public_bytes(serialization.Encoding.PEM)

    def leaf_key_pem(self) -> bytes:
        return self.leaf_key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )

    def root_pem(self) -> bytes:
        return self.root.public_bytes(serialization.Encoding.PEM)


def make_server_identity(
    hosts: list[str], depth: int = 2, ca_cn: str | None = None, org: str = "simlab"
) -> ServerIdentity:
    """Build a server identity with a chain ``depth`` certificates long.

    depth=2 gives leaf+root; depth=3 inserts an intermediate CA.
    """
    if depth < 2:
        raise ValueError("depth must be >= 2 (leaf plus at least the root)")
    root_cert, root_key = make_ca(ca_cn or f"{org} root CA")
    issuers = [(root_cert, root_key)]
    for i in range(depth - 2):
        inter = make_ca(f"{org} intermediate {i + 1}", issuer=issuers[-1])
        issuers.append(inter)
    leaf_cert, leaf_key = issue_leaf(issuers[-1][0], issuers[-1][1], hosts, org=org)
    chain = (leaf_cert,) + tuple(c for c, _ in reversed(issuers))
    return ServerIdentity(hosts=tuple(hosts), chain=chain, leaf_key=leaf_key, root=root_cert)
