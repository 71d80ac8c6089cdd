import datetime
import ipaddress
import secrets

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.serialization import Encoding
from cryptography.x509.verification import PolicyBuilder, Store, VerificationError

import sslsentry.ca as ca_mod
from sslsentry.ca import (
    CaError,
    CaExpiredError,
    KeystoreFormatError,
    KeystoreTamperedError,
    MalformedHostError,
    forge_leaf,
    generate_ca,
    serialize_keystore,
    verify_keystore,
)
from sslsentry.labpki import make_server_identity


def _verify_chain(root, leaf, intermediates, host):
    """Independent path verifier, never used by the implementation itself."""
    store = Store([root])
    verifier = PolicyBuilder().store(store).build_server_verifier(x509.DNSName(host))
    return verifier.verify(leaf, intermediates)


def test_generate_ca_is_self_signed_ca():
    ca = generate_ca(365)
    cert = ca.root_certificate
    bc = cert.extensions.get_extension_for_class(x509.BasicConstraints).value
    assert bc.ca is True
    assert cert.issuer == cert.subject
    cert.verify_directly_issued_by(cert)  # self-signature must hold


def test_generate_ca_rejects_nonpositive_validity():
    with pytest.raises(CaError):
        generate_ca(0)


def test_forge_after_ca_expiry_fails(monkeypatch):
    ca = generate_ca(1)
    real_now = ca_mod._utcnow()
    monkeypatch.setattr(ca_mod, "_utcnow", lambda: real_now + datetime.timedelta(days=2))
    with pytest.raises(CaExpiredError):
        forge_leaf(ca, "late.test")


def test_same_seed_gives_identical_serial_sequence():
    def serial_run():
        ca = generate_ca(30, seed=777)
        serials = [ca.root_certificate.serial_number]
        for i in range(5):
            serials.append(forge_leaf(ca, f"h{i}.test").certificate.serial_number)
        return serials

    assert serial_run() == serial_run()


def test_serials_unique_within_lifetime():
    ca = generate_ca(30)
    serials = {forge_leaf(ca, f"u{i}.test").certificate.serial_number for i in range(50)}
    assert len(serials) == 50


def test_concurrent_forging_keeps_serials_unique():
    import threading

    ca = generate_ca(30)
    serials = []
    lock = threading.Lock()

    def forge_many(worker):
        for i in range(10):
            leaf = forge_leaf(ca, f"w{worker}-{i}.test")
            with lock:
                serials.append(leaf.certificate.serial_number)

    threads = [threading.Thread(target=forge_many, args=(w,)) for w in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(serials) == 80
    assert len(set(serials)) == 80


def test_forge_dns_host(intercept_ca):
    leaf = forge_leaf(intercept_ca, "example.test")
    san = leaf.certificate.extensions.get_extension_for_class(
        x509.SubjectAlternativeName
    ).value
    assert san.get_values_for_type(x509.DNSName) == ["example.test"]
    assert leaf.certificate.issuer == intercept_ca.root_certificate.subject


def test_forge_ip_literal(intercept_ca):
    leaf = forge_leaf(intercept_ca, "203.0.113.7")
    san = leaf.certificate.extensions.get_extension_for_class(
        x509.SubjectAlternativeName
    ).value
    assert san.get_values_for_type(x509.IPAddress) == [ipaddress.ip_address("203.0.113.7")]
    assert san.get_values_for_type(x509.DNSName) == []


def test_forge_rejects_malformed_hosts(intercept_ca):
    for bad in ["", "bad..host", "-dash.test", "sp ace.test", "x" * 300]:
        with pytest.raises(MalformedHostError):
            forge_leaf(intercept_ca, bad)


def test_forged_leaf_mirrors_upstream_but_fails_strict_validation(intercept_ca, upstream_identity):
    forged = forge_leaf(intercept_ca, "shop.test", upstream_leaf=upstream_identity.leaf)
    orgs = forged.certificate.subject.get_attributes_for_oid(
        x509.NameOID.ORGANIZATION_NAME
    )
    assert orgs and orgs[0].value == "ShopCo"
    assert forged.certificate.issuer == intercept_ca.root_certificate.subject
    assert (
        forged.certificate.not_valid_after_utc == upstream_identity.leaf.not_valid_after_utc
    )
    # a strict validator anchored on the genuine root rejects the forgery
    with pytest.raises(VerificationError):
        _verify_chain(
            upstream_identity.root, forged.certificate, [intercept_ca.root_certificate], "shop.test"
        )


def test_forged_leaf_validates_only_under_forging_root(intercept_ca):
    genuine = make_server_identity(["pin.test"], depth=2)
    for host in ["pin.test", "other.test", "deep.sub.pin.test"]:
        forged = forge_leaf(intercept_ca, host)
        _verify_chain(intercept_ca.root_certificate, forged.certificate, [], host)
        with pytest.raises(VerificationError):
            _verify_chain(genuine.root, forged.certificate, [], host)


def test_forged_and_genuine_signatures_differ(intercept_ca, upstream_identity):
    forged = forge_leaf(intercept_ca, "shop.test", upstream_leaf=upstream_identity.leaf)
    assert forged.certificate.signature != upstream_identity.leaf.signature
    assert (
        forged.certificate.public_bytes(Encoding.DER)
        != upstream_identity.leaf.public_bytes(Encoding.DER)
    )


def test_mirrored_expired_window_falls_back_to_fresh(intercept_ca):
    stale = make_server_identity(["stale.test"], depth=2)
    cert = stale.leaf
    expired = (
        x509.CertificateBuilder()
        .subject_name(cert.subject)
        .issuer_name(cert.issuer)
        .public_key(cert.public_key())
        .serial_number(1)
        .not_valid_before(datetime.datetime(2019, 1, 1, tzinfo=datetime.timezone.utc))
        .not_valid_after(datetime.datetime(2019, 2, 1, tzinfo=datetime.timezone.utc))
        .add_extension(
            x509.SubjectAlternativeName([x509.DNSName("stale.test")]), critical=False
        )
        .sign(stale.leaf_key, hashes.SHA256())
    )
    forged = forge_leaf(intercept_ca, "stale.test", upstream_leaf=expired)
    now = datetime.datetime.now(datetime.timezone.utc)
    assert forged.certificate.not_valid_before_utc <= now <= forged.certificate.not_valid_after_utc


def test_keystore_round_trip(upstream_identity):
    key = secrets.token_bytes(32)
    der = upstream_identity.leaf.public_bytes(Encoding.DER)
    blob = serialize_keystore(der, key)
    store = verify_keystore(blob, key)
    assert store.oracle_der == der
    assert store.oracle_certificate.serial_number == upstream_identity.leaf.serial_number


def test_keystore_single_bit_flip_detected(upstream_identity):
    key = secrets.token_bytes(32)
    der = upstream_identity.leaf.public_bytes(Encoding.DER)
    blob = bytearray(serialize_keystore(der, key))
    blob[len(blob) // 2] ^= 0x10
    with pytest.raises((KeystoreTamperedError, KeystoreFormatError)):
        verify_keystore(bytes(blob), key)


def test_keystore_empty_and_garbage_rejected():
    key = secrets.token_bytes(32)
    with pytest.raises(KeystoreFormatError):
        verify_keystore(b"", key)
    with pytest.raises((KeystoreFormatError, KeystoreTamperedError)):
        verify_keystore(b"\x00" * 64, key)


def test_keystore_wrong_key_is_tamper(upstream_identity):
    der = upstream_identity.leaf.public_bytes(Encoding.DER)
    blob = serialize_keystore(der, b"a" * 32)
    with pytest.raises(KeystoreTamperedError):
        verify_keystore(blob, b"b" * 32)


def test_ca_save_load_round_trip(tmp_path):
    ca = generate_ca(30, seed=1)
    ca_mod.save_ca(ca, tmp_path)
    loaded = ca_mod.load_ca(tmp_path)
    assert loaded.root_der() == ca.root_der()
    leaf = forge_leaf(loaded, "reload.test")
    leaf.certificate.verify_directly_issued_by(loaded.root_certificate)
    # serial reservation prevents reuse across reloads
    assert leaf.certificate.serial_number > ca.root_certificate.serial_number
