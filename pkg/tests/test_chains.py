import base64
import dataclasses
import json
import random

import pytest

from sslsentry.ca import forge_leaf
from sslsentry.chains import (
    CertificateChain,
    ChainParseError,
    ComparisonReason,
    compare_chains,
    deserialize_chain,
    normalize_order,
    parse_chain,
    serialize_chain,
)
from sslsentry.labpki import make_server_identity


def test_parse_single_leaf(upstream_identity):
    chain = parse_chain([upstream_identity.chain_ders()[0]])
    assert len(chain) == 1
    assert "ShopCo" in chain.leaf.subject


def test_parse_three_deep_linked(deep_identity):
    ders = deep_identity.chain_ders()
    assert len(ders) == 3
    chain = parse_chain(ders)
    for a, b in zip(chain.entries, chain.entries[1:]):
        assert a.issuer == b.subject


def test_parse_truncated_der_fails(upstream_identity):
    good = upstream_identity.chain_ders()
    with pytest.raises(ChainParseError):
        parse_chain([good[0][: len(good[0]) // 2], good[1]])


def test_parse_empty_rejected():
    with pytest.raises(ChainParseError):
        parse_chain([])


def test_normalize_already_ordered(deep_identity):
    chain = parse_chain(deep_identity.chain_ders())
    out = normalize_order(chain)
    assert not out.unlinkable
    assert out.raw() == chain.raw()


@pytest.mark.parametrize("seed", [1, 2, 3, 4])
def test_normalize_recovers_ground_order(deep_identity, seed):
    ground = deep_identity.chain_ders()
    shuffled = list(ground)
    random.Random(seed).shuffle(shuffled)
    out = normalize_order(parse_chain(shuffled))
    assert not out.unlinkable
    assert out.raw() == ground


def test_normalize_unlinkable_flagged():
    a = make_server_identity(["a.test"], depth=2)
    b = make_server_identity(["b.test"], depth=2)
    chain = parse_chain([a.chain_ders()[0], b.chain_ders()[0]])
    out = normalize_order(chain)
    assert out.unlinkable


def test_normalize_drops_duplicates(deep_identity):
    ders = deep_identity.chain_ders()
    out = normalize_order(parse_chain(ders + [ders[1]]))
    assert not out.unlinkable
    assert out.raw() == ders


def test_compare_reflexive(deep_identity):
    chain = parse_chain(deep_identity.chain_ders())
    result = compare_chains(chain, chain)
    assert result.matched
    assert result.first_divergence is None
    assert result.reason is None
    assert result.raw_identical


def test_compare_genuine_vs_forged_leaf(intercept_ca, upstream_identity):
    genuine = parse_chain(upstream_identity.chain_ders())
    forged = forge_leaf(intercept_ca, "shop.test", upstream_leaf=upstream_identity.leaf)
    from cryptography.hazmat.primitives.serialization import Encoding

    forged_chain = parse_chain(
        [forged.certificate.public_bytes(Encoding.DER), intercept_ca.root_der()]
    )
    result = compare_chains(genuine, forged_chain)
    assert not result.matched
    assert result.reason is ComparisonReason.SIGNATURE_MISMATCH
    assert result.first_divergence == 0


def test_compare_length_mismatch(deep_identity):
    full = parse_chain(deep_identity.chain_ders())
    partial = parse_chain(deep_identity.chain_ders()[:2])
    result = compare_chains(partial, full)
    assert not result.matched
    assert result.reason is ComparisonReason.LENGTH_MISMATCH
    assert result.first_divergence is None


def test_compare_unlinkable_reason():
    a = make_server_identity(["a.test"], depth=2)
    b = make_server_identity(["b.test"], depth=2)
    bad = normalize_order(parse_chain([a.chain_ders()[0], b.chain_ders()[0]]))
    good = normalize_order(parse_chain(a.chain_ders()))
    result = compare_chains(good, bad)
    assert not result.matched
    assert result.reason is ComparisonReason.UNLINKABLE_CHAIN


def test_serialize_wire_format(upstream_identity):
    leaf_der = upstream_identity.chain_ders()[0]
    chain = parse_chain([leaf_der])
    expected = '{"chain":["%s"]}' % base64.b64encode(leaf_der).decode("ascii")
    assert serialize_chain(chain) == expected


def test_serialize_round_trip_fixed_point(deep_identity):
    chain = parse_chain(deep_identity.chain_ders())
    text = serialize_chain(chain)
    again = serialize_chain(deserialize_chain(text))
    assert text == again
    assert deserialize_chain(text).raw() == chain.raw()


def test_empty_chain_rejected_everywhere():
    with pytest.raises(ChainParseError):
        CertificateChain(entries=())
    with pytest.raises(ChainParseError):
        deserialize_chain('{"chain":[]}')


def test_deserialize_garbage():
    with pytest.raises(ChainParseError):
        deserialize_chain("not json")
    with pytest.raises(ChainParseError):
        deserialize_chain('{"chain":["%%%not-base64%%%"]}')
    with pytest.raises(ChainParseError):
        deserialize_chain('{"other":[]}')


def _random_corpus(n, rng):
    identities = [
        make_server_identity([f"host{i}.test"], depth=rng.choice([2, 2, 3, 4]))
        for i in range(n)
    ]
    return [parse_chain(identity.chain_ders()) for identity in identities]


def test_compare_symmetry_and_permutation_invariance():
    rng = random.Random(99)
    corpus = _random_corpus(12, rng)
    for chain in corpus:
        other = rng.choice(corpus)
        a, b = normalize_order(chain), normalize_order(other)
        forward, backward = compare_chains(a, b), compare_chains(b, a)
        assert forward.matched == backward.matched
        assert forward.reason == backward.reason
        # any input permutation normalizes away
        shuffled = list(chain.raw())
        rng.shuffle(shuffled)
        perm = normalize_order(parse_chain(shuffled))
        assert compare_chains(perm, b).matched == forward.matched


def test_matched_implies_leaf_key_equal():
    rng = random.Random(7)
    corpus = _random_corpus(8, rng)
    for chain in corpus:
        for other in corpus:
            a, b = normalize_order(chain), normalize_order(other)
            if compare_chains(a, b).matched:
                assert a.leaf.public_key_info == b.leaf.public_key_info


def test_comparator_keys_on_signature_bytes_exactly(deep_identity):
    """Mutating signature bytes must flip matched; mutating anything else
    while signatures stay untouched must not."""
    rng = random.Random(123)
    chain = normalize_order(parse_chain(deep_identity.chain_ders()))
    for _ in range(50):
        idx = rng.randrange(len(chain))
        entry = chain.entries[idx]
        target_field = rng.choice(
            ["signature_bytes", "raw_der", "public_key_info", "subject"]
        )
        if target_field in ("signature_bytes", "raw_der", "public_key_info"):
            original = getattr(entry, target_field)
            pos = rng.randrange(len(original))
            mutated_value = (
                original[:pos] + bytes([original[pos] ^ (1 << rng.randrange(8))]) + original[pos + 1 :]
            )
        else:
            mutated_value = entry.subject + "-mutated"
        mutated_entry = dataclasses.replace(entry, **{target_field: mutated_value})
        entries = list(chain.entries)
        entries[idx] = mutated_entry
        mutated = CertificateChain(entries=tuple(entries))
        result = compare_chains(chain, mutated)
        assert result.matched == (target_field != "signature_bytes")


def test_serialized_json_uses_standard_base64(deep_identity):
    text = serialize_chain(parse_chain(deep_identity.chain_ders()))
    doc = json.loads(text)
    for item in doc["chain"]:
        assert base64.b64encode(base64.b64decode(item, validate=True)).decode() == item
