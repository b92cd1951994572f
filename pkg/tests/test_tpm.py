import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeattest import crypto
from edgeattest.crypto import CertificateAuthority
from edgeattest.errors import BadCertificate
from edgeattest.tpm import (
    PCR_COUNT,
    AttestationKey,
    PcrBank,
    Quote,
    SimulatedTPM,
    generate_endorsement,
    pcr_extend,
    pcr_reset,
    prove_possession,
    quote,
    verify_possession,
    verify_quote,
)

from conftest import oracle_chain, sha256

digests = st.binary(min_size=32, max_size=32)


def test_fresh_bank_is_zero():
    bank = PcrBank()
    assert len(bank.registers) == PCR_COUNT
    assert all(r == bytes(32) for r in bank.registers)


def test_extend_from_zero():
    d = os.urandom(32)
    bank = pcr_extend(PcrBank(), 0, d)
    assert bank[0] == sha256(bytes(32) + d)


def test_extend_is_order_sensitive():
    a, b = os.urandom(32), os.urandom(32)
    ab = pcr_extend(pcr_extend(PcrBank(), 0, a), 0, b)[0]
    ba = pcr_extend(pcr_extend(PcrBank(), 0, b), 0, a)[0]
    assert ab == oracle_chain([a, b])
    assert ba == oracle_chain([b, a])
    assert ab != ba


def test_extend_leaves_other_registers_alone():
    d = os.urandom(32)
    bank = PcrBank().extend(0, d).extend(4, d)
    for i in [*range(1, 4), *range(5, PCR_COUNT)]:
        assert bank[i] == bytes(32)


@pytest.mark.parametrize("index", [-1, 24, 100])
def test_extend_bad_index(index):
    with pytest.raises(ValueError):
        PcrBank().extend(index, bytes(32))


@pytest.mark.parametrize("size", [0, 31, 33, 64])
def test_extend_bad_digest(size):
    with pytest.raises(ValueError):
        PcrBank().extend(0, bytes(size))


def test_reset():
    d = os.urandom(32)
    bank = PcrBank().extend(0, os.urandom(32))
    pcr_reset(bank, 0)
    assert bank[0] == bytes(32)
    assert bank.history[-1] == ("reset", 0, None)
    assert pcr_extend(bank, 0, d)[0] == PcrBank().extend(0, d)[0]
    with pytest.raises(ValueError):
        pcr_reset(bank, 24)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.sampled_from(["extend", "reset"]), st.integers(0, 23), digests), max_size=30))
def test_replay_reproduces_bank(ops):
    bank = PcrBank()
    for op, i, d in ops:
        bank.extend(i, d) if op == "extend" else bank.reset(i)
    assert PcrBank.replay(bank.history).registers == bank.registers


@settings(max_examples=50)
@given(digests, digests)
def test_extend_deterministic_and_order_sensitive(a, b):
    assert PcrBank().extend(3, a)[3] == PcrBank().extend(3, a)[3]
    if a != b:
        assert PcrBank().extend(3, a).extend(3, b)[3] != PcrBank().extend(3, b).extend(3, a)[3]


def test_endorsement_certificate(manufacturer_ca):
    ident = generate_endorsement("edge-01", manufacturer_ca)
    cert = crypto.verify_certificate(ident.ek_cert, manufacturer_ca.certificate)
    assert crypto.certificate_subject(cert) == "edge-01"
    with pytest.raises(BadCertificate):
        crypto.verify_certificate(ident.ek_cert, CertificateAuthority("other").certificate)
    with pytest.raises(ValueError):
        generate_endorsement("", manufacturer_ca)


def test_endorsement_keys_are_fresh(manufacturer_ca):
    keys = {generate_endorsement("edge-01", manufacturer_ca).ek_public for _ in range(10)}
    assert len(keys) == 10


def test_possession_proof(manufacturer_ca, nonce):
    a = generate_endorsement("edge-a", manufacturer_ca)
    b = generate_endorsement("edge-b", manufacturer_ca)
    proof = prove_possession(a, nonce)
    assert verify_possession(a.ek_cert, nonce, proof)
    assert not verify_possession(a.ek_cert, os.urandom(32), proof)
    assert not verify_possession(b.ek_cert, nonce, proof)
    assert not verify_possession(a.ek_cert, nonce, prove_possession(b, nonce))
    with pytest.raises(ValueError):
        prove_possession(a, b"short")


def test_quote_of_zero_bank(manufacturer_ca, nonce):
    ident = generate_endorsement("edge-01", manufacturer_ca)
    ak = AttestationKey.create(ident)
    q = quote(PcrBank(), ak, nonce, [0])
    assert q.composite_digest == sha256(bytes(32))
    assert verify_quote(q, ak.public, ident.ek_public, nonce)
    assert not verify_quote(q, ak.public, ident.ek_public, os.urandom(32))


def test_quote_composite_in_selection_order(manufacturer_ca, nonce):
    t = SimulatedTPM("edge-01", manufacturer_ca)
    t.bank.extend(0, os.urandom(32)).extend(5, os.urandom(32))
    q = t.quote(nonce, [5, 0])
    assert q.composite_digest == sha256(t.bank[5] + t.bank[0])


def test_quote_tamper_detected(manufacturer_ca, nonce):
    t = SimulatedTPM("edge-01", manufacturer_ca)
    q = t.quote(nonce, [0, 4])
    flipped = bytearray(q.composite_digest)
    flipped[0] ^= 1
    forged = Quote(q.nonce, q.pcr_selection, bytes(flipped), q.signature)
    assert q.signature_valid(t.ak.public.public)
    assert not forged.signature_valid(t.ak.public.public)


def test_quote_requires_ak_binding(manufacturer_ca, nonce):
    t = SimulatedTPM("edge-01", manufacturer_ca)
    other = SimulatedTPM("edge-02", manufacturer_ca)
    q = t.quote(nonce, [0])
    assert verify_quote(q, t.ak.public, t.identity.ek_public, nonce)
    assert not verify_quote(q, t.ak.public, other.identity.ek_public, nonce)


def test_quote_bad_arguments(manufacturer_ca, nonce):
    t = SimulatedTPM("edge-01", manufacturer_ca)
    with pytest.raises(ValueError):
        t.quote(nonce, [])
    with pytest.raises(ValueError):
        t.quote(nonce, [24])
    with pytest.raises(ValueError):
        t.quote(b"x" * 31, [0])


def test_quote_serialization_round_trip(manufacturer_ca, nonce):
    t = SimulatedTPM("edge-01", manufacturer_ca)
    q = t.quote(nonce, [0, 4, 5, 7])
    d = q.to_dict()
    assert d["hash_alg"] == "sha256"
    assert d["nonce"] == nonce.hex() and d["nonce"].islower()
    assert Quote.from_dict(d) == q
    assert q.signed_bytes() == Quote.from_dict(d).signed_bytes()
