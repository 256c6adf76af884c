from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from usagelog import crypto_core as cc
from usagelog.pseudonym import (
    OwnershipProof,
    Pseudonym,
    PseudonymRecord,
    new_challenge,
    new_pseudonym,
    prove_ownership,
    verify_ownership,
)


@pytest.fixture(scope="module")
def record() -> PseudonymRecord:
    return new_pseudonym(2048, random.Random(11))


def test_pseudonym_is_digest_of_public_key(record):
    assert record.pseudonym.digest == cc.digest32(record.keypair.public_key)
    assert len(record.pseudonym.digest) == 32


@given(st.binary(min_size=32, max_size=32))
def test_hex_round_trip(digest):
    pseudonym = Pseudonym(digest)
    assert Pseudonym.from_hex(pseudonym.hex) == pseudonym
    assert str(pseudonym) == digest.hex()


@given(st.binary(max_size=64).filter(lambda b: len(b) != 32))
def test_wrong_length_rejected(digest):
    with pytest.raises(ValueError):
        Pseudonym(digest)


def test_fresh_pseudonyms_differ():
    rng = random.Random(0)
    assert new_pseudonym(2048, rng).pseudonym != new_pseudonym(2048, rng).pseudonym


def test_record_json_round_trip(record):
    restored = PseudonymRecord.from_json(record.to_json())
    assert restored.pseudonym == record.pseudonym
    assert restored.keypair.public_key == record.keypair.public_key


def test_record_json_rejects_mismatched_key(record):
    other = new_pseudonym(2048, random.Random(12))
    data = dict(record.to_json(), private_key=other.keypair.private_key.hex())
    with pytest.raises(ValueError):
        PseudonymRecord.from_json(data)


def test_ownership_proof(record):
    challenge = new_challenge(random.Random(1))
    proof = prove_ownership(record, challenge)
    assert verify_ownership(record.pseudonym, proof, challenge)
    assert verify_ownership(record.pseudonym, OwnershipProof.from_json(proof.to_json()), challenge)


def test_ownership_proof_rejects_wrong_challenge(record):
    rng = random.Random(2)
    proof = prove_ownership(record, new_challenge(rng))
    assert not verify_ownership(record.pseudonym, proof, new_challenge(rng))


def test_ownership_proof_rejects_other_holder(record):
    impostor = new_pseudonym(2048, random.Random(13))
    challenge = new_challenge(random.Random(3))
    # the impostor's own key does not hash to the target pseudonym
    assert not verify_ownership(record.pseudonym, prove_ownership(impostor, challenge), challenge)
    # nor does a signature by the impostor over the real public key
    forged = OwnershipProof(record.keypair.public_key, prove_ownership(impostor, challenge).signature)
    assert not verify_ownership(record.pseudonym, forged, challenge)
