"""One-time pseudonyms: the digest of a fresh public key.

A pseudonym is the only identifier that ever reaches the chain.  Its holder
can prove ownership by revealing the public key and signing a
verifier-chosen challenge; nobody else learns anything from it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .crypto_core import (
    DEFAULT_KEY_BITS,
    KeyPair,
    RandomSource,
    Signature,
    digest32,
    frame,
    generate_keypair,
    sign,
    verify,
)

CHALLENGE_BYTES = 32

_clock = itertools.count(1)


@dataclass(frozen=True)
class Pseudonym:
    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != 32:
            raise ValueError("a pseudonym is exactly 32 bytes")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, value: str) -> "Pseudonym":
        return cls(bytes.fromhex(value))

    @classmethod
    def of_public_key(cls, public_key: bytes) -> "Pseudonym":
        return cls(digest32(public_key))

    def __str__(self) -> str:
        return self.hex


@dataclass(frozen=True)
class PseudonymRecord:
    pseudonym: Pseudonym
    keypair: KeyPair
    created_at: int

    def to_json(self) -> dict:
        return {
            "pseudonym": self.pseudonym.hex,
            "private_key": self.keypair.private_key.hex(),
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, data: dict) -> "PseudonymRecord":
        keypair = KeyPair.from_private_bytes(bytes.fromhex(data["private_key"]))
        record = cls(Pseudonym.from_hex(data["pseudonym"]), keypair, int(data["created_at"]))
        if Pseudonym.of_public_key(keypair.public_key) != record.pseudonym:
            raise ValueError("stored pseudonym does not match its key pair")
        return record


@dataclass(frozen=True)
class OwnershipProof:
    public_key: bytes
    signature: Signature

    def to_json(self) -> dict:
        return {"public_key": self.public_key.hex(), "signature": self.signature.hex()}

    @classmethod
    def from_json(cls, data: dict) -> "OwnershipProof":
        return cls(bytes.fromhex(data["public_key"]), bytes.fromhex(data["signature"]))


def new_pseudonym(
    bits: int = DEFAULT_KEY_BITS,
    rng: RandomSource | None = None,
    created_at: int | None = None,
) -> PseudonymRecord:
    keypair = generate_keypair(bits, rng)
    return PseudonymRecord(
        Pseudonym.of_public_key(keypair.public_key),
        keypair,
        next(_clock) if created_at is None else created_at,
    )


def _ownership_message(challenge: bytes, pseudonym: Pseudonym) -> bytes:
    return frame(b"ownership", challenge, pseudonym.digest)


def prove_ownership(record: PseudonymRecord, challenge: bytes) -> OwnershipProof:
    message = _ownership_message(challenge, record.pseudonym)
    return OwnershipProof(record.keypair.public_key, sign(message, record.keypair))


def verify_ownership(pseudonym: Pseudonym, proof: OwnershipProof, challenge: bytes) -> bool:
    if digest32(proof.public_key) != pseudonym.digest:
        return False
    return verify(_ownership_message(challenge, pseudonym), proof.signature, proof.public_key)


def new_challenge(rng: RandomSource) -> bytes:
    return rng.randbytes(CHALLENGE_BYTES)
