"""Verifiable credentials issued by an identity provider and verified locally.

Verification never contacts the issuer: a node only needs the issuer's
public key, fetched once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NewType

from .crypto_core import KeyPair, Signature, frame, sign, verify

UserId = NewType("UserId", str)


class IdentityError(Exception):
    pass


class BadIssuerSignature(IdentityError):
    pass


class BadChallengeSignature(IdentityError):
    pass


class StaleChallenge(IdentityError):
    pass


@dataclass(frozen=True)
class VerifiableCredential:
    user_id: str
    user_public_key: bytes
    issuer_signature: Signature

    def claims(self) -> bytes:
        return _claims(self.user_id, self.user_public_key)

    def is_valid(self, idp_public_key: bytes) -> bool:
        return verify(self.claims(), self.issuer_signature, idp_public_key)

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "user_public_key": self.user_public_key.hex(),
            "issuer_signature": self.issuer_signature.hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "VerifiableCredential":
        return cls(
            str(data["user_id"]),
            bytes.fromhex(data["user_public_key"]),
            bytes.fromhex(data["issuer_signature"]),
        )


@dataclass(frozen=True)
class IdentityAssertion:
    credential: VerifiableCredential
    challenge: bytes
    challenge_signature: Signature

    def to_json(self) -> dict:
        return {
            "credential": self.credential.to_json(),
            "challenge": self.challenge.hex(),
            "challenge_signature": self.challenge_signature.hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "IdentityAssertion":
        return cls(
            VerifiableCredential.from_json(data["credential"]),
            bytes.fromhex(data["challenge"]),
            bytes.fromhex(data["challenge_signature"]),
        )


def _claims(user_id: str, user_public_key: bytes) -> bytes:
    return frame(b"credential", user_id.encode("utf-8"), user_public_key)


def _assertion_message(challenge: bytes, session_label: bytes) -> bytes:
    return frame(b"identity", challenge, session_label)


def issue_credential(idp_key: KeyPair, user_id: str, user_public_key: bytes) -> VerifiableCredential:
    return VerifiableCredential(user_id, user_public_key, sign(_claims(user_id, user_public_key), idp_key))


def present_identity(
    credential: VerifiableCredential,
    identity_key: KeyPair,
    challenge: bytes,
    session_label: bytes,
) -> IdentityAssertion:
    return IdentityAssertion(credential, challenge, sign(_assertion_message(challenge, session_label), identity_key))


def verify_identity(
    assertion: IdentityAssertion,
    idp_public_key: bytes,
    challenge: bytes,
    session_label: bytes,
) -> UserId:
    """Return the asserted user id, or raise an :class:`IdentityError`."""
    if assertion.challenge != challenge:
        raise StaleChallenge("assertion answers a different challenge")
    credential = assertion.credential
    if not credential.is_valid(idp_public_key):
        raise BadIssuerSignature(f"credential for {credential.user_id!r} not signed by this identity provider")
    if not verify(_assertion_message(challenge, session_label), assertion.challenge_signature, credential.user_public_key):
        raise BadChallengeSignature("challenge signature does not match the credential key")
    return UserId(credential.user_id)
