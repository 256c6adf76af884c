"""Probabilistic non-repudiation exchange between a data owner and a consumer.

The owner encrypts the datum under a key that is slow to derive, sends the
cipher, then a hidden random number of equally sized round values, the
last of which is the real key material.  Every message must be
acknowledged faster than a key derivation could finish, so a consumer who
stops acknowledging to test a round value has already forfeited the
exchange.  Afterwards the owner holds the consumer's signed
acknowledgments of the cipher and key messages (receipt evidence) and the
consumer holds the owner's signed cipher and key messages (origin
evidence).

Sessions are plain state machines driven with explicit ``now`` values so
the same code runs under a simulated clock and under wall-clock time.
"""

from __future__ import annotations

import base64
import enum
import math
import statistics
from dataclasses import dataclass, field, replace
from typing import Iterable

from . import crypto_core as cc
from .crypto_core import CipherKeySeed, KeyPair, RandomSource, SymmetricKey, digest32, frame
from .identity_vc import UserId, VerifiableCredential
from .ledger import UsagePayload, UsageRecord, compose_usage_payload
from .pseudonym import Pseudonym, PseudonymRecord, new_pseudonym

FAKE_DATUM_TYPE = "d0"
CIPHER = "cipher"
STEP = "step"
ACK = "ack"

DEFAULT_MAX_ROUNDS = 128


class ProtocolError(Exception):
    pass


class CalibrationError(ProtocolError):
    """Key derivation is not slower than the acknowledgment timeout."""


class BadOwnerSignature(ProtocolError):
    pass


class LabelMismatch(ProtocolError):
    pass


class UnexpectedMessage(ProtocolError):
    pass


# --------------------------------------------------------------------------
# configuration and round sampling

def required_max_rounds(theta: float, min_rounds: int = 1) -> int:
    """Smallest cap whose lumped tail mass ``(1-theta)**(cap-min)`` is at most theta."""
    if theta >= 1.0:
        return min_rounds
    return min_rounds + math.ceil(math.log(theta) / math.log1p(-theta) - 1e-12)


@dataclass(frozen=True)
class ProtocolConfig:
    theta: float = 0.1
    timeout: float = 3.0
    work_factor: int = 16
    min_rounds: int = 1
    max_rounds: int = DEFAULT_MAX_ROUNDS
    pseudonym_bits: int = cc.DEFAULT_KEY_BITS
    # cost(W) in the same unit as ``timeout``; set by calibration or the simulator
    derivation_cost: float | None = None
    completion_factor: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        cc._check_work_factor(self.work_factor)
        if self.min_rounds < 1:
            raise ValueError("min_rounds must be at least 1")
        if self.max_rounds < self.min_rounds:
            raise ValueError("max_rounds must not be below min_rounds")
        if self.pseudonym_bits not in cc.SUPPORTED_KEY_BITS:
            raise cc.UnsupportedKeySize(f"unsupported pseudonym key size {self.pseudonym_bits}")

    @property
    def effective_max_rounds(self) -> int:
        return max(self.max_rounds, required_max_rounds(self.theta, self.min_rounds))

    @property
    def completion_window(self) -> float:
        return self.completion_factor * self.timeout

    @property
    def calibrated(self) -> bool:
        return self.derivation_cost is not None and self.derivation_cost > self.timeout

    def check_calibration(self) -> None:
        if self.derivation_cost is None:
            raise CalibrationError("derivation cost unknown; calibrate before running exchanges")
        if self.derivation_cost <= self.timeout:
            raise CalibrationError(
                f"key derivation at work factor {self.work_factor} costs {self.derivation_cost:g}, "
                f"which does not exceed the timeout {self.timeout:g}"
            )


def rounds_for(
    theta: float,
    rng: RandomSource,
    min_rounds: int = 1,
    max_rounds: int | None = None,
) -> int:
    """Draw the hidden round count: geometric with stop probability theta."""
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    cap = max(max_rounds or DEFAULT_MAX_ROUNDS, required_max_rounds(theta, min_rounds))
    if theta == 1.0:
        return min_rounds
    u = 1.0 - rng.random()  # (0, 1]
    extra = int(math.floor(math.log(u) / math.log1p(-theta)))
    return min(min_rounds + extra, cap)


def round_distribution(theta: float, min_rounds: int = 1, max_rounds: int | None = None) -> dict[int, float]:
    """Exact probability mass of :func:`rounds_for`."""
    cap = max(max_rounds or DEFAULT_MAX_ROUNDS, required_max_rounds(theta, min_rounds))
    if theta == 1.0:
        return {min_rounds: 1.0}
    pmf = {x: theta * (1 - theta) ** (x - min_rounds) for x in range(min_rounds, cap)}
    pmf[cap] = (1 - theta) ** (cap - min_rounds)
    return pmf


def optimal_stop_round(theta: float, min_rounds: int = 1, max_rounds: int | None = None) -> int:
    """Round an informed cheater should gamble on: the mode of the round count."""
    pmf = round_distribution(theta, min_rounds, max_rounds)
    return max(sorted(pmf), key=lambda x: pmf[x])


def calibrate(
    config: ProtocolConfig,
    *,
    runs: int = 3,
    rtt: float | None = None,
    rng: RandomSource | None = None,
) -> ProtocolConfig:
    """Measure wall-clock derivation time and return a calibrated config.

    Refuses when the median derivation is not strictly slower than the
    timeout, or (if a round-trip time is supplied) slower than three RTTs.
    """
    measured = statistics.median(cc.time_derivation(config.work_factor, runs, rng))
    calibrated = replace(config, derivation_cost=measured)
    calibrated.check_calibration()
    if rtt is not None and measured < 3 * rtt:
        raise CalibrationError(f"derivation {measured:.3f}s is less than three round trips ({rtt:.3f}s each)")
    return calibrated


def suggest_work_factor(timeout: float, *, start: int = cc.MIN_WORK_FACTOR, limit: int = 20) -> int:
    """Smallest work factor whose measured derivation exceeds ``timeout`` seconds."""
    for work_factor in range(start, limit + 1):
        if statistics.median(cc.time_derivation(work_factor, 3)) > timeout:
            return work_factor
    raise CalibrationError(f"no work factor up to {limit} exceeds {timeout}s")


# --------------------------------------------------------------------------
# messages

@dataclass(frozen=True)
class UsageRequest:
    datum_type: str
    justification: str
    consumer_pseudonym: Pseudonym
    # needed to seal the consumer's copy of the usage record
    consumer_public_key: bytes

    def __post_init__(self) -> None:
        if not self.datum_type:
            raise ValueError("datum_type must not be empty")

    @property
    def is_fake(self) -> bool:
        return self.datum_type == FAKE_DATUM_TYPE

    def to_json(self) -> dict:
        return {
            "datum_type": self.datum_type,
            "justification": self.justification,
            "consumer_pseudonym": self.consumer_pseudonym.hex,
            "consumer_public_key": self.consumer_public_key.hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "UsageRequest":
        return cls(
            str(data["datum_type"]),
            str(data["justification"]),
            Pseudonym.from_hex(data["consumer_pseudonym"]),
            bytes.fromhex(data["consumer_public_key"]),
        )


def _message_signing_bytes(kind: str, label: bytes, round_: int, body: bytes, recipient_id: str) -> bytes:
    return frame(b"nr-message", kind.encode(), label, round_.to_bytes(4, "big"), body, recipient_id.encode("utf-8"))


@dataclass(frozen=True)
class ProtocolMessage:
    kind: str
    label: bytes
    round: int
    body: bytes
    signature: bytes

    def wire_bytes(self) -> bytes:
        return frame(self.kind.encode(), self.label, self.round.to_bytes(4, "big"), self.body, self.signature)

    @property
    def digest(self) -> bytes:
        return digest32(self.wire_bytes())

    def verify(self, recipient_id: str, sender_public_key: bytes) -> bool:
        return cc.verify(
            _message_signing_bytes(self.kind, self.label, self.round, self.body, recipient_id),
            self.signature,
            sender_public_key,
        )

    def to_json(self) -> dict:
        return {
            "type": self.kind,
            "label": self.label.hex(),
            "round": self.round,
            "body": base64.b64encode(self.body).decode("ascii"),
            "sig": self.signature.hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ProtocolMessage":
        if data.get("type") not in (CIPHER, STEP):
            raise UnexpectedMessage(f"not a protocol message: {data.get('type')!r}")
        return cls(
            data["type"],
            bytes.fromhex(data["label"]),
            int(data["round"]),
            base64.b64decode(data["body"]),
            bytes.fromhex(data["sig"]),
        )


def _ack_signing_bytes(message_digest: bytes, owner_id: str, label: bytes) -> bytes:
    return frame(b"nr-ack", message_digest, owner_id.encode("utf-8"), label)


@dataclass(frozen=True)
class Acknowledgment:
    label: bytes
    round: int
    message_digest: bytes
    signature: bytes

    def verify(self, owner_id: str, consumer_public_key: bytes) -> bool:
        return cc.verify(_ack_signing_bytes(self.message_digest, owner_id, self.label), self.signature, consumer_public_key)

    def to_json(self) -> dict:
        return {
            "type": ACK,
            "label": self.label.hex(),
            "round": self.round,
            "body": base64.b64encode(self.message_digest).decode("ascii"),
            "sig": self.signature.hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Acknowledgment":
        if data.get("type") != ACK:
            raise UnexpectedMessage(f"not an acknowledgment: {data.get('type')!r}")
        return cls(
            bytes.fromhex(data["label"]),
            int(data["round"]),
            base64.b64decode(data["body"]),
            bytes.fromhex(data["sig"]),
        )


def acknowledge(message: ProtocolMessage, owner_id: str, consumer_key: KeyPair) -> Acknowledgment:
    digest = message.digest
    return Acknowledgment(message.label, message.round, digest, cc.sign(_ack_signing_bytes(digest, owner_id, message.label), consumer_key))


def _split_cipher_body(body: bytes) -> tuple[int, bytes]:
    if not body:
        raise UnexpectedMessage("empty cipher body")
    return body[0], body[1:]


def transaction_label(datum: bytes, seed: CipherKeySeed) -> bytes:
    return digest32(datum + seed.canonical())


# --------------------------------------------------------------------------
# evidence

NRR = "NRR"
NRO = "NRO"


@dataclass(frozen=True)
class NonRepudiationEvidence:
    """Receipt evidence (held by the owner) or origin evidence (held by the consumer)."""

    role: str
    label: bytes
    cipher_message: ProtocolMessage
    key_message: ProtocolMessage | None
    counterparty_credential: VerifiableCredential
    own_credential: VerifiableCredential
    ack_cipher: Acknowledgment | None = None
    ack_key: Acknowledgment | None = None

    @property
    def counterparty_user_id(self) -> str:
        return self.counterparty_credential.user_id

    def to_json(self) -> dict:
        return {
            "role": self.role,
            "label": self.label.hex(),
            "cipher_message": self.cipher_message.to_json(),
            "key_message": self.key_message.to_json() if self.key_message else None,
            "counterparty_credential": self.counterparty_credential.to_json(),
            "own_credential": self.own_credential.to_json(),
            "ack_cipher": self.ack_cipher.to_json() if self.ack_cipher else None,
            "ack_key": self.ack_key.to_json() if self.ack_key else None,
        }

    @classmethod
    def from_json(cls, data: dict) -> "NonRepudiationEvidence":
        return cls(
            role=data["role"],
            label=bytes.fromhex(data["label"]),
            cipher_message=ProtocolMessage.from_json(data["cipher_message"]),
            key_message=ProtocolMessage.from_json(data["key_message"]) if data.get("key_message") else None,
            counterparty_credential=VerifiableCredential.from_json(data["counterparty_credential"]),
            own_credential=VerifiableCredential.from_json(data["own_credential"]),
            ack_cipher=Acknowledgment.from_json(data["ack_cipher"]) if data.get("ack_cipher") else None,
            ack_key=Acknowledgment.from_json(data["ack_key"]) if data.get("ack_key") else None,
        )


@dataclass(frozen=True)
class EvidenceCheck:
    """Result of verifying evidence; a success always names both parties."""

    valid: bool
    consumer_id: UserId | None = None
    owner_id: UserId | None = None

    def __bool__(self) -> bool:
        return self.valid


_REJECTED = EvidenceCheck(False)


def _key_opens_cipher(cipher_message: ProtocolMessage, key_message: ProtocolMessage, label: bytes) -> bool:
    try:
        work_factor, cipher = _split_cipher_body(cipher_message.body)
        seed = CipherKeySeed.from_material(key_message.body, work_factor)
        datum = cc.decrypt_datum(cipher, cc.derive_cipher_key(seed))
    except (ValueError, cc.CryptoError, UnexpectedMessage):
        return False
    return transaction_label(datum, seed) == label


def _check_transcript(
    cipher_message: ProtocolMessage,
    key_message: ProtocolMessage | None,
    label: bytes,
    consumer_id: str,
    owner_credential: VerifiableCredential,
) -> bool:
    if key_message is None:
        return False
    if cipher_message.kind != CIPHER or cipher_message.round != 0:
        return False
    if key_message.kind != STEP or key_message.round < 1:
        return False
    if cipher_message.label != label or key_message.label != label:
        return False
    if len(key_message.body) != cc.material_length():
        return False
    return cipher_message.verify(consumer_id, owner_credential.user_public_key) and key_message.verify(
        consumer_id, owner_credential.user_public_key
    )


def verify_receipt(
    evidence: NonRepudiationEvidence,
    consumer_credential: VerifiableCredential,
    owner_credential: VerifiableCredential,
    idp_public_key: bytes,
    *,
    label: bytes | None = None,
    cipher_message: ProtocolMessage | None = None,
    key_message: ProtocolMessage | None = None,
    check_key: bool = True,
) -> EvidenceCheck:
    """Check that the consumer acknowledged both the cipher and the real key.

    Transcripts default to the copies carried in the evidence.  With
    ``check_key`` the verifier re-derives the key and confirms that it opens
    the cipher and reproduces the label, so an acknowledgment of a mere
    round value cannot pass as receipt of the key.
    """
    label = evidence.label if label is None else label
    cipher_message = cipher_message or evidence.cipher_message
    key_message = key_message or evidence.key_message
    if evidence.role != NRR or evidence.label != label:
        return _REJECTED
    if evidence.ack_cipher is None or evidence.ack_key is None or key_message is None:
        return _REJECTED
    if not (consumer_credential.is_valid(idp_public_key) and owner_credential.is_valid(idp_public_key)):
        return _REJECTED
    consumer_id, owner_id = consumer_credential.user_id, owner_credential.user_id
    if not _check_transcript(cipher_message, key_message, label, consumer_id, owner_credential):
        return _REJECTED
    for ack, message in ((evidence.ack_cipher, cipher_message), (evidence.ack_key, key_message)):
        if ack.label != label or ack.round != message.round or ack.message_digest != message.digest:
            return _REJECTED
        if not ack.verify(owner_id, consumer_credential.user_public_key):
            return _REJECTED
    if check_key and not _key_opens_cipher(cipher_message, key_message, label):
        return _REJECTED
    return EvidenceCheck(True, UserId(consumer_id), UserId(owner_id))


def verify_origin(
    evidence: NonRepudiationEvidence,
    owner_credential: VerifiableCredential,
    consumer_credential: VerifiableCredential,
    idp_public_key: bytes,
    *,
    label: bytes | None = None,
    cipher_message: ProtocolMessage | None = None,
    key_message: ProtocolMessage | None = None,
    check_key: bool = True,
) -> EvidenceCheck:
    """Check that the owner signed the cipher and the key sent to this consumer."""
    label = evidence.label if label is None else label
    cipher_message = cipher_message or evidence.cipher_message
    key_message = key_message or evidence.key_message
    if evidence.role != NRO or evidence.label != label:
        return _REJECTED
    if not (consumer_credential.is_valid(idp_public_key) and owner_credential.is_valid(idp_public_key)):
        return _REJECTED
    consumer_id, owner_id = consumer_credential.user_id, owner_credential.user_id
    if not _check_transcript(cipher_message, key_message, label, consumer_id, owner_credential):
        return _REJECTED
    if check_key and not _key_opens_cipher(cipher_message, key_message, label):
        return _REJECTED
    return EvidenceCheck(True, UserId(consumer_id), UserId(owner_id))


# --------------------------------------------------------------------------
# outcomes

class Status(enum.Enum):
    COMPLETED = "completed"
    ABORTED_BY_TIMEOUT = "aborted-by-timeout"
    ABORTED_BY_CONSUMER = "aborted-by-consumer"
    FAKE_CHATTER = "fake-chatter"


@dataclass
class ExchangeOutcome:
    status: Status
    datum: bytes | None = None
    evidence: NonRepudiationEvidence | None = None
    usage_payload: UsagePayload | None = None
    usage_record: UsageRecord | None = None
    own_record: PseudonymRecord | None = None
    key_seed: CipherKeySeed | None = None
    reason: str | None = None

    @property
    def completed(self) -> bool:
        return self.status is Status.COMPLETED


@dataclass(frozen=True)
class NextMessage:
    message: ProtocolMessage


@dataclass(frozen=True)
class Finished:
    outcome: ExchangeOutcome


@dataclass(frozen=True)
class Abort:
    reason: str
    outcome: ExchangeOutcome


# --------------------------------------------------------------------------
# owner

@dataclass
class OwnerSession:
    config: ProtocolConfig
    request: UsageRequest
    owner_key: KeyPair
    owner_credential: VerifiableCredential
    consumer_credential: VerifiableCredential
    label: bytes
    key_seed: CipherKeySeed
    rounds: int
    round_values: list[bytes] = field(repr=False)
    fake: bool = False
    sent: list[ProtocolMessage] = field(default_factory=list, repr=False)
    acks: list[Acknowledgment] = field(default_factory=list, repr=False)
    last_sent_at: float = 0.0
    state: str = "awaiting-ack"

    @property
    def consumer_id(self) -> str:
        return self.consumer_credential.user_id

    @property
    def owner_id(self) -> str:
        return self.owner_credential.user_id

    @property
    def open(self) -> bool:
        return self.state == "awaiting-ack"

    def _send(self, kind: str, round_: int, body: bytes, now: float) -> ProtocolMessage:
        signature = cc.sign(_message_signing_bytes(kind, self.label, round_, body, self.consumer_id), self.owner_key)
        message = ProtocolMessage(kind, self.label, round_, body, signature)
        self.sent.append(message)
        self.last_sent_at = now
        return message


def owner_begin(
    datum: bytes,
    request: UsageRequest,
    consumer_credential: VerifiableCredential,
    config: ProtocolConfig,
    rng: RandomSource,
    *,
    owner_key: KeyPair,
    owner_credential: VerifiableCredential,
    now: float = 0.0,
    prepared_key: tuple[CipherKeySeed, SymmetricKey] | None = None,
    rounds: int | None = None,
) -> tuple[OwnerSession, ProtocolMessage]:
    """Encrypt the datum, draw the hidden round count and emit the cipher message.

    ``prepared_key`` lets a node use a key derived ahead of time; ``rounds``
    overrides the random draw (tests and traffic-shape comparisons only).
    """
    config.check_calibration()
    fake = request.is_fake
    if not fake and Pseudonym.of_public_key(request.consumer_public_key) != request.consumer_pseudonym:
        raise ProtocolError("consumer pseudonym is not the digest of the supplied public key")
    if prepared_key is None:
        seed = cc.new_key_seed(config.work_factor, rng)
        key = cc.derive_cipher_key(seed)
    else:
        seed, key = prepared_key
        if seed.work_factor != config.work_factor:
            raise ProtocolError("prepared key uses a different work factor")
    n = rounds_for(config.theta, rng, config.min_rounds, config.max_rounds) if rounds is None else rounds
    if n < 1:
        raise ValueError("at least one round is required")
    session = OwnerSession(
        config=config,
        request=request,
        owner_key=owner_key,
        owner_credential=owner_credential,
        consumer_credential=consumer_credential,
        label=transaction_label(datum, seed),
        key_seed=seed,
        rounds=n,
        round_values=[rng.randbytes(cc.material_length()) for _ in range(n - 1)],
        fake=fake,
    )
    body = bytes([seed.work_factor]) + cc.encrypt_datum(datum, key, rng)
    return session, session._send(CIPHER, 0, body, now)


def _elapsed(now: float, since: float, span: float) -> bool:
    # tolerant of rounding when a timer was scheduled at exactly ``since + span``
    return now - since >= span * (1 - 1e-9)


def owner_timed_out(session: OwnerSession, now: float) -> Abort | None:
    """Abort the exchange if the outstanding acknowledgment is overdue."""
    if session.open and _elapsed(now, session.last_sent_at, session.config.timeout):
        session.state = "aborted"
        return Abort("timeout", ExchangeOutcome(Status.ABORTED_BY_TIMEOUT, reason="timeout"))
    return None


def owner_step(
    session: OwnerSession,
    ack: Acknowledgment,
    now: float,
    rng: RandomSource | None = None,
) -> NextMessage | Finished | Abort:
    if not session.open:
        raise ProtocolError(f"session is {session.state}")
    late = owner_timed_out(session, now)
    if late is not None:
        return late
    last = session.sent[-1]
    if (
        ack.label != session.label
        or ack.round != last.round
        or ack.message_digest != last.digest
        or not ack.verify(session.owner_id, session.consumer_credential.user_public_key)
    ):
        session.state = "aborted"
        return Abort("bad-ack", ExchangeOutcome(Status.ABORTED_BY_CONSUMER, reason="bad-ack"))
    session.acks.append(ack)

    if last.round == session.rounds:
        session.state = "finished"
        return Finished(_owner_outcome(session, now, rng))

    next_round = last.round + 1
    if next_round < session.rounds:
        body = session.round_values[next_round - 1]
    else:
        body = session.key_seed.material
    # round values must be indistinguishable from the key by length
    assert len(body) == cc.material_length()
    return NextMessage(session._send(STEP, next_round, body, now))


def _owner_outcome(session: OwnerSession, now: float, rng: RandomSource | None) -> ExchangeOutcome:
    if session.fake:
        return ExchangeOutcome(Status.FAKE_CHATTER)
    evidence = NonRepudiationEvidence(
        role=NRR,
        label=session.label,
        cipher_message=session.sent[0],
        key_message=session.sent[-1],
        counterparty_credential=session.consumer_credential,
        own_credential=session.owner_credential,
        ack_cipher=session.acks[0],
        ack_key=session.acks[-1],
    )
    record = new_pseudonym(session.config.pseudonym_bits, rng)
    payload, usage = compose_usage_payload(
        datum_type=session.request.datum_type,
        justification=session.request.justification,
        label=session.label,
        timestamp=now,
        consumer_pseudonym=session.request.consumer_pseudonym,
        consumer_public_key=session.request.consumer_public_key,
        owner_record=record,
        rng=rng,
    )
    return ExchangeOutcome(
        Status.COMPLETED,
        evidence=evidence,
        usage_payload=payload,
        usage_record=usage,
        own_record=record,
        key_seed=session.key_seed,
    )


# --------------------------------------------------------------------------
# consumer

@dataclass
class ConsumerSession:
    config: ProtocolConfig
    request: UsageRequest
    consumer_key: KeyPair
    consumer_credential: VerifiableCredential
    owner_credential: VerifiableCredential
    record: PseudonymRecord | None
    received: list[ProtocolMessage] = field(default_factory=list, repr=False)
    label: bytes | None = None
    last_ack_at: float | None = None
    state: str = "receiving"

    @property
    def owner_id(self) -> str:
        return self.owner_credential.user_id

    @property
    def consumer_id(self) -> str:
        return self.consumer_credential.user_id


def consumer_start(
    request: UsageRequest,
    config: ProtocolConfig,
    *,
    consumer_key: KeyPair,
    consumer_credential: VerifiableCredential,
    owner_credential: VerifiableCredential,
    record: PseudonymRecord | None,
) -> ConsumerSession:
    return ConsumerSession(config, request, consumer_key, consumer_credential, owner_credential, record)


def consumer_check(session: ConsumerSession, message: ProtocolMessage) -> None:
    """Validate an incoming message without acknowledging it."""
    if session.state != "receiving":
        raise ProtocolError(f"session is {session.state}")
    expected_round = len(session.received)
    expected_kind = CIPHER if expected_round == 0 else STEP
    if message.kind != expected_kind or message.round != expected_round:
        raise UnexpectedMessage(f"expected {expected_kind} round {expected_round}, got {message.kind} round {message.round}")
    if session.label is not None and message.label != session.label:
        raise LabelMismatch("message label does not match the session")
    if not message.verify(session.consumer_id, session.owner_credential.user_public_key):
        raise BadOwnerSignature("owner signature invalid")
    if message.kind == STEP and len(message.body) != cc.material_length():
        raise UnexpectedMessage("round value has the wrong length")


def consumer_step(session: ConsumerSession, message: ProtocolMessage, now: float) -> Acknowledgment:
    consumer_check(session, message)
    if session.label is None:
        session.label = message.label
    session.received.append(message)
    session.last_ack_at = now
    return acknowledge(message, session.owner_id, session.consumer_key)


def consumer_completion_due(session: ConsumerSession, now: float) -> bool:
    """True once the owner has been silent for the completion window."""
    return (
        session.state == "receiving"
        and session.last_ack_at is not None
        and _elapsed(now, session.last_ack_at, session.config.completion_window)
    )


def attempt_decrypt(session: ConsumerSession, round_index: int) -> tuple[bytes, CipherKeySeed] | None:
    """Treat the body received at ``round_index`` as key material and try to open the cipher."""
    if not session.received or round_index < 1 or round_index >= len(session.received):
        return None
    work_factor, cipher = _split_cipher_body(session.received[0].body)
    try:
        seed = CipherKeySeed.from_material(session.received[round_index].body, work_factor)
        datum = cc.decrypt_datum(cipher, cc.derive_cipher_key(seed))
    except (ValueError, cc.CryptoError):
        return None
    if transaction_label(datum, seed) != session.label:
        return None
    return datum, seed


def consumer_finish(session: ConsumerSession) -> ExchangeOutcome:
    """Derive the key from the last body and open the cipher (the slow step)."""
    if session.state != "receiving":
        raise ProtocolError(f"session is {session.state}")
    if session.request.is_fake:
        session.state = "finished"
        return ExchangeOutcome(Status.FAKE_CHATTER)
    opened = attempt_decrypt(session, len(session.received) - 1)
    if opened is None:
        session.state = "aborted"
        return ExchangeOutcome(Status.ABORTED_BY_TIMEOUT, reason="no usable key")
    datum, seed = opened
    session.state = "finished"
    evidence = NonRepudiationEvidence(
        role=NRO,
        label=session.label,
        cipher_message=session.received[0],
        key_message=session.received[-1],
        counterparty_credential=session.owner_credential,
        own_credential=session.consumer_credential,
    )
    return ExchangeOutcome(Status.COMPLETED, datum=datum, evidence=evidence, own_record=session.record, key_seed=seed)


# --------------------------------------------------------------------------
# in-memory driver

@dataclass(frozen=True)
class Party:
    user_id: str
    key: KeyPair
    credential: VerifiableCredential


@dataclass(frozen=True)
class TranscriptEntry:
    time: float
    direction: str  # "o->c" or "c->o"
    kind: str
    size: int


@dataclass
class LoopbackResult:
    owner: ExchangeOutcome
    consumer: ExchangeOutcome
    transcript: list[TranscriptEntry]
    owner_session: OwnerSession
    consumer_session: ConsumerSession


def _wire_size(obj: ProtocolMessage | Acknowledgment) -> int:
    import json

    return len(json.dumps(obj.to_json(), separators=(",", ":")).encode())


def run_exchange(
    datum: bytes,
    request: UsageRequest,
    owner: Party,
    consumer: Party,
    config: ProtocolConfig,
    rng: RandomSource,
    *,
    consumer_record: PseudonymRecord | None = None,
    latency: float = 1.0,
    stop_at: int | None = None,
    withhold_at: int | None = None,
    rounds: int | None = None,
) -> LoopbackResult:
    """Run one exchange between two in-process parties under a logical clock.

    ``stop_at`` makes the consumer cheat: it withholds the acknowledgment
    of that round and tries to open the cipher with that round's body.
    ``withhold_at`` simply stops acknowledging at that round.
    """
    if latency * 2 > config.timeout:
        raise ValueError("latency too high for the configured timeout")
    now = 0.0
    transcript: list[TranscriptEntry] = []
    o_session, message = owner_begin(
        datum, request, consumer.credential, config, rng,
        owner_key=owner.key, owner_credential=owner.credential, now=now, rounds=rounds,
    )
    c_session = consumer_start(
        request, config, consumer_key=consumer.key, consumer_credential=consumer.credential,
        owner_credential=owner.credential, record=consumer_record,
    )
    owner_outcome: ExchangeOutcome | None = None
    consumer_outcome: ExchangeOutcome | None = None
    while True:
        transcript.append(TranscriptEntry(now, "o->c", message.kind, _wire_size(message)))
        now += latency
        if stop_at is not None and message.round == stop_at:
            # cheat: no ack, spend the derivation time on this body instead
            c_session.received.append(message)
            c_session.label = c_session.label or message.label
            opened = attempt_decrypt(c_session, message.round)
            c_session.state = "aborted"
            consumer_outcome = ExchangeOutcome(
                Status.ABORTED_BY_CONSUMER, datum=opened[0] if opened else None, reason="cheat"
            )
            abort = owner_timed_out(o_session, o_session.last_sent_at + config.timeout + latency)
            owner_outcome = abort.outcome if abort else None
            break
        if withhold_at is not None and message.round == withhold_at:
            c_session.received.append(message)
            c_session.label = c_session.label or message.label
            abort = owner_timed_out(o_session, o_session.last_sent_at + config.timeout + latency)
            owner_outcome = abort.outcome if abort else None
            now = o_session.last_sent_at + config.timeout + latency
            consumer_outcome = consumer_finish(c_session)
            break
        ack = consumer_step(c_session, message, now)
        transcript.append(TranscriptEntry(now, "c->o", ACK, _wire_size(ack)))
        now += latency
        result = owner_step(o_session, ack, now, rng)
        if isinstance(result, NextMessage):
            message = result.message
            continue
        owner_outcome = result.outcome
        # owner goes silent; the consumer notices after the completion window
        now = c_session.last_ack_at + config.completion_window
        if consumer_completion_due(c_session, now):
            consumer_outcome = consumer_finish(c_session)
        break
    assert owner_outcome is not None and consumer_outcome is not None
    return LoopbackResult(owner_outcome, consumer_outcome, transcript, o_session, c_session)


def fake_exchange(
    consumer: Party,
    owner: Party,
    config: ProtocolConfig,
    rng: RandomSource,
    *,
    cipher_size: int = 256,
    latency: float = 1.0,
    rounds: int | None = None,
) -> LoopbackResult:
    """Run the full message sequence for the sentinel datum; nothing is logged."""
    request = fake_request(rng, key_length=len(consumer.key.public_key))
    dummy = rng.randbytes(max(0, cipher_size - cc.NONCE_BYTES - 16 - 1))
    return run_exchange(dummy, request, owner, consumer, config, rng, latency=latency, rounds=rounds)


def fake_request(rng: RandomSource, key_length: int) -> UsageRequest:
    """A sentinel request whose pseudonym fields are random bytes of realistic size."""
    return UsageRequest(FAKE_DATUM_TYPE, "", Pseudonym(rng.randbytes(32)), rng.randbytes(key_length))


def transcript_profile(entries: Iterable[TranscriptEntry]) -> list[tuple[str, int]]:
    """What a metadata-only eavesdropper sees: direction and size, in order."""
    return [(e.direction, e.size) for e in entries]
