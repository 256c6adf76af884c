"""A full node: identity preamble, exchanges, private store, ledger and gossip.

The node is event driven and never blocks.  Everything it needs from the
outside world goes through a small environment object (send a message,
read the clock, schedule a callback, run a slow computation), so the same
class runs inside the discrete-event simulator and behind the asyncio TCP
driver.
"""

from __future__ import annotations

import json
import logging
import os
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from . import crypto_core as cc
from . import exchange_protocol as ep
from . import ledger as lg
from .crypto_core import CipherKeySeed, KeyPair
from .identity_vc import (
    IdentityAssertion,
    IdentityError,
    UserId,
    VerifiableCredential,
    present_identity,
    verify_identity,
)
from .pseudonym import (
    OwnershipProof,
    Pseudonym,
    PseudonymRecord,
    new_challenge,
    new_pseudonym,
    prove_ownership,
    verify_ownership,
)

log = logging.getLogger(__name__)

IDENTITY = "identity"
PROTOCOL = "protocol"
GOSSIP = "gossip"
ERASURE = "erasure"
ENVELOPE_KINDS = (IDENTITY, PROTOCOL, GOSSIP, ERASURE)
PAD_BUCKET = 256

MIN_FAKES_ALLOWED = 12
MAX_FAKES_ALLOWED = 321


class NodeError(Exception):
    pass


# --------------------------------------------------------------------------
# envelopes

def encode_envelope(session_id: str, kind: str, body: dict) -> bytes:
    """JSON envelope padded with trailing spaces to a multiple of the bucket size."""
    if kind not in ENVELOPE_KINDS:
        raise ValueError(f"unknown envelope kind {kind!r}")
    raw = json.dumps({"session_id": session_id, "kind": kind, "body": body}, separators=(",", ":")).encode()
    return raw + b" " * (-len(raw) % PAD_BUCKET)


def decode_envelope(data: bytes) -> tuple[str, str, dict]:
    obj = json.loads(data)
    if obj.get("kind") not in ENVELOPE_KINDS or not isinstance(obj.get("body"), dict):
        raise ValueError("malformed envelope")
    return str(obj["session_id"]), obj["kind"], obj["body"]


# --------------------------------------------------------------------------
# configuration

@dataclass
class ChatterConfig:
    enabled: bool = False
    min_fakes: int = MIN_FAKES_ALLOWED
    max_fakes: int = MIN_FAKES_ALLOWED

    def __post_init__(self) -> None:
        if self.enabled and not MIN_FAKES_ALLOWED <= self.min_fakes <= self.max_fakes <= MAX_FAKES_ALLOWED:
            raise ValueError(
                f"fake chatter needs {MIN_FAKES_ALLOWED} <= min_fakes <= max_fakes <= {MAX_FAKES_ALLOWED}"
            )


@dataclass
class NodeConfig:
    protocol: ep.ProtocolConfig
    difficulty: int = lg.DEFAULT_DIFFICULTY
    chatter: ChatterConfig = field(default_factory=ChatterConfig)
    catalog: dict[str, bytes] = field(default_factory=dict)
    # addresses this node may contact directly (chatter targets, discovery)
    peers: list[str] = field(default_factory=list)
    # simulated clock units per hash attempt; zero when mining runs in real time
    mining_time_per_attempt: float = 0.0
    # upper bound of a uniform random wait before mining a usage log
    publication_delay: float = 0.0
    # how long a consumer waits for the preamble to finish
    preamble_timeout: float | None = None
    data_dir: Path | None = None


@dataclass(frozen=True)
class Identity:
    user_id: str
    key: KeyPair
    credential: VerifiableCredential
    idp_public_key: bytes


class NodeEnv(Protocol):
    def now(self) -> float: ...

    def send(self, src: str, dst: str, data: bytes, *, flow: str, overlay: bool) -> None: ...

    def call_later(self, delay: float, callback: Callable[[], None]) -> None: ...

    def run_slow(self, cost: float, work: Callable[[], Any], done: Callable[[Any], None]) -> None: ...


class Pending:
    """Minimal future used by node operations that complete asynchronously."""

    def __init__(self) -> None:
        self.done = False
        self.value: Any = None
        self.error: str | None = None
        self._callbacks: list[Callable[["Pending"], None]] = []

    def resolve(self, value: Any) -> None:
        if not self.done:
            self.done, self.value = True, value
            self._fire()

    def fail(self, error: str) -> None:
        if not self.done:
            self.done, self.error = True, error
            self._fire()

    def add_callback(self, fn: Callable[["Pending"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _fire(self) -> None:
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)

    @property
    def ok(self) -> bool:
        return self.done and self.error is None


# --------------------------------------------------------------------------
# non-repudiation store

def _seed_to_json(seed: CipherKeySeed | None) -> dict | None:
    if seed is None:
        return None
    return {"seed": seed.seed.hex(), "salt": seed.salt.hex(), "work_factor": seed.work_factor}


def _seed_from_json(data: dict | None) -> CipherKeySeed | None:
    if data is None:
        return None
    return CipherKeySeed(bytes.fromhex(data["seed"]), bytes.fromhex(data["salt"]), int(data["work_factor"]))


@dataclass
class NrsEntry:
    label: bytes
    role: str  # "owner" | "consumer"
    own_pseudonym_record: PseudonymRecord
    counterparty_user_id: str | None
    # the consumer only learns the owner's pseudonym once the log is on chain
    counterparty_pseudonym: Pseudonym | None
    evidence: ep.NonRepudiationEvidence | None
    datum_key_seed: CipherKeySeed | None = None
    erased: bool = False

    def to_json(self) -> dict:
        return {
            "label": self.label.hex(),
            "role": self.role,
            "own_pseudonym_record": self.own_pseudonym_record.to_json(),
            "counterparty_user_id": self.counterparty_user_id,
            "counterparty_pseudonym": self.counterparty_pseudonym.hex if self.counterparty_pseudonym else None,
            "evidence": self.evidence.to_json() if self.evidence else None,
            "datum_key_seed": _seed_to_json(self.datum_key_seed),
            "erased": self.erased,
        }

    @classmethod
    def from_json(cls, data: dict) -> "NrsEntry":
        return cls(
            label=bytes.fromhex(data["label"]),
            role=data["role"],
            own_pseudonym_record=PseudonymRecord.from_json(data["own_pseudonym_record"]),
            counterparty_user_id=data.get("counterparty_user_id"),
            counterparty_pseudonym=Pseudonym.from_hex(data["counterparty_pseudonym"]) if data.get("counterparty_pseudonym") else None,
            evidence=ep.NonRepudiationEvidence.from_json(data["evidence"]) if data.get("evidence") else None,
            datum_key_seed=_seed_from_json(data.get("datum_key_seed")),
            erased=bool(data.get("erased", False)),
        )


class NrsStore:
    """Private store of pseudonym keys and evidence, persisted as JSON lines.

    Lines are ``{"op": "put", "entry": ...}`` and, after an erasure,
    ``{"op": "erased", "label": ...}``.  Erasure first appends a tombstone
    and then compacts the file so the removed identity data is gone from disk.
    """

    def __init__(self, path: Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._entries: dict[bytes, NrsEntry] = {}
        self._erased: list[bytes] = []
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        for line in self.path.read_text().splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            if record["op"] == "put":
                entry = NrsEntry.from_json(record["entry"])
                self._entries[entry.label] = entry
            elif record["op"] in ("erase", "erased"):
                label = bytes.fromhex(record["label"])
                if label in self._entries:
                    self._entries[label] = _anonymized(self._entries[label])
                if label not in self._erased:
                    self._erased.append(label)

    def _append(self, record: dict) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, PRIVATE_MODE)
        with os.fdopen(fd, "a") as fh:
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, label: bytes) -> bool:
        return label in self._entries

    def get(self, label: bytes) -> NrsEntry | None:
        return self._entries.get(label)

    def entries(self) -> list[NrsEntry]:
        return list(self._entries.values())

    def put(self, entry: NrsEntry) -> None:
        self._entries[entry.label] = entry
        self._append({"op": "put", "entry": entry.to_json()})

    def erase(self, label: bytes) -> NrsEntry:
        entry = self._entries.get(label)
        if entry is None:
            raise KeyError(label)
        self._append({"op": "erase", "label": label.hex()})
        self._entries[label] = _anonymized(entry)
        if label not in self._erased:
            self._erased.append(label)
        self.compact()
        return self._entries[label]

    def compact(self) -> None:
        if self.path is None:
            return
        lines = [json.dumps({"op": "put", "entry": e.to_json()}, separators=(",", ":")) for e in self._entries.values()]
        lines += [json.dumps({"op": "erased", "label": label.hex()}) for label in self._erased]
        write_private(self.path, "".join(line + "\n" for line in lines))


PRIVATE_MODE = 0o600


def write_private(path: Path, text: str) -> None:
    """Atomically replace ``path`` with ``text``, readable by the owner only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, PRIVATE_MODE)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _anonymized(entry: NrsEntry) -> NrsEntry:
    return NrsEntry(
        label=entry.label,
        role=entry.role,
        own_pseudonym_record=entry.own_pseudonym_record,
        counterparty_user_id=None,
        counterparty_pseudonym=entry.counterparty_pseudonym,
        evidence=None,
        datum_key_seed=entry.datum_key_seed,
        erased=True,
    )


# --------------------------------------------------------------------------
# per-session state

@dataclass
class _ConsumerConn:
    session_id: str
    peer: str
    datum_type: str
    justification: str
    fake: bool
    handle: Pending
    challenge: bytes
    record: PseudonymRecord | None = None
    request: ep.UsageRequest | None = None
    owner_credential: VerifiableCredential | None = None
    session: ep.ConsumerSession | None = None
    state: str = "hello"


@dataclass
class _OwnerConn:
    session_id: str
    peer: str
    challenge: bytes
    consumer_credential: VerifiableCredential | None = None
    session: ep.OwnerSession | None = None
    state: str = "asserted"


@dataclass
class _ErasureConn:
    session_id: str
    peer: str
    label: bytes
    handle: Pending


@dataclass
class ExchangeStats:
    """Bookkeeping an experiment harness can read after a run."""

    completed_as_owner: int = 0
    completed_as_consumer: int = 0
    aborted: int = 0
    fake_sessions: int = 0
    append_stats: list[lg.AppendStats] = field(default_factory=list)
    mining_retries: int = 0
    # (exchange finished, both blocks committed) in node clock time
    append_timeline: list[tuple[float, float]] = field(default_factory=list)


# --------------------------------------------------------------------------
# the node

class Node:
    def __init__(
        self,
        address: str,
        identity: Identity,
        config: NodeConfig,
        env: NodeEnv,
        rng: random.Random,
        *,
        chain: lg.Chain | None = None,
    ) -> None:
        config.protocol.check_calibration()
        self.address = address
        self.identity = identity
        self.config = config
        self.env = env
        self.rng = rng
        self.neighbours: list[str] = []
        data_dir = config.data_dir
        self.nrs = NrsStore(data_dir / "nrs.jsonl" if data_dir else None)
        chain_path = data_dir / "chain.jsonl" if data_dir else None
        if chain is None and chain_path is not None and chain_path.exists():
            chain = lg.Chain.from_jsonl(chain_path.read_text(), min_difficulty=config.difficulty)
        self.store = lg.ChainStore(chain, min_difficulty=config.difficulty)
        self._chain_path = chain_path
        self.stats = ExchangeStats()

        self._consumer: dict[str, _ConsumerConn] = {}
        self._owner: dict[str, _OwnerConn] = {}
        self._erasures: dict[str, _ErasureConn] = {}
        self._erasure_challenges: dict[tuple[str, bytes], bytes] = {}
        self._seen_blocks: set[bytes] = {b.block_hash for b in self.store.canonical}
        self._seen_finds: set[str] = set()
        self._finds: dict[str, tuple[Pending, float]] = {}
        self._chain_waiters: dict[str, Pending] = {}

        self._append_queue: deque[lg.UsagePayload] = deque()
        self._pending_payloads: dict[bytes, lg.UsagePayload] = {}
        self._finished_at: dict[bytes, float] = {}
        self._mining = False
        self._key_pool: list[tuple[CipherKeySeed, cc.SymmetricKey]] = []
        self._refilling = False

    # ------------------------------------------------------------ basics
    @property
    def chain(self) -> lg.Chain:
        return self.store.canonical

    @property
    def user_id(self) -> str:
        return self.identity.user_id

    def set_chatter(self, enabled: bool) -> None:
        self.config.chatter = ChatterConfig(enabled, self.config.chatter.min_fakes, self.config.chatter.max_fakes)

    def _new_session_id(self) -> str:
        return self.rng.randbytes(16).hex()

    def _send(self, dst: str, session_id: str, kind: str, body: dict) -> None:
        self.env.send(self.address, dst, encode_envelope(session_id, kind, body), flow=session_id, overlay=kind == GOSSIP)

    def on_message(self, src: str, data: bytes) -> None:
        try:
            session_id, kind, body = decode_envelope(data)
        except (ValueError, json.JSONDecodeError):
            log.debug("%s: dropping malformed envelope from %s", self.address, src)
            return
        try:
            if kind == GOSSIP:
                self._on_gossip(src, session_id, body)
            elif kind == ERASURE:
                self._on_erasure(src, session_id, body)
            elif session_id in self._consumer:
                self._on_consumer_message(self._consumer[session_id], kind, body)
            else:
                self._on_owner_message(src, session_id, kind, body)
        except (KeyError, ValueError, TypeError, OverflowError, lg.LedgerError) as exc:
            log.debug("%s: bad %s message from %s: %s", self.address, kind, src, exc)

    def on_unreachable(self, dst: str) -> None:
        """Called by the transport when ``dst`` cannot be contacted."""
        for sid, conn in list(self._consumer.items()):
            if conn.peer == dst and conn.state in ("hello", "asserted"):
                del self._consumer[sid]
                conn.handle.fail("peer-unreachable")
        for sid, conn in list(self._erasures.items()):
            if conn.peer == dst:
                del self._erasures[sid]
                conn.handle.fail("peer-unreachable")

    # ------------------------------------------------------------ consumer
    def request_datum(self, peer: str, datum_type: str, justification: str = "") -> Pending:
        """Ask ``peer`` for a datum; resolves to ``(datum, NrsEntry)``."""
        if datum_type == ep.FAKE_DATUM_TYPE:
            raise ValueError("the sentinel datum type is reserved for fake chatter")
        handle = self._start_consumer(peer, datum_type, justification, fake=False)
        chatter = self.config.chatter
        if chatter.enabled:
            candidates = [p for p in self.config.peers if p not in (peer, self.address)]
            k = self.rng.randint(chatter.min_fakes, chatter.max_fakes)
            for target in self.rng.sample(candidates, min(k, len(candidates))):
                self._start_consumer(target, ep.FAKE_DATUM_TYPE, "", fake=True)
        return handle

    def fake_exchange(self, peer: str) -> Pending:
        return self._start_consumer(peer, ep.FAKE_DATUM_TYPE, "", fake=True)

    def _start_consumer(self, peer: str, datum_type: str, justification: str, *, fake: bool) -> Pending:
        conn = _ConsumerConn(
            session_id=self._new_session_id(),
            peer=peer,
            datum_type=datum_type,
            justification=justification,
            fake=fake,
            handle=Pending(),
            challenge=new_challenge(self.rng),
        )
        self._consumer[conn.session_id] = conn
        if fake:
            self.stats.fake_sessions += 1
        self._send(peer, conn.session_id, IDENTITY, {"type": "hello", "challenge": conn.challenge.hex()})
        timeout = self.config.preamble_timeout or 20 * self.config.protocol.timeout
        self.env.call_later(timeout, lambda: self._preamble_expired(conn))
        return conn.handle

    def _preamble_expired(self, conn: _ConsumerConn) -> None:
        if conn.state in ("hello", "asserted") and self._consumer.get(conn.session_id) is conn:
            del self._consumer[conn.session_id]
            conn.handle.fail("peer-unreachable")

    def _consumer_fail(self, conn: _ConsumerConn, error: str) -> None:
        self._consumer.pop(conn.session_id, None)
        conn.state = "failed"
        conn.handle.fail(error)

    def _on_consumer_message(self, conn: _ConsumerConn, kind: str, body: dict) -> None:
        kind_type = body.get("type")
        if kind_type == "reject":
            self._consumer_fail(conn, body.get("reason", "identity-rejected"))
            return
        if kind == IDENTITY and kind_type == "assert" and conn.state == "hello":
            assertion = IdentityAssertion.from_json(body["assertion"])
            try:
                verify_identity(assertion, self.identity.idp_public_key, conn.challenge, conn.session_id.encode())
            except IdentityError:
                self._send(conn.peer, conn.session_id, IDENTITY, {"type": "reject", "reason": "identity-rejected"})
                self._consumer_fail(conn, "identity-rejected")
                return
            conn.owner_credential = assertion.credential
            mine = present_identity(
                self.identity.credential, self.identity.key, bytes.fromhex(body["challenge"]), conn.session_id.encode()
            )
            conn.state = "asserted"
            self._send(conn.peer, conn.session_id, IDENTITY, {"type": "assert", "assertion": mine.to_json()})
        elif kind == IDENTITY and kind_type == "ready" and conn.state == "asserted":
            conn.request = self._make_request(conn)
            conn.session = ep.consumer_start(
                conn.request,
                self.config.protocol,
                consumer_key=self.identity.key,
                consumer_credential=self.identity.credential,
                owner_credential=conn.owner_credential,
                record=conn.record,
            )
            conn.state = "exchange"
            self._send(conn.peer, conn.session_id, PROTOCOL, {"type": "request", "request": conn.request.to_json()})
        elif kind == PROTOCOL and conn.state == "exchange" and kind_type in (ep.CIPHER, ep.STEP):
            message = ep.ProtocolMessage.from_json(body)
            try:
                ack = ep.consumer_step(conn.session, message, self.env.now())
            except ep.ProtocolError as exc:
                log.debug("%s: refusing message: %s", self.address, exc)
                return
            self._send(conn.peer, conn.session_id, PROTOCOL, ack.to_json())
            self.env.call_later(self.config.protocol.completion_window, lambda: self._check_completion(conn))

    def _make_request(self, conn: _ConsumerConn) -> ep.UsageRequest:
        if conn.fake:
            key_length = self.config.protocol.pseudonym_bits // 8 + 4
            return ep.fake_request(self.rng, key_length)
        conn.record = new_pseudonym(self.config.protocol.pseudonym_bits, self.rng)
        return ep.UsageRequest(conn.datum_type, conn.justification, conn.record.pseudonym, conn.record.keypair.public_key)

    def _check_completion(self, conn: _ConsumerConn) -> None:
        if conn.state != "exchange" or not ep.consumer_completion_due(conn.session, self.env.now()):
            return
        conn.state = "deriving"
        if conn.fake:
            outcome = ep.consumer_finish(conn.session)
            self._consumer_done(conn, outcome)
            return
        cost = self.config.protocol.derivation_cost
        self.env.run_slow(cost, lambda: ep.consumer_finish(conn.session), lambda outcome: self._consumer_done(conn, outcome))

    def _consumer_done(self, conn: _ConsumerConn, outcome: ep.ExchangeOutcome) -> None:
        self._consumer.pop(conn.session_id, None)
        if outcome.status is ep.Status.FAKE_CHATTER:
            conn.state = "finished"
            conn.handle.resolve(None)
            return
        if not outcome.completed:
            self.stats.aborted += 1
            conn.state = "failed"
            conn.handle.fail("exchange-aborted")
            return
        entry = NrsEntry(
            label=outcome.evidence.label,
            role="consumer",
            own_pseudonym_record=conn.record,
            counterparty_user_id=conn.owner_credential.user_id,
            counterparty_pseudonym=None,
            evidence=outcome.evidence,
            datum_key_seed=outcome.key_seed,
        )
        self.nrs.put(entry)
        self.stats.completed_as_consumer += 1
        conn.state = "finished"
        conn.handle.resolve((outcome.datum, entry))

    # ------------------------------------------------------------ owner
    def _on_owner_message(self, src: str, session_id: str, kind: str, body: dict) -> None:
        kind_type = body.get("type")
        conn = self._owner.get(session_id)
        if conn is None:
            if kind == IDENTITY and kind_type == "hello":
                self._owner_hello(src, session_id, body)
            return
        if conn.peer != src:
            return
        if kind_type == "reject":
            del self._owner[session_id]
        elif kind == IDENTITY and kind_type == "assert" and conn.state == "asserted":
            assertion = IdentityAssertion.from_json(body["assertion"])
            try:
                verify_identity(assertion, self.identity.idp_public_key, conn.challenge, session_id.encode())
            except IdentityError:
                del self._owner[session_id]
                self._send(src, session_id, IDENTITY, {"type": "reject", "reason": "identity-rejected"})
                return
            conn.consumer_credential = assertion.credential
            conn.state = "ready"
            self._send(src, session_id, IDENTITY, {"type": "ready"})
        elif kind == PROTOCOL and kind_type == "request" and conn.state == "ready":
            self._owner_request(conn, ep.UsageRequest.from_json(body["request"]))
        elif kind == PROTOCOL and kind_type == ep.ACK and conn.state == "exchange":
            self._owner_ack(conn, ep.Acknowledgment.from_json(body))

    def _owner_hello(self, src: str, session_id: str, body: dict) -> None:
        conn = _OwnerConn(session_id, src, new_challenge(self.rng))
        self._owner[session_id] = conn
        assertion = present_identity(
            self.identity.credential, self.identity.key, bytes.fromhex(body["challenge"]), session_id.encode()
        )
        self._send(src, session_id, IDENTITY, {"type": "assert", "assertion": assertion.to_json(), "challenge": conn.challenge.hex()})

    def _owner_request(self, conn: _OwnerConn, request: ep.UsageRequest) -> None:
        if request.is_fake:
            # a dummy the size of a real catalog entry keeps the cipher size plausible
            sizes = [len(v) for v in self.config.catalog.values()] or [32]
            datum = self.rng.randbytes(self.rng.choice(sizes))
        elif request.datum_type in self.config.catalog:
            datum = self.config.catalog[request.datum_type]
        else:
            del self._owner[conn.session_id]
            self._send(conn.peer, conn.session_id, PROTOCOL, {"type": "reject", "reason": "unknown-datum"})
            return
        conn.state = "keying"
        self._with_key(lambda key: self._owner_begin(conn, request, datum, key))

    def _owner_begin(
        self,
        conn: _OwnerConn,
        request: ep.UsageRequest,
        datum: bytes,
        key: tuple[CipherKeySeed, cc.SymmetricKey],
    ) -> None:
        if self._owner.get(conn.session_id) is not conn:
            return
        try:
            # read the clock only now: the timeout runs from the moment the cipher leaves
            conn.session, message = ep.owner_begin(
                datum,
                request,
                conn.consumer_credential,
                self.config.protocol,
                self.rng,
                owner_key=self.identity.key,
                owner_credential=self.identity.credential,
                now=self.env.now(),
                prepared_key=key,
            )
        except ep.ProtocolError as exc:
            del self._owner[conn.session_id]
            self._send(conn.peer, conn.session_id, PROTOCOL, {"type": "reject", "reason": str(exc)})
            return
        conn.state = "exchange"
        self._owner_send(conn, message)

    def _derive_key(self) -> tuple[CipherKeySeed, cc.SymmetricKey]:
        seed = cc.new_key_seed(self.config.protocol.work_factor, self.rng)
        return seed, cc.derive_cipher_key(seed)

    def _with_key(self, use: Callable[[tuple[CipherKeySeed, cc.SymmetricKey]], None]) -> None:
        """Hand a derived datum key to ``use``, from the pool or derived off the event loop."""
        if self._key_pool:
            use(self._key_pool.pop())
            self._refill_keys()
            return

        def done(pair: tuple[CipherKeySeed, cc.SymmetricKey]) -> None:
            use(pair)
            self._refill_keys()

        self.env.run_slow(0.0, self._derive_key, done)

    def _refill_keys(self) -> None:
        if self._refilling or self._key_pool:
            return
        self._refilling = True

        def done(pair: tuple[CipherKeySeed, cc.SymmetricKey]) -> None:
            self._refilling = False
            self._key_pool.append(pair)

        self.env.run_slow(0.0, self._derive_key, done)

    def _owner_send(self, conn: _OwnerConn, message: ep.ProtocolMessage) -> None:
        sent_at = conn.session.last_sent_at
        self._send(conn.peer, conn.session_id, PROTOCOL, message.to_json())
        self.env.call_later(self.config.protocol.timeout, lambda: self._owner_timeout(conn, sent_at))

    def _owner_timeout(self, conn: _OwnerConn, sent_at: float) -> None:
        session = conn.session
        if session.open and session.last_sent_at == sent_at and ep.owner_timed_out(session, self.env.now()):
            self._owner.pop(conn.session_id, None)
            if not session.fake:
                self.stats.aborted += 1

    def _owner_ack(self, conn: _OwnerConn, ack: ep.Acknowledgment) -> None:
        result = ep.owner_step(conn.session, ack, self.env.now(), self.rng)
        if isinstance(result, ep.NextMessage):
            self._owner_send(conn, result.message)
            return
        self._owner.pop(conn.session_id, None)
        if isinstance(result, ep.Abort):
            if not conn.session.fake:
                self.stats.aborted += 1
            return
        outcome = result.outcome
        if outcome.status is ep.Status.FAKE_CHATTER:
            return
        entry = NrsEntry(
            label=outcome.evidence.label,
            role="owner",
            own_pseudonym_record=outcome.own_record,
            counterparty_user_id=conn.consumer_credential.user_id,
            counterparty_pseudonym=conn.session.request.consumer_pseudonym,
            evidence=outcome.evidence,
        )
        self.nrs.put(entry)
        self.stats.completed_as_owner += 1
        self._log_usage(outcome.usage_payload)

    # ------------------------------------------------------------ ledger writes
    def _log_usage(self, payload: lg.UsagePayload) -> None:
        self._pending_payloads[payload.digest] = payload
        self._finished_at[payload.digest] = self.env.now()
        delay = self.rng.uniform(0, self.config.publication_delay) if self.config.publication_delay else 0.0
        if delay:
            self.env.call_later(delay, lambda: self._enqueue(payload))
        else:
            self._enqueue(payload)

    def _enqueue(self, payload: lg.UsagePayload) -> None:
        if payload not in self._append_queue:
            self._append_queue.append(payload)
        self._maybe_mine()

    def _maybe_mine(self) -> None:
        if self._mining or not self._append_queue:
            return
        # usage logs occupy block pairs; never start a pair on a half-received one
        if self.chain.height % 2:
            return
        payload = self._append_queue.popleft()
        if self.chain.contains_payload(payload.digest):
            self._maybe_mine()
            return
        self._mining = True
        tip = self.chain.tip.block_hash
        work = self.chain.copy()
        blocks, stats = lg.append_usage_log(work, payload, self.config.difficulty, self.rng)
        delay = sum(stats.mining_attempts) * self.config.mining_time_per_attempt
        self.env.call_later(delay, lambda: self._commit(payload, tip, blocks, stats))

    def _commit(self, payload: lg.UsagePayload, tip: bytes, blocks: tuple[lg.Block, lg.Block], stats: lg.AppendStats) -> None:
        self._mining = False
        if self.chain.tip.block_hash != tip:
            # someone else extended the chain while we were mining
            self.stats.mining_retries += 1
            self._append_queue.appendleft(payload)
            self._maybe_mine()
            return
        for block in blocks:
            self._seen_blocks.add(block.block_hash)
            self.store.add_block(block)
        self.stats.append_stats.append(stats)
        self.stats.append_timeline.append((self._finished_at.pop(payload.digest, self.env.now()), self.env.now()))
        self._chain_changed()
        for block in blocks:
            self.gossip_block(block)
        self._maybe_mine()

    def _chain_changed(self) -> None:
        if self._chain_path is not None:
            self._chain_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self._chain_path.with_suffix(".tmp")
            tmp.write_text(self.chain.to_jsonl())
            os.replace(tmp, self._chain_path)
        # re-append logs that a reorganization dropped from the canonical chain
        for digest, payload in self._pending_payloads.items():
            if not self.chain.contains_payload(digest) and payload not in self._append_queue:
                self._append_queue.append(payload)
        self._maybe_mine()

    # ------------------------------------------------------------ gossip
    def gossip_block(self, block: lg.Block, exclude: str | None = None) -> None:
        body = {"type": "block", "block": block.to_json()}
        for peer in self.neighbours:
            if peer != exclude:
                self._send(peer, "overlay", GOSSIP, body)

    def on_block(self, block: lg.Block, src: str | None = None) -> str:
        if block.block_hash in self._seen_blocks:
            return lg.AddResult.DUPLICATE
        self._seen_blocks.add(block.block_hash)
        before = self.chain.tip.block_hash
        result = self.store.add_block(block)
        forward = [block] if result in lg.AddResult.CONNECTED else []
        forward += self.store.drain_adopted()
        for item in forward:
            self.gossip_block(item, exclude=src)
        if self.chain.tip.block_hash != before:
            self._chain_changed()
        return result

    def _on_gossip(self, src: str, session_id: str, body: dict) -> None:
        kind_type = body.get("type")
        if kind_type == "block":
            self.on_block(lg.Block.from_json(body["block"]), src)
        elif kind_type == "find":
            self._on_find(src, body)
        elif kind_type == "here":
            waiting = self._finds.pop(body["id"], None)
            if waiting is not None:
                handle, started = waiting
                handle.resolve({"address": body["address"], "elapsed": self.env.now() - started})
        elif kind_type == "chain-request":
            blocks = [b.to_json() for b in self.chain]
            self._send(src, session_id, GOSSIP, {"type": "chain", "blocks": blocks})
        elif kind_type == "chain":
            for data in body["blocks"]:
                self.on_block(lg.Block.from_json(data), None)
            waiter = self._chain_waiters.pop(session_id, None)
            if waiter is not None:
                waiter.resolve(len(self.chain))

    def sync_chain(self, peer: str) -> Pending:
        """Fetch a peer's canonical chain and merge it into the local block tree."""
        session_id = self._new_session_id()
        handle = Pending()
        self._chain_waiters[session_id] = handle
        self._send(peer, session_id, GOSSIP, {"type": "chain-request"})
        return handle

    def find_peer(self, target: str, ttl: int = 16) -> Pending:
        """Flood a lookup through the overlay; resolves when ``target`` answers."""
        find_id = self._new_session_id()
        handle = Pending()
        if target == self.address or target in self.neighbours:
            handle.resolve({"address": target, "elapsed": 0.0})
            return handle
        self._finds[find_id] = (handle, self.env.now())
        self._seen_finds.add(find_id)
        body = {"type": "find", "id": find_id, "origin": self.address, "target": target, "ttl": ttl}
        for peer in self.neighbours:
            self._send(peer, "overlay", GOSSIP, body)
        return handle

    def _on_find(self, src: str, body: dict) -> None:
        if body["id"] in self._seen_finds:
            return
        self._seen_finds.add(body["id"])
        if body["target"] == self.address:
            self._send(body["origin"], body["id"], GOSSIP, {"type": "here", "id": body["id"], "address": self.address})
            return
        if body["ttl"] <= 1:
            return
        forward = dict(body, ttl=body["ttl"] - 1)
        for peer in self.neighbours:
            if peer != src:
                self._send(peer, "overlay", GOSSIP, forward)

    # ------------------------------------------------------------ queries
    def resolve_counterparties(self) -> None:
        """Fill in owner pseudonyms for consumer entries whose log is now on chain."""
        for entry in self.nrs.entries():
            if entry.role == "consumer" and entry.counterparty_pseudonym is None:
                hit = lg.query_single(self.chain, entry.own_pseudonym_record.pseudonym)
                if hit is not None:
                    entry.counterparty_pseudonym = hit[1].owner_pseudonym
                    self.nrs.put(entry)

    def my_usage_log(self) -> list[lg.UsageRecord]:
        """Decrypt this node's own copy of every usage log it took part in."""
        records = {e.own_pseudonym_record.pseudonym: e.own_pseudonym_record for e in self.nrs.entries()}
        out = []
        for _, payload in lg.query_all(self.chain, records):
            for pseudonym in (payload.consumer_pseudonym, payload.owner_pseudonym):
                if pseudonym in records:
                    out.append(lg.open_usage_payload(payload, records[pseudonym]))
        return out

    # ------------------------------------------------------------ erasure
    def erasure_challenge(self, label: bytes, requester: str = "") -> bytes | None:
        if label not in self.nrs:
            return None
        challenge = new_challenge(self.rng)
        self._erasure_challenges[(requester, label)] = challenge
        return challenge

    def handle_erasure(self, label: bytes, proof: OwnershipProof, requester: str = "") -> str:
        """Anonymize the entry for ``label`` if the requester owns the counterparty pseudonym."""
        entry = self.nrs.get(label)
        if entry is None:
            return "unknown-label"
        challenge = self._erasure_challenges.pop((requester, label), None)
        if challenge is None:
            return "rejected"
        self.resolve_counterparties()
        entry = self.nrs.get(label)
        if entry.counterparty_pseudonym is None or not verify_ownership(entry.counterparty_pseudonym, proof, challenge):
            return "rejected"
        self.nrs.erase(label)
        return "ok"

    def request_erasure(self, peer: str, label: bytes) -> Pending:
        """Ask ``peer`` to drop the identity link for one of our entries."""
        handle = Pending()
        if label not in self.nrs:
            handle.fail("unknown-label")
            return handle
        conn = _ErasureConn(self._new_session_id(), peer, label, handle)
        self._erasures[conn.session_id] = conn
        self._send(peer, conn.session_id, ERASURE, {"type": "challenge-request", "label": label.hex()})
        return handle

    def _on_erasure(self, src: str, session_id: str, body: dict) -> None:
        kind_type = body.get("type")
        if kind_type == "challenge-request":
            challenge = self.erasure_challenge(bytes.fromhex(body["label"]), src)
            if challenge is None:
                self._send(src, session_id, ERASURE, {"type": "result", "status": "unknown-label"})
            else:
                self._send(src, session_id, ERASURE, {"type": "challenge", "challenge": challenge.hex()})
        elif kind_type == "proof":
            status = self.handle_erasure(bytes.fromhex(body["label"]), OwnershipProof.from_json(body["proof"]), src)
            self._send(src, session_id, ERASURE, {"type": "result", "status": status})
        elif kind_type == "challenge" and session_id in self._erasures:
            conn = self._erasures[session_id]
            entry = self.nrs.get(conn.label)
            proof = prove_ownership(entry.own_pseudonym_record, bytes.fromhex(body["challenge"]))
            self._send(src, session_id, ERASURE, {"type": "proof", "label": conn.label.hex(), "proof": proof.to_json()})
        elif kind_type == "result" and session_id in self._erasures:
            conn = self._erasures.pop(session_id)
            if body["status"] == "ok":
                conn.handle.resolve("ok")
            else:
                conn.handle.fail(body["status"])

    # ------------------------------------------------------------ evidence
    def counterparty_ids(self) -> dict[bytes, UserId]:
        """Labels this node can still attribute to a counterparty."""
        return {e.label: UserId(e.counterparty_user_id) for e in self.nrs.entries() if e.counterparty_user_id}
