"""Account-based proof-of-work chain that stores usage logs as transactions.

Every logged usage costs two blocks: the first pays a block reward to a
throwaway account, the second carries a transaction from that account to a
fixed sink with the usage payload attached.  Only pseudonyms and sealed
records ever reach the chain, so queries compare plaintext pseudonyms and
never decrypt anything.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

from . import crypto_core as cc
from .crypto_core import RandomSource, SealedBox, digest32, frame
from .pseudonym import Pseudonym, PseudonymRecord

ADDRESS_BYTES = 32
SINK_ADDRESS = bytes(ADDRESS_BYTES)
ZERO_HASH = bytes(32)
BLOCK_REWARD = 100
DEFAULT_DIFFICULTY = 12
NONCE_LIMIT = 1 << 64


class LedgerError(Exception):
    pass


class InvalidTransaction(LedgerError):
    pass


class InvalidBlock(LedgerError):
    pass


class MiningInterrupted(LedgerError):
    """Mining was abandoned (tip moved or attempt budget spent); safe to retry."""


# --------------------------------------------------------------------------
# usage payloads

@dataclass(frozen=True)
class UsageRecord:
    datum_type: str
    justification: str
    label: bytes
    logical_timestamp: float

    def to_bytes(self) -> bytes:
        return json.dumps(
            {
                "datum_type": self.datum_type,
                "justification": self.justification,
                "label": self.label.hex(),
                "logical_timestamp": self.logical_timestamp,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "UsageRecord":
        obj = json.loads(data)
        return cls(obj["datum_type"], obj["justification"], bytes.fromhex(obj["label"]), obj["logical_timestamp"])


@dataclass(frozen=True)
class UsagePayload:
    consumer_pseudonym: Pseudonym
    owner_pseudonym: Pseudonym
    sealed_for_consumer: SealedBox
    sealed_for_owner: SealedBox

    def canonical(self) -> bytes:
        return frame(
            self.consumer_pseudonym.digest,
            self.owner_pseudonym.digest,
            self.sealed_for_consumer.to_bytes(),
            self.sealed_for_owner.to_bytes(),
        )

    @property
    def digest(self) -> bytes:
        return digest32(self.canonical())

    def to_json(self) -> dict:
        return {
            "consumer_pseudonym": self.consumer_pseudonym.hex,
            "owner_pseudonym": self.owner_pseudonym.hex,
            "sealed_for_consumer": self.sealed_for_consumer.to_bytes().hex(),
            "sealed_for_owner": self.sealed_for_owner.to_bytes().hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "UsagePayload":
        return cls(
            Pseudonym.from_hex(data["consumer_pseudonym"]),
            Pseudonym.from_hex(data["owner_pseudonym"]),
            SealedBox.from_bytes(bytes.fromhex(data["sealed_for_consumer"])),
            SealedBox.from_bytes(bytes.fromhex(data["sealed_for_owner"])),
        )


def compose_usage_payload(
    *,
    datum_type: str,
    justification: str,
    label: bytes,
    timestamp: float,
    consumer_pseudonym: Pseudonym,
    consumer_public_key: bytes,
    owner_record: PseudonymRecord,
    rng: RandomSource | None = None,
) -> tuple[UsagePayload, UsageRecord]:
    record = UsageRecord(datum_type, justification, label, timestamp)
    body = record.to_bytes()
    payload = UsagePayload(
        consumer_pseudonym,
        owner_record.pseudonym,
        cc.seal(body, consumer_public_key, rng),
        cc.seal(body, owner_record.keypair.public_key, rng),
    )
    return payload, record


def open_usage_payload(payload: UsagePayload, record: PseudonymRecord) -> UsageRecord:
    """Unseal whichever copy belongs to the holder of ``record``."""
    if record.pseudonym == payload.consumer_pseudonym:
        box = payload.sealed_for_consumer
    elif record.pseudonym == payload.owner_pseudonym:
        box = payload.sealed_for_owner
    else:
        raise LedgerError("pseudonym is not a party to this usage log")
    return UsageRecord.from_bytes(cc.unseal(box, record.keypair))


# --------------------------------------------------------------------------
# transactions and blocks

@dataclass(frozen=True)
class Transaction:
    sender: bytes | None  # None marks a coinbase
    recipient: bytes
    amount: int
    data: UsagePayload | None = None

    def __post_init__(self) -> None:
        if self.sender is not None and len(self.sender) != ADDRESS_BYTES:
            raise InvalidTransaction("sender address must be 32 bytes")
        if len(self.recipient) != ADDRESS_BYTES:
            raise InvalidTransaction("recipient address must be 32 bytes")
        if self.amount < 0:
            raise InvalidTransaction("negative amount")

    @property
    def is_coinbase(self) -> bool:
        return self.sender is None

    def canonical(self) -> bytes:
        return frame(
            b"\x00" if self.sender is None else b"\x01" + self.sender,
            self.recipient,
            self.amount.to_bytes(8, "big"),
            b"" if self.data is None else self.data.canonical(),
        )

    def to_json(self) -> dict:
        return {
            "from": None if self.sender is None else self.sender.hex(),
            "to": self.recipient.hex(),
            "amount": self.amount,
            "data": None if self.data is None else self.data.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Transaction":
        return cls(
            None if data["from"] is None else bytes.fromhex(data["from"]),
            bytes.fromhex(data["to"]),
            int(data["amount"]),
            None if data.get("data") is None else UsagePayload.from_json(data["data"]),
        )


def transactions_digest(transactions: Sequence[Transaction]) -> bytes:
    return digest32(frame(*(tx.canonical() for tx in transactions)))


def block_hash(index: int, prev_hash: bytes, difficulty: int, tx_digest: bytes, nonce: int) -> bytes:
    header = frame(index.to_bytes(8, "big"), prev_hash, difficulty.to_bytes(2, "big"))
    return digest32(header + tx_digest + nonce.to_bytes(8, "big"))


def leading_zero_bits(data: bytes) -> int:
    value = int.from_bytes(data, "big")
    return len(data) * 8 - value.bit_length()


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: bytes
    nonce: int
    difficulty: int
    transactions: tuple[Transaction, ...]
    block_hash: bytes

    def computed_hash(self) -> bytes:
        return block_hash(self.index, self.prev_hash, self.difficulty, transactions_digest(self.transactions), self.nonce)

    def well_formed(self) -> bool:
        """Hash and proof-of-work check, independent of any chain state."""
        return (
            0 <= self.nonce < NONCE_LIMIT
            and self.difficulty >= 0
            and self.computed_hash() == self.block_hash
            and leading_zero_bits(self.block_hash) >= self.difficulty
        )

    @property
    def payloads(self) -> Iterator[UsagePayload]:
        return (tx.data for tx in self.transactions if tx.data is not None)

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "prev_hash": self.prev_hash.hex(),
            "nonce": self.nonce,
            "difficulty": self.difficulty,
            "transactions": [tx.to_json() for tx in self.transactions],
            "hash": self.block_hash.hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Block":
        """Parse a block, rejecting any encoding other than the canonical one.

        Lenient parsing would let distinct byte strings (an unknown key, an
        upper-case hex digit) decode to the same committed block.
        """
        try:
            block = cls(
                int(data["index"]),
                bytes.fromhex(data["prev_hash"]),
                int(data["nonce"]),
                int(data["difficulty"]),
                tuple(Transaction.from_json(tx) for tx in data["transactions"]),
                bytes.fromhex(data["hash"]),
            )
        except (KeyError, TypeError, ValueError, AttributeError, OverflowError) as exc:
            raise InvalidBlock(f"malformed block: {exc}") from exc
        if block.to_json() != data:
            raise InvalidBlock("non-canonical block encoding")
        return block

    def to_line(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str | bytes) -> "Block":
        """Parse one persisted line; it must equal the canonical serialization byte for byte."""
        text = line.decode() if isinstance(line, bytes) else line
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise InvalidBlock(f"malformed block: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidBlock("malformed block")
        block = cls.from_json(data)
        if block.to_line() != text:
            raise InvalidBlock("non-canonical block encoding")
        return block


def _genesis() -> Block:
    txs: tuple[Transaction, ...] = ()
    return Block(0, ZERO_HASH, 0, 0, txs, block_hash(0, ZERO_HASH, 0, transactions_digest(txs), 0))


GENESIS = _genesis()


# --------------------------------------------------------------------------
# chain

def _apply(balances: dict[bytes, int], block: Block) -> None:
    """Apply ``block`` to ``balances`` in place, raising on any rule violation."""
    txs = block.transactions
    if block.index > 0:
        if not txs or not txs[0].is_coinbase:
            raise InvalidBlock("block must start with a coinbase transaction")
        if txs[0].amount != BLOCK_REWARD:
            raise InvalidBlock("coinbase must pay exactly the block reward")
    for position, tx in enumerate(txs):
        if tx.is_coinbase:
            if position != 0:
                raise InvalidBlock("coinbase only allowed as first transaction")
        else:
            available = balances.get(tx.sender, 0)
            if tx.amount > available:
                raise InvalidTransaction("amount exceeds sender balance")
            remaining = available - tx.amount
            if remaining:
                balances[tx.sender] = remaining
            else:
                # an emptied account ceases to exist
                balances.pop(tx.sender, None)
        balances[tx.recipient] = balances.get(tx.recipient, 0) + tx.amount


class Chain:
    """Append-only list of blocks from the fixed genesis, validated on append."""

    def __init__(self, blocks: Iterable[Block] = (), *, min_difficulty: int = 0) -> None:
        # blocks declaring less work than this are rejected
        self.min_difficulty = min_difficulty
        self._blocks: list[Block] = [GENESIS]
        self._balances: dict[bytes, int] = {}
        self._addresses: set[bytes] = set()
        self._payload_digests: set[bytes] = set()
        blocks = list(blocks)
        if blocks and blocks[0] == GENESIS:
            blocks = blocks[1:]
        for block in blocks:
            self.append(block)

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(self._blocks)

    def __getitem__(self, index: int) -> Block:
        return self._blocks[index]

    @property
    def blocks(self) -> tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def tip(self) -> Block:
        return self._blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.index

    def balance(self, address: bytes) -> int:
        return self._balances.get(address, 0)

    def balances(self) -> dict[bytes, int]:
        return dict(self._balances)

    def address_seen(self, address: bytes) -> bool:
        return address in self._addresses

    def contains_payload(self, payload_digest: bytes) -> bool:
        return payload_digest in self._payload_digests

    def check_transactions(self, transactions: Sequence[Transaction]) -> None:
        """Raise InvalidTransaction unless ``transactions`` apply to the current balances."""
        scratch = dict(self._balances)
        for tx in transactions:
            if tx.is_coinbase:
                raise InvalidTransaction("coinbase transactions are added by the miner")
            if tx.amount > scratch.get(tx.sender, 0):
                raise InvalidTransaction("amount exceeds sender balance")
            scratch[tx.sender] -= tx.amount
            scratch[tx.recipient] = scratch.get(tx.recipient, 0) + tx.amount

    def append(self, block: Block) -> None:
        tip = self.tip
        if block.index != tip.index + 1 or block.prev_hash != tip.block_hash:
            raise InvalidBlock("block does not extend the tip")
        if not block.well_formed() or block.difficulty < self.min_difficulty:
            raise InvalidBlock("bad hash or insufficient proof of work")
        for payload in block.payloads:
            if payload.digest in self._payload_digests:
                raise InvalidBlock("usage log already recorded")
        balances = dict(self._balances)
        _apply(balances, block)
        self._balances = balances
        self._blocks.append(block)
        for tx in block.transactions:
            if tx.sender is not None:
                self._addresses.add(tx.sender)
            self._addresses.add(tx.recipient)
            if tx.data is not None:
                self._payload_digests.add(tx.data.digest)

    def copy(self) -> "Chain":
        clone = Chain.__new__(Chain)
        clone.min_difficulty = self.min_difficulty
        clone._blocks = list(self._blocks)
        clone._balances = dict(self._balances)
        clone._addresses = set(self._addresses)
        clone._payload_digests = set(self._payload_digests)
        return clone

    # persistence: one block per line
    def to_jsonl(self) -> str:
        return "".join(block.to_line() + "\n" for block in self._blocks)

    def serialized_size(self) -> int:
        return len(self.to_jsonl().encode())

    @classmethod
    def from_jsonl(cls, text: str | bytes, *, min_difficulty: int = 0) -> "Chain":
        return cls(parse_jsonl(text), min_difficulty=min_difficulty)


def parse_jsonl(text: str | bytes) -> list[Block]:
    """Strictly parse persisted chain text: canonical lines, each ending in a newline."""
    data = text.encode() if isinstance(text, str) else text
    if not data.endswith(b"\n"):
        raise InvalidBlock("chain text must end with a newline")
    try:
        return [Block.from_line(line) for line in data[:-1].split(b"\n")]
    except UnicodeDecodeError as exc:
        raise InvalidBlock("chain text is not UTF-8") from exc


def validate_chain(chain: Chain | Sequence[Block] | str | bytes, min_difficulty: int = 0) -> bool:
    """Replay every block from genesis, checking links, proof of work and balances.

    Serialized chain text is accepted too; any deviation from the canonical
    encoding makes it invalid.
    """
    if isinstance(chain, (str, bytes)):
        try:
            blocks = parse_jsonl(chain)
        except LedgerError:
            return False
    else:
        blocks = list(chain)
    if not blocks or blocks[0] != GENESIS or GENESIS.computed_hash() != GENESIS.block_hash:
        return False
    balances: dict[bytes, int] = {}
    logged: set[bytes] = set()
    for prev, block in zip(blocks, blocks[1:]):
        if block.index != prev.index + 1 or block.prev_hash != prev.block_hash:
            return False
        if not block.well_formed() or block.difficulty < min_difficulty:
            return False
        for payload in block.payloads:
            if payload.digest in logged:
                return False
            logged.add(payload.digest)
        try:
            _apply(balances, block)
        except LedgerError:
            return False
    return True


# --------------------------------------------------------------------------
# mining

@dataclass(frozen=True)
class MinedBlock:
    block: Block
    attempts: int


def mine(
    chain: Chain,
    transactions: Sequence[Transaction],
    reward_to: bytes,
    difficulty: int,
    rng: RandomSource,
    *,
    max_attempts: int | None = None,
    interrupt: Callable[[], bool] | None = None,
) -> MinedBlock:
    chain.check_transactions(transactions)
    txs = (Transaction(None, reward_to, BLOCK_REWARD),) + tuple(transactions)
    tip = chain.tip
    index = tip.index + 1
    tx_digest = transactions_digest(txs)
    nonce = rng.getrandbits(64)
    attempts = 0
    while True:
        attempts += 1
        digest = block_hash(index, tip.block_hash, difficulty, tx_digest, nonce)
        if leading_zero_bits(digest) >= difficulty:
            return MinedBlock(Block(index, tip.block_hash, nonce, difficulty, txs, digest), attempts)
        nonce = (nonce + 1) % NONCE_LIMIT
        if max_attempts is not None and attempts >= max_attempts:
            raise MiningInterrupted(f"no block after {attempts} attempts")
        if interrupt is not None and attempts % 1024 == 0 and interrupt():
            raise MiningInterrupted("mining interrupted")


def mine_block(
    chain: Chain,
    transactions: Sequence[Transaction],
    reward_to: bytes,
    difficulty: int,
    rng: RandomSource,
) -> Block:
    """Mine a block on the tip of ``chain`` (not appended)."""
    return mine(chain, transactions, reward_to, difficulty, rng).block


@dataclass
class AppendStats:
    mining_attempts: list[int] = field(default_factory=list)
    mining_seconds: float = 0.0
    account_ops: int = 0
    account_seconds: float = 0.0
    tx_creations: int = 0
    tx_seconds: float = 0.0

    @property
    def total_seconds(self) -> float:
        return self.mining_seconds + self.account_seconds + self.tx_seconds


def new_temporary_address(chain: Chain, rng: RandomSource) -> bytes:
    while True:
        address = rng.randbytes(ADDRESS_BYTES)
        if address != SINK_ADDRESS and not chain.address_seen(address):
            return address


def append_usage_log(
    chain: Chain,
    payload: UsagePayload,
    difficulty: int,
    rng: RandomSource,
    *,
    interrupt: Callable[[], bool] | None = None,
) -> tuple[tuple[Block, Block], AppendStats]:
    """Log one usage with the two-block procedure and append both blocks.

    On interruption nothing is appended, so the call can simply be retried.
    """
    if chain.contains_payload(payload.digest):
        raise InvalidTransaction("usage log already recorded")
    stats = AppendStats()
    work = chain.copy()

    t0 = time.perf_counter()
    temp = new_temporary_address(work, rng)
    stats.account_ops += 1
    stats.account_seconds += time.perf_counter() - t0

    t0 = time.perf_counter()
    first = mine(work, (), temp, difficulty, rng, interrupt=interrupt)
    work.append(first.block)
    stats.mining_attempts.append(first.attempts)
    stats.mining_seconds += time.perf_counter() - t0

    t0 = time.perf_counter()
    spend = Transaction(temp, SINK_ADDRESS, work.balance(temp), payload)
    stats.tx_creations += 1
    stats.tx_seconds += time.perf_counter() - t0

    t0 = time.perf_counter()
    second = mine(work, (spend,), SINK_ADDRESS, difficulty, rng, interrupt=interrupt)
    work.append(second.block)
    stats.mining_attempts.append(second.attempts)
    stats.mining_seconds += time.perf_counter() - t0

    # the temporary account is gone once its balance reaches zero
    t0 = time.perf_counter()
    assert work.balance(temp) == 0
    stats.account_ops += 1
    stats.account_seconds += time.perf_counter() - t0

    chain.append(first.block)
    chain.append(second.block)
    return (first.block, second.block), stats


# --------------------------------------------------------------------------
# queries

def query_single(chain: Chain | Sequence[Block], pseudonym: Pseudonym) -> tuple[int, UsagePayload] | None:
    for block in chain:
        for payload in block.payloads:
            if payload.consumer_pseudonym == pseudonym or payload.owner_pseudonym == pseudonym:
                return block.index, payload
    return None


def query_all(chain: Chain | Sequence[Block], pseudonyms: Iterable[Pseudonym]) -> list[tuple[int, UsagePayload]]:
    """Every log naming one of ``pseudonyms``, once per matching role, in chain order."""
    wanted = set(pseudonyms)
    hits: list[tuple[int, UsagePayload]] = []
    for block in chain:
        for payload in block.payloads:
            if payload.consumer_pseudonym in wanted:
                hits.append((block.index, payload))
            if payload.owner_pseudonym in wanted:
                hits.append((block.index, payload))
    return hits


# --------------------------------------------------------------------------
# fork handling

class AddResult:
    EXTENDED = "extended"
    REORG = "reorg"
    SIDE = "side"
    ORPHAN = "orphan"
    DUPLICATE = "duplicate"
    INVALID = "invalid"

    CONNECTED = frozenset({EXTENDED, REORG, SIDE})


class ChainStore:
    """Block tree with longest-chain selection; ties go to the lower tip hash."""

    def __init__(self, chain: Chain | None = None, *, min_difficulty: int | None = None) -> None:
        self.canonical = chain.copy() if chain is not None else Chain(min_difficulty=min_difficulty or 0)
        if min_difficulty is not None:
            self.canonical.min_difficulty = min_difficulty
        self.min_difficulty = self.canonical.min_difficulty
        self._blocks: dict[bytes, Block] = {b.block_hash: b for b in self.canonical}
        self._orphans: dict[bytes, list[Block]] = {}
        self._invalid: set[bytes] = set()
        # orphans connected by later arrivals, for the caller to forward
        self.adopted: list[Block] = []

    def __contains__(self, block_hash: bytes) -> bool:
        return block_hash in self._blocks

    @property
    def tip(self) -> Block:
        return self.canonical.tip

    def drain_adopted(self) -> list[Block]:
        adopted, self.adopted = self.adopted, []
        return adopted

    def _path_to(self, block: Block) -> list[Block]:
        path = [block]
        while path[-1].index > 0:
            path.append(self._blocks[path[-1].prev_hash])
        path.reverse()
        return path

    def _better(self, candidate: Block) -> bool:
        tip = self.canonical.tip
        return candidate.index > tip.index or (candidate.index == tip.index and candidate.block_hash < tip.block_hash)

    def add_block(self, block: Block) -> str:
        """Insert ``block``; the result describes this block, not adopted orphans."""
        results = [self._add_one(block)]
        if results[0] in AddResult.CONNECTED:
            # adopt any orphans that were waiting for this block
            pending = [block.block_hash]
            while pending:
                for child in self._orphans.pop(pending.pop(), []):
                    outcome = self._add_one(child)
                    results.append(outcome)
                    if outcome in AddResult.CONNECTED:
                        self.adopted.append(child)
                        pending.append(child.block_hash)
        return results[0]

    def _add_one(self, block: Block) -> str:
        if block.block_hash in self._blocks:
            return AddResult.DUPLICATE
        if (
            block.block_hash in self._invalid
            or block.index < 1
            or not block.well_formed()
            or block.difficulty < self.min_difficulty
        ):
            return AddResult.INVALID
        parent = self._blocks.get(block.prev_hash)
        if parent is None:
            self._orphans.setdefault(block.prev_hash, []).append(block)
            return AddResult.ORPHAN
        if parent.index + 1 != block.index:
            self._invalid.add(block.block_hash)
            return AddResult.INVALID
        if block.prev_hash == self.canonical.tip.block_hash:
            try:
                self.canonical.append(block)
            except LedgerError:
                self._invalid.add(block.block_hash)
                return AddResult.INVALID
            self._blocks[block.block_hash] = block
            return AddResult.EXTENDED
        self._blocks[block.block_hash] = block
        if not self._better(block):
            return AddResult.SIDE
        try:
            candidate = Chain(self._path_to(block), min_difficulty=self.min_difficulty)
        except LedgerError:
            del self._blocks[block.block_hash]
            self._invalid.add(block.block_hash)
            return AddResult.INVALID
        self.canonical = candidate
        return AddResult.REORG
