from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usagelog import ledger as lg
from usagelog.pseudonym import new_pseudonym

DIFFICULTY = 6


@pytest.fixture(scope="module")
def parties():
    rng = random.Random(41)
    return [new_pseudonym(2048, rng) for _ in range(6)]


def make_payload(consumer, owner, rng, label=None):
    payload, _ = lg.compose_usage_payload(
        datum_type="email", justification="test", label=label or rng.randbytes(32), timestamp=1.0,
        consumer_pseudonym=consumer.pseudonym, consumer_public_key=consumer.keypair.public_key,
        owner_record=owner, rng=rng,
    )
    return payload


@pytest.fixture(scope="module")
def chain(parties) -> lg.Chain:
    rng = random.Random(42)
    chain = lg.Chain(min_difficulty=DIFFICULTY)
    for consumer, owner in ((parties[0], parties[1]), (parties[2], parties[3]), (parties[0], parties[4])):
        lg.append_usage_log(chain, make_payload(consumer, owner, rng), DIFFICULTY, rng)
    return chain


def test_genesis_is_fixed():
    assert lg.GENESIS.index == 0 and lg.GENESIS.prev_hash == lg.ZERO_HASH
    assert lg.GENESIS.computed_hash() == lg.GENESIS.block_hash
    assert lg.Chain().tip == lg.GENESIS


@given(st.binary(min_size=1, max_size=40))
def test_leading_zero_bits(data):
    value = int.from_bytes(data, "big")
    expected = next((i for i in range(len(data) * 8) if value >> (len(data) * 8 - 1 - i) & 1), len(data) * 8)
    assert lg.leading_zero_bits(data) == expected


def test_two_blocks_per_usage(chain):
    assert len(chain) == 1 + 2 * 3
    assert lg.validate_chain(chain, DIFFICULTY)
    for first, second in zip(chain.blocks[1::2], chain.blocks[2::2]):
        assert list(first.payloads) == [] and len(list(second.payloads)) == 1
        spend = second.transactions[1]
        # the throwaway account is funded by the first block and emptied by the second
        assert first.transactions[0].recipient == spend.sender
        assert spend.recipient == lg.SINK_ADDRESS and spend.amount == lg.BLOCK_REWARD


def test_temporary_accounts_are_discarded(chain):
    # only the sink holds value: every temporary account was emptied and deleted
    assert chain.balances() == {lg.SINK_ADDRESS: lg.BLOCK_REWARD * (len(chain) - 1)}


def test_duplicate_payload_rejected(chain, parties):
    payload = next(chain[2].payloads)
    with pytest.raises(lg.InvalidTransaction):
        lg.append_usage_log(chain.copy(), payload, DIFFICULTY, random.Random(0))


def test_jsonl_round_trip(chain):
    restored = lg.Chain.from_jsonl(chain.to_jsonl(), min_difficulty=DIFFICULTY)
    assert restored.blocks == chain.blocks
    assert chain.serialized_size() == len(chain.to_jsonl().encode())


def test_block_json_round_trip(chain):
    for block in chain:
        assert lg.Block.from_json(json.loads(block.to_line())) == block


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_any_byte_mutation_is_detected(chain, data):
    index = data.draw(st.integers(min_value=1, max_value=len(chain) - 1))
    line = bytearray(chain[index].to_line().encode())
    pos = data.draw(st.integers(min_value=0, max_value=len(line) - 1))
    line[pos] = data.draw(st.integers(min_value=0, max_value=255).filter(lambda b: b != line[pos]))
    blocks = list(chain.blocks)
    try:
        blocks[index] = lg.Block.from_line(bytes(line))
    except (lg.LedgerError, UnicodeDecodeError):
        return  # rejected at parse time
    assert not lg.validate_chain(blocks, DIFFICULTY)


def test_lenient_encodings_are_rejected(chain):
    line = chain[2].to_line()
    variants = [
        line.replace('"data"', '" ata"', 1),  # unknown key, optional field falls back
        line.replace(chain[2].block_hash.hex(), chain[2].block_hash.hex().upper()),
        line.replace(",", ", ", 1),
        line + " ",
    ]
    for variant in variants:
        assert variant != line
        with pytest.raises(lg.InvalidBlock):
            lg.Block.from_line(variant)
    text = chain.to_jsonl()
    assert lg.validate_chain(text, DIFFICULTY)
    assert not lg.validate_chain(text.rstrip("\n"), DIFFICULTY)
    assert not lg.validate_chain(text + "\n", DIFFICULTY)
    assert not lg.validate_chain(text.replace(line, variants[0]), DIFFICULTY)


def test_overflowing_numbers_are_malformed(chain):
    # one mutated digit can turn an integer into a float literal that json parses as infinity
    line = chain[2].to_line()
    mutated = line.replace(f'"nonce":{chain[2].nonce}', '"nonce":1e999', 1)
    assert mutated != line
    with pytest.raises(lg.InvalidBlock):
        lg.Block.from_line(mutated)
    assert not lg.validate_chain(chain.to_jsonl().replace(line, mutated), DIFFICULTY)


def test_chain_rejects_broken_links(chain):
    blocks = list(chain.blocks)
    assert not lg.validate_chain(blocks[:1] + blocks[2:])
    assert not lg.validate_chain(blocks[1:])
    with pytest.raises(lg.InvalidBlock):
        lg.Chain(blocks[:2] + blocks[3:])


def test_low_difficulty_blocks_rejected(parties):
    rng = random.Random(3)
    cheap = lg.Chain()
    lg.append_usage_log(cheap, make_payload(parties[0], parties[1], rng), 1, rng)
    assert lg.validate_chain(cheap)
    assert not lg.validate_chain(cheap, DIFFICULTY)
    with pytest.raises(lg.InvalidBlock):
        lg.Chain(cheap.blocks, min_difficulty=DIFFICULTY)


def test_overspend_rejected():
    rng = random.Random(4)
    chain = lg.Chain()
    temp = lg.new_temporary_address(chain, rng)
    chain.append(lg.mine_block(chain, (), temp, 2, rng))
    with pytest.raises(lg.InvalidTransaction):
        lg.mine_block(chain, (lg.Transaction(temp, lg.SINK_ADDRESS, lg.BLOCK_REWARD + 1),), lg.SINK_ADDRESS, 2, rng)
    with pytest.raises(lg.InvalidTransaction):
        lg.Transaction(temp, lg.SINK_ADDRESS, -1)


def test_mining_budget_and_interrupt():
    rng = random.Random(5)
    with pytest.raises(lg.MiningInterrupted):
        lg.mine(lg.Chain(), (), bytes(32), 40, rng, max_attempts=100)
    with pytest.raises(lg.MiningInterrupted):
        lg.mine(lg.Chain(), (), bytes(32), 40, rng, interrupt=lambda: True)


def test_interrupted_append_leaves_chain_untouched(parties):
    rng = random.Random(6)
    chain = lg.Chain()
    with pytest.raises(lg.MiningInterrupted):
        lg.append_usage_log(chain, make_payload(parties[0], parties[1], rng), 40, rng, interrupt=lambda: True)
    assert len(chain) == 1


def test_mined_blocks_meet_difficulty(chain):
    for block in chain.blocks[1:]:
        assert lg.leading_zero_bits(block.block_hash) >= DIFFICULTY


# --------------------------------------------------------------------------
# payloads and queries

def test_payload_opens_for_both_parties_only(chain, parties):
    payload = next(chain[2].payloads)
    consumer, owner = parties[0], parties[1]
    assert lg.open_usage_payload(payload, consumer) == lg.open_usage_payload(payload, owner)
    with pytest.raises(lg.LedgerError):
        lg.open_usage_payload(payload, parties[5])


@given(
    datum_type=st.text(min_size=1, max_size=20),
    justification=st.text(max_size=40),
    label=st.binary(min_size=32, max_size=32),
    ts=st.floats(allow_nan=False, allow_infinity=False),
)
def test_usage_record_round_trip(datum_type, justification, label, ts):
    record = lg.UsageRecord(datum_type, justification, label, ts)
    assert lg.UsageRecord.from_bytes(record.to_bytes()) == record


def test_payload_json_round_trip(chain):
    payload = next(chain[4].payloads)
    assert lg.UsagePayload.from_json(payload.to_json()) == payload


def test_queries_match_plaintext_pseudonyms(chain, parties):
    from usagelog import crypto_core as cc

    cc.COUNTERS.reset()
    assert lg.query_single(chain, parties[2].pseudonym)[0] == 4
    assert lg.query_single(chain, parties[5].pseudonym) is None
    hits = lg.query_all(chain, [parties[0].pseudonym, parties[1].pseudonym])
    assert [index for index, _ in hits] == [2, 2, 6]
    assert cc.COUNTERS.decryptions == 0


# --------------------------------------------------------------------------
# forks

def _fork(base: lg.Chain, length: int, seed: int, difficulty: int = DIFFICULTY) -> list[lg.Block]:
    rng = random.Random(seed)
    work = base.copy()
    out = []
    for _ in range(length):
        block = lg.mine_block(work, (), lg.new_temporary_address(work, rng), difficulty, rng)
        work.append(block)
        out.append(block)
    return out


def test_chain_store_longest_chain_wins(chain):
    store = lg.ChainStore(lg.Chain(chain.blocks[:3], min_difficulty=DIFFICULTY), min_difficulty=DIFFICULTY)
    short = _fork(store.canonical, 1, seed=1)
    long = _fork(store.canonical, 2, seed=2)
    assert store.add_block(short[0]) == lg.AddResult.EXTENDED
    assert store.add_block(long[0]) in (lg.AddResult.SIDE, lg.AddResult.REORG)
    assert store.add_block(long[1]) == lg.AddResult.REORG
    assert store.tip == long[1]
    assert store.add_block(long[1]) == lg.AddResult.DUPLICATE


def test_chain_store_tie_breaks_on_lower_hash():
    base = lg.Chain()
    a, b = _fork(base, 1, seed=10)[0], _fork(base, 1, seed=11)[0]
    for order in ((a, b), (b, a)):
        store = lg.ChainStore()
        for block in order:
            store.add_block(block)
        assert store.tip.block_hash == min(a.block_hash, b.block_hash)


def test_chain_store_adopts_orphans():
    blocks = _fork(lg.Chain(), 3, seed=12)
    store = lg.ChainStore()
    assert store.add_block(blocks[2]) == lg.AddResult.ORPHAN
    assert store.add_block(blocks[1]) == lg.AddResult.ORPHAN
    assert store.add_block(blocks[0]) == lg.AddResult.EXTENDED
    assert store.tip == blocks[2]
    assert store.drain_adopted() == [blocks[1], blocks[2]]
    assert store.drain_adopted() == []


def test_chain_store_rejects_invalid_and_weak_blocks():
    store = lg.ChainStore(min_difficulty=DIFFICULTY)
    weak = _fork(lg.Chain(), 1, seed=13, difficulty=1)[0]
    # declares less work than the store requires, whatever its hash happens to be
    assert store.add_block(weak) == lg.AddResult.INVALID
    good = _fork(lg.Chain(), 1, seed=14)[0]
    forged = lg.Block(good.index, good.prev_hash, good.nonce + 1, good.difficulty, good.transactions, good.block_hash)
    assert store.add_block(forged) == lg.AddResult.INVALID
    assert store.add_block(good) == lg.AddResult.EXTENDED
