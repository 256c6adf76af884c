from __future__ import annotations

import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from usagelog import crypto_core as cc
from usagelog import ledger as lg
from usagelog.identity_vc import issue_credential
from usagelog.netsim_harness import SimConfig, SimNetwork, build_world
from usagelog.node_runtime import (
    PAD_BUCKET,
    ChatterConfig,
    Identity,
    Node,
    NodeConfig,
    NrsStore,
    decode_envelope,
    encode_envelope,
)
from usagelog.pseudonym import new_challenge, prove_ownership


def run(world, handle):
    world.net.run()
    assert handle.done
    return handle


@pytest.fixture(scope="module")
def exchanged():
    """Three nodes after one completed exchange n001 -> n000, run to quiescence."""
    world = build_world(3, SimConfig(), seed=3)
    consumer, owner = world.nodes[1], world.nodes[0]
    handle = run(world, consumer.request_datum(owner.address, "email", "invoice"))
    return world, consumer, owner, handle


# --------------------------------------------------------------------------
# envelopes and configuration

@given(
    session_id=st.text(max_size=40),
    kind=st.sampled_from(["identity", "protocol", "gossip", "erasure"]),
    body=st.dictionaries(st.text(max_size=10), st.integers() | st.text(max_size=50), max_size=5),
)
def test_envelope_round_trip_and_padding(session_id, kind, body):
    data = encode_envelope(session_id, kind, body)
    assert len(data) % PAD_BUCKET == 0
    assert decode_envelope(data) == (session_id, kind, body)


def test_envelope_rejects_unknown_kind():
    with pytest.raises(ValueError):
        encode_envelope("s", "chatter", {})
    with pytest.raises(ValueError):
        decode_envelope(b'{"session_id":"s","kind":"other","body":{}}')


@pytest.mark.parametrize("low, high", [(11, 12), (12, 322), (20, 13)])
def test_chatter_bounds(low, high):
    with pytest.raises(ValueError):
        ChatterConfig(True, low, high)
    ChatterConfig(False, low, high)


# --------------------------------------------------------------------------
# exchanges

def test_exchange_completes_and_is_logged(exchanged):
    world, consumer, owner, handle = exchanged
    datum, entry = handle.value
    assert datum == b"someone@example.org"
    assert entry.role == "consumer" and entry.counterparty_user_id == owner.user_id
    owner_entry = owner.nrs.get(entry.label)
    assert owner_entry.role == "owner" and owner_entry.counterparty_user_id == consumer.user_id
    for node in world.nodes:
        assert len(node.chain) == 3 and lg.validate_chain(node.chain, world.config.difficulty)
    assert world.chains_converged()


def test_both_parties_see_the_record(exchanged):
    _, consumer, owner, handle = exchanged
    mine, theirs = consumer.my_usage_log(), owner.my_usage_log()
    assert mine == theirs and len(mine) == 1
    assert mine[0].label == handle.value[1].label and mine[0].justification == "invoice"


def test_consumer_learns_owner_pseudonym_from_chain(exchanged):
    _, consumer, owner, handle = exchanged
    label = handle.value[1].label
    consumer.resolve_counterparties()
    assert consumer.nrs.get(label).counterparty_pseudonym == owner.nrs.get(label).own_pseudonym_record.pseudonym
    assert consumer.counterparty_ids() == {label: owner.user_id}


def test_unknown_datum_is_refused():
    world = build_world(2, SimConfig(), seed=4)
    handle = run(world, world.nodes[0].request_datum("n001", "shoe-size"))
    assert handle.error == "unknown-datum"
    assert len(world.nodes[0].chain) == 1


def test_sentinel_type_is_reserved():
    world = build_world(2, SimConfig(), seed=4)
    with pytest.raises(ValueError):
        world.nodes[0].request_datum("n001", "d0")


def test_unreachable_peer():
    world = build_world(2, SimConfig(), seed=5)
    assert run(world, world.nodes[0].request_datum("nowhere", "email")).error == "peer-unreachable"


def test_rogue_identity_is_rejected():
    world = build_world(2, SimConfig(), seed=6)
    node = world.nodes[1]
    rogue_idp = cc.generate_keypair(2048, random.Random(0))
    node.identity = Identity(node.user_id, node.identity.key,
                             issue_credential(rogue_idp, node.user_id, node.identity.key.public_key),
                             node.identity.idp_public_key)
    assert run(world, node.request_datum("n000", "email")).error == "identity-rejected"
    assert run(world, world.nodes[0].request_datum("n001", "email")).error == "identity-rejected"


def test_fake_exchange_leaves_no_trace():
    world = build_world(2, SimConfig(), seed=7)
    handle = run(world, world.nodes[0].fake_exchange("n001"))
    assert handle.ok and handle.value is None
    assert all(len(n.chain) == 1 and len(n.nrs) == 0 for n in world.nodes)


def test_chatter_sends_fakes_to_other_peers():
    config = SimConfig(fake_chatter=ChatterConfig(True, 12, 12))
    world = build_world(15, config, seed=8)
    consumer = world.nodes[0]
    handle = run(world, consumer.request_datum("n001", "email"))
    assert handle.ok
    assert consumer.stats.fake_sessions == 12
    fake_peers = {r.dst for r in world.net.tap if not r.overlay and r.src == consumer.address} - {"n001"}
    assert len(fake_peers) == 12
    assert len(consumer.chain) == 3


def test_find_peer_floods_the_overlay():
    world = build_world(12, SimConfig(degree=2), seed=9)
    origin = world.nodes[0]
    target = next(n for n in world.nodes[1:] if n.address not in origin.neighbours)
    handle = run(world, origin.find_peer(target.address))
    assert handle.value["address"] == target.address and handle.value["elapsed"] > 0


def test_late_joiner_syncs_chain():
    world = build_world(3, SimConfig(), seed=12)
    first, second, isolated = world.nodes
    # cut the third node out of the overlay so it misses the gossip
    for node in world.nodes:
        node.neighbours = [a for a in node.neighbours if a != isolated.address]
    isolated.neighbours = []
    assert run(world, first.request_datum(second.address, "email")).ok
    assert len(isolated.chain) == 1
    handle = run(world, isolated.sync_chain(first.address))
    assert handle.value == 3 and isolated.chain.blocks == first.chain.blocks


def test_weak_blocks_are_not_adopted(exchanged):
    world, consumer, _, _ = exchanged
    rng = random.Random(1)
    weak = lg.mine_block(consumer.chain, (), lg.new_temporary_address(consumer.chain, rng), 0, rng)
    assert consumer.on_block(weak) == lg.AddResult.INVALID
    assert len(consumer.chain) == 3


# --------------------------------------------------------------------------
# private store and erasure

def test_nrs_store_persists_and_reloads(tmp_path, exchanged):
    _, consumer, _, handle = exchanged
    entry = handle.value[1]
    store = NrsStore(tmp_path / "nrs.jsonl")
    store.put(entry)
    again = NrsStore(tmp_path / "nrs.jsonl")
    assert again.get(entry.label).to_json() == entry.to_json()
    # the store holds private pseudonym keys
    assert (tmp_path / "nrs.jsonl").stat().st_mode & 0o777 == 0o600


def test_nrs_erase_compacts_file(tmp_path, exchanged):
    _, _, owner, handle = exchanged
    entry = owner.nrs.get(handle.value[1].label)
    store = NrsStore(tmp_path / "nrs.jsonl")
    store.put(entry)
    erased = store.erase(entry.label)
    assert erased.erased and erased.counterparty_user_id is None and erased.evidence is None
    text = (tmp_path / "nrs.jsonl").read_text()
    assert entry.counterparty_user_id not in text
    assert {"op": "erased", "label": entry.label.hex()} in [json.loads(line) for line in text.splitlines()]
    assert NrsStore(tmp_path / "nrs.jsonl").get(entry.label).erased
    assert (tmp_path / "nrs.jsonl").stat().st_mode & 0o777 == 0o600
    assert not list(tmp_path.glob("*.tmp"))


def test_erasure_needs_a_fresh_challenge_and_a_valid_proof(exchanged):
    _, consumer, owner, handle = exchanged
    label = handle.value[1].label
    consumer_record = consumer.nrs.get(label).own_pseudonym_record
    stray = new_challenge(random.Random(0))
    assert owner.handle_erasure(label, prove_ownership(consumer_record, stray)) == "rejected"
    assert owner.handle_erasure(b"\x01" * 32, prove_ownership(consumer_record, stray)) == "unknown-label"
    challenge = owner.erasure_challenge(label, "someone")
    impostor = owner.nrs.get(label).own_pseudonym_record
    assert owner.handle_erasure(label, prove_ownership(impostor, challenge), "someone") == "rejected"
    # the challenge is single use
    assert owner.handle_erasure(label, prove_ownership(consumer_record, challenge), "someone") == "rejected"
    assert not owner.nrs.get(label).erased


def test_erasure_over_the_network(tmp_path):
    world = build_world(2, SimConfig(), seed=10)
    consumer, owner = world.nodes
    label = run(world, consumer.request_datum(owner.address, "phone")).value[1].label
    assert run(world, consumer.request_erasure(owner.address, label)).value == "ok"
    erased = owner.nrs.get(label)
    assert erased.erased and owner.counterparty_ids() == {}
    assert run(world, consumer.request_erasure(owner.address, b"\x02" * 32)).error == "unknown-label"


def test_node_state_survives_restart(tmp_path):
    net = SimNetwork(seed=11)
    rng = random.Random(11)
    idp = cc.generate_keypair(2048, rng)
    config = SimConfig()
    nodes = []
    for i in range(2):
        key = cc.generate_keypair(2048, rng)
        identity = Identity(f"u{i}", key, issue_credential(idp, f"u{i}", key.public_key), idp.public_key)
        node_config = NodeConfig(protocol=config.protocol(), difficulty=config.difficulty,
                                 catalog={"email": b"u@example.org"}, data_dir=tmp_path / f"n{i}")
        node = Node(f"n{i}", identity, node_config, net.env, random.Random(i))
        net.add(node)
        nodes.append(node)
    net.connect("n0", "n1")
    handle = nodes[0].request_datum("n1", "email")
    net.run()
    assert handle.ok
    restarted = Node("n1", nodes[1].identity, nodes[1].config, net.env, random.Random(5))
    assert restarted.chain.blocks == nodes[1].chain.blocks
    assert [e.label for e in restarted.nrs.entries()] == [e.label for e in nodes[1].nrs.entries()]
    assert restarted.my_usage_log() == nodes[1].my_usage_log()
