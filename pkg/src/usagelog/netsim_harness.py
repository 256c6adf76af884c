"""Deterministic discrete-event network for multi-node experiments and attacks.

A single seed drives everything: per-message latency, every node's random
source and the workload.  Messages cross the network as encoded bytes, so
nodes run exactly the code they run over TCP.  A tap records the metadata
a network eavesdropper could see (time, endpoints, size, connection) and
never the content.
"""

from __future__ import annotations

import hashlib
import heapq
import inspect
import itertools
import json
import random
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
from scipy import stats

from . import crypto_core as cc
from . import exchange_protocol as ep
from . import ledger as lg
from .identity_vc import UserId, VerifiableCredential, issue_credential
from .node_runtime import ChatterConfig, Identity, Node, NodeConfig, decode_envelope
from .pseudonym import Pseudonym, new_pseudonym


def derivation_ticks(work_factor: int) -> float:
    """Simulated cost of one key derivation: doubles with every work-factor step."""
    return 4.0 * 2 ** work_factor


# --------------------------------------------------------------------------
# configuration

@dataclass
class SimConfig:
    theta: float = 0.1
    timeout: float = 30.0
    work_factor: int = 4
    min_rounds: int = 1
    max_rounds: int = ep.DEFAULT_MAX_ROUNDS
    difficulty: int = 8
    key_bits: int = 2048
    latency: tuple[float, float] = (1.0, 5.0)
    mining_time_per_attempt: float = 1.0
    publication_delay: float = 0.0
    degree: int = 6
    fake_chatter: ChatterConfig = field(default_factory=ChatterConfig)
    # mean gap between exchange starts in the exchange matrix
    arrival_gap: float = 50.0
    # overrides the cost model; used to exercise the calibration guard
    derivation_cost: float | None = None

    def protocol(self) -> ep.ProtocolConfig:
        cost = derivation_ticks(self.work_factor) if self.derivation_cost is None else self.derivation_cost
        return ep.ProtocolConfig(
            theta=self.theta,
            timeout=self.timeout,
            work_factor=self.work_factor,
            min_rounds=self.min_rounds,
            max_rounds=self.max_rounds,
            pseudonym_bits=self.key_bits,
            derivation_cost=cost,
        )

    def check(self) -> None:
        """Refuse configurations where a derivation would fit inside the timeout."""
        self.protocol().check_calibration()
        if self.latency[1] * 2 >= self.timeout:
            raise ep.CalibrationError("a round trip may exceed the acknowledgment timeout")

    @classmethod
    def from_json(cls, data: dict) -> "SimConfig":
        chatter = data.get("fake_chatter") or {}
        fields = {k: v for k, v in data.items() if k in cls.__dataclass_fields__ and k != "fake_chatter"}
        if "latency" in fields:
            fields["latency"] = tuple(fields["latency"])
        return cls(
            **fields,
            fake_chatter=ChatterConfig(
                bool(chatter.get("enabled", False)),
                int(chatter.get("min_fakes", chatter.get("min", 12))),
                int(chatter.get("max_fakes", chatter.get("max", 12))),
            ),
        )


# --------------------------------------------------------------------------
# network

@dataclass(frozen=True)
class TapRecord:
    time: float
    src: str
    dst: str
    size: int
    flow: str
    overlay: bool


class _SimEnv:
    def __init__(self, net: "SimNetwork") -> None:
        self.net = net

    def now(self) -> float:
        return self.net.time

    def send(self, src: str, dst: str, data: bytes, *, flow: str, overlay: bool) -> None:
        self.net.transmit(src, dst, data, flow, overlay)

    def call_later(self, delay: float, callback: Callable[[], None]) -> None:
        self.net.schedule(self.net.time + delay, callback)

    def run_slow(self, cost: float, work: Callable[[], Any], done: Callable[[Any], None]) -> None:
        result = work()
        self.net.schedule(self.net.time + cost, lambda: done(result))


class BlockObserver:
    """A passive overlay participant that notes when each block first reaches it."""

    def __init__(self, address: str) -> None:
        self.address = address
        self.first_seen: dict[bytes, tuple[float, lg.Block]] = {}
        self.net: SimNetwork | None = None

    def on_message(self, src: str, data: bytes) -> None:
        _, kind, body = decode_envelope(data)
        if kind == "gossip" and body.get("type") == "block":
            block = lg.Block.from_json(body["block"])
            if block.block_hash not in self.first_seen and block.well_formed():
                self.first_seen[block.block_hash] = (self.net.time, block)


class SimNetwork:
    def __init__(self, seed: int, latency: tuple[float, float] = (1.0, 5.0)) -> None:
        self.seed = seed
        self.rng = random.Random(seed)
        self._latency_rng = random.Random(self.rng.getrandbits(64))
        self.latency = latency
        self.time = 0.0
        self._queue: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self.nodes: dict[str, Any] = {}
        self.tap: list[TapRecord] = []
        self._trace = hashlib.blake2s()
        self.events = 0
        self.messages = 0
        self.env = _SimEnv(self)

    def child_rng(self) -> random.Random:
        return random.Random(self.rng.getrandbits(64))

    def add(self, participant: Any) -> None:
        self.nodes[participant.address] = participant
        if isinstance(participant, BlockObserver):
            participant.net = self

    def schedule(self, at: float, callback: Callable[[], None]) -> None:
        heapq.heappush(self._queue, (at, next(self._seq), callback))

    def transmit(self, src: str, dst: str, data: bytes, flow: str, overlay: bool) -> None:
        self.messages += 1
        self.tap.append(TapRecord(self.time, src, dst, len(data), flow, overlay))
        self._trace.update(f"{self.time!r}|{src}|{dst}|{len(data)}|".encode() + cc.digest32(data))
        target = self.nodes.get(dst)
        if target is None:
            sender = self.nodes.get(src)
            if isinstance(sender, Node):
                self.schedule(self.time, lambda: sender.on_unreachable(dst))
            return
        delay = self._latency_rng.uniform(*self.latency)
        self.schedule(self.time + delay, lambda: target.on_message(src, data))

    def step(self) -> bool:
        if not self._queue:
            return False
        at, _, callback = heapq.heappop(self._queue)
        self.time = max(self.time, at)
        self.events += 1
        callback()
        return True

    def run(self, until: float | None = None, max_events: int | None = None) -> None:
        """Process events until the queue is empty (quiescence), a time limit or an event budget."""
        budget = max_events
        while self._queue:
            if until is not None and self._queue[0][0] > until:
                self.time = until
                return
            if budget is not None:
                if budget <= 0:
                    return
                budget -= 1
            self.step()

    def run_until(self, predicate: Callable[[], bool], limit: float = float("inf")) -> bool:
        while self._queue and not predicate():
            if self._queue[0][0] > limit:
                break
            self.step()
        return predicate()

    @property
    def quiescent(self) -> bool:
        return not self._queue

    def trace_hash(self) -> str:
        return self._trace.hexdigest()

    def connect(self, a: str, b: str) -> None:
        for x, y in ((a, b), (b, a)):
            node = self.nodes[x]
            if isinstance(node, Node) and y not in node.neighbours:
                node.neighbours.append(y)


def overlay_edges(addresses: list[str], degree: int, rng: random.Random) -> set[tuple[str, str]]:
    """Ring plus random chords until the average degree reaches ``degree``."""
    n = len(addresses)
    edges: set[tuple[str, str]] = set()
    if n < 2:
        return edges
    for i in range(n):
        a, b = addresses[i], addresses[(i + 1) % n]
        if a != b:
            edges.add(tuple(sorted((a, b))))
    target = min(n * degree // 2, n * (n - 1) // 2)
    while len(edges) < target:
        a, b = rng.sample(addresses, 2)
        edges.add(tuple(sorted((a, b))))
    return edges


# --------------------------------------------------------------------------
# building a network

@dataclass
class SimWorld:
    net: SimNetwork
    nodes: list[Node]
    idp_key: cc.KeyPair
    config: SimConfig
    observer: BlockObserver | None = None

    def node(self, address: str) -> Node:
        return self.net.nodes[address]

    def chains_converged(self) -> bool:
        tips = {n.chain.tip.block_hash for n in self.nodes}
        return len(tips) == 1


CATALOG = {"email": b"someone@example.org", "phone": b"+00 0000 000000"}


def build_world(
    n_nodes: int,
    config: SimConfig,
    seed: int,
    *,
    observer: bool = False,
    catalog: dict[str, bytes] | None = None,
    data_root: Path | None = None,
) -> SimWorld:
    """Seeded nodes on a random overlay; with ``data_root`` each node persists under ``data_root/<address>``."""
    config.check()
    net = SimNetwork(seed, config.latency)
    setup_rng = net.child_rng()
    idp_key = cc.generate_keypair(config.key_bits, setup_rng)
    addresses = [f"n{i:03d}" for i in range(n_nodes)]
    protocol = config.protocol()
    nodes = []
    for i, address in enumerate(addresses):
        user_id = f"user{i:03d}"
        key = cc.generate_keypair(config.key_bits, setup_rng)
        identity = Identity(user_id, key, issue_credential(idp_key, user_id, key.public_key), idp_key.public_key)
        node_config = NodeConfig(
            protocol=protocol,
            difficulty=config.difficulty,
            chatter=ChatterConfig(config.fake_chatter.enabled, config.fake_chatter.min_fakes, config.fake_chatter.max_fakes),
            catalog=dict(catalog or CATALOG),
            peers=[a for a in addresses if a != address],
            mining_time_per_attempt=config.mining_time_per_attempt,
            publication_delay=config.publication_delay,
            data_dir=Path(data_root) / address if data_root is not None else None,
        )
        node = Node(address, identity, node_config, net.env, net.child_rng())
        net.add(node)
        nodes.append(node)
    for a, b in sorted(overlay_edges(addresses, config.degree, setup_rng)):
        net.connect(a, b)
    watcher = None
    if observer:
        watcher = BlockObserver("observer")
        net.add(watcher)
        for address in setup_rng.sample(addresses, min(3, len(addresses))):
            net.nodes[address].neighbours.append(watcher.address)
    return SimWorld(net, nodes, idp_key, config, watcher)


# --------------------------------------------------------------------------
# exchange matrix

@dataclass
class ExchangeRecord:
    consumer: str
    owner: str
    datum_type: str
    started: float
    status: str = "pending"
    datum: bytes | None = None
    label: bytes | None = None


@dataclass
class MatrixResult:
    trace_hash: str
    exchanges: list[ExchangeRecord]
    converged: bool
    chain_length: int
    completed: int
    logged: int
    world: SimWorld

    def to_json(self) -> dict:
        return {
            "trace_hash": self.trace_hash,
            "converged": self.converged,
            "chain_length": self.chain_length,
            "completed": self.completed,
            "logged": self.logged,
            "exchanges": [
                {"consumer": e.consumer, "owner": e.owner, "datum_type": e.datum_type, "started": e.started, "status": e.status}
                for e in self.exchanges
            ],
        }


def _track(record: ExchangeRecord, handle) -> None:
    def done(h) -> None:
        if h.ok:
            record.status = "completed"
            record.datum, entry = h.value
            record.label = entry.label
        else:
            record.status = h.error

    handle.add_callback(done)


def run_exchange_matrix(n_nodes: int, n_exchanges: int, config: SimConfig, seed: int) -> MatrixResult:
    """Random consumer/owner pairs with staggered starts, run to quiescence."""
    world = build_world(n_nodes, config, seed)
    net = world.net
    workload = net.child_rng()
    records = []
    at = 0.0
    for _ in range(n_exchanges):
        consumer, owner = workload.sample(world.nodes, 2)
        datum_type = workload.choice(sorted(CATALOG))
        at += workload.expovariate(1.0 / config.arrival_gap)
        record = ExchangeRecord(consumer.address, owner.address, datum_type, at)
        records.append(record)

        def start(c=consumer, o=owner, r=record) -> None:
            _track(r, c.request_datum(o.address, r.datum_type, "service delivery"))

        net.schedule(at, start)
    net.run()
    completed = sum(r.status == "completed" for r in records)
    chain = world.nodes[0].chain
    logged = sum(1 for block in chain for _ in block.payloads)
    return MatrixResult(net.trace_hash(), records, world.chains_converged(), len(chain), completed, logged, world)


# --------------------------------------------------------------------------
# attack (a): repudiation by stopping early

@dataclass
class CheatResult:
    theta: float
    trials: int
    successes: int
    stop_round: int | None
    bound: float

    @property
    def rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0


def run_cheat_trials(
    theta: float,
    trials: int,
    seed: int,
    *,
    min_rounds: int = 1,
    max_rounds: int | None = None,
    strategy: str = "optimal",
) -> CheatResult:
    """Play the round-guessing game against the owner's hidden round count.

    The cheater withholds the acknowledgment of one chosen round and spends
    the derivation time on that round's body.  It wins only if that body
    was the key, in which case the owner never received the key
    acknowledgment.  ``strategy`` is ``"optimal"`` (always gamble on the
    most likely round) or ``"honest"`` (never stop).
    """
    rng = random.Random(seed)
    stop = ep.optimal_stop_round(theta, min_rounds, max_rounds) if strategy == "optimal" else None
    if strategy not in ("optimal", "honest"):
        raise ValueError(f"unknown strategy {strategy!r}")
    successes = 0
    for _ in range(trials):
        n = ep.rounds_for(theta, rng, min_rounds, max_rounds)
        if stop is not None and stop == n:
            successes += 1
    bound = theta + 3 * (theta * (1 - theta) / trials) ** 0.5 if trials else theta
    return CheatResult(theta, trials, successes, stop, bound)


def run_cheat_trials_full(
    theta: float,
    trials: int,
    seed: int,
    *,
    key_bits: int = 2048,
    work_factor: int = 4,
) -> CheatResult:
    """Same game with the real state machines and cryptography (slow; small N)."""
    rng = random.Random(seed)
    idp = cc.generate_keypair(key_bits, rng)
    parties = []
    for user_id in ("owner", "consumer"):
        key = cc.generate_keypair(key_bits, rng)
        parties.append(ep.Party(user_id, key, issue_credential(idp, user_id, key.public_key)))
    owner, consumer = parties
    config = ep.ProtocolConfig(theta=theta, timeout=30, work_factor=work_factor, pseudonym_bits=key_bits,
                               derivation_cost=derivation_ticks(work_factor))
    record = new_pseudonym(key_bits, rng)
    request = ep.UsageRequest("email", "test", record.pseudonym, record.keypair.public_key)
    stop = ep.optimal_stop_round(theta)
    successes = 0
    for _ in range(trials):
        result = ep.run_exchange(b"datum", request, owner, consumer, config, rng, stop_at=stop)
        got_datum = result.consumer.datum is not None
        owner_has_key_ack = result.owner.evidence is not None
        if got_datum and not owner_has_key_ack:
            successes += 1
    bound = theta + 3 * (theta * (1 - theta) / trials) ** 0.5
    return CheatResult(theta, trials, successes, stop, bound)


# --------------------------------------------------------------------------
# attacks (c)-(e) via traffic analysis

@dataclass
class LinkageResult:
    accuracy: float | None
    exchanges: int
    correct: int
    messages_per_exchange: float
    session_flows_per_exchange: float
    chance_bound: float | None


def attribute_blocks(tap: list[TapRecord], arrivals: Iterable[tuple[float, lg.Block]]) -> list[tuple[bytes, frozenset[str] | None]]:
    """Attribute each usage-log block to the session that ended last before it appeared.

    Only completed, non-overlay flows are candidates; the prediction is the
    unordered pair of endpoints of the chosen flow.
    """
    flows: dict[str, list[TapRecord]] = {}
    for rec in tap:
        if not rec.overlay:
            flows.setdefault(rec.flow, []).append(rec)
    ends = sorted((recs[-1].time, flow) for flow, recs in flows.items())
    end_times = [t for t, _ in ends]
    out = []
    import bisect

    for arrival, block in arrivals:
        if not any(True for _ in block.payloads):
            continue
        i = bisect.bisect_left(end_times, arrival)
        if i == 0:
            out.append((block.block_hash, None))
            continue
        flow = ends[i - 1][1]
        rec = flows[flow][0]
        out.append((block.block_hash, frozenset((rec.src, rec.dst))))
    return out


def run_linkage_attack(
    with_fake_chatter: bool,
    n_exchanges: int,
    background_traffic: int = 0,
    seed: int = 0,
    *,
    n_nodes: int = 20,
    config: SimConfig | None = None,
    min_fakes: int = 12,
    max_fakes: int = 12,
    gap: float = 100.0,
) -> LinkageResult:
    """Serial exchanges watched by a metadata eavesdropper plus a block observer."""
    base = config or SimConfig(mining_time_per_attempt=10.0)
    base.fake_chatter = ChatterConfig(with_fake_chatter, min_fakes, max_fakes)
    world = build_world(n_nodes, base, seed, observer=True)
    net = world.net
    workload = net.child_rng()
    truth: dict[bytes, frozenset[str]] = {}
    records = []
    for _ in range(n_exchanges):
        consumer, owner = workload.sample(world.nodes, 2)
        record = ExchangeRecord(consumer.address, owner.address, "email", net.time)
        records.append(record)
        _track(record, consumer.request_datum(owner.address, "email", "service delivery"))
        for _ in range(background_traffic):
            a, b = workload.sample(world.nodes, 2)
            net.schedule(net.time + workload.uniform(0, 500), lambda a=a, b=b: a.fake_exchange(b.address))
        net.run()
        if record.label is not None:
            truth[record.label] = frozenset((record.consumer, record.owner))
        net.schedule(net.time + gap, lambda: None)
        net.run()

    arrivals = sorted(world.observer.first_seen.values(), key=lambda item: item[0])
    predictions = attribute_blocks(net.tap, arrivals)
    label_of = {}
    for _, block in arrivals:
        for payload in block.payloads:
            label_of[block.block_hash] = _label_for_payload(world, payload)
    correct = total = 0
    for block_hash, guess in predictions:
        label = label_of.get(block_hash)
        if label is None or label not in truth:
            continue
        total += 1
        correct += guess == truth[label]
    session_flows = len({r.flow for r in net.tap if not r.overlay})
    non_overlay = sum(1 for r in net.tap if not r.overlay)
    chance = 1.0 / (1 + min_fakes) + 0.05 if with_fake_chatter else None
    return LinkageResult(
        accuracy=correct / total if total else None,
        exchanges=total,
        correct=correct,
        messages_per_exchange=non_overlay / n_exchanges if n_exchanges else 0.0,
        session_flows_per_exchange=session_flows / n_exchanges if n_exchanges else 0.0,
        chance_bound=chance,
    )


def _label_for_payload(world: SimWorld, payload: lg.UsagePayload) -> bytes | None:
    # ground truth only: the experimenter may look inside the owners' stores
    for node in world.nodes:
        for entry in node.nrs.entries():
            if entry.role == "owner" and entry.own_pseudonym_record.pseudonym == payload.owner_pseudonym:
                return entry.label
    return None


# --------------------------------------------------------------------------
# attacks (b), (d)/(e), (f)

@dataclass
class EvidenceReport:
    fabrication_attempts: int = 0
    fabrications_accepted: int = 0
    fabrication_kinds: dict[str, int] = field(default_factory=dict)
    pseudonyms: int = 0
    pseudonyms_distinct: bool = True
    chi_square_p: float = 1.0
    api_findings: list[str] = field(default_factory=list)
    verifications: int = 0
    verifications_with_both_ids: int = 0
    defector_self_incriminated: bool = False

    @property
    def passed(self) -> bool:
        return (
            self.fabrications_accepted == 0
            and self.pseudonyms_distinct
            and self.chi_square_p > 0.01
            and not self.api_findings
            and self.verifications == self.verifications_with_both_ids
            and self.defector_self_incriminated
        )


def digest_uniformity_p(pseudonyms: Iterable[Pseudonym]) -> float:
    """Chi-square p-value for uniformity of all digest bytes over 256 bins."""
    data = np.frombuffer(b"".join(p.digest for p in pseudonyms), dtype=np.uint8)
    counts = np.bincount(data, minlength=256)
    return float(stats.chisquare(counts).pvalue)


_IDENTITY_TYPES = (UserId, VerifiableCredential, Identity)


def _mentions(annotation: Any, targets: tuple) -> bool:
    if annotation in targets:
        return True
    return any(_mentions(arg, targets) for arg in typing.get_args(annotation))


def audit_public_api(modules: Iterable[Any] | None = None) -> list[str]:
    """Find public callables that map a pseudonym to an identity or to other pseudonyms.

    Methods of the node and its private store are exempt: they operate on
    the holder's own records, which is where such links legitimately live.
    """
    if modules is None:
        import usagelog

        modules = [
            __import__(f"usagelog.{name}", fromlist=["_"])
            for name in ("crypto_core", "pseudonym", "identity_vc", "exchange_protocol", "ledger", "node_runtime", "idp_service")
        ]
    exempt = {"Node", "NrsStore", "NrsEntry"}
    findings = []
    for module in modules:
        for name, obj in vars(module).items():
            if name.startswith("_") or getattr(obj, "__module__", None) != module.__name__:
                continue
            callables = []
            if inspect.isfunction(obj):
                callables.append((name, obj))
            elif inspect.isclass(obj) and name not in exempt:
                for attr, member in vars(obj).items():
                    if not attr.startswith("_") and inspect.isfunction(member):
                        callables.append((f"{name}.{attr}", member))
            for qualname, fn in callables:
                try:
                    hints = typing.get_type_hints(fn, vars(module))
                except Exception:
                    continue
                returns = hints.pop("return", None)
                pseudonym_params = [p for p in hints.values() if _mentions(p, (Pseudonym,))]
                if not pseudonym_params:
                    continue
                if returns is not None and _mentions(returns, _IDENTITY_TYPES):
                    findings.append(f"{module.__name__}.{qualname}: pseudonym -> identity")
                if len(pseudonym_params) >= 2:
                    findings.append(f"{module.__name__}.{qualname}: relates several pseudonyms")
                if returns is not None and _mentions(returns, (Pseudonym,)):
                    findings.append(f"{module.__name__}.{qualname}: pseudonym -> pseudonym")
    return findings


def _fabrications(
    genuine: ep.NonRepudiationEvidence,
    aborted: ep.LoopbackResult,
    owner: ep.Party,
    consumer: ep.Party,
    attacker: ep.Party,
    rng: random.Random,
    config: ep.ProtocolConfig,
) -> Iterable[tuple[str, ep.NonRepudiationEvidence, VerifiableCredential]]:
    """Endless stream of forged receipt evidence, cycling through attack styles."""
    from dataclasses import replace

    from . import exchange_protocol as x

    def fresh_transcript() -> tuple[ep.ProtocolMessage, ep.ProtocolMessage, bytes]:
        # a usage that never happened: the owner encrypts and signs on its own
        datum = rng.randbytes(24)
        seed = cc.new_key_seed(config.work_factor, rng)
        label = x.transaction_label(datum, seed)
        key = cc.derive_cipher_key(seed)
        body = bytes([seed.work_factor]) + cc.encrypt_datum(datum, key, rng)
        sign = lambda kind, r, b: cc.sign(x._message_signing_bytes(kind, label, r, b, consumer.user_id), owner.key)
        cipher = x.ProtocolMessage(x.CIPHER, label, 0, body, sign(x.CIPHER, 0, body))
        key_msg = x.ProtocolMessage(x.STEP, label, 1, seed.material, sign(x.STEP, 1, seed.material))
        return cipher, key_msg, label

    def evidence_for(cipher, key_msg, label, ack_c, ack_k, role=x.NRR):
        return x.NonRepudiationEvidence(role, label, cipher, key_msg, consumer.credential, owner.credential, ack_c, ack_k)

    forged_idp = cc.generate_keypair(config.pseudonym_bits, rng)
    forged_credential = issue_credential(forged_idp, consumer.user_id, attacker.key.public_key)
    owner_session = aborted.owner_session

    for i in itertools.count():
        style = i % 8
        if style == 0:
            # replay genuine acknowledgments on a fabricated transcript
            cipher, key_msg, label = fresh_transcript()
            yield "signature-replay", evidence_for(cipher, key_msg, label, genuine.ack_cipher, genuine.ack_key), consumer.credential
        elif style == 1:
            # point genuine signatures at the new messages' digests
            cipher, key_msg, label = fresh_transcript()
            ack_c = replace(genuine.ack_cipher, label=label, message_digest=cipher.digest)
            ack_k = replace(genuine.ack_key, label=label, round=key_msg.round, message_digest=key_msg.digest)
            yield "digest-substitution", evidence_for(cipher, key_msg, label, ack_c, ack_k), consumer.credential
        elif style == 2:
            # acknowledgments signed with the attacker's own key
            cipher, key_msg, label = fresh_transcript()
            ack_c = ep.acknowledge(cipher, owner.user_id, attacker.key)
            ack_k = ep.acknowledge(key_msg, owner.user_id, attacker.key)
            yield "key-substitution", evidence_for(cipher, key_msg, label, ack_c, ack_k), consumer.credential
        elif style == 3:
            # attacker-signed acknowledgments plus a credential from a rogue issuer
            cipher, key_msg, label = fresh_transcript()
            ack_c = ep.acknowledge(cipher, owner.user_id, attacker.key)
            ack_k = ep.acknowledge(key_msg, owner.user_id, attacker.key)
            forged = evidence_for(cipher, key_msg, label, ack_c, ack_k)
            yield "rogue-credential", replace(forged, counterparty_credential=forged_credential), forged_credential
        elif style == 4:
            # real acknowledgments from an aborted run, a round value passed off as the key
            acks = owner_session.acks
            sent = owner_session.sent
            if len(acks) >= 2:
                ev = evidence_for(sent[0], sent[len(acks) - 1], owner_session.label, acks[0], acks[len(acks) - 1])
            else:
                ev = evidence_for(sent[0], sent[0], owner_session.label, acks[0], acks[0])
            yield "round-value-as-key", ev, consumer.credential
        elif style == 5:
            # random signature bytes
            cipher, key_msg, label = fresh_transcript()
            ack_c = ep.Acknowledgment(label, 0, cipher.digest, rng.randbytes(len(genuine.ack_cipher.signature)))
            ack_k = ep.Acknowledgment(label, 1, key_msg.digest, rng.randbytes(len(genuine.ack_key.signature)))
            yield "random-signature", evidence_for(cipher, key_msg, label, ack_c, ack_k), consumer.credential
        elif style == 6:
            # genuine evidence with one bit of the key message flipped
            body = bytearray(genuine.key_message.body)
            body[rng.randrange(len(body))] ^= 1 << rng.randrange(8)
            key_msg = replace(genuine.key_message, body=bytes(body))
            yield "tampered-key", replace(genuine, key_message=key_msg), consumer.credential
        else:
            # origin evidence relabelled as a receipt
            cipher, key_msg, label = fresh_transcript()
            yield "role-flip", evidence_for(cipher, key_msg, label, None, None, role=x.NRO), consumer.credential


def run_evidence_attacks(
    seed: int,
    *,
    attempts: int = 1000,
    corpus: int = 500,
    key_bits: int = 2048,
    pseudonyms: list[Pseudonym] | None = None,
) -> EvidenceReport:
    rng = random.Random(seed)
    report = EvidenceReport()
    idp = cc.generate_keypair(key_bits, rng)
    parties = []
    for user_id in ("owner", "consumer", "attacker"):
        key = cc.generate_keypair(key_bits, rng)
        parties.append(ep.Party(user_id, key, issue_credential(idp, user_id, key.public_key)))
    owner, consumer, attacker = parties
    config = ep.ProtocolConfig(theta=0.3, timeout=30, work_factor=4, pseudonym_bits=key_bits, derivation_cost=derivation_ticks(4))
    record = new_pseudonym(key_bits, rng)
    request = ep.UsageRequest("email", "audit", record.pseudonym, record.keypair.public_key)
    genuine = ep.run_exchange(b"someone@example.org", request, owner, consumer, config, rng, consumer_record=record)
    aborted = ep.run_exchange(b"someone@example.org", request, owner, consumer, config, rng, rounds=4, withhold_at=3)

    def check(result: ep.EvidenceCheck) -> bool:
        report.verifications += bool(result)
        report.verifications_with_both_ids += bool(result) and result.consumer_id is not None and result.owner_id is not None
        return bool(result)

    # sanity: genuine evidence verifies both ways
    check(ep.verify_receipt(genuine.owner.evidence, consumer.credential, owner.credential, idp.public_key))
    check(ep.verify_origin(genuine.consumer.evidence, owner.credential, consumer.credential, idp.public_key))

    # (b) fabrication
    stream = _fabrications(genuine.owner.evidence, aborted, owner, consumer, attacker, rng, config)
    for kind, forged, credential in itertools.islice(stream, attempts):
        report.fabrication_attempts += 1
        report.fabrication_kinds[kind] = report.fabrication_kinds.get(kind, 0) + 1
        if check(ep.verify_receipt(forged, credential, owner.credential, idp.public_key)):
            report.fabrications_accepted += 1

    # (d)/(e) linkage across one consumer's entries
    if pseudonyms is None:
        pseudonyms = [new_pseudonym(key_bits, rng).pseudonym for _ in range(corpus)]
    report.pseudonyms = len(pseudonyms)
    report.pseudonyms_distinct = len(set(pseudonyms)) == len(pseudonyms)
    report.chi_square_p = digest_uniformity_p(pseudonyms)
    report.api_findings = audit_public_api()

    # (f) an erasure defector keeps evidence it promised to drop and later shows it
    retained = genuine.owner.evidence
    shown = ep.verify_receipt(retained, retained.counterparty_credential, retained.own_credential, idp.public_key)
    check(shown)
    report.defector_self_incriminated = bool(shown) and shown.owner_id == owner.user_id
    return report


# --------------------------------------------------------------------------
# experiment files

def run_experiment(path: str | Path) -> dict:
    """Run an experiment described by a JSON file and return a JSON-able report."""
    spec = json.loads(Path(path).read_text())
    return run_experiment_spec(spec)


def run_experiment_spec(spec: dict) -> dict:
    seed = int(spec.get("seed", 0))
    config = SimConfig.from_json(spec)
    report: dict[str, Any] = {"seed": seed}
    kinds = spec.get("run", ["matrix"])
    if "matrix" in kinds:
        result = run_exchange_matrix(int(spec.get("nodes", 5)), int(spec.get("exchanges", 10)), config, seed)
        report["matrix"] = result.to_json()
    if "cheat" in kinds:
        trials = int(spec.get("cheat_trials", 100_000))
        report["cheat"] = [
            {"theta": r.theta, "trials": r.trials, "rate": r.rate, "bound": r.bound, "stop_round": r.stop_round}
            for r in (run_cheat_trials(theta, trials, seed) for theta in spec.get("cheat_thetas", [config.theta]))
        ]
    if "linkage" in kinds:
        out = {}
        for chatter in (False, True):
            r = run_linkage_attack(
                chatter,
                int(spec.get("linkage_exchanges", 50)),
                int(spec.get("background_traffic", 0)),
                seed,
                n_nodes=int(spec.get("nodes", 20)),
                config=SimConfig.from_json(spec),
                min_fakes=config.fake_chatter.min_fakes,
                max_fakes=config.fake_chatter.max_fakes,
            )
            out["with_chatter" if chatter else "without_chatter"] = r.__dict__
        report["linkage"] = out
    if "evidence" in kinds:
        r = run_evidence_attacks(seed, attempts=int(spec.get("fabrication_attempts", 1000)), corpus=int(spec.get("corpus", 500)))
        report["evidence"] = {**r.__dict__, "passed": r.passed}
    return report
