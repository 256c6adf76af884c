"""Seedable measurements: exchange phases, log appends, query and storage scaling.

Every benchmark returns raw per-run rows; aggregation and fits are separate.
"""

from __future__ import annotations

import csv
import gc
import io
import random
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from scipy import stats

from . import crypto_core as cc
from . import ledger as lg
from .netsim_harness import SimConfig, build_world
from .node_runtime import ChatterConfig
from .pseudonym import PseudonymRecord, new_pseudonym


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


def fit_linear(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    result = stats.linregress(x, y)
    return LinearFit(float(result.slope), float(result.intercept), float(result.rvalue**2))


def write_csv(rows: Iterable[dict], out) -> None:
    rows = list(rows)
    if not rows:
        return
    writer = csv.DictWriter(out, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)


def rows_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


# --------------------------------------------------------------------------
# chains of usage logs

@dataclass
class LogChain:
    chain: lg.Chain
    # (consumer record, owner record) per log, in chain order
    parties: list[tuple[PseudonymRecord, PseudonymRecord]]


def build_log_chain(
    n_logs: int,
    rng: random.Random,
    *,
    records: Sequence[PseudonymRecord] | None = None,
    key_bits: int = 2048,
    difficulty: int = 4,
) -> LogChain:
    """Append ``n_logs`` usage logs, two pseudonyms each (taken from ``records`` if given)."""
    from .ledger import compose_usage_payload

    if records is not None and len(records) < 2 * n_logs:
        raise ValueError("not enough pseudonym records for the requested chain")
    chain = lg.Chain()
    parties = []
    for i in range(n_logs):
        if records is not None:
            consumer, owner = records[2 * i], records[2 * i + 1]
        else:
            consumer, owner = new_pseudonym(key_bits, rng), new_pseudonym(key_bits, rng)
        payload, _ = compose_usage_payload(
            datum_type=rng.choice(["email", "phone", "address"]),
            justification="benchmark",
            label=rng.randbytes(32),
            timestamp=float(i),
            consumer_pseudonym=consumer.pseudonym,
            consumer_public_key=consumer.keypair.public_key,
            owner_record=owner,
            rng=rng,
        )
        lg.append_usage_log(chain, payload, difficulty, rng)
        parties.append((consumer, owner))
    return LogChain(chain, parties)


def log_counts(max_logs: int = 2000, step: int = 25) -> list[int]:
    return list(range(step, max_logs + 1, step))


# --------------------------------------------------------------------------
# query and storage scaling

def bench_query(log_chain: LogChain, counts: Sequence[int], reps: int = 50, seed: int = 0) -> list[dict]:
    """Time single and all-log queries on chain prefixes; decryptions are counted.

    The collector is paused while timing, as ``timeit`` does, so that a
    collection triggered by unrelated live objects is not charged to a query.
    """
    rng = random.Random(seed)
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        return _time_queries(log_chain, counts, reps, rng)
    finally:
        if was_enabled:
            gc.enable()


def _time_queries(log_chain: LogChain, counts: Sequence[int], reps: int, rng: random.Random) -> list[dict]:
    blocks = log_chain.chain.blocks
    cases = {}
    for n in counts:
        # the last log's consumer forces a full scan for the single query
        target = log_chain.parties[n - 1][0].pseudonym
        chosen = rng.sample(range(n), min(10, n))
        wanted = {log_chain.parties[i][j].pseudonym for i in chosen for j in (0, 1)}
        cases[n] = (blocks[: 1 + 2 * n], target, wanted)
    rows = []
    # every repetition sweeps all counts in a fresh order, so slow drift in
    # machine speed spreads evenly instead of correlating with the count
    order = list(counts)
    for rep in range(reps):
        rng.shuffle(order)
        for n in order:
            prefix, target, wanted = cases[n]
            for kind in ("single", "all"):
                cc.COUNTERS.reset()
                t0 = time.perf_counter()
                if kind == "single":
                    hit = lg.query_single(prefix, target)
                    found = int(hit is not None)
                else:
                    found = len(lg.query_all(prefix, wanted))
                elapsed = time.perf_counter() - t0
                rows.append({
                    "logs": n, "rep": rep, "kind": kind, "seconds": elapsed,
                    "hits": found, "decryptions": cc.COUNTERS.decryptions,
                })
    return rows


def bench_storage(log_chain: LogChain, counts: Sequence[int]) -> list[dict]:
    sizes = [len(block.to_line()) + 1 for block in log_chain.chain]
    rows = []
    for n in counts:
        total = sum(sizes[: 1 + 2 * n])
        rows.append({"logs": n, "bytes": total, "bytes_per_log": total / n})
    return rows


def summarize_query(rows: Sequence[dict], kind: str) -> tuple[list[int], list[float]]:
    """Median time per log count for one query kind."""
    by_count: dict[int, list[float]] = {}
    for row in rows:
        if row["kind"] == kind:
            by_count.setdefault(row["logs"], []).append(row["seconds"])
    counts = sorted(by_count)
    return counts, [statistics.median(by_count[n]) for n in counts]


# --------------------------------------------------------------------------
# appends and whole exchanges

def bench_append(runs: int = 20, seed: int = 0, difficulty: int = lg.DEFAULT_DIFFICULTY, key_bits: int = 2048) -> list[dict]:
    rng = random.Random(seed)
    chain = lg.Chain()
    consumer, owner = new_pseudonym(key_bits, rng), new_pseudonym(key_bits, rng)
    rows = []
    for run in range(runs):
        payload, _ = lg.compose_usage_payload(
            datum_type="email", justification="benchmark", label=rng.randbytes(32), timestamp=float(run),
            consumer_pseudonym=consumer.pseudonym, consumer_public_key=consumer.keypair.public_key,
            owner_record=owner, rng=rng,
        )
        _, st = lg.append_usage_log(chain, payload, difficulty, rng)
        rows.append({
            "run": run,
            "mining_seconds": st.mining_seconds,
            "mining_attempts": sum(st.mining_attempts),
            "account_seconds": st.account_seconds,
            "tx_seconds": st.tx_seconds,
            "total_seconds": st.total_seconds,
        })
    return rows


def bench_exchange(runs: int = 10, seed: int = 0, n_nodes: int = 20, chatter: bool = False, config: SimConfig | None = None) -> list[dict]:
    """Per-exchange phase breakdown in simulated time: peer search, protocol, mining."""
    config = config or SimConfig()
    config.fake_chatter = ChatterConfig(chatter, 12, 12)
    world = build_world(n_nodes, config, seed)
    net = world.net
    workload = net.child_rng()
    rows = []
    for run in range(runs):
        consumer, owner = workload.sample(world.nodes, 2)
        messages_before = net.messages
        t0 = net.time
        search = consumer.find_peer(owner.address)
        net.run_until(lambda: search.done)
        t1 = net.time
        handle = consumer.request_datum(owner.address, "email", "benchmark")
        net.run_until(lambda: handle.done)
        t2 = net.time
        net.run()
        finished, committed = owner.stats.append_timeline[-1] if owner.stats.append_timeline else (t2, t2)
        append = owner.stats.append_stats[-1] if owner.stats.append_stats else None
        rows.append({
            "run": run,
            "chatter": chatter,
            "status": "completed" if handle.ok else handle.error,
            "peer_search": t1 - t0,
            "protocol": t2 - t1,
            "mining_and_accounts": committed - finished,
            "append_wall_seconds": append.total_seconds if append else None,
            "messages": net.messages - messages_before,
        })
    return rows


def rows_as_dicts(items: Iterable) -> list[dict]:
    return [asdict(item) for item in items]
