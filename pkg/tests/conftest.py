from __future__ import annotations

import random
from dataclasses import dataclass

import pytest

from usagelog import crypto_core as cc
from usagelog import exchange_protocol as ep
from usagelog.bench import LogChain, build_log_chain
from usagelog.identity_vc import issue_credential
from usagelog.netsim_harness import derivation_ticks
from usagelog.pseudonym import PseudonymRecord, new_pseudonym

CORPUS_SIZE = 10_000
CHAIN_LOGS = 2000
KEY_BITS = 2048


# --------------------------------------------------------------------------
# acceptance report

_criteria: dict[int, dict] = {}


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item: pytest.Item, call: pytest.CallInfo):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    row = _criteria.setdefault(number, {"title": title, "passed": True, "details": []})
    row["passed"] = row["passed"] and report.passed
    row["details"] += [str(value) for key, value in item.user_properties if key == "detail"]


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        row = _criteria[number]
        status = "PASS" if row["passed"] else "FAIL"
        detail = "; ".join(row["details"])
        terminalreporter.write_line(f"AC{number:02d} {status} {row['title']}" + (f" | {detail}" if detail else ""))


# --------------------------------------------------------------------------
# shared parties and configuration

@dataclass
class Cast:
    idp: cc.KeyPair
    owner: ep.Party
    consumer: ep.Party
    attacker: ep.Party


def make_party(user_id: str, idp: cc.KeyPair, rng: random.Random) -> ep.Party:
    key = cc.generate_keypair(KEY_BITS, rng)
    return ep.Party(user_id, key, issue_credential(idp, user_id, key.public_key))


@pytest.fixture(scope="session")
def cast() -> Cast:
    rng = random.Random(7)
    idp = cc.generate_keypair(KEY_BITS, rng)
    return Cast(idp, *(make_party(name, idp, rng) for name in ("alice-owner", "bob-consumer", "mallory")))


@pytest.fixture(scope="session")
def fast_config() -> ep.ProtocolConfig:
    """Small work factor with a simulated cost that exceeds the timeout."""
    return ep.ProtocolConfig(
        theta=0.3, timeout=30.0, work_factor=4, pseudonym_bits=KEY_BITS, derivation_cost=derivation_ticks(4)
    )


@pytest.fixture(scope="session")
def pseudonym_corpus() -> list[PseudonymRecord]:
    """Ten thousand independently generated one-time pseudonyms."""
    rng = random.Random(20240601)
    return [new_pseudonym(KEY_BITS, rng, created_at=i) for i in range(CORPUS_SIZE)]


@pytest.fixture(scope="session")
def log_chain(pseudonym_corpus) -> LogChain:
    return build_log_chain(CHAIN_LOGS, random.Random(99), records=pseudonym_corpus[: 2 * CHAIN_LOGS])
