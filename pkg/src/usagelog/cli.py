"""Command-line interface: ``usagelog <command> ...``.

Every failure exits with status 1 and prints ``{"error": code, "message": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import random
import sys
from pathlib import Path
from typing import Any, Sequence

from . import bench
from . import crypto_core as cc
from . import exchange_protocol as ep
from . import ledger as lg
from .identity_vc import VerifiableCredential
from .node_runtime import ChatterConfig, Identity, Node, NodeConfig, write_private

CONFIG_FILE = "config.json"
IDENTITY_FILE = "identity.json"


class CliError(Exception):
    def __init__(self, code: str, message: str = "") -> None:
        super().__init__(message or code)
        self.code = code


# --------------------------------------------------------------------------
# node directories

def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError("not-initialized", f"{path} does not exist; run 'usagelog node init' first") from None


def load_node(data_dir: Path, env, rng: random.Random | None = None) -> Node:
    data_dir = Path(data_dir)
    conf = _read_json(data_dir / CONFIG_FILE)
    ident = _read_json(data_dir / IDENTITY_FILE)
    key = cc.KeyPair.from_private_bytes(bytes.fromhex(ident["private_key"]))
    identity = Identity(
        conf["user_id"],
        key,
        VerifiableCredential.from_json(ident["credential"]),
        bytes.fromhex(conf["idp_public_key"]),
    )
    chatter = conf.get("chatter", {})
    node_config = NodeConfig(
        protocol=ep.ProtocolConfig(**conf["protocol"]),
        difficulty=int(conf.get("difficulty", lg.DEFAULT_DIFFICULTY)),
        chatter=ChatterConfig(bool(chatter.get("enabled", False)), int(chatter.get("min_fakes", 12)), int(chatter.get("max_fakes", 12))),
        catalog={k: v.encode() for k, v in conf.get("catalog", {}).items()},
        peers=list(conf.get("peers", [])),
        data_dir=data_dir,
    )
    node = Node(conf["address"], identity, node_config, env, rng or cc.system_rng())
    node.neighbours = list(conf.get("neighbours", []))
    return node


def cmd_node_init(args: argparse.Namespace) -> dict:
    from .idp_service import IdpClient

    data_dir = Path(args.dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    protocol = ep.ProtocolConfig(
        theta=args.theta, timeout=args.timeout, work_factor=args.work_factor, pseudonym_bits=args.key_bits,
    )
    if args.derivation_cost is not None:
        protocol = ep.ProtocolConfig(**{**protocol.__dict__, "derivation_cost": args.derivation_cost})
        protocol.check_calibration()
    else:
        protocol = ep.calibrate(protocol)
    client = IdpClient(args.idp)
    key = cc.generate_keypair(args.key_bits)
    token = client.login(args.user, args.secret)
    credential = client.issue(token, key.public_key)
    client.logout(token)
    catalog = json.loads(Path(args.catalog).read_text()) if args.catalog else {}
    conf = {
        "address": args.address,
        "user_id": args.user,
        "idp_public_key": client.public_key().hex(),
        "protocol": {k: v for k, v in protocol.__dict__.items()},
        "difficulty": args.difficulty,
        "chatter": {"enabled": False, "min_fakes": 12, "max_fakes": 12},
        "catalog": catalog,
        "peers": args.peer or [],
        "neighbours": args.neighbour or [],
    }
    (data_dir / CONFIG_FILE).write_text(json.dumps(conf, indent=2) + "\n")
    write_private(data_dir / IDENTITY_FILE, json.dumps({"private_key": key.private_key.hex(), "credential": credential.to_json()}) + "\n")
    return {"dir": str(data_dir), "address": args.address, "derivation_cost": protocol.derivation_cost}


async def _with_node(data_dir: Path, body):
    from .netio import AsyncioEnv, serve

    env = AsyncioEnv(asyncio.get_running_loop())
    node = load_node(data_dir, env)
    server = await serve(node, env)
    try:
        return await body(node)
    finally:
        server.close()
        await env.close()


def cmd_node_serve(args: argparse.Namespace) -> dict:
    async def forever(node: Node) -> None:
        print(json.dumps({"serving": node.address, "user_id": node.user_id}), flush=True)
        await asyncio.Event().wait()

    try:
        asyncio.run(_with_node(Path(args.dir), forever))
    except KeyboardInterrupt:
        pass
    return {"stopped": True}


async def _await(handle, timeout: float) -> Any:
    from .netio import wait_for

    try:
        done = await wait_for(handle, timeout)
    except asyncio.TimeoutError:
        raise CliError("timeout", "no answer from peer") from None
    if done.error:
        raise CliError(done.error)
    return done.value


def cmd_request(args: argparse.Namespace) -> dict:
    async def run(node: Node) -> dict:
        datum, entry = await _await(node.request_datum(args.peer, args.datum_type, args.justification), args.wait)
        try:
            text = datum.decode("utf-8")
        except UnicodeDecodeError:
            text = None
        return {"datum": text, "datum_hex": datum.hex(), "label": entry.label.hex()}

    return asyncio.run(_with_node(Path(args.dir), run))


def cmd_log(args: argparse.Namespace) -> Any:
    async def run(node: Node) -> Any:
        if args.peer:
            await _await(node.sync_chain(args.peer), args.wait)
        node.resolve_counterparties()
        records = node.my_usage_log()
        if args.action == "list":
            return [
                {"label": r.label.hex(), "datum_type": r.datum_type, "justification": r.justification, "timestamp": r.logical_timestamp}
                for r in records
            ]
        label = bytes.fromhex(args.label)
        entry = node.nrs.get(label)
        if entry is None:
            raise CliError("unknown-label", args.label)
        matches = [r for r in records if r.label == label]
        return {
            "label": args.label,
            "role": entry.role,
            "counterparty_user_id": entry.counterparty_user_id,
            "erased": entry.erased,
            "records": [{"datum_type": r.datum_type, "justification": r.justification, "timestamp": r.logical_timestamp} for r in matches],
        }

    return asyncio.run(_with_node(Path(args.dir), run))


def cmd_erase(args: argparse.Namespace) -> dict:
    try:
        label = bytes.fromhex(args.label)
    except ValueError:
        raise CliError("unknown-label", args.label) from None

    async def run(node: Node) -> dict:
        status = await _await(node.request_erasure(args.peer, label), args.wait)
        return {"label": args.label, "status": status}

    return asyncio.run(_with_node(Path(args.dir), run))


def cmd_chatter(args: argparse.Namespace) -> dict:
    path = Path(args.dir) / CONFIG_FILE
    conf = _read_json(path)
    chatter = conf.setdefault("chatter", {"min_fakes": 12, "max_fakes": 12})
    chatter["enabled"] = args.state == "on"
    ChatterConfig(chatter["enabled"], chatter.get("min_fakes", 12), chatter.get("max_fakes", 12))
    path.write_text(json.dumps(conf, indent=2) + "\n")
    return {"chatter": args.state}


def cmd_bench(args: argparse.Namespace) -> dict:
    rng = random.Random(args.seed)
    summary: dict[str, Any] = {"benchmark": args.kind, "seed": args.seed}
    if args.kind in ("query", "storage"):
        counts = bench.log_counts(args.max_logs, args.step)
        log_chain = bench.build_log_chain(counts[-1], rng, key_bits=args.key_bits, difficulty=args.difficulty)
        if args.kind == "query":
            rows = bench.bench_query(log_chain, counts, reps=args.reps, seed=args.seed)
            for kind in ("single", "all"):
                xs, ys = bench.summarize_query(rows, kind)
                summary[f"{kind}_r_squared"] = bench.fit_linear(xs, ys).r_squared
            summary["decryptions"] = sum(r["decryptions"] for r in rows)
        else:
            rows = bench.bench_storage(log_chain, counts)
            fit = bench.fit_linear([r["logs"] for r in rows], [r["bytes"] for r in rows])
            summary.update(r_squared=fit.r_squared, bytes_per_log=fit.slope)
    elif args.kind == "append":
        rows = bench.bench_append(args.runs, args.seed, args.difficulty, args.key_bits)
    else:
        rows = bench.bench_exchange(args.runs, args.seed, chatter=args.chatter)
    with open(args.out, "w", newline="") as fh:
        bench.write_csv(rows, fh)
    summary["rows"] = len(rows)
    summary["out"] = args.out
    return summary


def cmd_sim(args: argparse.Namespace) -> dict:
    from .netsim_harness import run_experiment

    report = run_experiment(args.experiment)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, default=str) + "\n")
    return report


def cmd_idp(args: argparse.Namespace) -> dict:
    from .idp_service import IdentityProvider, add_user, load_users, make_server

    if args.action == "add-user":
        add_user(args.users, args.user, args.secret)
        return {"added": args.user}
    idp = IdentityProvider(load_users(args.users), cc.generate_keypair(args.key_bits))
    server = make_server(idp, args.host, args.port)
    host, port = server.server_address[:2]
    print(json.dumps({"serving": f"http://{host}:{port}"}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return {"stopped": True}


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usagelog", description="Pseudonymous, non-repudiable data usage logging.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_dir(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--dir", default=".usagelog", help="node data directory (default: .usagelog)")
        p.add_argument("--wait", type=float, default=300.0, help="seconds to wait for the peer")
        return p

    node = sub.add_parser("node", help="initialize or run a node")
    node_sub = node.add_subparsers(dest="action", required=True)
    init = with_dir(node_sub.add_parser("init", help="create identity, fetch a credential and calibrate"))
    init.add_argument("--address", required=True, help="host:port this node listens on")
    init.add_argument("--idp", required=True, help="identity provider base URL")
    init.add_argument("--user", required=True)
    init.add_argument("--secret", required=True)
    init.add_argument("--catalog", help="JSON file mapping datum types to values")
    init.add_argument("--theta", type=float, default=0.1)
    init.add_argument("--timeout", type=float, default=3.0, help="acknowledgment timeout in seconds")
    init.add_argument("--work-factor", type=int, default=16)
    init.add_argument("--derivation-cost", type=float, help="skip the calibration probe and use this cost (seconds)")
    init.add_argument("--key-bits", type=int, default=cc.DEFAULT_KEY_BITS, choices=cc.SUPPORTED_KEY_BITS)
    init.add_argument("--difficulty", type=int, default=lg.DEFAULT_DIFFICULTY)
    init.add_argument("--peer", action="append", help="known peer address (repeatable)")
    init.add_argument("--neighbour", action="append", help="overlay neighbour for gossip (repeatable)")
    init.set_defaults(func=cmd_node_init)
    serve = with_dir(node_sub.add_parser("serve", help="run the node until interrupted"))
    serve.set_defaults(func=cmd_node_serve)

    request = with_dir(sub.add_parser("request", help="request a datum from a peer"))
    request.add_argument("peer")
    request.add_argument("datum_type")
    request.add_argument("--justification", default="")
    request.set_defaults(func=cmd_request)

    log_cmd = sub.add_parser("log", help="show this node's own usage logs")
    log_sub = log_cmd.add_subparsers(dest="action", required=True)
    for name in ("list", "show"):
        p = with_dir(log_sub.add_parser(name))
        if name == "show":
            p.add_argument("label")
        p.add_argument("--peer", help="sync the chain from this peer first")
        p.set_defaults(func=cmd_log)

    erase = with_dir(sub.add_parser("erase", help="ask a peer to anonymize one of our logs"))
    erase.add_argument("peer")
    erase.add_argument("label")
    erase.set_defaults(func=cmd_erase)

    chatter = with_dir(sub.add_parser("chatter", help="toggle fake chatter"))
    chatter.add_argument("state", choices=("on", "off"))
    chatter.set_defaults(func=cmd_chatter)

    bench_cmd = sub.add_parser("bench", help="run a benchmark and write raw samples as CSV")
    bench_cmd.add_argument("kind", choices=("exchange", "append", "query", "storage"))
    bench_cmd.add_argument("--out", required=True)
    bench_cmd.add_argument("--seed", type=int, default=0)
    bench_cmd.add_argument("--runs", type=int, default=10)
    bench_cmd.add_argument("--max-logs", type=int, default=2000)
    bench_cmd.add_argument("--step", type=int, default=25)
    bench_cmd.add_argument("--reps", type=int, default=50)
    bench_cmd.add_argument("--key-bits", type=int, default=2048, choices=cc.SUPPORTED_KEY_BITS)
    bench_cmd.add_argument("--difficulty", type=int, default=4)
    bench_cmd.add_argument("--chatter", action="store_true", help="exchange benchmark with fake chatter")
    bench_cmd.set_defaults(func=cmd_bench)

    sim = sub.add_parser("sim", help="network simulation experiments")
    sim_sub = sim.add_subparsers(dest="action", required=True)
    run = sim_sub.add_parser("run")
    run.add_argument("experiment", help="experiment JSON file")
    run.add_argument("--out", help="also write the report here")
    run.set_defaults(func=cmd_sim)

    idp = sub.add_parser("idp", help="identity provider")
    idp_sub = idp.add_subparsers(dest="action", required=True)
    add = idp_sub.add_parser("add-user")
    add.add_argument("user")
    add.add_argument("secret")
    add.add_argument("--users", default="users.json")
    add.set_defaults(func=cmd_idp)
    idp_serve = idp_sub.add_parser("serve")
    idp_serve.add_argument("--users", default="users.json")
    idp_serve.add_argument("--host", default="127.0.0.1")
    idp_serve.add_argument("--port", type=int, default=8700)
    idp_serve.add_argument("--key-bits", type=int, default=cc.DEFAULT_KEY_BITS, choices=cc.SUPPORTED_KEY_BITS)
    idp_serve.set_defaults(func=cmd_idp)
    return parser


def _error_code(exc: Exception) -> str:
    if isinstance(exc, CliError):
        return exc.code
    code = getattr(exc, "code", None)
    if isinstance(code, str):
        return code
    if isinstance(exc, ep.CalibrationError):
        return "calibration"
    if isinstance(exc, OSError):
        return "io-error"
    return type(exc).__name__


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error
        print(json.dumps({"error": _error_code(exc), "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
