"""Asyncio TCP transport for :class:`~usagelog.node_runtime.Node`.

Frames are ``u32 length | u16 sender-address length | sender address | envelope``.
Addresses are ``host:port`` strings; a node's address is where it listens.
"""

from __future__ import annotations

import asyncio
import logging
import struct
from typing import Any, Callable

from .node_runtime import Node

log = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024


def encode_frame(src: str, data: bytes) -> bytes:
    address = src.encode()
    return struct.pack(">IH", len(address) + 2 + len(data), len(address)) + address + data


async def read_frame(reader: asyncio.StreamReader) -> tuple[str, bytes]:
    (length,) = struct.unpack(">I", await reader.readexactly(4))
    if length > MAX_FRAME or length < 2:
        raise ValueError("bad frame length")
    payload = await reader.readexactly(length)
    (address_length,) = struct.unpack(">H", payload[:2])
    return payload[2 : 2 + address_length].decode(), payload[2 + address_length :]


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


class AsyncioEnv:
    """Node environment backed by the running event loop and real sockets."""

    def __init__(self, loop: asyncio.AbstractEventLoop | None = None) -> None:
        self.loop = loop or asyncio.get_event_loop()
        self.node: Node | None = None
        self._queues: dict[str, asyncio.Queue[bytes]] = {}
        self._tasks: set[asyncio.Task] = set()

    def now(self) -> float:
        return self.loop.time()

    def send(self, src: str, dst: str, data: bytes, *, flow: str, overlay: bool) -> None:
        queue = self._queues.get(dst)
        if queue is None:
            queue = self._queues[dst] = asyncio.Queue()
            task = self.loop.create_task(self._sender(dst, queue))
            self._tasks.add(task)
            task.add_done_callback(self._tasks.discard)
        queue.put_nowait(encode_frame(src, data))

    async def _sender(self, dst: str, queue: asyncio.Queue[bytes]) -> None:
        host, port = split_address(dst)
        writer: asyncio.StreamWriter | None = None
        closed: asyncio.Task | None = None
        try:
            while True:
                frame = await queue.get()
                for _ in range(2):
                    if writer is None or closed.done():
                        # (re)connect; a peer that restarted drops our old socket
                        if writer is not None:
                            writer.close()
                        try:
                            reader, writer = await asyncio.open_connection(host, port)
                        except OSError as exc:
                            log.info("cannot reach %s: %s", dst, exc)
                            self._queues.pop(dst, None)
                            if self.node is not None:
                                self.node.on_unreachable(dst)
                            return
                        closed = self.loop.create_task(reader.read())
                    try:
                        writer.write(frame)
                        await writer.drain()
                        break
                    except OSError:
                        writer = None
        except asyncio.CancelledError:
            self._queues.pop(dst, None)
        finally:
            if closed is not None:
                closed.cancel()
            if writer is not None:
                writer.close()

    def call_later(self, delay: float, callback: Callable[[], None]) -> None:
        self.loop.call_later(max(0.0, delay), callback)

    def run_slow(self, cost: float, work: Callable[[], Any], done: Callable[[Any], None]) -> None:
        future = self.loop.run_in_executor(None, work)
        future.add_done_callback(lambda f: done(f.result()))

    async def close(self) -> None:
        for task in list(self._tasks):
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)


async def serve(node: Node, env: AsyncioEnv) -> asyncio.AbstractServer:
    """Accept peer connections and feed inbound frames to ``node``."""
    env.node = node

    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                src, data = await read_frame(reader)
                node.on_message(src, data)
        except (asyncio.IncompleteReadError, ConnectionError, ValueError):
            pass
        finally:
            writer.close()

    host, port = split_address(node.address)
    return await asyncio.start_server(handle, host, port)


async def wait_for(handle, timeout: float | None = None) -> Any:
    """Await a node :class:`~usagelog.node_runtime.Pending` from asyncio code."""
    loop = asyncio.get_running_loop()
    future: asyncio.Future = loop.create_future()
    handle.add_callback(lambda h: future.done() or future.set_result(h))
    done = await asyncio.wait_for(future, timeout)
    return done
