"""Transparent TCP relay in front of the decoy services.

Every chunk read from either side is mirrored to the capture before it is
forwarded, byte for byte.  The services only see the proxy's upstream socket,
so a `PeerRegistry` maps that socket back to the original client address for
their event attribution.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import time
from dataclasses import dataclass

from .pcap import Direction

logger = logging.getLogger(__name__)

CHUNK_SIZE = 65536


@dataclass(frozen=True)
class Route:
    name: str
    listen_port: int
    upstream_host: str
    upstream_port: int


class PeerRegistry:
    """Upstream local address -> original client address."""

    def __init__(self):
        self._peers: dict[tuple[str, int], tuple[str, int]] = {}

    def register(self, upstream_local, client) -> None:
        self._peers[tuple(upstream_local[:2])] = tuple(client[:2])

    def unregister(self, upstream_local) -> None:
        self._peers.pop(tuple(upstream_local[:2]), None)

    def resolve(self, peer) -> tuple[str, int]:
        if peer is None:
            return ("unknown", 0)
        peer = tuple(peer[:2])
        return self._peers.get(peer, peer)


def peer_label(addr) -> str:
    return f"{addr[0]}:{addr[1]}"


class TransparentProxy:
    def __init__(self, routes, capture=None, events=None, host: str = "127.0.0.1",
                 registry: PeerRegistry | None = None, clock=time.time,
                 connect_timeout: float = 5.0):
        self.routes = list(routes)
        self.capture = capture
        self.events = events
        self.host = host
        self.registry = registry or PeerRegistry()
        self.clock = clock
        self.connect_timeout = connect_timeout
        self.bound: dict[str, int] = {}
        self.relayed = {Direction.TO_SERVICE: 0, Direction.TO_CLIENT: 0}
        self._servers: list[asyncio.base_events.Server] = []
        self._ids = itertools.count(1)
        self._tasks: set[asyncio.Task] = set()

    def _emit(self, kind: str, severity: str = "info", **attrs) -> None:
        if self.events is not None:
            self.events.emit("proxycap", kind, severity=severity, **attrs)

    async def start(self) -> dict[str, int]:
        try:
            for route in self.routes:
                server = await asyncio.start_server(
                    lambda r, w, route=route: self._handle(r, w, route), self.host, route.listen_port
                )
                self._servers.append(server)
                self.bound[route.name] = server.sockets[0].getsockname()[1]
        except OSError:
            await self.stop()
            raise
        return dict(self.bound)

    async def stop(self) -> None:
        for server in self._servers:
            server.close()
        for server in self._servers:
            await server.wait_closed()
        self._servers.clear()
        for task in list(self._tasks):
            task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)

    async def _handle(self, reader, writer, route: Route) -> None:
        task = asyncio.current_task()
        self._tasks.add(task)
        try:
            await self._relay_connection(reader, writer, route)
        finally:
            self._tasks.discard(task)

    async def _relay_connection(self, c_reader, c_writer, route: Route) -> None:
        conn_id = next(self._ids)
        client = tuple(c_writer.get_extra_info("peername")[:2])
        front = tuple(c_writer.get_extra_info("sockname")[:2])
        try:
            s_reader, s_writer = await asyncio.wait_for(
                asyncio.open_connection(route.upstream_host, route.upstream_port), self.connect_timeout
            )
        except (OSError, asyncio.TimeoutError) as exc:
            self._emit("upstream_unreachable", severity="error", conn=conn_id, client=peer_label(client),
                       service=route.name, error=str(exc))
            c_writer.close()
            return
        upstream_local = s_writer.get_extra_info("sockname")
        self.registry.register(upstream_local, client)
        self._emit("conn_open", conn=conn_id, client=peer_label(client), service=route.name, port=front[1])
        counts = {Direction.TO_SERVICE: 0, Direction.TO_CLIENT: 0}

        async def pump(src, dst, direction):
            try:
                while True:
                    data = await src.read(CHUNK_SIZE)
                    if not data:
                        break
                    if self.capture is not None:
                        self.capture.capture(conn_id, direction, data, client, front, self.clock())
                    counts[direction] += len(data)
                    self.relayed[direction] += len(data)
                    dst.write(data)
                    await dst.drain()
            except (ConnectionError, OSError):
                pass
            finally:
                try:
                    if dst.can_write_eof():
                        dst.write_eof()
                except (OSError, RuntimeError):
                    pass

        try:
            await asyncio.gather(
                pump(c_reader, s_writer, Direction.TO_SERVICE),
                pump(s_reader, c_writer, Direction.TO_CLIENT),
            )
        finally:
            for w in (s_writer, c_writer):
                w.close()
            for w in (s_writer, c_writer):
                try:
                    await w.wait_closed()
                except (OSError, ConnectionError):
                    pass
            self.registry.unregister(upstream_local)
            self._emit("conn_close", conn=conn_id, client=peer_label(client), service=route.name,
                       bytes_to_service=counts[Direction.TO_SERVICE],
                       bytes_to_client=counts[Direction.TO_CLIENT])
