"""A single relay on a real event loop, wired to a local simulated full node.

It accepts authenticated user transactions on a TCP port and talks to the
full node over the authenticated record channel. There is no live p2p or
mesh transport; outgoing traffic is counted and logged.
"""
from __future__ import annotations

import asyncio
import logging
import os
import time
from collections import Counter

from ..core import PeerId
from .config import RelayConfig, load_relay_config
from .fullnode import FullNodeOracle, StreamFullNodeClient, serve_fullnode
from .node import RelayNode
from .userchan import serve_submissions

log = logging.getLogger(__name__)


class LoopHost:
    def __init__(self, loop: asyncio.AbstractEventLoop):
        self.loop = loop
        self.t0 = time.monotonic()
        self.sent: Counter = Counter()

    def now(self) -> int:
        return int((time.monotonic() - self.t0) * 1000)

    def schedule(self, delay_ms, fn, *args):
        return self.loop.call_later(delay_ms / 1000.0, fn, *args)

    def cancel(self, handle) -> None:
        handle.cancel()

    def send_p2p(self, peer, msg) -> None:
        self.sent["p2p"] += 1

    def send_mesh(self, relay, channel, data) -> None:
        self.sent[f"mesh_{channel}"] += 1
        log.info("mesh %s -> %s: %d bytes", channel, relay, len(data))

    def deliver_user(self, obj) -> None:
        self.sent["user"] += 1

    def disconnect(self, peer) -> None:
        pass

    def solicit(self, n: int) -> None:
        pass


async def serve(cfg: RelayConfig, host: str, user_port: int, fullnode_port: int, duration: float) -> Counter:
    secret = os.urandom(16)
    fn_server = await serve_fullnode(FullNodeOracle(), secret, host, fullnode_port)
    port = fn_server.sockets[0].getsockname()[1]
    client = StreamFullNodeClient(host, port, secret)
    lhost = LoopHost(asyncio.get_running_loop())
    node = RelayNode(PeerId(cfg.region or "relay"), cfg, lhost, client)
    for peer in cfg.mesh_peers:
        node.add_mesh_peer(PeerId(peer))
    fid = await asyncio.to_thread(node.fork_id, lhost.now())
    log.info("fork id %s", fid)
    user_server = await serve_submissions(node.submit_record, host, user_port)
    print(f"relay up: users on {host}:{user_server.sockets[0].getsockname()[1]}, full node on {host}:{port}",
          flush=True)
    try:
        if duration > 0:
            await asyncio.sleep(duration)
        else:
            await asyncio.Event().wait()
    finally:
        user_server.close()
        fn_server.close()
        client.close()
    counts = lhost.sent + node.stats
    print(" ".join(f"{k}={v}" for k, v in sorted(counts.items())), flush=True)
    return counts


def run_standalone(args) -> int:
    cfg = load_relay_config(args.config) if args.config else RelayConfig()
    try:
        asyncio.run(serve(cfg, args.host, args.user_port, args.fullnode_port, args.duration))
    except KeyboardInterrupt:
        pass
    return 0
