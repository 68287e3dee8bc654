"""Relay node state machine.

The node owns its caches and peering state and talks to the outside world
only through a host object (see ``RelayHost``), so the same logic runs in
the simulator and behind real sockets. All handlers run on one logical
event loop; timers are requested from the host.
"""
from __future__ import annotations

import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Set

from .. import wire
from ..caches import BlockCache, InsertResult, TxCache
from ..core import (BLOCK, TX, Announcement, Block, Hash32, Message, PeerId, Request,
                    Response, Transaction, announcement_for, decode_object, encode_object,
                    make_tx)
from ..peering import PIOPLAT, NeighborSelector
from . import userchan
from .config import RelayConfig
from .forkid import ForkId, Status, compatible
from .fullnode import FullNodeClient, FullNodeUnavailable

log = logging.getLogger(__name__)

# mesh channels; a frame's kind is implied by the channel it arrives on
CH_BLOCK = "block"
CH_TX = "tx"
CH_TX_UDP = "tx-udp"
CH_USER = "user"
TCP_CHANNELS = (CH_BLOCK, CH_TX, CH_USER)


class RelayHost(Protocol):
    def now(self) -> int: ...
    def schedule(self, delay_ms: int, fn, *args) -> Any: ...
    def cancel(self, handle: Any) -> None: ...
    def send_p2p(self, peer: PeerId, msg) -> None: ...
    def send_mesh(self, relay: PeerId, channel: str, data: bytes) -> None: ...
    def deliver_user(self, obj: Message) -> None: ...
    def disconnect(self, peer: PeerId) -> None: ...
    def solicit(self, n: int) -> None: ...


class MeshLink:
    """Keystream cursors for both directions of every TCP channel to one relay."""

    def __init__(self, key: bytes):
        self.out = {ch: wire.KeystreamState(key) for ch in TCP_CHANNELS}
        self.inbound = {ch: wire.KeystreamState(key) for ch in TCP_CHANNELS}
        self.integrity_errors = 0

    def reset(self) -> None:
        for ks in (*self.out.values(), *self.inbound.values()):
            ks.reset()


@dataclass
class _Fetch:
    kind: str
    number: Optional[int]
    announcers: List[PeerId] = field(default_factory=list)
    tried: Set[PeerId] = field(default_factory=set)
    timer: Any = None
    asking: Optional[PeerId] = None


class RelayNode:
    def __init__(self, id: PeerId, cfg: RelayConfig, host: RelayHost, fullnode: FullNodeClient,
                 seed: int = 0, selector: Optional[NeighborSelector] = None):
        self.id = id
        self.cfg = cfg
        self.host = host
        self.fullnode = fullnode
        self.rng = random.Random(seed)
        self.block_cache = BlockCache(cfg.block_slots)
        self.tx_cache = TxCache(cfg.tx_expire_ms)
        self.selector = selector or NeighborSelector(cfg.selection, PIOPLAT)
        self.peers: Set[PeerId] = set()
        self.known: Dict[PeerId, Set[Hash32]] = {}
        self.mesh: Dict[PeerId, MeshLink] = {}
        self.fetches: Dict[Hash32, _Fetch] = {}
        self.known_fork_hashes: Set[bytes] = set()
        self._forkid: Optional[ForkId] = None
        self._forkid_at: Optional[int] = None
        self._udp_counter = 0
        self._round_timer = None
        self.stats: Counter = Counter()
        self.churn: List[int] = []

    # -- membership ---------------------------------------------------------

    @property
    def k(self) -> int:
        return self.cfg.selection.k

    def add_mesh_peer(self, relay: PeerId) -> None:
        self.mesh[relay] = MeshLink(self.cfg.mesh_key)

    def remove_mesh_peer(self, relay: PeerId) -> None:
        self.mesh.pop(relay, None)

    def fork_id(self, now: int) -> Optional[ForkId]:
        if self._forkid is not None and now - self._forkid_at < self.cfg.block_interval_ms:
            return self._forkid
        try:
            fid = self.fullnode.get_fork_id()
        except FullNodeUnavailable:
            if self._forkid is None:
                log.warning("%s: fork id unavailable, deferring handshakes", self.id)
            else:
                log.warning("%s: full node unreachable, serving stale fork id", self.id)
            return self._forkid
        self._forkid, self._forkid_at = fid, now
        return fid

    def handshake(self, candidate: PeerId, their: Status, now: int) -> bool:
        if candidate in self.peers:
            return False
        if not self.selector.admit(candidate, now):
            self.stats["refused_blocklist"] += 1
            return False
        ours = self.fork_id(now)
        if ours is None or not compatible(ours, their.fork_id, self.known_fork_hashes):
            self.stats["refused_forkid"] += 1
            return False
        if len(self.peers) >= self.k:
            self.stats["refused_full"] += 1
            return False
        self.peers.add(candidate)
        self.known[candidate] = set()
        return True

    def status(self, now: int) -> Optional[Status]:
        fid = self.fork_id(now)
        return Status(fid) if fid is not None else None

    def disconnect(self, peer: PeerId) -> None:
        if peer not in self.peers:
            return
        self.peers.discard(peer)
        self.known.pop(peer, None)
        self.selector.forget(peer)
        for f in self.fetches.values():
            if peer in f.announcers:
                f.announcers.remove(peer)
        self.host.disconnect(peer)

    def on_peer_disconnected(self, peer: PeerId) -> None:
        """The remote side closed the connection."""
        self.peers.discard(peer)
        self.known.pop(peer, None)
        self.selector.forget(peer)

    # -- helpers ------------------------------------------------------------

    def is_cached(self, h: Hash32) -> bool:
        return h in self.tx_cache or h in self.block_cache

    def _cache(self, obj: Message, now: int) -> None:
        if obj.kind == BLOCK:
            self.block_cache.insert(obj)
        else:
            self.tx_cache.put(obj, now)

    def _record(self, kind: str, h: Hash32, peer: PeerId, now: int) -> None:
        if peer not in self.peers:
            return
        self.known[peer].add(h)
        if kind == BLOCK:
            self.selector.on_receive_block(h, peer, now)
        else:
            self.selector.on_receive_tx(h, peer, now)

    def _send(self, peer: PeerId, msg, h: Hash32) -> None:
        self.known[peer].add(h)
        self.host.send_p2p(peer, msg)

    def _gossip(self, obj: Message, full_to_all: bool = False) -> None:
        h = obj.hash
        eligible = [p for p in sorted(self.peers) if h not in self.known[p]]
        if full_to_all:
            full = eligible
        else:
            full = self.rng.sample(eligible, math.isqrt(len(eligible)))
        chosen = set(full)
        ann = announcement_for(obj)
        for p in eligible:
            if p in chosen:
                self._send(p, obj, h)
                self.stats["sent_full"] += 1
            else:
                self._send(p, ann, h)
                self.stats["sent_announce"] += 1

    def _gossip_later(self, h: Hash32, kind: str) -> None:
        obj = self._lookup(kind, h)
        if obj is not None:
            self._gossip(obj)

    def _lookup(self, kind: str, h: Hash32) -> Optional[Message]:
        return self.block_cache.get_by_hash(h) if kind == BLOCK else self.tx_cache.get(h)

    def _cancel_fetch(self, h: Hash32) -> None:
        f = self.fetches.pop(h, None)
        if f is not None and f.timer is not None:
            self.host.cancel(f.timer)

    def _broadcast_mesh(self, obj: Message, user: bool = False) -> None:
        payload = encode_object(obj)
        for relay in sorted(self.mesh):
            link = self.mesh[relay]
            if user:
                ch = CH_USER
            elif obj.kind == BLOCK:
                ch = CH_BLOCK
            elif wire.transport_for(TX, len(payload), self.cfg.udp_prefix) == wire.UDP:
                ch = CH_TX_UDP
            else:
                ch = CH_TX
            if ch == CH_TX_UDP:
                data = wire.encode_udp(obj.hash, payload, self.cfg.mesh_key, self._udp_counter)
                self._udp_counter += wire.udp_blocks_used(len(payload))
            else:
                data = wire.encode(obj.hash, payload, link.out[ch])
                if user:
                    data += wire.USER_TX_MARK
            self.host.send_mesh(relay, ch, data)
            self.stats["mesh_sent"] += 1

    # -- p2p side -----------------------------------------------------------

    def on_p2p_full_object(self, obj: Message, frm: PeerId) -> None:
        now = self.host.now()
        h = obj.hash
        self._record(obj.kind, h, frm, now)
        if self.is_cached(h):
            self.stats["dup_p2p"] += 1
            return
        self._cancel_fetch(h)
        self._broadcast_mesh(obj)
        self._cache(obj, now)
        self.host.deliver_user(obj)
        self.host.schedule(self.cfg.gossip_delay_ms, self._gossip_later, h, obj.kind)
        if obj.kind == BLOCK:
            self.host.schedule(self.cfg.ddos_delay_ms, self.ddos_check, h, frm)

    def on_p2p_announcement(self, ann: Announcement, frm: PeerId) -> None:
        now = self.host.now()
        self._record(ann.kind, ann.hash, frm, now)
        if self.is_cached(ann.hash) or frm not in self.peers:
            return
        f = self.fetches.get(ann.hash)
        if f is None:
            f = self.fetches[ann.hash] = _Fetch(ann.kind, ann.number)
            f.timer = self.host.schedule(self.cfg.announce_wait_ms, self._fetch_next, ann.hash)
        if frm not in f.announcers:
            f.announcers.append(frm)

    def _fetch_next(self, h: Hash32) -> None:
        f = self.fetches.get(h)
        if f is None or self.is_cached(h):
            self.fetches.pop(h, None)
            return
        options = [p for p in f.announcers if p in self.peers and p not in f.tried]
        if not options:
            self.fetches.pop(h, None)
            return
        peer = self.rng.choice(options)
        f.tried.add(peer)
        f.asking = peer
        part = "header" if f.kind == BLOCK else "full"
        self.host.send_p2p(peer, Request(f.kind, hash=h, number=f.number, part=part))
        f.timer = self.host.schedule(self.cfg.fetch_timeout_ms, self._fetch_timeout, h, peer)

    def _fetch_timeout(self, h: Hash32, peer: PeerId) -> None:
        f = self.fetches.get(h)
        if f is None or f.asking != peer:
            return
        self.stats["fetch_timeouts"] += 1
        self.disconnect(peer)
        self._fetch_next(h)

    def on_p2p_response(self, resp: Response, frm: PeerId) -> None:
        req = resp.request
        h = req.hash
        f = self.fetches.get(h)
        if not resp.found:
            if f is not None and f.asking == frm:
                self.host.cancel(f.timer)
                self._fetch_next(h)
            return
        obj = resp.objects[0]
        if req.part == "header" and f is not None and f.asking == frm:
            self.host.cancel(f.timer)
            self.host.send_p2p(frm, Request(BLOCK, hash=h, number=req.number, part="body"))
            f.timer = self.host.schedule(self.cfg.fetch_timeout_ms, self._fetch_timeout, h, frm)
            return
        if req.part == "header":
            return
        self.on_p2p_full_object(obj, frm)

    def on_peer_request(self, req: Request, frm: PeerId) -> Response:
        objs: List[Message] = []
        if req.kind == BLOCK:
            if req.hash is not None:
                b = self.block_cache.get_by_hash(req.hash)
                objs = [b] if b is not None else []
            elif req.number is not None:
                objs = self.block_cache.get(req.number)
        else:
            tx = self.tx_cache.get(req.hash)
            objs = [tx] if tx is not None else []
        if objs:
            self.stats["served_cache"] += 1
        else:
            try:
                if req.kind == BLOCK:
                    b = self.fullnode.get_block(hash=req.hash, number=req.number if req.hash is None else None)
                    objs = [b] if b is not None else []
                else:
                    tx = self.fullnode.get_tx(req.hash)
                    objs = [tx] if tx is not None else []
                self.stats["served_redirect"] += 1
            except FullNodeUnavailable:
                self.stats["served_degraded"] += 1
                log.warning("%s: full node unreachable, answering not-found", self.id)
        if frm in self.known:
            for o in objs:
                self.known[frm].add(o.hash)
        return Response(req, tuple(objs))

    # -- mesh side ----------------------------------------------------------

    def on_relay_frame(self, data: bytes, channel: str, frm: PeerId) -> None:
        link = self.mesh.get(frm)
        if link is None:
            self.stats["frames_unknown_relay"] += 1
            return
        marked = False
        try:
            if channel == CH_TX_UDP:
                length, h = wire.decode_udp_header(data, self.cfg.mesh_key)
                if self.is_cached(h):
                    self.stats["frames_dedup"] += 1
                    return
                _, payload = wire.decode_udp(data, self.cfg.mesh_key)
            else:
                if channel == CH_USER:
                    marked = data[-1:] == wire.USER_TX_MARK
                    data = data[:-1]
                ks = link.inbound[channel]
                start = ks.cursor
                try:
                    length, h = wire.decode_header(data[:wire.HEADER_SIZE], ks)
                    if self.is_cached(h):
                        self.stats["frames_dedup"] += 1
                        return
                    payload = wire.decode_payload(data[wire.HEADER_SIZE:], length, ks)
                finally:
                    ks.cursor = start + len(data)
            kind = BLOCK if channel == CH_BLOCK else TX
            obj = decode_object(kind, payload)
            if obj.hash != h:
                raise wire.IntegrityError("hash field does not match payload")
        except (wire.FrameError, ValueError):
            link.integrity_errors += 1
            self.stats["frames_corrupt"] += 1
            return
        now = self.host.now()
        self._cancel_fetch(h)
        # our immediate gossip silences neighbors for this hash, so it says nothing about them
        self.selector.exclude(kind, h)
        self.host.deliver_user(obj)
        self._gossip(obj, full_to_all=marked)
        self._cache(obj, now)

    # -- users --------------------------------------------------------------

    def submit_user_tx(self, tx: Transaction, auth_tag: bytes) -> bool:
        if not userchan.verify(self.cfg.hmac_salt, tx.body, auth_tag):
            self.stats["user_rejected"] += 1
            return False
        now = self.host.now()
        self._cancel_fetch(tx.hash)
        self.selector.exclude(TX, tx.hash)
        self._gossip(tx, full_to_all=True)
        self._broadcast_mesh(tx, user=True)
        self._cache(tx, now)
        self.stats["user_accepted"] += 1
        return True

    def submit_record(self, body: bytes, tag: bytes) -> bool:
        return self.submit_user_tx(make_tx(body), tag)

    # -- background duties --------------------------------------------------

    def ddos_check(self, h: Hash32, origin: PeerId, retried: bool = False) -> None:
        try:
            if self.fullnode.has_block(h):
                return
            b = self.block_cache.get_by_hash(h)
            if b is None or self.fullnode.validate_block(b):
                return
        except FullNodeUnavailable:
            if not retried:
                self.host.schedule(self.cfg.ddos_delay_ms, self.ddos_check, h, origin, True)
            else:
                log.warning("%s: skipping validity check of %s, full node down", self.id, h.short())
            return
        self.stats["invalid_blocks"] += 1
        self.disconnect(origin)
        self.selector.blocklist.add(origin, self.host.now())

    def start(self) -> None:
        self._round_timer = self.host.schedule(self.cfg.selection.delta_ms, self._round)

    def stop(self) -> None:
        if self._round_timer is not None:
            self.host.cancel(self._round_timer)
            self._round_timer = None

    def _round(self) -> None:
        self.selection_round()
        self._round_timer = self.host.schedule(self.cfg.selection.delta_ms, self._round)

    def selection_round(self) -> Set[PeerId]:
        now = self.host.now()
        dropped = self.selector.run_round(self.peers, now, self.rng)
        for p in sorted(dropped):
            self.disconnect(p)
        self.churn.append(len(dropped))
        if len(self.peers) < self.k:
            self.host.solicit(self.k - len(self.peers))
        return dropped
