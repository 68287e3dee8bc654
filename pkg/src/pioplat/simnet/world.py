"""Discrete-event simulation of a gossip network with relay nodes.

Time is integer milliseconds. Events run in (time, insertion order), so a
run is fully determined by its config and seed. Random choices that shape
propagation (link jitter, fanout subsets, fetch targets) are derived from
hashes of (seed, node, peer, message) rather than drawn from a shared
stream, so they do not depend on event interleaving.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import math
import random
import struct
import zlib
from collections import Counter
from typing import Dict, List, Optional, Set

from ..core import (BLOCK, TX, Announcement, Block, Hash32, Message, PeerId, Request,
                    Response, Transaction, make_block, make_tx)
from ..peering import PERI, PIOPLAT, RANDOM, NeighborSelector, SelectionConfig
from ..relay import userchan
from ..relay.config import RelayConfig
from ..relay.fullnode import FullNodeOracle
from ..relay.node import CH_BLOCK, CH_TX_UDP, RelayNode
from .config import SimConfig
from .metrics import MessageInfo, MetricsReport

log = logging.getLogger(__name__)

_PAIR = 1 << 16
_U16 = 1 << 16

OBSERVER = "observer"
CONTROL = "control"


class Engine:
    """Event queue with cancellable entries."""

    def __init__(self):
        self.q: list = []
        self.now = 0
        self._seq = itertools.count()
        self.cancelled: Set[int] = set()
        self.processed = 0

    def at(self, t: int, fn, *args) -> int:
        seq = next(self._seq)
        heapq.heappush(self.q, (t, seq, fn, args))
        return seq

    def after(self, delay: int, fn, *args) -> int:
        return self.at(self.now + delay, fn, *args)

    def cancel(self, handle: Optional[int]) -> None:
        if handle is not None:
            self.cancelled.add(handle)

    def run(self, until: int) -> None:
        q = self.q
        cancelled = self.cancelled
        pop = heapq.heappop
        while q and q[0][0] <= until:
            t, seq, fn, args = pop(q)
            if cancelled and seq in cancelled:
                cancelled.discard(seq)
                continue
            self.now = t
            self.processed += 1
            fn(*args)
        self.now = max(self.now, until)


class FullNode:
    __slots__ = ("idx", "pid", "region", "role", "max_peers", "peers", "has", "fetch",
                 "selector", "val_block", "val_tx", "watch", "records")

    def __init__(self, idx, region, role, max_peers, val_block, val_tx):
        self.idx = idx
        self.pid = _pid(idx)
        self.region = region
        self.role = role
        self.max_peers = max_peers
        self.peers: Set[int] = set()
        self.has: Dict[Hash32, int] = {}
        self.fetch: Dict[Hash32, list] = {}
        self.selector: Optional[NeighborSelector] = None
        self.val_block = val_block
        self.val_tx = val_tx
        self.watch: Optional[str] = None
        self.records = False  # needs every announcement delivered

    is_relay = False


class RelaySlot:
    """World-side record of a relay plus the host interface it talks through."""

    is_relay = True

    def __init__(self, world: "SimWorld", idx: int, region: int):
        self.world = world
        self.idx = idx
        self.pid = _pid(idx)
        self.region = region
        self.role = "relay"
        self.watch: Optional[str] = None
        self.node: Optional[RelayNode] = None
        self.records = True

    @property
    def peers(self) -> Set[int]:
        return {self.world.index[p] for p in self.node.peers}

    @property
    def max_peers(self) -> int:
        return self.node.k

    # RelayHost
    def now(self) -> int:
        return self.world.engine.now

    def schedule(self, delay_ms, fn, *args):
        return self.world.engine.after(int(delay_ms), fn, *args)

    def cancel(self, handle) -> None:
        self.world.engine.cancel(handle)

    def send_p2p(self, peer: PeerId, msg) -> None:
        self.world._relay_send(self.idx, self.world.index[peer], msg)

    def send_mesh(self, relay: PeerId, channel: str, data: bytes) -> None:
        self.world._mesh_send(self.idx, self.world.index[relay], channel, data)

    def deliver_user(self, obj: Message) -> None:
        self.world._observe(self, obj.hash)

    def disconnect(self, peer: PeerId) -> None:
        self.world._unlink(self.idx, self.world.index[peer], notify_relay=False)

    def solicit(self, n: int) -> None:
        self.world._refill(self.idx, n)


def _pid(idx: int) -> PeerId:
    return PeerId(f"n{idx:05d}", f"10.{(idx >> 8) & 255}.{idx & 255}.1")


class SimWorld:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.seed = cfg.seed
        self.engine = Engine()
        self.oracle = FullNodeOracle()
        self.nodes: List = []
        self.index: Dict[PeerId, int] = {}
        self.known: Dict[Hash32, Set[int]] = {}
        self.objects: Dict[Hash32, Message] = {}
        self.hkey: Dict[Hash32, int] = {}
        self.report = MetricsReport(observers=[OBSERVER, CONTROL])
        self.report.receipts = {OBSERVER: {}, CONTROL: {}}
        self.counters: Counter = Counter()
        self.transcript: Optional[list] = [] if cfg.record_transcript else None
        self.miners: List[int] = []
        self.broadcasters: List[int] = []
        self.relays: List[int] = []
        self.control: Optional[int] = None
        self.observer: Optional[int] = None
        self.lat = [[float(x) for x in r.latency_ms] for r in cfg.regions]
        self.region_idx = {r.name: i for i, r in enumerate(cfg.regions)}
        self.warmup_end = int(cfg.duration_ms * cfg.warmup_frac)
        self._fifo: Dict[tuple, int] = {}
        self._races: List[dict] = []
        self._rng_topo = random.Random(f"{self.seed}-topology")
        self._rng_churn: Dict[int, random.Random] = {}
        self._mesh_key = struct.pack(">QQ", self.seed & (2 ** 64 - 1), 0x5049_4F50_4C41_5400)
        self._salt = b"simulated-user-salt"
        self._block_parent = bytes(32)
        self._block_number = 0
        self._built = False

    # -- construction -----------------------------------------------------

    def build(self) -> "SimWorld":
        cfg = self.cfg
        for ri, region in enumerate(cfg.regions):
            for role, count in (("miner", region.miners), ("broadcaster", region.broadcasters),
                                ("plain", region.plain)):
                for _ in range(count):
                    cap = cfg.miner_max_peers if role == "miner" else cfg.max_peers
                    n = self._add_full(ri, role, cap)
                    if role == "miner":
                        self.miners.append(n.idx)
                    elif role == "broadcaster":
                        self.broadcasters.append(n.idx)
        full = list(range(len(self.nodes)))
        if cfg.miner_clique:
            for a, b in itertools.combinations(self.miners, 2):
                self._link(a, b)
        self._wire_random(full)
        self._bridge_components(full)

        obs_region = self.region_idx[cfg.observer_region]
        ctl = self._add_full(obs_region, "control", cfg.control_peers)
        self.control = ctl.idx
        ctl.watch = CONTROL
        if cfg.control_strategy != RANDOM:
            ctl.selector = NeighborSelector(self._selection(cfg.sigma, cfg.control_peers), cfg.control_strategy)
            ctl.records = True
        self._dial(ctl.idx, cfg.control_peers, full)

        if cfg.strategy == PIOPLAT:
            for name in cfg.relay_regions:
                self._add_relay(self.region_idx[name])
            self.observer = self.relays[0]
            mesh = self.relays[:cfg.mesh_size if cfg.mesh_size is not None else len(self.relays)]
            for a in mesh:
                for b in mesh:
                    if a != b:
                        self.nodes[a].node.add_mesh_peer(self.nodes[b].pid)
            for r in self.relays:
                self._refill(r, self.cfg.relay_k)
                self.nodes[r].node.start()
        else:
            obs = self._add_full(obs_region, "observer", cfg.relay_k)
            if cfg.strategy != RANDOM:
                obs.selector = NeighborSelector(self._selection(cfg.sigma, cfg.relay_k), cfg.strategy)
                obs.records = True
            self._dial(obs.idx, cfg.relay_k, full)
            self.observer = obs.idx
        self.nodes[self.observer].watch = OBSERVER
        for n in (self.control, self.observer):
            node = self.nodes[n]
            if not node.is_relay and node.selector is not None:
                self.engine.at(cfg.delta_ms, self._full_round, n)

        self._schedule_blocks()
        self._schedule_txs()
        self._schedule_races()
        self._built = True
        return self

    def _selection(self, sigma: float, k: int) -> SelectionConfig:
        c = self.cfg
        return SelectionConfig(k=k, rho=c.rho, sigma=sigma, delta_ms=c.delta_ms,
                               miss_penalty_ms=c.miss_penalty_ms, score_percentile=c.score_percentile)

    def _add_full(self, region: int, role: str, cap: int) -> FullNode:
        n = FullNode(len(self.nodes), region, role, cap, self.cfg.validation_block_ms,
                     self.cfg.validation_tx_ms)
        self.nodes.append(n)
        self.index[n.pid] = n.idx
        return n

    def _add_relay(self, region: int) -> RelaySlot:
        slot = RelaySlot(self, len(self.nodes), region)
        c = self.cfg
        rcfg = RelayConfig(
            selection=self._selection(c.region_sigma(c.region_names[region]), c.relay_k),
            region=c.region_names[region], announce_wait_ms=c.announce_wait_ms,
            gossip_delay_ms=c.gossip_delay_ms, ddos_delay_ms=c.ddos_delay_ms,
            block_interval_ms=c.block_interval_ms, fetch_timeout_ms=c.fetch_timeout_ms,
            udp_prefix=True, mesh_key=self._mesh_key, hmac_salt=self._salt)
        slot.node = RelayNode(slot.pid, rcfg, slot, self.oracle, seed=hash((self.seed, slot.idx)))
        self.nodes.append(slot)
        self.index[slot.pid] = slot.idx
        self.relays.append(slot.idx)
        return slot

    def _free(self, idx: int) -> bool:
        n = self.nodes[idx]
        if n.is_relay:
            return len(n.node.peers) < n.max_peers
        return len(n.peers) < n.max_peers

    def _link(self, a: int, b: int) -> None:
        self.nodes[a].peers.add(b)
        self.nodes[b].peers.add(a)

    def _wire_random(self, members: List[int]) -> None:
        rng = self._rng_topo
        order = list(members)
        rng.shuffle(order)
        for a in order:
            targets = [b for b in members if b != a and b not in self.nodes[a].peers]
            rng.shuffle(targets)
            made = 0
            for b in targets:
                if made >= self.cfg.outbound:
                    break
                if self._free(a) and self._free(b):
                    self._link(a, b)
                    made += 1

    def _bridge_components(self, members: List[int]) -> None:
        comps = components({i: self.nodes[i].peers for i in members})
        main = comps[0]
        for comp in comps[1:]:
            a = min(comp)
            b = self._rng_topo.choice(sorted(main))
            self._link(a, b)
            main = main | comp

    def _dial(self, idx: int, want: int, candidates: List[int]) -> None:
        node = self.nodes[idx]
        pool = [c for c in candidates if c != idx and c not in node.peers]
        self._rng_topo.shuffle(pool)
        for c in pool:
            if len(node.peers) >= want:
                break
            if self._free(c):
                self._link(idx, c)

    def _candidates(self) -> List[int]:
        return [i for i, n in enumerate(self.nodes)
                if not n.is_relay and n.role in ("miner", "broadcaster", "plain")]

    def _refill(self, idx: int, n: int) -> None:
        """Connect up to ``n`` new random peers to node ``idx`` (relay or selecting node)."""
        node = self.nodes[idx]
        pool = [c for c in self._candidates() if c not in node.peers]
        self._churn_rng(idx).shuffle(pool)
        now = self.engine.now
        made = 0
        for c in pool:
            if made >= n:
                break
            if not self._free(c):
                continue
            cand = self.nodes[c]
            if node.is_relay:
                status = node.node.status(now)
                if status is None or not node.node.handshake(cand.pid, status, now):
                    continue
                cand.peers.add(idx)
            else:
                if len(node.peers) >= node.max_peers or not node.selector.admit(cand.pid, now):
                    continue
                self._link(idx, c)
            made += 1

    def _churn_rng(self, idx: int) -> random.Random:
        # one stream per node, so one node's churn does not reshuffle another's
        rng = self._rng_churn.get(idx)
        if rng is None:
            rng = self._rng_churn[idx] = random.Random(f"{self.seed}-churn-{idx}")
        return rng

    def _unlink(self, a: int, b: int, notify_relay: bool = True) -> None:
        self._note("drop", a, b, "")
        for x, y in ((a, b), (b, a)):
            n = self.nodes[x]
            if n.is_relay:
                if notify_relay:
                    n.node.on_peer_disconnected(self.nodes[y].pid)
            else:
                n.peers.discard(y)
                if n.selector is not None:
                    n.selector.forget(self.nodes[y].pid)

    # -- sources ----------------------------------------------------------

    def _schedule_blocks(self) -> None:
        if not self.miners:
            return
        t = self.cfg.block_interval_ms
        while t <= self.cfg.duration_ms:
            self.engine.at(t, self._produce_block)
            t += self.cfg.block_interval_ms

    def producer_at(self, t: int) -> Optional[int]:
        """Miner producing the first block at or after time ``t``."""
        if not self.miners:
            return None
        k = max(1, -(-t // self.cfg.block_interval_ms))
        return self.miners[(k - 1) % len(self.miners)]

    def _produce_block(self) -> None:
        now = self.engine.now
        miner = self.miners[self._block_number % len(self.miners)]
        self._block_number += 1
        body = struct.pack(">QQI", self.seed & (2 ** 64 - 1), self._block_number, miner)
        body = body.ljust(self.cfg.block_body_bytes, b"\x00")
        b = make_block(self._block_number, self._block_parent, now, body)
        self._block_parent = b.hash
        self.oracle.add_block(b)
        self._register(b, now, number=b.number)
        self._originate(miner, b, full_to_all=self.cfg.miner_push_all)

    def _schedule_txs(self) -> None:
        c = self.cfg
        if not self.broadcasters or c.tx_rate_per_s <= 0:
            return
        rng = random.Random(f"{self.seed}-tx")
        t = 0.0
        stop = c.duration_ms - 5000
        while True:
            t += rng.expovariate(c.tx_rate_per_s / 1000.0)
            if t > stop:
                break
            origin = rng.choice(self.broadcasters)
            if rng.random() < c.large_tx_frac:
                size = rng.randint(1433, 4000)
            else:
                size = rng.randint(c.tx_size_min, c.tx_size_max)
            self.engine.at(int(t), self._inject_tx, origin, rng.randbytes(size))

    def _inject_tx(self, origin: int, body: bytes) -> None:
        tx = make_tx(body)
        if tx.hash in self.objects:
            return
        self.oracle.add_tx(tx)
        self._register(tx, self.engine.now)
        self._originate(origin, tx)

    def _register(self, obj: Message, now: int, number=None, track: bool = True) -> None:
        h = obj.hash
        self.objects[h] = obj
        self.hkey[h] = int.from_bytes(h[:8], "big")
        self.known[h] = set()
        if track and now >= self.warmup_end:
            self.report.messages[h.hex()] = MessageInfo(h.hex(), obj.kind, now, number)

    def _originate(self, idx: int, obj: Message, full_to_all: bool = False) -> None:
        node = self.nodes[idx]
        node.has[obj.hash] = self.engine.now
        self._observe(node, obj.hash)
        self._forward(idx, obj, full_to_all)

    # -- tx race ------------------------------------------------------------

    def _schedule_races(self) -> None:
        c = self.cfg
        if not c.race_trials:
            return
        if c.strategy != PIOPLAT:
            raise ValueError("the tx race needs the pioplat strategy")
        rng = random.Random(f"{self.seed}-race")
        start = max(self.warmup_end, c.delta_ms)
        for i in range(c.race_trials):
            t = start + i * c.race_interval_ms
            relay_body = b"race-relay" + rng.randbytes(120)
            base_body = b"race-base" + rng.randbytes(120)
            relay_first = rng.random() < 0.5
            entry = {"trial": i, "at": t, "relay_first": relay_first,
                     "relay_hash": make_tx(relay_body).hash, "base_hash": make_tx(base_body).hash}
            self._races.append(entry)
            at = t + int(round(c.user_latency_ms))
            submits = [(self._race_relay, relay_body), (self._race_base, base_body)]
            if not relay_first:
                submits.reverse()
            for fn, body in submits:
                self.engine.at(at, fn, body, entry)

    def _race_relay(self, body: bytes, entry: dict) -> None:
        entry["miner"] = self.producer_at(self.engine.now)
        tx = make_tx(body)
        self.oracle.add_tx(tx)
        self._register(tx, self.engine.now, track=False)
        self.nodes[self.observer].node.submit_record(body, userchan.sign(self._salt, body))

    def _race_base(self, body: bytes, entry: dict) -> None:
        entry["miner"] = self.producer_at(self.engine.now)
        tx = make_tx(body)
        self.oracle.add_tx(tx)
        self._register(tx, self.engine.now, track=False)
        self._originate(self.control, tx)

    def _race_results(self) -> List[dict]:
        out = []
        inf = math.inf
        for e in self._races:
            miner = self.nodes[e["miner"]]
            tr = miner.has.get(e["relay_hash"], inf)
            tb = miner.has.get(e["base_hash"], inf)
            relay_key = (tr, 0 if e["relay_first"] else 1)
            base_key = (tb, 1 if e["relay_first"] else 0)
            out.append({"trial": e["trial"], "miner": e["miner"], "relay_first": e["relay_first"],
                        "relay_ms": None if tr == inf else tr - e["at"],
                        "baseline_ms": None if tb == inf else tb - e["at"],
                        "winner": "relay" if relay_key < base_key else "baseline"})
        return out

    # -- links --------------------------------------------------------------

    def latency(self, a: int, b: int, hk: int, salt: int) -> int:
        base = self.lat[self.nodes[a].region][self.nodes[b].region]
        j = self.cfg.jitter
        if j:
            u = (hash((self.seed, a, b, hk, salt)) & 0xFFFF) / _U16
            base *= 1.0 + j * (2.0 * u - 1.0)
        return int(base + 0.5)

    def _note(self, *entry) -> None:
        if self.transcript is not None:
            self.transcript.append((self.engine.now,) + entry)

    def _send_full(self, src: int, dst: int, obj: Message) -> None:
        h = obj.hash
        self._note("full", src, dst, h.hex())
        node = self.nodes[dst]
        if not node.records and h in node.has:
            self.known[h].add(dst * _PAIR + src)
            self.counters["skipped_redundant"] += 1
            return
        self.engine.after(self.latency(src, dst, self.hkey[h], 1), self._recv_full, dst, src, obj)

    def _send_ann(self, src: int, dst: int, ann: Announcement) -> None:
        h = ann.hash
        self._note("ann", src, dst, h.hex())
        node = self.nodes[dst]
        if not node.records and h in node.has:
            self.known[h].add(dst * _PAIR + src)
            self.counters["skipped_redundant"] += 1
            return
        self.engine.after(self.latency(src, dst, self.hkey[h], 2), self._recv_ann, dst, src, ann)

    def _relay_send(self, src: int, dst: int, msg) -> None:
        if isinstance(msg, Announcement):
            self._send_ann(src, dst, msg)
        elif isinstance(msg, Request):
            self._note("req", src, dst, msg.hash.hex() if msg.hash else msg.number)
            hk = self.hkey.get(msg.hash, 0) if msg.hash else 0
            self.engine.after(self.latency(src, dst, hk, 3), self._recv_req, dst, src, msg)
        else:
            self._send_full(src, dst, msg)

    def _mesh_send(self, src: int, dst: int, channel: str, data: bytes) -> None:
        self.counters["mesh_frames"] += 1
        self._note("mesh", src, dst, channel, len(data))
        salt = zlib.crc32(data)
        if channel == CH_TX_UDP and self.cfg.udp_loss > 0:
            u = (hash((self.seed, src, dst, salt, 9)) & 0xFFFF) / _U16
            if u < self.cfg.udp_loss:
                self.counters["udp_lost"] += 1
                return
        t = self.engine.now + self.latency(src, dst, salt, 4)
        if channel != CH_TX_UDP:
            key = (src, dst, channel)
            t = max(t, self._fifo.get(key, 0))
            self._fifo[key] = t
        self.engine.at(t, self._recv_mesh, dst, src, channel, data)

    # -- handlers -----------------------------------------------------------

    def _observe(self, node, h: Hash32) -> None:
        if node.watch is not None:
            got = self.report.receipts[node.watch]
            key = h.hex()
            if key not in got:
                got[key] = self.engine.now

    def _recv_full(self, dst: int, src: int, obj: Message) -> None:
        node = self.nodes[dst]
        if node.is_relay:
            self._note("recv_full", src, dst, obj.hash.hex())
            if self.nodes[src].pid in node.node.peers:
                node.node.on_p2p_full_object(obj, self.nodes[src].pid)
            return
        h = obj.hash
        self.known[h].add(dst * _PAIR + src)
        if node.selector is not None and src in node.peers:
            rec = node.selector.on_receive_block if obj.kind == BLOCK else node.selector.on_receive_tx
            rec(h, self.nodes[src].pid, self.engine.now)
        if h in node.has:
            return
        if obj.kind == BLOCK and not obj.valid:
            self.counters["invalid_dropped"] += 1
            self._unlink(dst, src)
            return
        node.has[h] = self.engine.now
        self._observe(node, h)
        f = node.fetch.pop(h, None)
        if f is not None:
            self.engine.cancel(f[2])
        delay = node.val_block if obj.kind == BLOCK else node.val_tx
        if delay:
            self.engine.after(delay, self._forward, dst, obj, False)
        else:
            self._forward(dst, obj, False)

    def _forward(self, idx: int, obj: Message, full_to_all: bool) -> None:
        node = self.nodes[idx]
        h = obj.hash
        kn = self.known[h]
        base = idx * _PAIR
        elig = [p for p in node.peers if base + p not in kn]
        if not elig:
            return
        if full_to_all:
            full = set(elig)
        else:
            k = math.isqrt(len(elig))
            hk = self.hkey[h]
            seed = self.seed
            full = set(sorted(elig, key=lambda p: hash((seed, idx, p, hk)))[:k])
        ann = None
        for p in sorted(elig):
            kn.add(base + p)
            if p in full:
                self._send_full(idx, p, obj)
            else:
                if ann is None:
                    ann = Announcement(BLOCK, h, obj.number) if obj.kind == BLOCK else Announcement(TX, h)
                self._send_ann(idx, p, ann)

    def _recv_ann(self, dst: int, src: int, ann: Announcement) -> None:
        node = self.nodes[dst]
        if node.is_relay:
            if self.nodes[src].pid in node.node.peers:
                node.node.on_p2p_announcement(ann, self.nodes[src].pid)
            return
        h = ann.hash
        self.known[h].add(dst * _PAIR + src)
        if node.selector is not None and src in node.peers:
            rec = node.selector.on_receive_block if ann.kind == BLOCK else node.selector.on_receive_tx
            rec(h, self.nodes[src].pid, self.engine.now)
        if h in node.has:
            return
        f = node.fetch.get(h)
        if f is None:
            # [announcers, tried, timer, asking, announcement]
            f = node.fetch[h] = [[src], set(), None, None, ann]
            f[2] = self.engine.after(self.cfg.announce_wait_ms, self._fetch, dst, h)
        elif src not in f[0]:
            f[0].append(src)

    def _fetch(self, idx: int, h: Hash32) -> None:
        node = self.nodes[idx]
        f = node.fetch.get(h)
        if f is None or h in node.has:
            node.fetch.pop(h, None)
            return
        options = [p for p in f[0] if p in node.peers and p not in f[1]]
        if not options:
            node.fetch.pop(h, None)
            return
        hk = self.hkey[h]
        peer = min(options, key=lambda p: hash((self.seed, idx, p, hk, 7)))
        f[1].add(peer)
        f[3] = peer
        ann = f[4]
        req = Request(ann.kind, hash=h, number=ann.number, part="header" if ann.kind == BLOCK else "full")
        self._note("req", idx, peer, h.hex())
        self.engine.after(self.latency(idx, peer, hk, 3), self._recv_req, peer, idx, req)
        f[2] = self.engine.after(self.cfg.fetch_timeout_ms, self._fetch_timeout, idx, h, peer)

    def _fetch_timeout(self, idx: int, h: Hash32, peer: int) -> None:
        f = self.nodes[idx].fetch.get(h)
        if f is not None and f[3] == peer:
            self.counters["fetch_timeouts"] += 1
            self._fetch(idx, h)

    def _recv_req(self, dst: int, src: int, req: Request) -> None:
        node = self.nodes[dst]
        if node.is_relay:
            resp = node.node.on_peer_request(req, self.nodes[src].pid)
        else:
            obj = self.objects.get(req.hash) if req.hash in node.has else None
            resp = Response(req, (obj,) if obj is not None else ())
            if obj is not None and req.part != "header":
                self.known[req.hash].add(dst * _PAIR + src)
        hk = self.hkey.get(req.hash, 0)
        self.engine.after(self.latency(dst, src, hk, 5), self._recv_resp, src, dst, resp)

    def _recv_resp(self, dst: int, src: int, resp: Response) -> None:
        node = self.nodes[dst]
        if node.is_relay:
            if resp.found and resp.request.part != "header":
                self._note("recv_full", src, dst, resp.request.hash.hex())
            node.node.on_p2p_response(resp, self.nodes[src].pid)
            return
        req = resp.request
        h = req.hash
        f = node.fetch.get(h)
        if not resp.found:
            self.counters["not_found"] += 1
            if f is not None and f[3] == src:
                self.engine.cancel(f[2])
                self._fetch(dst, h)
            return
        if req.part == "header":
            if f is not None and f[3] == src:
                self.engine.cancel(f[2])
                body_req = Request(BLOCK, hash=h, number=req.number, part="body")
                self.engine.after(self.latency(dst, src, self.hkey[h], 6), self._recv_req, src, dst, body_req)
                f[2] = self.engine.after(self.cfg.fetch_timeout_ms, self._fetch_timeout, dst, h, src)
            return
        self._recv_full(dst, src, resp.objects[0])

    def _recv_mesh(self, dst: int, src: int, channel: str, data: bytes) -> None:
        self._note("recv_mesh", src, dst, channel, len(data))
        self.nodes[dst].node.on_relay_frame(data, channel, self.nodes[src].pid)

    # -- selection for full nodes ----------------------------------------------

    def _full_round(self, idx: int) -> None:
        node = self.nodes[idx]
        now = self.engine.now
        dropped = node.selector.run_round([self.nodes[p].pid for p in node.peers], now, self._churn_rng(idx))
        for pid in sorted(dropped):
            self._unlink(idx, self.index[pid])
        self.report.churn.setdefault(node.watch or node.pid.id, []).append(len(dropped))
        want = node.max_peers - len(node.peers)
        if want > 0:
            self._refill(idx, want)
        self.engine.after(self.cfg.delta_ms, self._full_round, idx)

    # -- running ------------------------------------------------------------

    def inject(self, at: int, fn, *args) -> None:
        """Schedule an arbitrary callback (test hook)."""
        self.engine.at(at, fn, *args)

    def run(self) -> MetricsReport:
        if not self._built:
            self.build()
        self.engine.run(self.cfg.duration_ms)
        rep = self.report
        for r in self.relays:
            slot = self.nodes[r]
            rep.churn[slot.pid.id] = list(slot.node.churn)
            for k, v in slot.node.stats.items():
                self.counters[f"relay_{k}"] += v
        rep.race = self._race_results()
        self.counters["events"] = self.engine.processed
        rep.counters = dict(self.counters)
        return rep


def build_network(cfg: SimConfig) -> SimWorld:
    return SimWorld(cfg).build()


def run(world: SimWorld) -> MetricsReport:
    return world.run()


def components(adj: Dict[int, Set[int]]) -> List[Set[int]]:
    seen: Set[int] = set()
    out = []
    for start in sorted(adj):
        if start in seen:
            continue
        comp = {start}
        stack = [start]
        while stack:
            x = stack.pop()
            for y in adj[x]:
                if y in adj and y not in comp:
                    comp.add(y)
                    stack.append(y)
        seen |= comp
        out.append(comp)
    out.sort(key=len, reverse=True)
    return out


