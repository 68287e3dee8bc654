"""Neighbor scoring, periodic selection rounds and the expirable blocklist."""
from __future__ import annotations

import math
import random
from bisect import insort
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .core import BLOCK, Hash32, PeerId

MINUTE_MS = 60_000
BAN_BASE_MS = 20 * MINUTE_MS
PERMANENT = math.inf

_EPS = 1e-9


class ConfigError(ValueError):
    pass


@dataclass
class SelectionConfig:
    """Parameters of a selection round.

    ``sigma`` is the share of ``k`` slots kept for the fastest block
    deliverers, ``epsilon = 1 - rho - sigma`` the share kept for the fastest
    transaction deliverers.
    """

    k: int = 200
    rho: float = 0.2
    sigma: float = 0.3
    delta_ms: int = 600_000
    miss_penalty_ms: float = 5_000.0
    score_percentile: float = 90.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k: must be >= 1")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho: must lie in (0, 1)")
        if self.sigma < 0.0 or self.rho + self.sigma > 1.0 + _EPS:
            raise ConfigError(f"sigma: need 0 <= sigma <= 1 - rho, got sigma={self.sigma} rho={self.rho}")
        if self.delta_ms <= 0:
            raise ConfigError("delta_ms: must be positive")
        if not 0.0 <= self.score_percentile <= 100.0:
            raise ConfigError("score_percentile: must lie in [0, 100]")

    @property
    def epsilon(self) -> float:
        return max(0.0, 1.0 - self.rho - self.sigma)

    @property
    def n_block(self) -> int:
        return math.floor(self.k * self.sigma + _EPS)

    @property
    def n_tx(self) -> int:
        return math.floor(self.k * self.epsilon + _EPS)

    @property
    def cap(self) -> int:
        return math.floor(self.k * (1.0 - self.rho) + _EPS)


class ObservationLog:
    """Arrival times per hash; only the first sighting per (peer, hash) counts."""

    def __init__(self):
        self.by_hash: Dict[Hash32, List[Tuple[int, PeerId]]] = {}
        self._seen: Set[Tuple[Hash32, PeerId]] = set()
        self._excluded: Set[Hash32] = set()
        self._excluded_prev: Set[Hash32] = set()  # late sightings can cross a round boundary

    def record(self, h: Hash32, peer: PeerId, t: int) -> bool:
        key = (h, peer)
        if key in self._seen or h in self._excluded or h in self._excluded_prev:
            return False
        self._seen.add(key)
        entries = self.by_hash.get(h)
        if entries is None:
            self.by_hash[h] = [(t, peer)]
        elif t >= entries[-1][0]:
            entries.append((t, peer))
        else:
            insort(entries, (t, peer))
        return True

    def entries(self, h: Hash32) -> List[Tuple[PeerId, int]]:
        return [(p, t) for t, p in self.by_hash.get(h, ())]

    def forget_peer(self, peer: PeerId) -> None:
        for h in list(self.by_hash):
            kept = [(t, p) for t, p in self.by_hash[h] if p != peer]
            self._seen.discard((h, peer))
            if kept:
                self.by_hash[h] = kept
            else:
                del self.by_hash[h]

    def exclude(self, h: Hash32) -> None:
        """Drop ``h`` from this window and ignore later sightings of it."""
        self._excluded.add(h)
        for t, p in self.by_hash.pop(h, ()):
            self._seen.discard((h, p))

    def clear(self) -> None:
        self.by_hash.clear()
        self._seen.clear()
        self._excluded_prev, self._excluded = self._excluded, set()

    def __len__(self) -> int:
        return len(self.by_hash)


def percentile(values: List[float], q: float) -> float:
    """Linear-interpolation percentile of a non-empty list."""
    xs = sorted(values)
    if len(xs) == 1:
        return float(xs[0])
    pos = (len(xs) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    frac = pos - lo
    if frac == 0.0:
        return float(xs[lo])
    return xs[lo] + (xs[hi] - xs[lo]) * frac


@dataclass
class ScoreTable:
    """Per-peer score in ms (lower is better) and how many hashes each delivered.

    Delivery counts only break ties: among equal scores the peer that
    delivered more ranks first, so a silent peer always ranks last.
    """

    scores: Dict[PeerId, float] = field(default_factory=dict)
    delivered: Dict[PeerId, int] = field(default_factory=dict)

    def __getitem__(self, p: PeerId) -> float:
        return self.scores[p]

    def __contains__(self, p: PeerId) -> bool:
        return p in self.scores

    def __len__(self) -> int:
        return len(self.scores)

    def rank_key(self, p: PeerId):
        return (self.scores[p], -self.delivered.get(p, 0), p.id, p.ip)


def get_scores(log: ObservationLog, peers: Iterable[PeerId], cfg: SelectionConfig) -> ScoreTable:
    peers = list(peers)
    if not peers:
        raise ValueError("get_scores needs at least one peer")
    penalty = cfg.miss_penalty_ms
    delays: Dict[PeerId, List[float]] = {p: [] for p in peers}
    delivered = {p: 0 for p in peers}
    for entries in log.by_hash.values():
        first = entries[0][0]
        got = {}
        for t, p in entries:
            if p in delays and p not in got:
                got[p] = t - first
        for p, d in delays.items():
            x = got.get(p)
            if x is None:
                d.append(penalty)
            else:
                d.append(x)
                delivered[p] += 1
    table = ScoreTable(delivered=delivered)
    for p, d in delays.items():
        table.scores[p] = percentile(d, cfg.score_percentile) if d else float(penalty)
    return table


def smallest_n(table: ScoreTable, n: int, among: Optional[Iterable[PeerId]] = None) -> List[PeerId]:
    pool = table.scores.keys() if among is None else [p for p in among if p in table]
    if n <= 0:
        return []
    return sorted(pool, key=table.rank_key)[:n]


def select_round(cfg: SelectionConfig, s_tx: ScoreTable, s_block: ScoreTable,
                 peers: Iterable[PeerId], rng: random.Random) -> Tuple[Set[PeerId], Set[PeerId]]:
    peers = set(peers)
    missing = [p for p in peers if p not in s_tx or p not in s_block]
    if missing:
        raise ValueError(f"score tables do not cover {sorted(missing)[:3]}")
    retained = set(smallest_n(s_block, cfg.n_block, peers))
    retained |= set(smallest_n(s_tx, cfg.n_tx, peers))
    cap = cfg.cap
    if len(retained) > cap:
        t = len(retained) - cap
        r = set(smallest_n(s_tx, t, peers)) | set(smallest_n(s_block, t, peers))
        retained -= set(rng.sample(sorted(r), t))
    return retained, peers - retained


def select_peri(s_tx: ScoreTable, peers: Iterable[PeerId]) -> Tuple[Set[PeerId], Set[PeerId]]:
    """Transaction-only ranking that drops half of the neighbors."""
    peers = set(peers)
    keep = len(peers) - len(peers) // 2
    retained = set(smallest_n(s_tx, keep, peers))
    return retained, peers - retained


class Blocklist:
    """Bans keyed by ip; the n-th ban of an ip lasts 20 * 2**n minutes."""

    def __init__(self, permanent: bool = False, base_ms: int = BAN_BASE_MS):
        self.permanent = permanent
        self.base_ms = base_ms
        self.entries: Dict[str, List] = {}  # ip -> [expires_at, appearances]

    def add(self, p: PeerId, now: int) -> float:
        entry = self.entries.get(p.ip)
        n = entry[1] if entry else 0
        expires = PERMANENT if self.permanent else now + self.base_ms * (2 ** n)
        self.entries[p.ip] = [expires, n + 1]
        return expires

    def admit(self, p: PeerId, now: int) -> bool:
        entry = self.entries.get(p.ip)
        return entry is None or entry[0] <= now

    def appearances(self, p: PeerId) -> int:
        entry = self.entries.get(p.ip)
        return entry[1] if entry else 0

    def expires_at(self, p: PeerId) -> Optional[float]:
        entry = self.entries.get(p.ip)
        return entry[0] if entry else None

    def dump(self) -> str:
        """One ``ip,expires_at_ms,appearances`` line per entry (``inf`` for permanent bans)."""
        lines = []
        for ip in sorted(self.entries):
            expires, n = self.entries[ip]
            exp = "inf" if expires == PERMANENT else str(int(expires))
            lines.append(f"{ip},{exp},{n}\n")
        return "".join(lines)

    def load(self, text: str) -> None:
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                ip, exp, n = line.rsplit(",", 2)
                expires = PERMANENT if exp == "inf" else int(exp)
                count = int(n)
            except ValueError as e:
                raise ValueError(f"blocklist line {lineno}: {line!r}") from e
            if count < 1:
                raise ValueError(f"blocklist line {lineno}: appearances must be >= 1")
            self.entries[ip] = [expires, count]


PIOPLAT = "pioplat"
PERI = "peri_like"
RANDOM = "random_baseline"
STRATEGIES = (PIOPLAT, PERI, RANDOM)


class NeighborSelector:
    """Observation logs, blocklist and round logic for one node.

    ``strategy`` is ``pioplat`` (block/tx dual preference, expiring bans),
    ``peri_like`` (tx-only ranking, half dropped, permanent bans) or
    ``random_baseline`` (never drops anyone).
    """

    def __init__(self, cfg: SelectionConfig, strategy: str = PIOPLAT):
        if strategy not in STRATEGIES:
            raise ConfigError(f"strategy: unknown {strategy!r}")
        self.cfg = cfg
        self.strategy = strategy
        self.tx_log = ObservationLog()
        self.block_log = ObservationLog()
        self.blocklist = Blocklist(permanent=(strategy == PERI))

    @property
    def active(self) -> bool:
        return self.strategy != RANDOM

    def on_receive_tx(self, h: Hash32, peer: PeerId, now: int) -> None:
        self.tx_log.record(h, peer, now)

    def on_receive_block(self, h: Hash32, peer: PeerId, now: int) -> None:
        self.block_log.record(h, peer, now)

    def exclude(self, kind: str, h: Hash32) -> None:
        (self.block_log if kind == BLOCK else self.tx_log).exclude(h)

    def admit(self, p: PeerId, now: int) -> bool:
        return self.blocklist.admit(p, now)

    def forget(self, p: PeerId) -> None:
        # a reconnecting peer starts from a clean history
        self.tx_log.forget_peer(p)
        self.block_log.forget_peer(p)

    def run_round(self, peers: Iterable[PeerId], now: int, rng: random.Random) -> Set[PeerId]:
        """Score, select, ban the dropped peers and clear the logs. Returns dropped."""
        peers = set(peers)
        if not self.active or not peers:
            self.tx_log.clear()
            self.block_log.clear()
            return set()
        s_tx = get_scores(self.tx_log, peers, self.cfg)
        self.tx_log.clear()
        if self.strategy == PERI:
            self.block_log.clear()
            _, dropped = select_peri(s_tx, peers)
        else:
            s_block = get_scores(self.block_log, peers, self.cfg)
            self.block_log.clear()
            _, dropped = select_round(self.cfg, s_tx, s_block, peers, rng)
        for p in sorted(dropped):
            self.blocklist.add(p, now)
        return dropped
