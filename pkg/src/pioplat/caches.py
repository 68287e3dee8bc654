"""Storage-free caches held by a relay in place of a chain database.

``BlockCache`` keeps the last ``k`` block heights (every fork block seen at a
retained height is kept). ``TxCache`` keeps transactions for a fixed time
window; expired entries are swept only when a new transaction is put.
"""
from __future__ import annotations

import enum
import heapq
import itertools
from typing import Dict, List, Optional

from .core import Block, Hash32, Transaction

DEFAULT_BLOCK_SLOTS = 128
DEFAULT_TX_EXPIRE_MS = 600_000


class InsertResult(enum.Enum):
    INSERTED = "inserted"
    DUPLICATE = "duplicate"
    FORK_APPENDED = "fork_appended"


class BlockCache:
    """Ring of ``k`` block numbers plus a number -> blocks map.

    With ``newest_victim=True`` the eviction victim is the most recently
    written slot, ``phi[(i + k - 1) % k]``, instead of the slot about to be
    overwritten. That mode can orphan numbers in the map; it exists so the
    two readings can be compared.
    """

    def __init__(self, k: int = DEFAULT_BLOCK_SLOTS, newest_victim: bool = False):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.newest_victim = newest_victim
        self.phi: List[Optional[int]] = [None] * k
        self.i = 0
        self.lam: Dict[int, List[Block]] = {}
        self._by_hash: Dict[Hash32, Block] = {}

    def __len__(self) -> int:
        return len(self.lam)

    def __contains__(self, h: Hash32) -> bool:
        return h in self._by_hash

    def insert(self, b: Block) -> InsertResult:
        at_height = self.lam.get(b.number)
        if at_height is not None:
            if any(x.hash == b.hash for x in at_height):
                return InsertResult.DUPLICATE
            at_height.append(b)
            self._by_hash[b.hash] = b
            return InsertResult.FORK_APPENDED

        if len(self.lam) >= self.k:
            if self.newest_victim:
                victim = self.phi[(self.i + self.k - 1) % self.k]
            else:
                victim = self.phi[self.i]
            self._evict(victim)
        self.phi[self.i] = b.number
        self.lam[b.number] = [b]
        self._by_hash[b.hash] = b
        self.i = (self.i + 1) % self.k
        return InsertResult.INSERTED

    def _evict(self, number: Optional[int]) -> None:
        for blk in self.lam.pop(number, ()):
            del self._by_hash[blk.hash]

    def get(self, n: int) -> List[Block]:
        return list(self.lam.get(n, ()))

    def get_by_hash(self, h: Hash32) -> Optional[Block]:
        return self._by_hash.get(h)

    def numbers(self) -> List[int]:
        return sorted(self.lam)


class TxCache:
    """Time-windowed transaction cache keyed by hash."""

    def __init__(self, expire_ms: int = DEFAULT_TX_EXPIRE_MS):
        if expire_ms <= 0:
            raise ValueError("expire_ms must be positive")
        self.expire_ms = expire_ms
        self.upsilon: Dict[Hash32, Transaction] = {}
        self.psi: list = []  # heap of (expiry, seq, hash)
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self.upsilon)

    def __contains__(self, h: Hash32) -> bool:
        return h in self.upsilon

    def put(self, tx: Transaction, now: int) -> InsertResult:
        if tx.hash in self.upsilon:
            result = InsertResult.DUPLICATE
        else:
            self.upsilon[tx.hash] = tx
            heapq.heappush(self.psi, (now + self.expire_ms, next(self._seq), tx.hash))
            result = InsertResult.INSERTED
        psi = self.psi
        while psi and psi[0][0] <= now:
            _, _, h = heapq.heappop(psi)
            del self.upsilon[h]
        return result

    def get(self, h: Hash32) -> Optional[Transaction]:
        return self.upsilon.get(h)

    def expiry_of(self, h: Hash32) -> Optional[int]:
        for expiry, _, x in self.psi:
            if x == h:
                return expiry
        return None
