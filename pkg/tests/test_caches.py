import random
from collections import OrderedDict

import pytest

from pioplat.caches import BlockCache, InsertResult, TxCache
from pioplat.core import make_block, make_tx

D, F, I = InsertResult.DUPLICATE, InsertResult.FORK_APPENDED, InsertResult.INSERTED


def block(n, variant=0):
    return make_block(n, bytes(32), 0, b"v%d" % variant)


class NaiveBlockCache:
    """Heights kept in first-insertion order; the oldest height goes first."""

    def __init__(self, k):
        self.k = k
        self.heights = OrderedDict()

    def insert(self, b):
        if b.number in self.heights:
            if b.hash in self.heights[b.number]:
                return D
            self.heights[b.number].append(b.hash)
            return F
        if len(self.heights) >= self.k:
            self.heights.popitem(last=False)
        self.heights[b.number] = [b.hash]
        return I


class NaiveTxCache:
    def __init__(self, expire):
        self.expire = expire
        self.items = {}

    def put(self, t, now):
        res = D if t.hash in self.items else I
        self.items.setdefault(t.hash, now + self.expire)
        self.items = {h: e for h, e in self.items.items() if e > now}
        return res


@pytest.mark.parametrize("k", [1, 2, 8, 128])
def test_block_cache_matches_naive_oracle(k):
    rng = random.Random(k)
    cache, oracle = BlockCache(k), NaiveBlockCache(k)
    span = 3 * k + 3
    for _ in range(10_000):
        b = block(rng.randrange(span), rng.randrange(3))
        assert cache.insert(b) == oracle.insert(b)
        assert len(cache) == len(oracle.heights)
    assert cache.numbers() == sorted(oracle.heights)
    for n, hashes in oracle.heights.items():
        assert [x.hash for x in cache.get(n)] == hashes
        assert all(h in cache for h in hashes)


def test_block_cache_hand_replay_k3():
    c = BlockCache(3)
    assert c.insert(block(1)) == I
    assert c.insert(block(2)) == I
    assert c.insert(block(2, 1)) == F
    assert c.insert(block(2)) == D
    assert c.insert(block(3)) == I
    assert (c.phi, c.i) == ([1, 2, 3], 0)
    assert c.insert(block(4)) == I  # evicts height 1
    assert (c.phi, c.i, c.numbers()) == ([4, 2, 3], 1, [2, 3, 4])
    assert block(1).hash not in c
    assert c.insert(block(5)) == I  # evicts height 2 and its fork
    assert c.numbers() == [3, 4, 5]
    assert block(2, 1).hash not in c and c.get(2) == []
    assert c.insert(block(1)) == I  # an evicted height comes back as new
    assert c.numbers() == [1, 4, 5]
    assert c.get_by_hash(block(4).hash) == block(4)


def test_block_cache_literal_victim_mode_evicts_newest_slot():
    c = BlockCache(3, newest_victim=True)
    for n in (1, 2, 3):
        c.insert(block(n))
    c.insert(block(4))  # i == 0, victim is phi[2] == 3
    assert c.numbers() == [1, 2, 4]


def test_block_cache_rejects_bad_k():
    with pytest.raises(ValueError):
        BlockCache(0)


def test_tx_cache_matches_naive_oracle():
    rng = random.Random(7)
    expire = 500
    cache, oracle = TxCache(expire), NaiveTxCache(expire)
    now = 0
    for _ in range(10_000):
        now += rng.choice((0, 0, 1, 7, 60, 300))
        t = make_tx(b"%d" % rng.randrange(400))
        assert cache.put(t, now) == oracle.put(t, now)
        assert set(cache.upsilon) == set(oracle.items)
        probe = make_tx(b"%d" % rng.randrange(400)).hash
        assert (probe in cache) == (probe in oracle.items)


def test_tx_cache_sweeps_only_on_put():
    c = TxCache(100)
    a, b = make_tx(b"a"), make_tx(b"b")
    c.put(a, 0)
    assert c.expiry_of(a.hash) == 100
    assert a.hash in c  # no sweep without a put, even long after expiry
    c.put(b, 100)
    assert a.hash not in c and b.hash in c
    assert c.put(b, 150) == D
    assert c.expiry_of(b.hash) == 200  # a duplicate does not refresh the expiry
    assert c.get(a.hash) is None


def test_tx_cache_rejects_bad_expiry():
    with pytest.raises(ValueError):
        TxCache(0)
