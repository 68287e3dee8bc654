from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Sequence, Set

from ..wire import crc32


@dataclass(frozen=True)
class ForkId:
    fork_hash: bytes  # 4 bytes
    fork_next: int = 0

    def __post_init__(self):
        if len(self.fork_hash) != 4:
            raise ValueError("fork_hash must be 4 bytes")


@dataclass(frozen=True)
class Status:
    """What a dialing peer presents in its handshake."""

    fork_id: ForkId
    network_id: int = 56


@dataclass
class ChainConfig:
    genesis: bytes
    forks: Sequence[int] = field(default_factory=tuple)  # activation heights

    def checksums(self) -> List[bytes]:
        """Fork hash before any fork, then after each fork in order."""
        data = bytes(self.genesis)
        out = [crc32(data).to_bytes(4, "big")]
        for n in sorted(set(self.forks)):
            if n == 0:
                continue
            data += struct.pack(">Q", n)
            out.append(crc32(data).to_bytes(4, "big"))
        return out

    def fork_id(self, head: int) -> ForkId:
        data = bytes(self.genesis)
        for n in sorted(set(self.forks)):
            if n == 0:
                continue
            if n > head:
                return ForkId(crc32(data).to_bytes(4, "big"), n)
            data += struct.pack(">Q", n)
        return ForkId(crc32(data).to_bytes(4, "big"), 0)


def compute_fork_hash(genesis: bytes, past_forks: Sequence[int]) -> bytes:
    return ChainConfig(genesis, tuple(past_forks)).fork_id(head=2 ** 64 - 1).fork_hash


def compatible(ours: ForkId, theirs: ForkId, known: Set[bytes] = frozenset()) -> bool:
    return theirs.fork_hash == ours.fork_hash or theirs.fork_hash in known
