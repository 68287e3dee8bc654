"""Shared message and identity types."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

BLOCK = "block"
TX = "tx"


class Hash32(bytes):
    """A 32-byte digest. Behaves as ``bytes`` for equality and hashing."""

    __slots__ = ()

    def __new__(cls, value):
        b = bytes.fromhex(value) if isinstance(value, str) else bytes(value)
        if len(b) != 32:
            raise ValueError(f"Hash32 needs 32 bytes, got {len(b)}")
        return super().__new__(cls, b)

    def short(self) -> str:
        return self.hex()[:10]

    def __repr__(self) -> str:
        return f"Hash32({self.hex()[:16]}..)"


def hash_of(body: bytes) -> Hash32:
    return Hash32(hashlib.sha256(body).digest())


@dataclass(frozen=True)
class PeerId:
    id: str
    ip: str = ""

    def __post_init__(self):
        if not self.ip:
            object.__setattr__(self, "ip", self.id)

    def __lt__(self, other: "PeerId") -> bool:
        return (self.id, self.ip) < (other.id, other.ip)

    def __str__(self) -> str:
        return self.id


@dataclass(frozen=True)
class Block:
    number: int
    hash: Hash32
    parent: Hash32
    produced_at: int
    body: bytes = b""
    # Only the full-node oracle may look at this.
    valid: bool = field(default=True, compare=False)

    kind = BLOCK


@dataclass(frozen=True)
class Transaction:
    hash: Hash32
    body: bytes

    kind = TX

    @property
    def encoded_size(self) -> int:
        return len(self.body)


Message = Union[Block, Transaction]


@dataclass(frozen=True)
class Announcement:
    kind: str
    hash: Hash32
    number: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (BLOCK, TX):
            raise ValueError(f"unknown announcement kind {self.kind!r}")
        if (self.kind == BLOCK) != (self.number is not None):
            raise ValueError("block announcements carry a number, tx announcements do not")


@dataclass(frozen=True)
class Request:
    """A neighbor's data request, by hash or (blocks only) by number."""

    kind: str
    hash: Optional[Hash32] = None
    number: Optional[int] = None
    part: str = "full"  # "header" / "body" for two-step block fetches


@dataclass(frozen=True)
class Response:
    request: Request
    objects: tuple = ()

    @property
    def found(self) -> bool:
        return bool(self.objects)


_BLOCK_HDR = struct.Struct(">Q32s32sQ?")


def block_hash(number: int, body: bytes) -> Hash32:
    return hash_of(struct.pack(">Q", number) + body)


def make_block(number: int, parent: bytes, produced_at: int, body: bytes = b"",
               valid: bool = True) -> Block:
    return Block(number, block_hash(number, body), Hash32(parent), produced_at, body, valid)


def make_tx(body: bytes) -> Transaction:
    return Transaction(hash_of(body), body)


def encode_block(b: Block) -> bytes:
    return _BLOCK_HDR.pack(b.number, b.hash, b.parent, b.produced_at, b.valid) + b.body


def decode_block(data: bytes) -> Block:
    if len(data) < _BLOCK_HDR.size:
        raise ValueError("block encoding too short")
    number, h, parent, produced_at, valid = _BLOCK_HDR.unpack_from(data)
    return Block(number, Hash32(h), Hash32(parent), produced_at, data[_BLOCK_HDR.size:], valid)


def encode_object(obj: Message) -> bytes:
    return encode_block(obj) if obj.kind == BLOCK else obj.body


def decode_object(kind: str, data: bytes) -> Message:
    return decode_block(data) if kind == BLOCK else make_tx(data)


def announcement_for(obj: Message) -> Announcement:
    if obj.kind == BLOCK:
        return Announcement(BLOCK, obj.hash, obj.number)
    return Announcement(TX, obj.hash)
