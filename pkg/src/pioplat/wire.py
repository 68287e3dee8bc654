"""Inter-relay frame codec.

Frame layout (all integers big-endian), XORed as a whole with an AES-128-CTR
keystream shared by every relay::

    length(4) | hash(32) | header_crc(4) | payload(length) | payload_crc(4)

Both CRCs are computed over plaintext. The first 40 bytes can be decoded on
their own so a receiver can drop an already-cached object without touching
the payload.

UDP frames carry an extra clear 4-byte prefix: the keystream counter-block
index the frame was obfuscated from, so each datagram decodes on its own.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .core import BLOCK, Hash32

HEADER_SIZE = 40
CRC_SIZE = 4
OVERHEAD = HEADER_SIZE + CRC_SIZE
UDP_PREFIX_SIZE = 4
MTU = 1500
IP_UDP_HEADERS = 28
UDP_PAYLOAD_LIMIT = MTU - IP_UDP_HEADERS - HEADER_SIZE  # 1432
USER_TX_MARK = b"\x01"

_LEN = struct.Struct(">I")
_CHUNK = 1 << 16  # keystream bytes per cached chunk
_BLOCKS_PER_CHUNK = _CHUNK // 16

UDP = "udp"
TCP = "tcp"


class FrameError(Exception):
    """Input too short or otherwise malformed."""


class IntegrityError(FrameError):
    """A CRC did not verify."""


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def parse_key(text: str) -> bytes:
    key = bytes.fromhex(text.strip())
    if len(key) != 16:
        raise ValueError("mesh key must be 32 hex characters")
    return key


@lru_cache(maxsize=64)
def _chunk(key: bytes, index: int) -> bytes:
    counter = (index * _BLOCKS_PER_CHUNK).to_bytes(16, "big")
    enc = Cipher(algorithms.AES(key), modes.CTR(counter)).encryptor()
    return enc.update(bytes(_CHUNK))


def keystream(key: bytes, offset: int, n: int) -> bytes:
    """``n`` keystream bytes starting at byte ``offset``."""
    out = bytearray()
    while n > 0:
        idx, off = divmod(offset, _CHUNK)
        piece = _chunk(key, idx)[off:off + n]
        out += piece
        offset += len(piece)
        n -= len(piece)
    return bytes(out)


def xor(data: bytes, stream: bytes) -> bytes:
    n = len(data)
    if n == 0:
        return b""
    return (int.from_bytes(data, "big") ^ int.from_bytes(stream[:n], "big")).to_bytes(n, "big")


class KeystreamState:
    """One direction of one connection: a key and a byte cursor into its stream."""

    def __init__(self, key: bytes, cursor: int = 0):
        if len(key) != 16:
            raise ValueError("AES-128 key must be 16 bytes")
        self.key = bytes(key)
        self.cursor = cursor

    def take(self, n: int) -> bytes:
        ks = keystream(self.key, self.cursor, n)
        self.cursor += n
        return ks

    def skip(self, n: int) -> None:
        self.cursor += n

    def reset(self) -> None:
        self.cursor = 0

    def fork(self) -> "KeystreamState":
        return KeystreamState(self.key, self.cursor)


def _plain_frame(h: bytes, payload: bytes) -> bytes:
    if len(h) != 32:
        raise ValueError("hash must be 32 bytes")
    if len(payload) >= 1 << 32:
        raise ValueError("payload too large")
    head = _LEN.pack(len(payload)) + h
    return b"".join((head, _LEN.pack(crc32(head)), payload, _LEN.pack(crc32(payload))))


def frame_size(payload_len: int) -> int:
    return OVERHEAD + payload_len


def encode(h: bytes, payload: bytes, ks: KeystreamState) -> bytes:
    plain = _plain_frame(h, payload)
    return xor(plain, ks.take(len(plain)))


def _check_header(plain: bytes) -> Tuple[int, Hash32]:
    (length,) = _LEN.unpack_from(plain, 0)
    (crc,) = _LEN.unpack_from(plain, 36)
    if crc32(plain[:36]) != crc:
        raise IntegrityError("header crc mismatch")
    return length, Hash32(plain[4:36])


def decode_header(first40: bytes, ks: KeystreamState) -> Tuple[int, Hash32]:
    if len(first40) != HEADER_SIZE:
        raise FrameError(f"header needs exactly {HEADER_SIZE} bytes, got {len(first40)}")
    return _check_header(xor(first40, ks.take(HEADER_SIZE)))


def decode_payload(rest: bytes, expected_len: int, ks: KeystreamState) -> bytes:
    if len(rest) < expected_len + CRC_SIZE:
        raise FrameError(f"payload short: need {expected_len + CRC_SIZE}, got {len(rest)}")
    if len(rest) > expected_len + CRC_SIZE:
        raise FrameError("trailing bytes after payload crc")
    plain = xor(rest, ks.take(len(rest)))
    payload = plain[:expected_len]
    if crc32(payload) != _LEN.unpack_from(plain, expected_len)[0]:
        raise IntegrityError("payload crc mismatch")
    return payload


def skip_payload(expected_len: int, ks: KeystreamState) -> None:
    ks.skip(expected_len + CRC_SIZE)


def decode(frame: bytes, ks: KeystreamState) -> Tuple[Hash32, bytes]:
    length, h = decode_header(frame[:HEADER_SIZE], ks)
    return h, decode_payload(frame[HEADER_SIZE:], length, ks)


def encode_udp(h: bytes, payload: bytes, key: bytes, counter_block: int) -> bytes:
    plain = _plain_frame(h, payload)
    return _LEN.pack(counter_block) + xor(plain, keystream(key, counter_block * 16, len(plain)))


def udp_blocks_used(payload_len: int) -> int:
    return -(-frame_size(payload_len) // 16)


def decode_udp(datagram: bytes, key: bytes) -> Tuple[Hash32, bytes]:
    if len(datagram) < UDP_PREFIX_SIZE + OVERHEAD:
        raise FrameError("datagram too short")
    (counter_block,) = _LEN.unpack_from(datagram, 0)
    return decode(datagram[UDP_PREFIX_SIZE:], KeystreamState(key, counter_block * 16))


def decode_udp_header(datagram: bytes, key: bytes) -> Tuple[int, Hash32]:
    if len(datagram) < UDP_PREFIX_SIZE + HEADER_SIZE:
        raise FrameError("datagram too short")
    (counter_block,) = _LEN.unpack_from(datagram, 0)
    ks = KeystreamState(key, counter_block * 16)
    return decode_header(datagram[UDP_PREFIX_SIZE:UDP_PREFIX_SIZE + HEADER_SIZE], ks)


def udp_payload_limit(udp_prefix: bool = False) -> int:
    return UDP_PAYLOAD_LIMIT - (UDP_PREFIX_SIZE if udp_prefix else 0)


def transport_for(kind: str, payload_size: int, udp_prefix: bool = False) -> str:
    if kind == BLOCK:
        return TCP
    return UDP if payload_size <= udp_payload_limit(udp_prefix) else TCP


class FrameReader:
    """Incremental decoder for an obfuscated TCP byte stream."""

    def __init__(self, ks: KeystreamState, marker: bool = False):
        self.ks = ks
        self.marker = marker
        self._buf = bytearray()
        self._pending = None  # (length, hash) once a header is decoded

    def feed(self, data: bytes):
        """Yield ``(hash, payload, marked)`` for every complete frame buffered."""
        self._buf += data
        while True:
            if self._pending is None:
                if len(self._buf) < HEADER_SIZE:
                    return
                head = bytes(self._buf[:HEADER_SIZE])
                del self._buf[:HEADER_SIZE]
                self._pending = decode_header(head, self.ks)
            length, h = self._pending
            need = length + CRC_SIZE + (1 if self.marker else 0)
            if len(self._buf) < need:
                return
            rest = bytes(self._buf[:length + CRC_SIZE])
            mark = self._buf[length + CRC_SIZE:need]
            del self._buf[:need]
            self._pending = None
            yield h, decode_payload(rest, length, self.ks), mark == USER_TX_MARK


@dataclass
class FrameInfo:
    length: int
    hash: bytes
    header_ok: bool
    payload_ok: Optional[bool]  # None when the frame is truncated
    payload: bytes
    size: int


def inspect_frame(frame: bytes, key: bytes, udp: bool = False, offset: int = 0) -> FrameInfo:
    """Decode every field of a frame and report each CRC verdict instead of raising."""
    if udp:
        if len(frame) < UDP_PREFIX_SIZE:
            raise FrameError("datagram too short")
        offset = _LEN.unpack_from(frame, 0)[0] * 16
        frame = frame[UDP_PREFIX_SIZE:]
    if len(frame) < HEADER_SIZE:
        raise FrameError(f"frame shorter than the {HEADER_SIZE}-byte header")
    plain = xor(frame, keystream(key, offset, len(frame)))
    (length,) = _LEN.unpack_from(plain, 0)
    header_ok = crc32(plain[:36]) == _LEN.unpack_from(plain, 36)[0]
    body = plain[HEADER_SIZE:]
    payload_ok = None
    payload = body[:length]
    if header_ok and len(body) >= length + CRC_SIZE:
        payload_ok = crc32(payload) == _LEN.unpack_from(body, length)[0]
    return FrameInfo(length, plain[4:36], header_ok, payload_ok, payload, len(frame))
