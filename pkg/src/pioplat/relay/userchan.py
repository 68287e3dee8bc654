"""User transaction submission over a persistent stream.

Record: ``length(4, big-endian) | tx body(length) | HMAC-SHA256(salt, body)(32)``.
The server answers each record with one byte: 1 accepted, 0 rejected.
"""
from __future__ import annotations

import asyncio
import hashlib
import hmac
import struct
from typing import Callable, List, Tuple

TAG_SIZE = 32
MAX_TX = 1 << 20
_LEN = struct.Struct(">I")


def sign(salt: bytes, body: bytes) -> bytes:
    return hmac.new(salt, body, hashlib.sha256).digest()


def verify(salt: bytes, body: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(sign(salt, body), tag)


def encode_submission(body: bytes, tag: bytes) -> bytes:
    if len(tag) != TAG_SIZE:
        raise ValueError("tag must be 32 bytes")
    return _LEN.pack(len(body)) + body + tag


def split_submissions(buf: bytes) -> Tuple[List[Tuple[bytes, bytes]], bytes]:
    """Parse every complete record in ``buf``; return them and the leftover bytes."""
    out = []
    while len(buf) >= 4:
        (n,) = _LEN.unpack_from(buf)
        if n > MAX_TX:
            raise ValueError(f"submission of {n} bytes exceeds limit")
        end = 4 + n + TAG_SIZE
        if len(buf) < end:
            break
        out.append((buf[4:4 + n], buf[4 + n:end]))
        buf = buf[end:]
    return out, buf


async def serve_submissions(on_submit: Callable[[bytes, bytes], bool], host: str = "127.0.0.1",
                            port: int = 0) -> asyncio.AbstractServer:
    async def on_conn(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            while True:
                (n,) = _LEN.unpack(await reader.readexactly(4))
                if n > MAX_TX:
                    break
                body = await reader.readexactly(n)
                tag = await reader.readexactly(TAG_SIZE)
                writer.write(b"\x01" if on_submit(body, tag) else b"\x00")
                await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        finally:
            writer.close()

    return await asyncio.start_server(on_conn, host, port)


async def submit(host: str, port: int, salt: bytes, bodies: List[bytes]) -> List[bool]:
    reader, writer = await asyncio.open_connection(host, port)
    results = []
    try:
        for body in bodies:
            writer.write(encode_submission(body, sign(salt, body)))
            await writer.drain()
            results.append((await reader.readexactly(1)) == b"\x01")
    finally:
        writer.close()
    return results
