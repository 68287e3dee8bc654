"""The relay's view of its full node: five request verbs, an in-memory oracle
and a length-prefixed record protocol for running the two apart."""
from __future__ import annotations

import asyncio
import hashlib
import hmac
import logging
import socket
import struct
from typing import Dict, Optional, Protocol

from ..core import Block, Hash32, Transaction, decode_block, encode_block, make_tx
from .forkid import ChainConfig, ForkId

log = logging.getLogger(__name__)

GET_FORK_ID = 1
GET_BLOCK = 2
GET_TX = 3
HAS_BLOCK = 4
VALIDATE_BLOCK = 5
VERBS = {GET_FORK_ID: "get_fork_id", GET_BLOCK: "get_block", GET_TX: "get_tx",
         HAS_BLOCK: "has_block", VALIDATE_BLOCK: "validate_block"}
AUTH = 0

OK = 0
ABSENT = 1
ERROR = 2

_LEN = struct.Struct(">I")
MAX_RECORD = 64 << 20


class FullNodeUnavailable(Exception):
    pass


class FullNodeClient(Protocol):
    def get_fork_id(self) -> ForkId: ...
    def get_block(self, hash: Optional[Hash32] = None, number: Optional[int] = None) -> Optional[Block]: ...
    def get_tx(self, hash: Hash32) -> Optional[Transaction]: ...
    def has_block(self, hash: Hash32) -> bool: ...
    def validate_block(self, block: Block) -> bool: ...


class FullNodeOracle:
    """Authoritative chain view used in simulation and tests.

    Set ``up = False`` to simulate an outage; every verb then raises
    ``FullNodeUnavailable``.
    """

    def __init__(self, chain: Optional[ChainConfig] = None):
        self.chain = chain or ChainConfig(genesis=bytes(32))
        self.blocks: Dict[Hash32, Block] = {}
        self.canonical: Dict[int, Hash32] = {}
        self.txs: Dict[Hash32, Transaction] = {}
        self.head = 0
        self.up = True
        self.calls: Dict[str, int] = {v: 0 for v in VERBS.values()}

    def add_block(self, b: Block, canonical: bool = True) -> None:
        if not b.valid:
            return
        self.blocks[b.hash] = b
        if canonical:
            self.canonical[b.number] = b.hash
            self.head = max(self.head, b.number)

    def add_tx(self, tx: Transaction) -> None:
        self.txs[tx.hash] = tx

    def _call(self, verb: str) -> None:
        if not self.up:
            raise FullNodeUnavailable(verb)
        self.calls[verb] += 1

    def get_fork_id(self) -> ForkId:
        self._call("get_fork_id")
        return self.chain.fork_id(self.head)

    def get_block(self, hash=None, number=None):
        self._call("get_block")
        if hash is None and number is not None:
            hash = self.canonical.get(number)
        return self.blocks.get(hash) if hash is not None else None

    def get_tx(self, hash):
        self._call("get_tx")
        return self.txs.get(hash)

    def has_block(self, hash) -> bool:
        self._call("has_block")
        return hash in self.blocks

    def validate_block(self, block: Block) -> bool:
        self._call("validate_block")
        return block.valid


# -- record protocol ---------------------------------------------------------
#
# request:  length(4) | verb(1) | body
# response: length(4) | verb(1) | status(1) | body
# The first request on a connection must be AUTH carrying
# HMAC-SHA256(secret, b"pioplat-fullnode").


def auth_token(secret: bytes) -> bytes:
    return hmac.new(secret, b"pioplat-fullnode", hashlib.sha256).digest()


def pack_record(*parts: bytes) -> bytes:
    body = b"".join(parts)
    return _LEN.pack(len(body)) + body


def encode_request(verb: int, hash: Optional[bytes] = None, number: Optional[int] = None,
                   block: Optional[Block] = None, token: bytes = b"") -> bytes:
    if verb == AUTH:
        body = token
    elif verb == GET_FORK_ID:
        body = b""
    elif verb == GET_BLOCK:
        body = b"\x00" + bytes(hash) if hash is not None else b"\x01" + struct.pack(">Q", number)
    elif verb in (GET_TX, HAS_BLOCK):
        body = bytes(hash)
    elif verb == VALIDATE_BLOCK:
        body = encode_block(block)
    else:
        raise ValueError(f"unknown verb {verb}")
    return pack_record(bytes([verb]), body)


def handle_request(oracle: FullNodeClient, record: bytes) -> bytes:
    """Serve one request record body (without the length prefix)."""
    verb, body = record[0], record[1:]
    try:
        if verb == GET_FORK_ID:
            fid = oracle.get_fork_id()
            return pack_record(bytes([verb, OK]), fid.fork_hash, struct.pack(">Q", fid.fork_next))
        if verb == GET_BLOCK:
            if body[:1] == b"\x00":
                b = oracle.get_block(hash=Hash32(body[1:33]))
            else:
                b = oracle.get_block(number=struct.unpack(">Q", body[1:9])[0])
            if b is None:
                return pack_record(bytes([verb, ABSENT]))
            return pack_record(bytes([verb, OK]), encode_block(b))
        if verb == GET_TX:
            tx = oracle.get_tx(Hash32(body))
            if tx is None:
                return pack_record(bytes([verb, ABSENT]))
            return pack_record(bytes([verb, OK]), tx.body)
        if verb == HAS_BLOCK:
            return pack_record(bytes([verb, OK, int(oracle.has_block(Hash32(body)))]))
        if verb == VALIDATE_BLOCK:
            return pack_record(bytes([verb, OK, int(oracle.validate_block(decode_block(body)))]))
    except FullNodeUnavailable:
        return pack_record(bytes([verb, ERROR]))
    return pack_record(bytes([verb, ERROR]))


async def serve_fullnode(oracle: FullNodeClient, secret: bytes, host: str = "127.0.0.1",
                         port: int = 0) -> asyncio.AbstractServer:
    expected = auth_token(secret)

    async def on_conn(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        authed = False
        try:
            while True:
                (n,) = _LEN.unpack(await reader.readexactly(4))
                if n == 0 or n > MAX_RECORD:
                    break
                record = await reader.readexactly(n)
                if not authed:
                    if record[0] != AUTH or not hmac.compare_digest(record[1:], expected):
                        log.warning("full-node channel: bad auth, closing")
                        break
                    authed = True
                    writer.write(pack_record(bytes([AUTH, OK])))
                else:
                    writer.write(handle_request(oracle, record))
                await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        finally:
            writer.close()

    return await asyncio.start_server(on_conn, host, port)


class StreamFullNodeClient:
    """Blocking client for ``serve_fullnode``. Any I/O failure surfaces as
    ``FullNodeUnavailable``."""

    def __init__(self, host: str, port: int, secret: bytes, timeout: float = 2.0):
        self.addr = (host, port)
        self.secret = secret
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            s = socket.create_connection(self.addr, timeout=self.timeout)
            s.sendall(encode_request(AUTH, token=auth_token(self.secret)))
            self._sock = s
            if self._read()[1] != OK:
                self.close()
                raise FullNodeUnavailable("auth refused")
        return self._sock

    def _read(self) -> bytes:
        (n,) = _LEN.unpack(self._recv(4))
        return self._recv(n)

    def _recv(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("full node closed the channel")
            buf += chunk
        return bytes(buf)

    def _rpc(self, request: bytes) -> bytes:
        try:
            self._connect().sendall(request)
            resp = self._read()
        except (OSError, ConnectionError) as e:
            self.close()
            raise FullNodeUnavailable(str(e)) from e
        if resp[1] == ERROR:
            raise FullNodeUnavailable(VERBS.get(resp[0], "?"))
        return resp

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def get_fork_id(self) -> ForkId:
        r = self._rpc(encode_request(GET_FORK_ID))
        return ForkId(r[2:6], struct.unpack(">Q", r[6:14])[0])

    def get_block(self, hash=None, number=None):
        r = self._rpc(encode_request(GET_BLOCK, hash=hash, number=number))
        return decode_block(r[2:]) if r[1] == OK else None

    def get_tx(self, hash):
        r = self._rpc(encode_request(GET_TX, hash=hash))
        return make_tx(r[2:]) if r[1] == OK else None

    def has_block(self, hash) -> bool:
        return bool(self._rpc(encode_request(HAS_BLOCK, hash=hash))[2])

    def validate_block(self, block: Block) -> bool:
        return bool(self._rpc(encode_request(VALIDATE_BLOCK, block=block))[2])
