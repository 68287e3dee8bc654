import hashlib

import pytest

from pioplat.core import (BLOCK, TX, Announcement, Hash32, PeerId, announcement_for, decode_block,
                          decode_object, encode_block, encode_object, hash_of, make_block, make_tx)


def test_hash_of_matches_reference_digest():
    assert hash_of(b"") == bytes.fromhex(
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")
    assert hash_of(b"abc") == hashlib.sha256(b"abc").digest()


def test_hash32_length_and_hex():
    with pytest.raises(ValueError):
        Hash32(b"short")
    h = hash_of(b"x")
    assert Hash32(h.hex()) == h
    assert len(h.short()) == 10


def test_peer_id_defaults_ip_and_orders():
    assert PeerId("a").ip == "a"
    assert PeerId("a", "1.1.1.1") < PeerId("b", "0.0.0.0")


def test_block_roundtrip_keeps_validity_flag():
    b = make_block(7, bytes(32), 123, b"body", valid=False)
    assert decode_block(encode_block(b)) == b
    assert decode_block(encode_block(b)).valid is False
    assert decode_object(BLOCK, encode_object(b)) == b


def test_tx_roundtrip():
    t = make_tx(b"hello")
    assert decode_object(TX, encode_object(t)) == t
    assert t.encoded_size == 5


def test_announcement_shape():
    b = make_block(3, bytes(32), 0)
    a = announcement_for(b)
    assert (a.kind, a.hash, a.number) == (BLOCK, b.hash, 3)
    assert announcement_for(make_tx(b"t")).number is None
    with pytest.raises(ValueError):
        Announcement(BLOCK, b.hash)
    with pytest.raises(ValueError):
        Announcement(TX, b.hash, 1)
    with pytest.raises(ValueError):
        Announcement("receipt", b.hash)
    assert not hasattr(a, "body")
