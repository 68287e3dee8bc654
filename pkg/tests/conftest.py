import random

import pytest

from pioplat.core import make_block, make_tx


@pytest.fixture
def rng():
    return random.Random(1234)


def blk(number, tag=b"", valid=True):
    return make_block(number, bytes(32), 0, b"b%d:" % number + tag, valid)


def tx(i):
    return make_tx(b"tx-%d" % i)


_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; the summary prints them after the run."""
    def record(cid, ok, detail=""):
        _VERDICTS[cid] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance")
    for cid in sorted(_VERDICTS, key=lambda c: int(c[1:])):
        ok, detail = _VERDICTS[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'} {detail}".rstrip())
