import json
import subprocess
import sys

import pytest

from pioplat import wire
from pioplat.cli import MESH_KEY_ENV, build_parser, main, parse_seeds, parse_sigma_grid

KEY = "00112233445566778899aabbccddeeff"

TINY = """
seed = 1
duration_ms = 12000
delta_ms = 4000
relay_k = 6
control_peers = 6
max_peers = 8
outbound = 3
miner_max_peers = 8
relay_regions = ["east_asia", "north_america"]

[regions.east_asia]
miners = 1
broadcasters = 4
plain = 3
sigma = 0.3
latency_ms = [15, 75]

[regions.north_america]
miners = 2
broadcasters = 1
plain = 4
sigma = 0.7
latency_ms = [75, 15]
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def test_parser_has_subcommands():
    p = build_parser()
    for cmd in ("sim", "sweep", "frame", "relay"):
        assert p.parse_args([cmd] + (["make"] if cmd == "frame" else [])).command == cmd


def test_parse_seeds_and_grid():
    assert parse_seeds("1,2,5-7") == [1, 2, 5, 6, 7]
    for bad in ("", "3-1", "1,1", "x"):
        with pytest.raises(ValueError):
            parse_seeds(bad)
    assert parse_sigma_grid(["a=0.1,0.2", "b=0.5"]) == {"a": [0.1, 0.2], "b": [0.5]}
    with pytest.raises(ValueError):
        parse_sigma_grid(["0.1"])


def test_sim_scalability_layout_and_rerun(tiny, tmp_path, capsys):
    out = tmp_path / "o"
    argv = ["sim", "--config", str(tiny), "--scenario", "scalability", "--seeds", "1-2", "--out", str(out)]
    assert main(argv) == 0
    for seed in (1, 2):
        for stage in (1, 2):
            assert (out / "scalability" / str(seed) / f"stage{stage}.csv").is_file()
            assert (out / "scalability" / str(seed) / f"stage{stage}.json").is_file()
    first = (out / "aggregate.json").read_bytes()
    agg = json.loads(first)
    assert agg["seeds"] == [1, 2] and len(agg["stages"]) == 2
    assert "obs_block_med" in capsys.readouterr().out
    assert main(argv) == 0
    assert (out / "aggregate.json").read_bytes() == first


def test_sim_race_and_overrides(tiny, tmp_path):
    out = tmp_path / "o"
    assert main(["sim", "--config", str(tiny), "--scenario", "race", "--race-trials", "5",
                 "--out", str(out)]) == 0
    rows = (out / "race" / "1" / "report_race.csv").read_text().splitlines()
    assert len(rows) == 6
    assert main(["sim", "--config", str(tiny), "--strategy", "peri_like", "--sigma", "east_asia=0.2",
                 "--out", str(out)]) == 0
    cfg = json.loads((out / "aggregate.json").read_text())["config"]
    assert cfg["strategy"] == "peri_like"
    assert cfg["regions"][0]["sigma"] == 0.2


def test_sim_missing_config_writes_nothing(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["sim", "--config", str(tmp_path / "nope.toml"), "--out", str(out)]) == 2
    assert not out.exists()
    assert "no such file" in capsys.readouterr().err


def test_sim_bad_config_field(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("sigma = 0.95\n")
    assert main(["sim", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "sigma" in capsys.readouterr().err


def test_sweep_three_by_three(tiny, tmp_path):
    out = tmp_path / "o"
    assert main(["sweep", "--config", str(tiny), "--sigma", "east_asia=0.1,0.2,0.3",
                 "--sigma", "north_america=0.7,0.6,0.5", "--seeds", "1", "--out", str(out)]) == 0
    rows = json.loads((out / "tuning" / "table.json").read_text())
    assert len(rows) == 9 and [r["id"] for r in rows] == list(range(1, 10))
    assert (rows[0]["sigma_east_asia"], rows[0]["sigma_north_america"]) == (0.1, 0.7)
    assert all(r["block_avg_ms"] is not None for r in rows)
    assert len((out / "tuning" / "table.csv").read_text().splitlines()) == 10


def test_sweep_rejects_bad_cell_before_running(tiny, tmp_path):
    out = tmp_path / "o"
    assert main(["sweep", "--config", str(tiny), "--sigma", "east_asia=0.1,0.9", "--out", str(out)]) == 2
    assert not out.exists()


def test_frame_make_dump_roundtrip(capsys):
    payload = "ab" * 100
    assert main(["frame", "make", "--key", KEY, "--payload", payload]) == 0
    cap = capsys.readouterr()
    frame = cap.out.strip()
    assert len(bytes.fromhex(frame)) == 144 and "total 144 bytes" in cap.err
    assert main(["frame", "dump", "--key", KEY, "--frame", frame]) == 0
    out = capsys.readouterr().out
    assert "length       100" in out and "header_crc   ok" in out and "payload_crc  ok" in out
    assert f"payload      {payload}" in out


def test_frame_dump_wrong_key_and_bad_payload(capsys):
    assert main(["frame", "make", "--key", KEY, "--payload", "00" * 10]) == 0
    frame = capsys.readouterr().out.strip()
    assert main(["frame", "dump", "--key", "ff" * 16, "--frame", frame]) == 3
    assert "header_crc   FAIL" in capsys.readouterr().out
    raw = bytearray.fromhex(frame)
    raw[45] ^= 1
    assert main(["frame", "dump", "--key", KEY, "--frame", raw.hex()]) == 3
    out = capsys.readouterr().out
    assert "header_crc   ok" in out and "payload_crc  FAIL" in out


def test_frame_bad_hex_and_missing_key(monkeypatch, capsys):
    monkeypatch.delenv(MESH_KEY_ENV, raising=False)
    assert main(["frame", "make", "--payload", "00"]) == 2
    monkeypatch.setenv(MESH_KEY_ENV, KEY)
    assert main(["frame", "make", "--payload", "zz"]) == 2
    assert "not valid hex" in capsys.readouterr().err
    assert main(["frame", "make", "--payload", "00"]) == 0


def test_frame_udp_form(capsys):
    assert main(["frame", "make", "--key", KEY, "--payload", "11" * 1428, "--udp", "--counter", "7"]) == 0
    cap = capsys.readouterr()
    assert "transport udp" in cap.err
    gram = bytes.fromhex(cap.out.strip())
    assert wire.decode_udp(gram, bytes.fromhex(KEY))[1] == b"\x11" * 1428
    assert main(["frame", "dump", "--key", KEY, "--udp", "--frame", gram.hex()]) == 0


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "pioplat.cli", "frame", "make", "--key", KEY, "--payload", ""],
                       capture_output=True, text=True)
    assert r.returncode == 0 and len(bytes.fromhex(r.stdout.strip())) == 44
