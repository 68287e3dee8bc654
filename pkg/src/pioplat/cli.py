"""Command line entry point: ``pioplat sim|sweep|frame|relay``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import wire
from .core import BLOCK, TX, hash_of
from .peering import STRATEGIES, ConfigError
from .simnet.config import SimConfig, load_sim_config
from .simnet.metrics import aggregate
from .simnet.scenarios import race_report, run_once, scenario_peri, scenario_scalability, tuning_cells
from .simnet.world import CONTROL, OBSERVER

MESH_KEY_ENV = "PIOPLAT_MESH_KEY"
SIM_SCENARIOS = ("single", "scalability", "peri", "race")

log = logging.getLogger("pioplat")


def parse_seeds(text: str) -> List[int]:
    """``"1,2,5-7"`` -> ``[1, 2, 5, 6, 7]``."""
    out: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, _, hi = part.partition("-")
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ValueError(f"empty seed range {part!r}")
            out.extend(range(lo_i, hi_i + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("no seeds given")
    if len(set(out)) != len(out):
        raise ValueError("duplicate seeds")
    return out


def parse_sigma_grid(items: Sequence[str]) -> Dict[str, List[float]]:
    grid: Dict[str, List[float]] = {}
    for item in items:
        region, sep, values = item.partition("=")
        if not sep or not region:
            raise ValueError(f"--sigma expects REGION=v1,v2,... got {item!r}")
        grid[region.strip()] = [float(v) for v in values.split(",") if v.strip()]
    return grid


def _load_config(args) -> SimConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config: no such file {path}")
        cfg = load_sim_config(path)
    else:
        cfg = SimConfig()
    changes = {}
    if getattr(args, "strategy", None):
        changes["strategy"] = args.strategy
    if getattr(args, "race_trials", None) is not None:
        changes["race_trials"] = args.race_trials
    return cfg.with_(**changes) if changes else cfg


def _apply_sigma(cfg: SimConfig, sigma: Optional[List[str]]) -> SimConfig:
    if not sigma:
        return cfg
    plain = [s for s in sigma if "=" not in s]
    if plain:
        cfg = cfg.with_(sigma=float(plain[-1]))
    grid = parse_sigma_grid([s for s in sigma if "=" in s])
    for region, values in grid.items():
        if len(values) != 1:
            raise ConfigError(f"--sigma {region}: sim takes one value per region (use sweep for grids)")
    if grid:
        cfg = tuning_cells(cfg, grid)[0]
    return cfg


# -- sim ------------------------------------------------------------------------

def _run_seed(scenario: str, cfg: SimConfig, seed_dir: str) -> List[dict]:
    """Run one seed of a scenario, write its files, return the per-report summaries."""
    d = Path(seed_dir)
    d.mkdir(parents=True, exist_ok=True)
    if scenario == "scalability":
        reports = scenario_scalability(cfg)
        names = [f"stage{k}" for k in range(1, len(reports) + 1)]
    elif scenario == "peri":
        reports, names = [scenario_peri(cfg)], ["report"]
    elif scenario == "race":
        reports, names = [race_report(cfg, cfg.race_trials or 100)], ["report"]
    else:
        reports, names = [run_once(cfg)], ["report"]
    out = []
    for name, rep in zip(names, reports):
        rep.write_csv(d / f"{name}.csv")
        rep.write_json(d / f"{name}.json")
        if rep.race:
            with open(d / f"{name}_race.csv", "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=list(rep.race[0]))
                w.writeheader()
                w.writerows(rep.race)
        out.append(rep.summary())
    return out


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.3f}" if abs(x) < 10 else f"{x:.1f}"
    return str(x)


def _summary_rows(seed: int, summaries: List[dict]) -> List[List[str]]:
    rows = []
    for i, s in enumerate(summaries, 1):
        obs = s["observers"]
        ff = s.get("fraction_first", {})
        race = s.get("race", {})
        rows.append([str(seed), str(i), _fmt(obs[OBSERVER][BLOCK]["median"]), _fmt(obs[CONTROL][BLOCK]["median"]),
                     _fmt(ff.get(BLOCK)), _fmt(ff.get(TX)),
                     f"{race['relay']}/{race['baseline']}" if race else "-"])
    return rows


def _print_table(header: List[str], rows: List[List[str]]) -> None:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))


def _dump(path: Path, data) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _pool_map(jobs: int, fn, argsets):
    if jobs <= 1 or len(argsets) <= 1:
        return [fn(*a) for a in argsets]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futures = [ex.submit(fn, *a) for a in argsets]
        return [f.result() for f in futures]


def cmd_sim(args) -> int:
    cfg = _apply_sigma(_load_config(args), args.sigma)
    seeds = parse_seeds(args.seeds)
    if args.scenario == "race" and not cfg.race_trials:
        cfg = cfg.with_(race_trials=100)
    out = Path(args.out)
    base = out / args.scenario
    argsets = [(args.scenario, cfg.with_(seed=s), str(base / str(s))) for s in seeds]
    try:
        results = _pool_map(args.jobs, _run_seed, argsets)
    except Exception as e:  # a run died: flag what was written
        base.mkdir(parents=True, exist_ok=True)
        (base / "INCOMPLETE").write_text(f"{type(e).__name__}: {e}\n")
        print(f"error: run failed: {e}", file=sys.stderr)
        return 1
    stages = max(len(r) for r in results)
    agg = {"scenario": args.scenario, "seeds": seeds, "config": cfg.with_(seed=seeds[0]).to_dict(),
           "stages": [aggregate([r[i] for r in results if i < len(r)]) for i in range(stages)]}
    agg["config"].pop("seed", None)
    _dump(out / "aggregate.json", agg)
    rows = [row for s, r in zip(seeds, results) for row in _summary_rows(s, r)]
    _print_table(["seed", "stage", "obs_block_med", "ctl_block_med", "ff_block", "ff_tx", "race"], rows)
    return 0


# -- sweep ----------------------------------------------------------------------

def _tuning_cell(cell: SimConfig, seed: int):
    rep = run_once(cell.with_(seed=seed))
    lat = rep.latencies(OBSERVER, BLOCK)
    return (sum(lat) / len(lat) if lat else None), rep.mean_diff(OBSERVER, CONTROL, TX)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    seeds = parse_seeds(args.seeds)
    if not args.sigma:
        raise ConfigError("sweep: give at least one --sigma REGION=v1,v2,...")
    grid = parse_sigma_grid(args.sigma)
    cells = tuning_cells(cfg, grid)  # validates every cell before anything runs
    argsets = [(c, s) for c in cells for s in seeds]
    results = _pool_map(args.jobs, _tuning_cell, argsets)
    rows = []
    for i, cell in enumerate(cells):
        got = results[i * len(seeds):(i + 1) * len(seeds)]
        blocks = [b for b, _ in got if b is not None]
        diffs = [d for _, d in got if d is not None]
        rows.append({"id": i + 1, **{f"sigma_{n}": cell.region_sigma(n) for n in grid},
                     "block_avg_ms": sum(blocks) / len(blocks) if blocks else None,
                     "tx_diff_ms": sum(diffs) / len(diffs) if diffs else None,
                     "seeds": len(seeds)})
    out = Path(args.out) / "tuning"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _dump(out / "table.json", rows)
    _dump(Path(args.out) / "aggregate.json", {"scenario": "tuning", "seeds": seeds, "grid": grid, "rows": rows})
    _print_table(list(rows[0]), [[_fmt(v) for v in r.values()] for r in rows])
    return 0


# -- frame ----------------------------------------------------------------------

def _key(args) -> bytes:
    text = args.key or os.environ.get(MESH_KEY_ENV)
    if not text:
        raise ConfigError(f"mesh key: pass --key or set {MESH_KEY_ENV}")
    try:
        return wire.parse_key(text)
    except ValueError as e:
        raise ConfigError(f"mesh key: {e}") from e


class BadHex(ValueError):
    pass


def _hex(text: str, what: str) -> bytes:
    try:
        return bytes.fromhex(text.strip())
    except ValueError as e:
        raise BadHex(f"{what}: not valid hex") from e


def cmd_frame(args) -> int:
    key = _key(args)
    if args.action == "make":
        payload = _hex(args.payload, "payload")
        h = _hex(args.hash, "hash") if args.hash else hash_of(payload)
        if len(h) != 32:
            raise BadHex("hash: need 32 bytes (64 hex chars)")
        if args.udp:
            frame = wire.encode_udp(h, payload, key, args.counter)
        else:
            frame = wire.encode(h, payload, wire.KeystreamState(key, args.offset))
        print(frame.hex())
        print(f"total {len(frame)} bytes (payload {len(payload)}, overhead "
              f"{len(frame) - len(payload)}, transport {wire.transport_for(TX, len(payload), args.udp)})",
              file=sys.stderr)
        return 0
    frame = _hex(args.frame if args.frame != "-" else sys.stdin.read(), "frame")
    try:
        info = wire.inspect_frame(frame, key, udp=args.udp, offset=args.offset)
    except wire.FrameError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    print(f"length       {info.length}")
    print(f"hash         {info.hash.hex()}")
    print(f"header_crc   {'ok' if info.header_ok else 'FAIL'}")
    verdict = {True: "ok", False: "FAIL", None: "unchecked"}[info.payload_ok]
    print(f"payload_crc  {verdict}")
    print(f"frame_bytes  {info.size}")
    if info.payload_ok:
        print(f"payload      {info.payload.hex()}")
    return 0 if info.header_ok and info.payload_ok else 3


# -- relay ----------------------------------------------------------------------

def cmd_relay(args) -> int:
    from .relay.standalone import run_standalone
    return run_standalone(args)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pioplat", description="Relay network simulator and tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario: bool):
        sp.add_argument("--config", help="simulation TOML file")
        sp.add_argument("--seeds", default="1", help="e.g. 1,2,5-8")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        sp.add_argument("--sigma", action="append",
                        help="global sigma, or REGION=v1,v2,... (repeatable)")
        if scenario:
            sp.add_argument("--scenario", choices=SIM_SCENARIOS, default="single")
            sp.add_argument("--strategy", choices=STRATEGIES)
            sp.add_argument("--race-trials", type=int)

    common(sub.add_parser("sim", help="run a scenario over seeds"), True)
    sw = sub.add_parser("sweep", help="block-latency table over a per-region sigma grid")
    common(sw, False)
    sw.add_argument("--scenario", choices=("tuning",), default="tuning")
    sw.add_argument("--strategy", choices=STRATEGIES)

    fr = sub.add_parser("frame", help="build or inspect inter-relay frames")
    fr.add_argument("action", choices=("make", "dump"))
    fr.add_argument("--key", help=f"32 hex chars (default: ${MESH_KEY_ENV})")
    fr.add_argument("--payload", default="", help="make: payload hex")
    fr.add_argument("--hash", help="make: 32-byte hash hex (default sha256 of payload)")
    fr.add_argument("--frame", default="-", help="dump: frame hex, '-' for stdin")
    fr.add_argument("--udp", action="store_true", help="datagram form with clear counter prefix")
    fr.add_argument("--counter", type=int, default=0, help="make --udp: counter block")
    fr.add_argument("--offset", type=int, default=0, help="tcp: keystream byte offset")

    rl = sub.add_parser("relay", help="run one relay against a local simulated full node")
    rl.add_argument("--config", help="relay TOML file")
    rl.add_argument("--host", default="127.0.0.1")
    rl.add_argument("--user-port", type=int, default=30400)
    rl.add_argument("--fullnode-port", type=int, default=30401)
    rl.add_argument("--duration", type=float, default=0.0, help="seconds to run, 0 = forever")
    return p


COMMANDS = {"sim": cmd_sim, "sweep": cmd_sweep, "frame": cmd_frame, "relay": cmd_relay}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except BadHex as e:
        print(f"error: bad hex: {e}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
