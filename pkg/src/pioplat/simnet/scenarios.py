"""Scripted experiments on top of the simulator."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

from ..core import BLOCK, TX
from ..peering import PERI, PIOPLAT, ConfigError
from .config import SimConfig
from .metrics import MetricsReport
from .world import CONTROL, OBSERVER, build_network

SCENARIOS = ("single", "scalability", "peri", "tuning", "race")


def run_once(cfg: SimConfig) -> MetricsReport:
    return build_network(cfg).run()


def scenario_scalability(cfg: SimConfig, relay_regions: Optional[Sequence[str]] = None) -> List[MetricsReport]:
    """One run per stage; stage k meshes the first k relays.

    Every relay exists in every stage so the p2p graph is identical across
    stages and only the mesh grows.
    """
    regions = list(relay_regions if relay_regions is not None else cfg.relay_regions)
    if not regions:
        raise ConfigError("relay_regions: need at least one relay")
    base = cfg.with_(strategy=PIOPLAT, relay_regions=regions)
    return [run_once(base.with_(mesh_size=k)) for k in range(1, len(regions) + 1)]


def scenario_peri(cfg: SimConfig) -> MetricsReport:
    """Relay observer against a co-located node running the peri-like strategy."""
    return run_once(cfg.with_(strategy=PIOPLAT, control_strategy=PERI))


@dataclass
class TuningRow:
    sigmas: Dict[str, float]
    block_avg_ms: Optional[float]
    tx_diff_ms: Optional[float]

    def as_dict(self) -> dict:
        return {"sigmas": dict(self.sigmas), "block_avg_ms": self.block_avg_ms, "tx_diff_ms": self.tx_diff_ms}


def tuning_cells(cfg: SimConfig, sigma_grid: Dict[str, Sequence[float]]) -> List[SimConfig]:
    """Expand a per-region sigma grid into validated configs (row-major, first region slowest)."""
    if not sigma_grid or any(not v for v in sigma_grid.values()):
        raise ConfigError("sigma_grid: need at least one value per region")
    names = list(sigma_grid)
    out = []
    for combo in itertools.product(*(sigma_grid[n] for n in names)):
        chosen = dict(zip(names, combo))
        for n in names:
            if n not in cfg.region_names:
                raise ConfigError(f"sigma_grid: unknown region {n!r}")
        regions = [replace(r, sigma=chosen.get(r.name, r.sigma)) for r in cfg.regions]
        out.append(cfg.with_(regions=regions))
    return out


def scenario_tuning(cfg: SimConfig, sigma_grid: Dict[str, Sequence[float]],
                    seeds: Optional[Sequence[int]] = None) -> List[TuningRow]:
    """Table of (sigma per region -> mean block latency, mean tx advantage).

    With several seeds every cell runs on the same seed set and reports the
    mean over seeds.
    """
    cells = tuning_cells(cfg, sigma_grid)
    seeds = list(seeds) if seeds else [cfg.seed]
    rows = []
    for cell in cells:
        blocks, diffs = [], []
        for s in seeds:
            rep = run_once(cell.with_(seed=s))
            lat = rep.latencies(OBSERVER, BLOCK)
            if lat:
                blocks.append(sum(lat) / len(lat))
            d = rep.mean_diff(OBSERVER, CONTROL, TX)
            if d is not None:
                diffs.append(d)
        rows.append(TuningRow({n: cell.region_sigma(n) for n in sigma_grid},
                              sum(blocks) / len(blocks) if blocks else None,
                              sum(diffs) / len(diffs) if diffs else None))
    return rows


def scenario_tx_race(cfg: SimConfig, trials: int = 100) -> Dict[str, int]:
    return race_report(cfg, trials).race_wins()


def race_report(cfg: SimConfig, trials: int = 100) -> MetricsReport:
    if trials < 1:
        raise ConfigError("race_trials: need at least one trial")
    # long enough for every trial to start after warmup and settle
    need = trials * cfg.race_interval_ms + 5000
    duration = max(cfg.duration_ms, math.ceil(need / (1.0 - cfg.warmup_frac)), cfg.delta_ms + need)
    return run_once(cfg.with_(strategy=PIOPLAT, race_trials=trials, duration_ms=duration))
