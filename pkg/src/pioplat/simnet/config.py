"""Simulation configuration and its TOML schema.

Top-level keys mirror ``SimConfig`` field names. Tables::

    [regions.<name>]          # one table per region, in matrix order
    miners = 8
    broadcasters = 8
    plain = 44
    sigma = 0.3               # optional per-region relay sigma
    latency_ms = [15, 75, 45] # one-way latency to every region, in order

Example::

    seed = 7
    duration_ms = 360000
    relay_regions = ["east_asia", "north_america", "europe", "north_america", "east_asia"]
    observer_region = "east_asia"
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional

from ..peering import PERI, PIOPLAT, RANDOM, STRATEGIES, ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

NODE_CLASSES = ("miners", "broadcasters", "plain")


@dataclass
class Region:
    name: str
    latency_ms: List[float]
    miners: int = 0
    broadcasters: int = 0
    plain: int = 0
    sigma: Optional[float] = None

    @property
    def size(self) -> int:
        return self.miners + self.broadcasters + self.plain


def default_regions() -> List[Region]:
    # east asia: many transaction senders; north america: most block producers
    return [
        Region("east_asia", [15, 75, 120], miners=2, broadcasters=36, plain=42, sigma=0.3),
        Region("north_america", [75, 15, 45], miners=8, broadcasters=6, plain=46, sigma=0.7),
        Region("europe", [120, 45, 10], miners=2, broadcasters=8, plain=50, sigma=0.4),
    ]


@dataclass
class SimConfig:
    seed: int = 1
    regions: List[Region] = field(default_factory=default_regions)
    jitter: float = 0.1
    block_interval_ms: int = 3000
    validation_block_ms: int = 50
    validation_tx_ms: int = 2
    announce_wait_ms: int = 400
    fetch_timeout_ms: int = 2000
    max_peers: int = 20
    outbound: int = 6
    miner_max_peers: int = 30
    miner_clique: bool = True  # block producers peer directly with each other
    miner_push_all: bool = False  # miners send new blocks in full to every neighbor
    duration_ms: int = 360_000
    warmup_frac: float = 0.2
    tx_rate_per_s: float = 1.0
    tx_size_min: int = 100
    tx_size_max: int = 400
    large_tx_frac: float = 0.02
    block_body_bytes: int = 64
    udp_loss: float = 0.01
    # observed system and its co-located control node
    strategy: str = PIOPLAT
    control_strategy: str = RANDOM
    observer_region: str = "east_asia"
    control_peers: int = 20
    # relays
    relay_regions: List[str] = field(default_factory=lambda: [
        "east_asia", "north_america", "europe", "north_america", "east_asia"])
    mesh_size: Optional[int] = None  # None: every relay joins the mesh
    relay_k: int = 20
    rho: float = 0.2
    sigma: float = 0.3
    delta_ms: int = 20_000
    miss_penalty_ms: float = 5000.0
    score_percentile: float = 90.0
    gossip_delay_ms: int = 1500
    ddos_delay_ms: int = 3000
    user_latency_ms: float = 2.0
    # tx race
    race_trials: int = 0
    race_interval_ms: int = 1500
    record_transcript: bool = False
    allow_zero_latency: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [r.name for r in self.regions]
        if not self.regions:
            raise ConfigError("regions: at least one region required")
        if len(set(names)) != len(names):
            raise ConfigError("regions: duplicate region names")
        for r in self.regions:
            if len(r.latency_ms) != len(self.regions):
                raise ConfigError(f"regions.{r.name}.latency_ms: need {len(self.regions)} entries")
            if any(not (x > 0) for x in r.latency_ms) and not self.allow_zero_latency:
                raise ConfigError(f"regions.{r.name}.latency_ms: entries must be > 0")
            for c in NODE_CLASSES:
                if getattr(r, c) < 0:
                    raise ConfigError(f"regions.{r.name}.{c}: must be >= 0")
            if r.sigma is not None:
                self._check_sigma(r.sigma, f"regions.{r.name}.sigma")
        for i, r in enumerate(self.regions):
            for j, other in enumerate(self.regions):
                if r.latency_ms[j] != other.latency_ms[i]:
                    raise ConfigError(f"regions.{r.name}.latency_ms: matrix must be symmetric")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: expected one of {STRATEGIES}")
        if self.control_strategy not in (RANDOM, PERI):
            raise ConfigError(f"control_strategy: expected {RANDOM} or {PERI}")
        if self.observer_region not in names:
            raise ConfigError(f"observer_region: unknown region {self.observer_region!r}")
        for r in self.relay_regions:
            if r not in names:
                raise ConfigError(f"relay_regions: unknown region {r!r}")
        if self.strategy == PIOPLAT:
            if not self.relay_regions:
                raise ConfigError("relay_regions: pioplat needs at least one relay")
            if self.relay_regions[0] != self.observer_region:
                raise ConfigError("relay_regions: the first relay is the observer and must sit in observer_region")
        if self.mesh_size is not None and not 0 <= self.mesh_size <= len(self.relay_regions):
            raise ConfigError("mesh_size: must lie in [0, len(relay_regions)]")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho: must lie in (0, 1)")
        self._check_sigma(self.sigma, "sigma")
        if not 0.0 <= self.jitter < 1.0:
            raise ConfigError("jitter: must lie in [0, 1)")
        if not 0.0 <= self.udp_loss <= 1.0:
            raise ConfigError("udp_loss: must lie in [0, 1]")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac: must lie in [0, 1)")
        for name in ("block_interval_ms", "delta_ms", "relay_k", "max_peers", "control_peers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        for name in ("duration_ms", "outbound", "tx_rate_per_s", "race_trials",
                     "validation_block_ms", "validation_tx_ms", "announce_wait_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.tx_size_min < 1 or self.tx_size_max < self.tx_size_min:
            raise ConfigError("tx_size_min/tx_size_max: need 1 <= min <= max")

    def _check_sigma(self, sigma: float, name: str) -> None:
        if sigma < 0 or self.rho + sigma > 1.0 + 1e-9:
            raise ConfigError(f"{name}: need 0 <= sigma <= 1 - rho (rho={self.rho}, sigma={sigma})")

    @property
    def region_names(self) -> List[str]:
        return [r.name for r in self.regions]

    @property
    def node_count(self) -> int:
        return sum(r.size for r in self.regions)

    def region_sigma(self, name: str) -> float:
        for r in self.regions:
            if r.name == name and r.sigma is not None:
                return r.sigma
        return self.sigma

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def zero_latency(cfg: SimConfig) -> SimConfig:
    """A degenerate copy of ``cfg`` where every link and check takes no time."""
    n = len(cfg.regions)
    return replace(cfg, regions=[replace(r, latency_ms=[0.0] * n) for r in cfg.regions],
                   jitter=0.0, validation_block_ms=0, validation_tx_ms=0, announce_wait_ms=0,
                   user_latency_ms=0.0, allow_zero_latency=True)


def sim_config_from_dict(d: dict) -> SimConfig:
    d = dict(d)
    known = {f.name for f in fields(SimConfig)}
    regions = None
    if "regions" in d:
        raw = d.pop("regions")
        if not isinstance(raw, dict):
            raise ConfigError("regions: expected a table of region tables")
        regions = []
        for name, r in raw.items():
            r = dict(r)
            bad = sorted(set(r) - {"latency_ms", "sigma", *NODE_CLASSES})
            if bad:
                raise ConfigError(f"regions.{name}.{bad[0]}: unknown key")
            if "latency_ms" not in r:
                raise ConfigError(f"regions.{name}.latency_ms: required")
            regions.append(Region(name=name, **r))
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key")
    if regions is not None:
        d["regions"] = regions
    try:
        return SimConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_sim_config(path) -> SimConfig:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return sim_config_from_dict(data)
