"""Relay configuration, loadable from a TOML file.

Schema (every key optional)::

    region = "tokyo"
    max_peers = 200           # K
    rho = 0.2
    sigma = 0.3               # share of slots kept for fast block deliverers
    delta_ms = 600000         # selection round period
    miss_penalty_ms = 5000
    score_percentile = 90
    tx_expire_ms = 600000
    block_slots = 128
    announce_wait_ms = 400
    gossip_delay_ms = 1500
    ddos_delay_ms = 3000
    block_interval_ms = 3000
    fetch_timeout_ms = 2000
    udp_prefix = true
    mesh_key = "00112233445566778899aabbccddeeff"
    hmac_salt = "..."         # hex
    mesh_peers = ["10.0.0.2:30400", ...]
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from typing import List

from ..peering import ConfigError, SelectionConfig
from ..wire import parse_key

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class RelayConfig:
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    region: str = ""
    tx_expire_ms: int = 600_000
    block_slots: int = 128
    announce_wait_ms: int = 400
    gossip_delay_ms: int = 1500
    ddos_delay_ms: int = 3000
    block_interval_ms: int = 3000
    fetch_timeout_ms: int = 2000
    udp_prefix: bool = True
    mesh_key: bytes = bytes(16)
    hmac_salt: bytes = b""
    mesh_peers: List[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("tx_expire_ms", "block_slots", "block_interval_ms", "fetch_timeout_ms"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        for name in ("announce_wait_ms", "gossip_delay_ms", "ddos_delay_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if len(self.mesh_key) != 16:
            raise ConfigError("mesh_key: must be 16 bytes (32 hex chars)")


_SELECTION_KEYS = {"max_peers": "k", "rho": "rho", "sigma": "sigma", "delta_ms": "delta_ms",
                   "miss_penalty_ms": "miss_penalty_ms", "score_percentile": "score_percentile"}


def relay_config_from_dict(d: dict) -> RelayConfig:
    d = dict(d)
    sel = {dst: d.pop(src) for src, dst in _SELECTION_KEYS.items() if src in d}
    known = {f.name for f in fields(RelayConfig)} - {"selection"}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown relay config key")
    try:
        if "mesh_key" in d:
            d["mesh_key"] = parse_key(d["mesh_key"])
        if "hmac_salt" in d:
            d["hmac_salt"] = bytes.fromhex(d["hmac_salt"])
    except ValueError as e:
        raise ConfigError(f"mesh_key/hmac_salt: {e}") from e
    return RelayConfig(selection=SelectionConfig(**sel), **d)


def load_relay_config(path) -> RelayConfig:
    with open(path, "rb") as f:
        return relay_config_from_dict(tomllib.load(f))
