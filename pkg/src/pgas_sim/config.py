"""Runtime configuration: dataclass, key=value file parsing, env/CLI overrides.

Precedence is CLI flags > config file named by PGAS_SIM_CONFIG (or passed
explicitly) > built-in defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from typing import Optional

from .errors import ConfigError

ENV_CONFIG = "PGAS_SIM_CONFIG"

TOPOLOGY_NAMES = ("auto", "same_tile", "cross_tile", "cross_device")
CUTOVER_MODES = ("never", "always", "tuned")
INTERNODE_ROLES = ("standalone", "node_a", "node_b")


@dataclass
class RuntimeConfig:
    """Everything needed to bring up one node's worth of PEs."""

    npes: int = 1                      # PEs hosted by this node
    heap_size: int = 1 << 20           # bytes per PE
    ring_capacity: int = 4096          # power-of-two slot count
    engine_startup_us: Optional[float] = None   # override per-topology default
    engine_bw_cap_gbps: Optional[float] = None  # override per-topology default, 0 = unlimited
    cutover_mode: str = "tuned"
    topology: str = "auto"             # forced profile name, or auto per PE pair
    internode_role: str = "standalone"
    peer_endpoint: str = ""            # host:port, required for node_a / node_b
    world_size: Optional[int] = None   # optional cross-check of the two-node world
    time_scale: Optional[float] = None  # None = auto-calibrate; 0 disables cost model
    completion_slots: int = 256        # per-PE completion pool size
    publish_interval: int = 64         # ring consumed-counter publication period

    def validate(self) -> "RuntimeConfig":
        if self.npes < 1:
            raise ConfigError(f"npes must be >= 1, got {self.npes}")
        if self.heap_size < 64:
            raise ConfigError(f"heap_size must be >= 64 bytes, got {self.heap_size}")
        cap = self.ring_capacity
        if cap < 2 or cap & (cap - 1):
            raise ConfigError(f"ring_capacity must be a power of two >= 2, got {cap}")
        if self.cutover_mode not in CUTOVER_MODES:
            raise ConfigError(f"cutover_mode must be one of {CUTOVER_MODES}")
        if self.topology not in TOPOLOGY_NAMES:
            raise ConfigError(f"topology must be one of {TOPOLOGY_NAMES}")
        if self.internode_role not in INTERNODE_ROLES:
            raise ConfigError(f"internode_role must be one of {INTERNODE_ROLES}")
        if self.internode_role != "standalone" and not self.peer_endpoint:
            raise ConfigError("peer_endpoint required when internode_role is not standalone")
        if self.completion_slots < 1:
            raise ConfigError("completion_slots must be >= 1")
        if self.publish_interval < 1:
            raise ConfigError("publish_interval must be >= 1")
        if self.time_scale is not None and self.time_scale < 0:
            raise ConfigError("time_scale must be >= 0")
        return self


_INT_KEYS = {"npes", "heap_size", "ring_capacity", "world_size",
             "completion_slots", "publish_interval"}
_FLOAT_KEYS = {"engine_startup_us", "engine_bw_cap_gbps", "time_scale"}
_STR_KEYS = {"cutover_mode", "topology", "internode_role", "peer_endpoint"}


def _parse_size(text: str) -> int:
    """Accept plain ints plus K/M/G suffixes (powers of 1024)."""
    text = text.strip()
    mult = 1
    if text and text[-1].upper() in "KMG":
        mult = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}[text[-1].upper()]
        text = text[:-1]
    try:
        return int(text) * mult
    except ValueError as exc:
        raise ConfigError(f"bad integer value {text!r}") from exc


def parse_config_text(text: str, base: Optional[RuntimeConfig] = None) -> RuntimeConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys rejected."""
    cfg = base if base is not None else RuntimeConfig()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in _INT_KEYS:
            values[key] = _parse_size(value)
        elif key in _FLOAT_KEYS:
            try:
                values[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad float {value!r}") from exc
        elif key in _STR_KEYS:
            values[key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return replace_config(cfg, **values)


def replace_config(cfg: RuntimeConfig, **overrides) -> RuntimeConfig:
    """Copy cfg with overrides applied; None values mean 'keep'."""
    current = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for key, value in overrides.items():
        if key not in current:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            current[key] = value
    return RuntimeConfig(**current)


def load_config(path: Optional[str] = None, **overrides) -> RuntimeConfig:
    """Build a config from defaults, optional file, env pointer, and overrides."""
    cfg = RuntimeConfig()
    chosen = path or os.environ.get(ENV_CONFIG)
    if chosen:
        try:
            with open(chosen, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {chosen}: {exc}") from exc
        cfg = parse_config_text(text, cfg)
    cfg = replace_config(cfg, **overrides)
    return cfg.validate()
