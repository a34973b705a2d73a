"""Run configuration shared by the experiment drivers and the command line."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from .htb import PolicyError, PolicyTable, default_policy, load_policy
from .link import DEFAULT_MSS, DEFAULT_OVERHEAD, LinkConfig
from .transport import CcMode, RtoMode

DEFAULT_SIZE = 128_003_200
MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    rtt_ms: float = 180.0
    loss: float = 0.0
    rate_mbps: float = 476.0
    mss: int = DEFAULT_MSS
    overhead_bytes: int = DEFAULT_OVERHEAD
    size_bytes: int = DEFAULT_SIZE
    cc_mode: CcMode = CcMode.FIXED
    rto_mode: RtoMode = RtoMode.ACCELERATED
    seed: int = 1
    samples: int = 160
    bin_ms: float = 100.0
    policy_path: str | None = None
    timeline_path: str | None = None
    out_path: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "cc_mode", CcMode(self.cc_mode))
            object.__setattr__(self, "rto_mode", RtoMode(self.rto_mode))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        checks = [
            (math.isfinite(self.rtt_ms) and self.rtt_ms > 0, "rtt_ms must be positive"),
            (math.isfinite(self.loss) and 0.0 <= self.loss <= 1.0,
             f"loss must be a fraction in [0, 1], got {self.loss}"),
            (math.isfinite(self.rate_mbps) and self.rate_mbps > 0, "rate_mbps must be positive"),
            (self.mss > 0, "mss must be positive"),
            (self.overhead_bytes >= 0, "overhead_bytes must be non-negative"),
            (self.size_bytes > 0, "size_bytes must be positive"),
            (0 <= self.seed <= MASK64, "seed must fit in 64 bits"),
            (self.samples >= 1, "samples must be at least 1"),
            (math.isfinite(self.bin_ms) and self.bin_ms > 0, "bin_ms must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @property
    def rtt_ns(self) -> int:
        # the path splits the round trip into two equal one-way delays
        return 2 * max(1, round(self.rtt_ms * 500_000))

    @property
    def rate_bps(self) -> int:
        return round(self.rate_mbps * 1_000_000)

    @property
    def bin_ns(self) -> int:
        return max(1, round(self.bin_ms * 1_000_000))

    def link(self) -> LinkConfig:
        return LinkConfig(rtt=self.rtt_ns, loss_probability=self.loss)

    def policy(self) -> PolicyTable:
        if self.policy_path is None:
            return default_policy(self.rate_bps)
        try:
            return load_policy(self.policy_path, self.rate_bps)
        except OSError as exc:
            raise ConfigError(f"cannot read policy file: {exc}") from None
        except (PolicyError, yaml.YAMLError) as exc:
            raise ConfigError(f"bad policy file {self.policy_path}: {exc}") from None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


FIELD_NAMES = tuple(f.name for f in dataclasses.fields(RunConfig))


def load_config_file(path) -> dict:
    """Read a YAML mapping whose keys are RunConfig field names (dashes allowed)."""
    try:
        with open(Path(path)) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    out = {}
    for key, value in data.items():
        name = str(key).replace("-", "_")
        if name not in FIELD_NAMES:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = value
    return out


def make_config(file_values: dict | None = None, **overrides) -> RunConfig:
    """File values first, then every override that is not None."""
    values = dict(file_values or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
