"""
Runtime settings resolved from the environment.

Precedence everywhere is: CLI flag > environment variable > default below.
"""

import os
from dataclasses import dataclass

# A 2048x2048 fully-connected layer (2*2048*2048 flops) takes ~50 ms on one device.
DEFAULT_NS_PER_FLOP = 50e6 / (2 * 2048 * 2048)
DEFAULT_DETECTION_MS = 10_000.0
DEFAULT_PATTERN_CAP = 1_000_000
DEFAULT_THRESHOLD_MS = 500.0


def _env_float(name: str, default: float) -> float:
    raw = os.environ.get(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"{name} must be a number, got {raw!r}")


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw.strip())
    except ValueError:
        raise ValueError(f"{name} must be an integer, got {raw!r}")


@dataclass(frozen=True)
class Settings:
    """Process-wide defaults."""
    seed: int = 0
    ns_per_flop: float = DEFAULT_NS_PER_FLOP
    detection_ms: float = DEFAULT_DETECTION_MS
    pattern_cap: int = DEFAULT_PATTERN_CAP
    log_level: str = "WARNING"

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            seed=_env_int("CDC_SEED", 0),
            ns_per_flop=_env_float("CDC_NS_PER_FLOP", DEFAULT_NS_PER_FLOP),
            detection_ms=_env_float("CDC_DETECTION_MS", DEFAULT_DETECTION_MS),
            pattern_cap=_env_int("CDC_PATTERN_CAP", DEFAULT_PATTERN_CAP),
            log_level=os.environ.get("CDC_LOG_LEVEL", "WARNING").upper(),
        )
