"""
Link latency and device failure models for the simulator.

All randomness comes from named substreams: one generator per
(device, request, stage, purpose) derived from the run seed, so adding a
device or a request never shifts the draws of another.
"""

import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from codedinfer.core.errors import ParseError


class Purpose(IntEnum):
    """Fourth key of a named random stream."""
    INPUT_LINK = 1
    REPLY_LINK = 2
    DROP = 3
    REQUEST_INPUT = 4


def stream(seed: int, device: int, request: int, stage: int, purpose: Purpose) -> np.random.Generator:
    key = (int(device) & 0xFFFFFFFF, int(request), int(stage), int(purpose))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


class LatencyKind(Enum):
    DETERMINISTIC = "det"
    UNIFORM = "uniform"
    LOGNORMAL = "lognorm"
    EMPIRICAL = "emp"


@dataclass(frozen=True)
class LinkLatency:
    """One latency distribution in milliseconds."""
    kind: LatencyKind
    params: Tuple[float, ...] = ()
    samples: Tuple[float, ...] = ()
    source: str = ""

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind is LatencyKind.DETERMINISTIC:
            return self.params[0]
        if self.kind is LatencyKind.UNIFORM:
            lo, hi = self.params
            return float(rng.uniform(lo, hi))
        if self.kind is LatencyKind.LOGNORMAL:
            mu, sigma = self.params
            return float(rng.lognormal(mu, sigma))
        return float(self.samples[int(rng.integers(len(self.samples)))])

    def mean(self) -> float:
        if self.kind is LatencyKind.DETERMINISTIC:
            return self.params[0]
        if self.kind is LatencyKind.UNIFORM:
            return (self.params[0] + self.params[1]) / 2
        if self.kind is LatencyKind.LOGNORMAL:
            mu, sigma = self.params
            return float(np.exp(mu + sigma ** 2 / 2))
        return float(np.mean(self.samples))

    @property
    def spec(self) -> str:
        if self.kind is LatencyKind.DETERMINISTIC:
            return f"det:{self.params[0]:g}"
        if self.kind is LatencyKind.UNIFORM:
            return f"uniform:{self.params[0]:g}..{self.params[1]:g}"
        if self.kind is LatencyKind.LOGNORMAL:
            return f"lognorm:{self.params[0]:g},{self.params[1]:g}"
        return f"emp:{self.source}"


def _number(text: str, spec: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"latency spec {spec!r}: {text!r} is not a number")
    if not np.isfinite(value):
        raise ParseError(f"latency spec {spec!r}: {text!r} is not finite")
    return value


def parse_latency(spec: str, base_dir: Optional[Path] = None) -> LinkLatency:
    """
    Parse ``det:10``, ``uniform:5..50``, ``lognorm:mu,sigma`` or ``emp:file``.

    Raises:
        ParseError
    """
    kind, sep, body = spec.strip().partition(":")
    if not sep or not body:
        raise ParseError(f"latency spec {spec!r} must look like kind:params")
    if kind == "det":
        value = _number(body, spec)
        if value < 0:
            raise ParseError(f"latency spec {spec!r}: delay must be >= 0")
        return LinkLatency(LatencyKind.DETERMINISTIC, (value,))
    if kind == "uniform":
        lo, dots, hi = body.partition("..")
        if not dots:
            raise ParseError(f"latency spec {spec!r}: expected uniform:lo..hi")
        lo_v, hi_v = _number(lo, spec), _number(hi, spec)
        if not 0 <= lo_v <= hi_v:
            raise ParseError(f"latency spec {spec!r}: need 0 <= lo <= hi")
        return LinkLatency(LatencyKind.UNIFORM, (lo_v, hi_v))
    if kind == "lognorm":
        parts = body.split(",")
        if len(parts) != 2:
            raise ParseError(f"latency spec {spec!r}: expected lognorm:mu,sigma")
        mu, sigma = _number(parts[0], spec), _number(parts[1], spec)
        if sigma < 0:
            raise ParseError(f"latency spec {spec!r}: sigma must be >= 0")
        return LinkLatency(LatencyKind.LOGNORMAL, (mu, sigma))
    if kind == "emp":
        path = Path(body)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ParseError(f"latency spec {spec!r}: cannot read samples: {e}")
        values = tuple(_number(t, spec) for t in re.split(r"[\s,]+", text) if t)
        if not values:
            raise ParseError(f"latency spec {spec!r}: sample file is empty")
        if min(values) < 0:
            raise ParseError(f"latency spec {spec!r}: samples must be >= 0")
        return LinkLatency(LatencyKind.EMPIRICAL, samples=values, source=body)
    raise ParseError(f"unknown latency kind {kind!r} in {spec!r}")


@dataclass(frozen=True)
class LatencyModel:
    """Default link distribution, per-device link overrides and a bandwidth term."""
    default: LinkLatency
    overrides: Mapping[int, LinkLatency] = field(default_factory=dict)
    ms_per_kib: float = 0.0

    def __post_init__(self):
        if self.ms_per_kib < 0:
            raise ValueError("payload term must be >= 0 ms/KiB")

    def link(self, device: int) -> LinkLatency:
        return self.overrides.get(device, self.default)

    def payload_ms(self, nbytes: int) -> float:
        return self.ms_per_kib * nbytes / 1024.0

    def sample(self, device: int, nbytes: int, rng: np.random.Generator) -> float:
        return self.link(device).sample(rng) + self.payload_ms(nbytes)

    def with_overrides(self, overrides: Mapping[int, Union[str, LinkLatency]],
                       base_dir: Optional[Path] = None) -> "LatencyModel":
        merged = dict(self.overrides)
        for device, spec in overrides.items():
            merged[device] = parse_latency(spec, base_dir) if isinstance(spec, str) else spec
        return LatencyModel(self.default, merged, self.ms_per_kib)


# --- Failures ---

@dataclass(frozen=True)
class PermanentAt:
    at_ms: float


@dataclass(frozen=True)
class DownInterval:
    start_ms: float
    end_ms: float


@dataclass(frozen=True)
class DropProbability:
    p: float


FailureEvent = Union[PermanentAt, DownInterval, DropProbability]


@dataclass(frozen=True)
class FailureModel:
    """Per-device failure schedules; devices without one never fail."""
    schedules: Mapping[int, Tuple[FailureEvent, ...]] = field(default_factory=dict)
    seed: int = 0

    def is_down(self, device: int, at_ms: float) -> bool:
        for event in self.schedules.get(device, ()):
            if isinstance(event, PermanentAt) and at_ms >= event.at_ms:
                return True
            if isinstance(event, DownInterval) and event.start_ms <= at_ms < event.end_ms:
                return True
        return False

    def drops(self, device: int, request: int, stage: int) -> bool:
        """Whether the device silently skips this request (drawn once per request and stage)."""
        for event in self.schedules.get(device, ()):
            if isinstance(event, DropProbability) and event.p > 0:
                rng = stream(self.seed, device, request, stage, Purpose.DROP)
                return bool(rng.random() < event.p)
        return False

    @property
    def devices(self) -> Tuple[int, ...]:
        return tuple(sorted(self.schedules))

    def with_seed(self, seed: int) -> "FailureModel":
        return FailureModel(self.schedules, seed)


_FAILURE = re.compile(
    r"^(?P<dev>\d+):(?:perm@(?P<perm>[\d.]+)|down@(?P<t0>[\d.]+)-(?P<t1>[\d.]+)|drop@(?P<p>[\d.]+))$"
)


def parse_failures(spec: str, seed: int = 0) -> FailureModel:
    """
    Parse ``DEV:perm@T``, ``DEV:down@T0-T1`` and ``DEV:drop@P`` entries, comma-separated.

    Raises:
        ParseError
    """
    schedules: Dict[int, Tuple[FailureEvent, ...]] = {}
    for item in (s.strip() for s in spec.split(",")):
        if not item:
            continue
        m = _FAILURE.match(item)
        if m is None:
            raise ParseError(f"failure spec {item!r} must be DEV:perm@T, DEV:down@T0-T1 or DEV:drop@P")
        try:
            if m.group("perm") is not None:
                event: FailureEvent = PermanentAt(float(m.group("perm")))
            elif m.group("t0") is not None:
                t0, t1 = float(m.group("t0")), float(m.group("t1"))
                if t1 <= t0:
                    raise ParseError(f"failure spec {item!r}: interval end must follow its start")
                event = DownInterval(t0, t1)
            else:
                p = float(m.group("p"))
                if not 0.0 <= p <= 1.0:
                    raise ParseError(f"failure spec {item!r}: probability must be in [0, 1]")
                event = DropProbability(p)
        except ValueError as e:
            if isinstance(e, ParseError):
                raise
            raise ParseError(f"failure spec {item!r}: {e}")
        device = int(m.group("dev"))
        schedules[device] = schedules.get(device, ()) + (event,)
    return FailureModel(schedules, seed)
