"""
Latency statistics and failure-coverage analysis.

Coverage is the fraction of devices whose single failure the protected system
tolerates without losing a request. Two protection schemes are compared:

- 2MR: every extra device duplicates one base device.
- CDC+2MR: an extra device on a CDC-suitable stage becomes that stage's coded
  device and covers all of its devices; leftover budget duplicates devices.
"""

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.stats import norm

from codedinfer.core.coder import is_decodable
from codedinfer.core.errors import EmptySamples, ParseError

logger = logging.getLogger(__name__)

PERCENTILES = (50, 90, 99)


def nearest_rank(sorted_samples: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile (no interpolation) of an ascending sample list."""
    if not sorted_samples:
        raise EmptySamples("percentile of an empty sample set")
    if not 0 < pct <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {pct}")
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_samples)))
    return float(sorted_samples[rank - 1])


# --- Histograms ---

@dataclass(frozen=True)
class LatencyHistogram:
    """Counts over half-open bins [k*w, (k+1)*w) starting at zero."""
    bin_width: float
    counts: Tuple[int, ...]
    total: int
    mean: float
    p50: float
    p90: float
    p99: float

    @property
    def bins(self) -> List[Tuple[float, float, int]]:
        w = self.bin_width
        return [(k * w, (k + 1) * w, c) for k, c in enumerate(self.counts)]

    def fraction_below(self, ms: float) -> float:
        """Fraction of samples in the bins that end at or before ``ms``."""
        return sum(c for _, end, c in self.bins if end <= ms) / self.total

    def to_dict(self) -> Dict[str, Any]:
        return {
            "bin_width": self.bin_width,
            "total": self.total,
            "mean": self.mean,
            "p50": self.p50,
            "p90": self.p90,
            "p99": self.p99,
            "bins": [{"bin_start": s, "bin_end": e, "count": c} for s, e, c in self.bins],
        }


def histogram(samples: Sequence[float], bin_width: float) -> LatencyHistogram:
    """
    Bin latency samples (ms).

    Raises:
        EmptySamples: no samples
        ValueError: bin_width <= 0 or a negative sample
    """
    if not bin_width > 0:
        raise ValueError(f"bin width must be > 0, got {bin_width}")
    values = np.asarray(list(samples), dtype=np.float64)
    if values.size == 0:
        raise EmptySamples("histogram of an empty sample set")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ValueError("latency samples must be finite and >= 0")

    counts = np.bincount(np.floor(values / bin_width).astype(np.int64))
    ordered = sorted(values.tolist())
    p50, p90, p99 = (nearest_rank(ordered, p) for p in PERCENTILES)
    return LatencyHistogram(
        bin_width=float(bin_width),
        counts=tuple(int(c) for c in counts),
        total=int(values.size),
        mean=float(values.mean()),
        p50=p50,
        p90=p90,
        p99=p99,
    )


def slowdown(before, after) -> float:
    """
    Mean latency after recovery relative to before.

    Raises:
        EmptySamples: either report has no completed requests
    """
    return after.mean_ms / before.mean_ms


# --- Lognormal link calibration ---

def fit_lognormal(q_a: Tuple[float, float], q_b: Tuple[float, float]) -> Tuple[float, float]:
    """
    Solve (mu, sigma) of a lognormal from two (ms, cumulative fraction) targets.

    ``fit_lognormal((100, 0.34), (150, 0.42))`` puts 34% of the mass below
    100 ms and 42% below 150 ms.
    """
    (ms_a, p_a), (ms_b, p_b) = q_a, q_b
    if not (ms_a > 0 and ms_b > 0):
        raise ValueError("quantile targets must be positive latencies")
    if not (0 < p_a < 1 and 0 < p_b < 1):
        raise ValueError("cumulative fractions must lie strictly between 0 and 1")
    z_a, z_b = norm.ppf(p_a), norm.ppf(p_b)
    if ms_a == ms_b or z_a == z_b or (ms_b - ms_a) * (z_b - z_a) <= 0:
        raise ValueError("quantile targets must increase together")
    sigma = (math.log(ms_b) - math.log(ms_a)) / (z_b - z_a)
    mu = math.log(ms_a) - sigma * z_a
    return float(mu), float(sigma)


def lognormal_cdf(ms: float, mu: float, sigma: float) -> float:
    if ms <= 0:
        return 0.0
    return float(norm.cdf((math.log(ms) - mu) / sigma))


def lognormal_spec(mu: float, sigma: float) -> str:
    """Latency spec string for a fitted lognormal."""
    return f"lognorm:{mu:.6g},{sigma:.6g}"


# --- Topologies ---

@dataclass(frozen=True)
class TopologyStage:
    devices: int
    model_parallel: bool = False
    cdc_suitable: bool = False

    def __post_init__(self):
        if self.devices < 1:
            raise ValueError(f"a stage needs at least one device, got {self.devices}")
        if self.cdc_suitable and not self.model_parallel:
            raise ValueError("only model-parallel stages can be CDC suitable")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "devices": self.devices,
            "model_parallel": self.model_parallel,
            "cdc_suitable": self.cdc_suitable,
        }


@dataclass(frozen=True)
class SystemTopology:
    stages: Tuple[TopologyStage, ...]
    name: str = "topology"

    @property
    def total_devices(self) -> int:
        return sum(s.devices for s in self.stages)

    @property
    def device_ids(self) -> List[Tuple[int, int]]:
        """(stage, position) for every base device."""
        return [(i, j) for i, s in enumerate(self.stages) for j in range(s.devices)]

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "stages": [s.to_dict() for s in self.stages]}


def topology(*stages: Union[int, Tuple[int, bool]], name: str = "topology") -> SystemTopology:
    """
    Shorthand: ``topology((2, True), (2, True), 1, 1)``.

    A bare count is a single-device pipeline stage; ``(k, suitable)`` is a
    model-parallel stage of k devices.
    """
    built = []
    for s in stages:
        if isinstance(s, tuple):
            k, suitable = s
            built.append(TopologyStage(k, model_parallel=True, cdc_suitable=suitable))
        else:
            built.append(TopologyStage(s, model_parallel=s > 1))
    return SystemTopology(tuple(built), name)


class _StageDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    devices: int = Field(ge=1)
    model_parallel: bool = False
    cdc_suitable: bool = False

    @model_validator(mode="after")
    def _suitable_needs_split(self):
        if self.cdc_suitable and not self.model_parallel:
            raise ValueError("cdc_suitable requires model_parallel")
        return self


class _TopologyDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Optional[str] = None
    stages: List[_StageDoc] = Field(min_length=1)


def topology_from_dict(document: Dict[str, Any], default_name: str = "topology") -> SystemTopology:
    try:
        doc = _TopologyDoc.model_validate(document)
    except ValidationError as e:
        raise ParseError(f"invalid topology: {e}")
    stages = tuple(TopologyStage(s.devices, s.model_parallel, s.cdc_suitable) for s in doc.stages)
    return SystemTopology(stages, doc.name or default_name)


def load_topology(path: Union[str, Path]) -> SystemTopology:
    """
    Read a topology document ``{"stages": [{"devices": 2, "model_parallel": true, ...}]}``.

    Raises:
        ParseError
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read topology {path}: {e}")
    except json.JSONDecodeError as e:
        raise ParseError(f"topology {path} is not valid JSON: {e}")
    if not isinstance(document, dict):
        raise ParseError(f"topology {path} must be a JSON object")
    return topology_from_dict(document, path.stem)


def topology_from_allocation(alloc) -> SystemTopology:
    """Base devices of every stage; coded devices count as protection, not as stages."""
    from codedinfer.core.splitter import suitability

    stages = []
    for stage in alloc.stages:
        suitable = stage.is_split and suitability(stage.method).suitable_for_cdc
        stages.append(TopologyStage(stage.n, model_parallel=stage.is_split, cdc_suitable=suitable))
    return SystemTopology(tuple(stages), alloc.name)


# --- Coverage ---

class CoverageScheme(Enum):
    TWO_MR = "2mr"
    CDC_PLUS_TWO_MR = "cdc+2mr"


@dataclass(frozen=True)
class Protection:
    """One extra device: a stage-wide coded device or a duplicate of one device."""
    kind: str  # "cdc" or "2mr"
    stage: int
    device: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        entry: Dict[str, Any] = {"kind": self.kind, "stage": self.stage}
        if self.device is not None:
            entry["device"] = self.device
        return entry


@dataclass(frozen=True)
class CoverageReport:
    scheme: CoverageScheme
    budget: int
    covered: int
    total: int
    assignment: Tuple[Protection, ...] = field(default_factory=tuple)

    @property
    def fraction(self) -> float:
        return self.covered / self.total if self.total else 0.0

    @property
    def extra_devices(self) -> int:
        return len(self.assignment)

    @property
    def hardware_cost(self) -> float:
        """Devices in use relative to the unprotected system."""
        return (self.total + self.extra_devices) / self.total

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scheme": self.scheme.value,
            "budget": self.budget,
            "covered": self.covered,
            "total": self.total,
            "fraction": self.fraction,
            "extra_devices": self.extra_devices,
            "hardware_cost": self.hardware_cost,
            "definition": "fraction of devices whose single failure is tolerated",
            "assignment": [p.to_dict() for p in self.assignment],
        }


def tolerated(topo: SystemTopology, protections: Sequence[Protection]) -> List[Tuple[int, int]]:
    """
    Enumerate every single-device failure and keep the ones the protected system survives.

    A duplicated device survives its own loss; a coded stage decodes any one
    missing device of its group.
    """
    duplicated = {(p.stage, p.device) for p in protections if p.kind == "2mr"}
    coded = {p.stage for p in protections if p.kind == "cdc"}
    survived = []
    for stage, pos in topo.device_ids:
        if (stage, pos) in duplicated:
            survived.append((stage, pos))
            continue
        k = topo.stages[stage].devices
        if stage in coded and is_decodable(k, [range(k)], [pos]):
            survived.append((stage, pos))
    return survived


def _greedy(topo: SystemTopology, scheme: CoverageScheme, budget: int) -> List[Protection]:
    assignment: List[Protection] = []
    coded_stages = set()
    if scheme is CoverageScheme.CDC_PLUS_TWO_MR:
        suitable = [i for i, s in enumerate(topo.stages) if s.cdc_suitable and s.devices > 1]
        suitable.sort(key=lambda i: (-topo.stages[i].devices, i))
        for i in suitable[:budget]:
            assignment.append(Protection("cdc", i))
            coded_stages.add(i)
    for stage, pos in topo.device_ids:
        if len(assignment) >= budget:
            break
        if stage not in coded_stages:
            assignment.append(Protection("2mr", stage, pos))
    return assignment


def coverage(topo: SystemTopology, scheme: CoverageScheme, budget: int) -> CoverageReport:
    """
    Best single-failure coverage reachable with ``budget`` extra devices.

    Coded devices go to the largest suitable stages first, then remaining
    budget duplicates unprotected devices. Stage gains are independent, so
    the greedy order is optimal; the covered count comes from enumerating
    every single failure against the chosen protection.
    """
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    assignment = _greedy(topo, scheme, budget)
    covered = len(tolerated(topo, assignment))
    report = CoverageReport(scheme, budget, covered, topo.total_devices, tuple(assignment))
    logger.debug("%s coverage of %s with budget %d: %d/%d",
                 scheme.value, topo.name, budget, covered, topo.total_devices)
    return report


def optimal_coverage(topo: SystemTopology, scheme: CoverageScheme, budget: int) -> int:
    """Brute force: the most devices any placement of ``budget`` extra devices covers."""
    options = [Protection("2mr", s, p) for s, p in topo.device_ids]
    if scheme is CoverageScheme.CDC_PLUS_TWO_MR:
        options += [Protection("cdc", i) for i, s in enumerate(topo.stages) if s.cdc_suitable]
    size = min(budget, len(options))
    best = 0
    for chosen in itertools.combinations(options, size):
        best = max(best, len(tolerated(topo, chosen)))
        if best == topo.total_devices:
            break
    return best


def compare_coverage(topo: SystemTopology, budget: int) -> Dict[CoverageScheme, CoverageReport]:
    return {scheme: coverage(topo, scheme, budget) for scheme in CoverageScheme}
