"""
Core data types for codedinfer.

This module defines the enums and records shared by the splitter, coder,
runtime and analytics layers.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

# Vector layers carry (k,), spatial layers carry (H, W, C).
Shape = Tuple[int, ...]


class ActivationKind(Enum):
    """Elementwise activation applied after the affine part of a layer."""
    IDENTITY = "identity"
    RELU = "relu"


class LayerKind(Enum):
    FC = "fc"
    CONV = "conv"
    POOL = "pool"


class PoolMode(Enum):
    MAX = "max"
    AVG = "avg"


class DType(Enum):
    """Element width of matrices and stored weights."""
    F32 = "f32"
    F64 = "f64"

    @property
    def numpy(self) -> np.dtype:
        return np.dtype(np.float32 if self is DType.F32 else np.float64)

    @property
    def code(self) -> int:
        return 0 if self is DType.F32 else 1

    @classmethod
    def from_code(cls, code: int) -> "DType":
        if code == 0:
            return cls.F32
        if code == 1:
            return cls.F64
        raise ValueError(f"unknown dtype code {code}")

    @classmethod
    def of(cls, array: np.ndarray) -> "DType":
        if array.dtype == np.float32:
            return cls.F32
        if array.dtype == np.float64:
            return cls.F64
        raise ValueError(f"unsupported element type {array.dtype}")


class SplitMethod(Enum):
    """Model-parallel distribution methods for one layer."""
    FC_OUTPUT = "fc_output"
    FC_INPUT = "fc_input"
    CONV_CHANNEL = "conv_channel"
    CONV_SPATIAL = "conv_spatial"
    CONV_FILTER = "conv_filter"

    @property
    def layer_kind(self) -> LayerKind:
        return LayerKind.FC if self.value.startswith("fc") else LayerKind.CONV


class MergeKind(Enum):
    CONCAT_ROWS = "concat_rows"
    SUM_PARTIALS = "sum_partials"
    CONCAT_CHANNELS = "concat_channels"
    CONCAT_SPATIAL = "concat_spatial"


class ActivationPlacement(Enum):
    PER_DEVICE = "per_device"
    AT_MERGE = "at_merge"


class Policy(Enum):
    """Coordinator completion policy for a stage."""
    WAIT_ALL = "wait_all"
    DECODE_ASAP = "decode_asap"
    THRESHOLD = "threshold"


@dataclass(frozen=True)
class ConvGeometry:
    """Convolution parameters: input dims, square filter side, stride, padding, filters."""
    height: int
    width: int
    channels: int
    size: int
    stride: int = 1
    padding: int = 0
    filters: int = 1

    @property
    def out_height(self) -> int:
        from codedinfer.core.matrix import conv_output_dim
        return conv_output_dim(self.height, self.size, self.padding, self.stride)

    @property
    def out_width(self) -> int:
        from codedinfer.core.matrix import conv_output_dim
        return conv_output_dim(self.width, self.size, self.padding, self.stride)

    @property
    def input_shape(self) -> Shape:
        return (self.height, self.width, self.channels)

    @property
    def output_shape(self) -> Shape:
        return (self.out_height, self.out_width, self.filters)

    def with_input(self, height: int, width: Optional[int] = None,
                   channels: Optional[int] = None) -> "ConvGeometry":
        return ConvGeometry(
            height=height,
            width=self.width if width is None else width,
            channels=self.channels if channels is None else channels,
            size=self.size,
            stride=self.stride,
            padding=self.padding,
            filters=self.filters,
        )


@dataclass(frozen=True)
class FcParams:
    inputs: int
    outputs: int


@dataclass(frozen=True)
class PoolParams:
    window: int
    stride: int
    mode: PoolMode = PoolMode.MAX


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential model."""
    id: int
    kind: LayerKind
    input_shape: Shape
    fc: Optional[FcParams] = None
    conv: Optional[ConvGeometry] = None
    pool: Optional[PoolParams] = None
    activation: ActivationKind = ActivationKind.IDENTITY
    has_bias: bool = True

    @property
    def weighted(self) -> bool:
        return self.kind in (LayerKind.FC, LayerKind.CONV)

    @property
    def output_shape(self) -> Shape:
        if self.kind is LayerKind.FC:
            return (self.fc.outputs,)
        if self.kind is LayerKind.CONV:
            return self.conv.output_shape
        from codedinfer.core.matrix import pool_output_dim
        h, w, c = self.input_shape
        return (
            pool_output_dim(h, self.pool.window, self.pool.stride),
            pool_output_dim(w, self.pool.window, self.pool.stride),
            c,
        )

    def flops(self) -> int:
        """Multiply-add count x2 of the layer's GEMM (0 for pooling)."""
        if self.kind is LayerKind.FC:
            return 2 * self.fc.inputs * self.fc.outputs
        if self.kind is LayerKind.CONV:
            g = self.conv
            return 2 * g.filters * g.size * g.size * g.channels * g.out_height * g.out_width
        return 0


# --- Run records ---

@dataclass
class StageRecord:
    """What the coordinator saw for one stage of one request."""
    stage: int
    start_ms: float
    arrivals: Dict[int, float] = field(default_factory=dict)
    completed_ms: Optional[float] = None
    decoded: List[int] = field(default_factory=list)
    late: List[int] = field(default_factory=list)
    missing: List[int] = field(default_factory=list)
    subtractions: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "start_ms": self.start_ms,
            "arrivals": {str(k): v for k, v in sorted(self.arrivals.items())},
            "completed_ms": self.completed_ms,
            "decoded": list(self.decoded),
            "late": list(self.late),
            "missing": list(self.missing),
            "subtractions": self.subtractions,
        }


@dataclass
class RequestRecord:
    request_id: int
    allocation: str
    start_ms: float
    end_ms: float
    status: str  # "ok" or "timeout"
    stages: List[StageRecord] = field(default_factory=list)
    max_rel_error: Optional[float] = None
    output_ok: Optional[bool] = None

    @property
    def latency_ms(self) -> float:
        return self.end_ms - self.start_ms

    @property
    def completed(self) -> bool:
        return self.status == "ok"

    @property
    def decode_events(self) -> int:
        return sum(len(s.decoded) for s in self.stages)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "request_id": self.request_id,
            "allocation": self.allocation,
            "start_ms": self.start_ms,
            "end_ms": self.end_ms,
            "latency_ms": self.latency_ms,
            "status": self.status,
            "max_rel_error": self.max_rel_error,
            "output_ok": self.output_ok,
            "stages": [s.to_dict() for s in self.stages],
        }


@dataclass
class FallbackEvent:
    at_ms: float
    request_id: int
    from_allocation: str
    to_allocation: str
    suspected: List[int]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "at_ms": self.at_ms,
            "request_id": self.request_id,
            "from": self.from_allocation,
            "to": self.to_allocation,
            "suspected": list(self.suspected),
        }


@dataclass
class RunReport:
    """Per-request timings and events of one simulated run."""
    allocation: str
    policy: Policy
    seed: int
    requests: List[RequestRecord] = field(default_factory=list)
    fallbacks: List[FallbackEvent] = field(default_factory=list)
    failures_observed: List[int] = field(default_factory=list)

    @property
    def latencies(self) -> List[float]:
        return [r.latency_ms for r in self.requests if r.completed]

    @property
    def timeouts(self) -> int:
        return sum(1 for r in self.requests if not r.completed)

    @property
    def decode_events(self) -> int:
        return sum(r.decode_events for r in self.requests)

    @property
    def mean_ms(self) -> float:
        lat = self.latencies
        if not lat:
            from codedinfer.core.errors import EmptySamples
            raise EmptySamples("run has no completed requests")
        return float(np.mean(lat))

    def subset(self, requests: List[RequestRecord]) -> "RunReport":
        return RunReport(
            allocation=self.allocation,
            policy=self.policy,
            seed=self.seed,
            requests=list(requests),
            failures_observed=list(self.failures_observed),
        )

    def split_at_fallback(self) -> Tuple["RunReport", "RunReport"]:
        """Requests served by the first allocation vs. after the first switch."""
        if not self.fallbacks:
            return self.subset(self.requests), self.subset([])
        first = self.fallbacks[0].request_id
        before = [r for r in self.requests if r.request_id < first]
        after = [r for r in self.requests if r.request_id >= first]
        return self.subset(before), self.subset(after)

    def aggregate(self) -> Dict[str, Any]:
        from codedinfer.core.analytics import nearest_rank

        lat = sorted(self.latencies)
        summary: Dict[str, Any] = {
            "count": len(self.requests),
            "completed": len(lat),
            "timeouts": self.timeouts,
            "decode_events": self.decode_events,
            "late_partials": sum(len(s.late) for r in self.requests for s in r.stages),
        }
        if lat:
            summary.update({
                "mean_ms": float(np.mean(lat)),
                "p50_ms": nearest_rank(lat, 50),
                "p90_ms": nearest_rank(lat, 90),
                "p99_ms": nearest_rank(lat, 99),
            })
        return summary

    def to_dict(self) -> Dict[str, Any]:
        return {
            "allocation": self.allocation,
            "policy": self.policy.value,
            "seed": self.seed,
            "aggregate": self.aggregate(),
            "failures_observed": sorted(self.failures_observed),
            "fallbacks": [f.to_dict() for f in self.fallbacks],
            "requests": [r.to_dict() for r in self.requests],
        }
