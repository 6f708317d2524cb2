"""
Straggler campaigns: paired runs of a split stage with and without a coded device.

For each device count n the same template allocation runs twice on the same
seed: WaitAll on n devices and DecodeAsap on n devices plus one coded
device. Shared devices draw identical latency streams in both runs, so
DecodeAsap can only finish earlier.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from codedinfer.core.allocation import AllocationFile
from codedinfer.core.analytics import nearest_rank
from codedinfer.core.errors import OrderStatisticViolation, ParseError
from codedinfer.core.latency import LatencyModel
from codedinfer.core.planning import resize_stage, sweep_stage
from codedinfer.core.runtime import CoordinatorConfig, run_inference
from codedinfer.core.types import Policy, RunReport

logger = logging.getLogger(__name__)

CAMPAIGN_THRESHOLD_MS = 60_000.0


def parse_sweep(text: str) -> List[int]:
    """
    Parse ``2..8``, ``devices=2..8`` or ``2,3,4`` into device counts.

    Raises:
        ParseError: malformed text or a count below 2
    """
    body = text.strip()
    if body.startswith("devices="):
        body = body[len("devices="):]
    try:
        if ".." in body:
            lo, hi = body.split("..")
            counts = list(range(int(lo), int(hi) + 1))
        else:
            counts = [int(t) for t in body.split(",") if t.strip()]
    except ValueError:
        raise ParseError(f"sweep {text!r} must look like 2..8 or 2,3,4")
    if not counts:
        raise ParseError(f"sweep {text!r} is empty")
    if min(counts) < 2:
        raise ParseError(f"sweep {text!r}: splitting requires n >= 2")
    return counts


def _p99(report: RunReport) -> Optional[float]:
    lat = sorted(report.latencies)
    return nearest_rank(lat, 99) if lat else None


@dataclass(frozen=True)
class CampaignRow:
    n: int
    requests: int
    wait_all_mean_ms: float
    decode_asap_mean_ms: float
    wait_all_p99_ms: Optional[float]
    decode_asap_p99_ms: Optional[float]
    timeouts: int

    @property
    def improvement_pct(self) -> float:
        return 100.0 * (self.wait_all_mean_ms - self.decode_asap_mean_ms) / self.wait_all_mean_ms

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "requests": self.requests,
            "wait_all_mean_ms": self.wait_all_mean_ms,
            "decode_asap_mean_ms": self.decode_asap_mean_ms,
            "improvement_pct": self.improvement_pct,
            "wait_all_p99_ms": self.wait_all_p99_ms,
            "decode_asap_p99_ms": self.decode_asap_p99_ms,
            "timeouts": self.timeouts,
        }


@dataclass(frozen=True)
class ThresholdRow:
    n: int
    threshold_ms: float
    mean_ms: Optional[float]
    p99_ms: Optional[float]
    timeouts: int
    decode_events: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "threshold_ms": self.threshold_ms,
            "mean_ms": self.mean_ms,
            "p99_ms": self.p99_ms,
            "timeouts": self.timeouts,
            "decode_events": self.decode_events,
        }


@dataclass
class CampaignResult:
    rows: List[CampaignRow] = field(default_factory=list)
    thresholds: List[ThresholdRow] = field(default_factory=list)

    @property
    def improvements(self) -> List[float]:
        return [r.improvement_pct for r in self.rows]


def check_order_statistic(n: int, stage_index: int, asap: RunReport, wait: RunReport):
    """
    Every DecodeAsap stage completes at the n-th arrival and no request ends
    after its WaitAll counterpart.

    Raises:
        OrderStatisticViolation
    """
    waited = {r.request_id: r for r in wait.requests if r.completed}
    for record in asap.requests:
        if not record.completed:
            continue
        stage = record.stages[stage_index]
        times = sorted(stage.arrivals.values())
        if len(times) < n or not np.isclose(stage.completed_ms, times[n - 1], rtol=0, atol=1e-9):
            raise OrderStatisticViolation(
                n, record.request_id,
                f"stage completed at {stage.completed_ms} ms, not at the n-th arrival of {times}")
        other = waited.get(record.request_id)
        if other is not None and record.latency_ms > other.latency_ms + 1e-9:
            raise OrderStatisticViolation(
                n, record.request_id,
                f"decode-asap latency {record.latency_ms:.6f} ms exceeds wait-all {other.latency_ms:.6f} ms")


def _compare(n: int, index: int, plain: AllocationFile, coded: AllocationFile, weights, x: np.ndarray,
             latency: LatencyModel, base_cfg: CoordinatorConfig, requests: int, model) -> CampaignRow:
    wait = run_inference(plain, weights, x, latency, cfg=replace(base_cfg, policy=Policy.WAIT_ALL),
                         requests=requests, model=model)
    asap = run_inference(coded, weights, x, latency, cfg=replace(base_cfg, policy=Policy.DECODE_ASAP),
                         requests=requests, model=model)
    check_order_statistic(n, index, asap, wait)
    row = CampaignRow(
        n=n,
        requests=requests,
        wait_all_mean_ms=wait.mean_ms,
        decode_asap_mean_ms=asap.mean_ms,
        wait_all_p99_ms=_p99(wait),
        decode_asap_p99_ms=_p99(asap),
        timeouts=wait.timeouts + asap.timeouts,
    )
    logger.info("n=%d: wait-all %.2f ms, decode-asap %.2f ms (%.1f%% faster)",
                n, row.wait_all_mean_ms, row.decode_asap_mean_ms, row.improvement_pct)
    return row


def run_campaign(template: AllocationFile, model, weights, x: np.ndarray, latency: LatencyModel,
                 counts: Sequence[int], seed: int = 0, requests: int = 100,
                 thresholds: Sequence[float] = (), threshold_ms: float = CAMPAIGN_THRESHOLD_MS,
                 stage: Optional[int] = None, ns_per_flop: Optional[float] = None,
                 compare: bool = True) -> CampaignResult:
    """
    Paired WaitAll(n) / DecodeAsap(n+1) runs for every n in ``counts``.

    ``thresholds`` adds ThresholdThenDecode runs on n+1 devices per threshold.
    With ``compare=False`` only the threshold runs happen.

    Raises:
        OrderStatisticViolation: a pairing breaks the order-statistic invariant
        UnsuitableMethod: the swept stage cannot be coded
    """
    index = sweep_stage(template) if stage is None else stage
    base_cfg = CoordinatorConfig(threshold_ms=threshold_ms, seed=seed)
    if ns_per_flop is not None:
        base_cfg = replace(base_cfg, ns_per_flop=ns_per_flop)

    result = CampaignResult()
    for n in counts:
        plain = resize_stage(template, index, n, coded=0)
        coded = resize_stage(template, index, n, coded=1)
        if compare:
            result.rows.append(_compare(n, index, plain, coded, weights, x, latency, base_cfg, requests, model))

        for t in thresholds:
            cfg = replace(base_cfg, policy=Policy.THRESHOLD, threshold_ms=float(t))
            report = run_inference(coded, weights, x, latency, cfg=cfg, requests=requests, model=model)
            lat = report.latencies
            result.thresholds.append(ThresholdRow(
                n=n,
                threshold_ms=float(t),
                mean_ms=float(np.mean(lat)) if lat else None,
                p99_ms=_p99(report),
                timeouts=report.timeouts,
                decode_events=report.decode_events,
            ))
    return result
