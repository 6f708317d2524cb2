"""
Prometheus metrics for simulated runs.

Each run owns its own registry so repeated runs in one process never share
counters; the text file is written only on request.
"""

from pathlib import Path
from typing import Union

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

from codedinfer.core.errors import IoError

try:
    from prometheus_client import disable_created_metrics

    # *_created samples carry wall-clock time
    disable_created_metrics()
except ImportError:  # prometheus-client < 0.17
    pass

LATENCY_BUCKETS_MS = (10, 25, 50, 75, 100, 150, 200, 300, 500, 1000, 2500, 5000, 10000, 30000)


class RunMetrics:
    """Counters and a latency histogram (virtual milliseconds) for one run."""

    def __init__(self):
        self.registry = CollectorRegistry()
        self.requests = Counter("cdc_requests", "Inference requests by outcome", ["status"],
                                registry=self.registry)
        self.decode_events = Counter("cdc_decode_events", "Partials recovered by decoding",
                                     registry=self.registry)
        self.late_partials = Counter("cdc_late_partials", "Partials discarded after stage completion",
                                     registry=self.registry)
        self.fallbacks = Counter("cdc_fallback_switches", "Switches to a fallback allocation",
                                 registry=self.registry)
        self.latency = Histogram("cdc_request_latency_ms", "Virtual end-to-end request latency (ms)",
                                 buckets=LATENCY_BUCKETS_MS, registry=self.registry)
        self.active_devices = Gauge("cdc_active_devices", "Devices required by the active allocation",
                                    registry=self.registry)

    def observe_request(self, record):
        self.requests.labels(status=record.status).inc()
        if record.completed:
            self.latency.observe(record.latency_ms)
            self.decode_events.inc(record.decode_events)

    def value(self, name: str, **labels) -> float:
        sample = self.registry.get_sample_value(name, labels or None)
        return 0.0 if sample is None else sample


def write_metrics(metrics: RunMetrics, path: Union[str, Path]):
    """Write the run's registry in the Prometheus text format."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), metrics.registry)
    except OSError as e:
        raise IoError(f"cannot write metrics {path}: {e}")
