"""
Coordinator/worker execution of a (coded) distributed model.

The simulator runs every device and the coordinator as simpy processes on a
virtual clock. Per request and stage the coordinator sends input blocks,
collects partials under its completion policy, decodes what is missing and
merges. Every request's output is checked against the single-device
reference.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import simpy

from codedinfer.core.allocation import AllocationFile, Stage, fallback_select, validate_allocation
from codedinfer.core.coder import CodedPlan, DecodeStats, Undecodable, encode, is_decodable, peel_decode
from codedinfer.core.config import (
    DEFAULT_DETECTION_MS,
    DEFAULT_NS_PER_FLOP,
    DEFAULT_THRESHOLD_MS,
)
from codedinfer.core.errors import AllocationInvalid, MissingPartial, StageTimeout
from codedinfer.core.latency import FailureModel, LatencyModel
from codedinfer.core.matrix import rel_error, tolerance
from codedinfer.core.metrics import RunMetrics
from codedinfer.core.model import ModelSpec, coerce_input, layer_forward, load_model, reference_forward
from codedinfer.core.splitter import (
    DeviceTask,
    PartitionPlan,
    execute_task,
    extract_device_task,
    merge,
    select_input,
)
from codedinfer.core.transport import COORDINATOR, Message, MessageType, SimTransport, encode_matrix
from codedinfer.core.types import (
    FallbackEvent,
    LayerSpec,
    MergeKind,
    Policy,
    RequestRecord,
    RunReport,
    SplitMethod,
    StageRecord,
)

logger = logging.getLogger(__name__)


# --- Stage programs ---

@dataclass
class StageProgram:
    """What every device of one stage computes and how the coordinator reassembles it."""
    stage: Stage
    layers: Tuple[LayerSpec, ...]
    weights: object
    plan: Optional[PartitionPlan] = None
    coded: Optional[CodedPlan] = None
    tasks: Dict[int, DeviceTask] = field(default_factory=dict)
    merge_bias: Optional[np.ndarray] = None

    @property
    def layer_id(self) -> int:
        return self.layers[0].id

    @property
    def devices(self) -> Tuple[int, ...]:
        return self.stage.all_devices

    @property
    def broadcast(self) -> bool:
        """Every device needs the full input, so one broadcast serves them all."""
        if self.plan is None:
            return True
        return self.plan.method in (SplitMethod.FC_OUTPUT, SplitMethod.CONV_CHANNEL)

    def prepare(self, x: np.ndarray) -> np.ndarray:
        """Bring the stage input into the head layer's layout."""
        if self.plan is None:
            return np.ravel(x)
        return coerce_input(self.layers[0], x)

    def input_for(self, device: int, x: np.ndarray) -> np.ndarray:
        if self.plan is None:
            return x
        return select_input(self.tasks[device], x)

    def compute(self, device: int, payload: np.ndarray) -> np.ndarray:
        """Run the device's share on the input it received; the result is 2-D."""
        if self.plan is None:
            x = np.ravel(payload)
            for layer in self.layers:
                x = layer_forward(layer, self.weights, x)
            return np.ravel(x).reshape(-1, 1)
        task = self.tasks[device]
        if task.geometry is not None:
            payload = np.asarray(payload).reshape(task.geometry.input_shape)
        return execute_task(task, payload)

    def flops(self, device: int) -> int:
        if self.plan is None:
            return sum(layer.flops() for layer in self.layers)
        return self.tasks[device].flops

    def reply_type(self, device: int) -> MessageType:
        if device in self.stage.coded_devices:
            return MessageType.CODED_OUTPUT
        return MessageType.PARTIAL_OUTPUT

    def finish(self, partials: Mapping[int, np.ndarray],
               stats: Optional[DecodeStats] = None) -> Tuple[np.ndarray, List[int]]:
        """
        Decode missing partials if needed and merge.

        Returns the stage output and the roster ids recovered by decoding.

        Raises:
            MissingPartial: the received set cannot be decoded
        """
        if self.plan is None:
            (device,) = self.stage.devices
            if device not in partials:
                raise MissingPartial([device])
            return np.ravel(partials[device]), []

        base = self.stage.devices
        received = {i: partials[d] for i, d in enumerate(base) if d in partials}
        recovered: List[int] = []
        if len(received) < len(base):
            if self.coded is None:
                raise MissingPartial([d for d in base if d not in partials])
            received_coded = {g: partials[d] for g, d in enumerate(self.stage.coded_devices)
                              if d in partials}
            result = peel_decode(self.coded, received, received_coded, stats)
            if isinstance(result, Undecodable):
                raise MissingPartial([base[i] for i in result.missing])
            recovered = [base[i] for i in sorted(set(result) - set(received))]
            received = result
        return merge(self.plan, received, self.merge_bias), recovered


def build_program(stage: Stage, model: ModelSpec, weights) -> StageProgram:
    layers = tuple(model.layer(i) for i in stage.layers)
    program = StageProgram(stage=stage, layers=layers, weights=weights)
    if not stage.is_split:
        return program

    plan = stage.plan(model)
    if stage.is_coded:
        coded = encode(plan, weights, stage.groups)
        if not coded.matches_store(weights):
            raise AllocationInvalid(
                f"stage {stage.index}: stored coded blocks for layer {plan.layer_id} do not match its groups"
            )
        program.coded = coded
        plan = coded.base
        for dev in coded.coded:
            program.tasks[stage.coded_devices[dev.index]] = dev.task
    for i, device in enumerate(stage.devices):
        program.tasks[device] = extract_device_task(plan, weights, i)
    program.plan = plan
    if plan.merge.kind is MergeKind.SUM_PARTIALS:
        program.merge_bias = weights.bias(plan.layer_id)
    return program


def build_programs(alloc: AllocationFile, model: ModelSpec, weights) -> List[StageProgram]:
    validate_allocation(alloc, model)
    weights.validate(model)
    return [build_program(stage, model, weights) for stage in alloc.stages]


# --- Stage completion ---

@dataclass(frozen=True)
class CoordinatorConfig:
    """
    Completion policy, waiting threshold and simulation constants.

    The threshold bounds every stage: it runs from the first arrival (or the
    stage start when nothing arrives).
    """
    policy: Policy = Policy.DECODE_ASAP
    threshold_ms: float = DEFAULT_THRESHOLD_MS
    seed: int = 0
    ns_per_flop: float = DEFAULT_NS_PER_FLOP
    detection_ms: float = DEFAULT_DETECTION_MS
    check_outputs: bool = True

    def __post_init__(self):
        if not self.threshold_ms > 0:
            raise ValueError(f"waiting threshold must be > 0 ms, got {self.threshold_ms}")
        if self.ns_per_flop < 0 or self.detection_ms < 0:
            raise ValueError("ns_per_flop and detection_ms must be >= 0")


class StageCollector:
    """
    Completion predicate for one stage, fed arrivals in time order.

    WaitAll and ThresholdThenDecode finish when every base partial is in and
    decode at the deadline otherwise; DecodeAsap finishes as soon as the
    received partials are decodable.
    """

    def __init__(self, devices: Sequence[int], coded_devices: Sequence[int] = (),
                 groups: Sequence[Sequence[int]] = (), policy: Policy = Policy.DECODE_ASAP,
                 threshold_ms: float = DEFAULT_THRESHOLD_MS, start_ms: float = 0.0, stage: int = 0):
        if coded_devices and len(groups) != len(coded_devices):
            raise ValueError("one group per coded device is required")
        self.devices = tuple(devices)
        self.coded_devices = tuple(coded_devices)
        self.groups = tuple(frozenset(g) for g in groups)
        self.policy = policy
        self.threshold_ms = threshold_ms
        self.start_ms = start_ms
        self.stage = stage
        self.arrivals: Dict[int, float] = {}
        self.late: List[int] = []
        self.completed_ms: Optional[float] = None
        self.missing: Tuple[int, ...] = ()

    @property
    def done(self) -> bool:
        return self.completed_ms is not None

    @property
    def deadline(self) -> float:
        first = min(self.arrivals.values()) if self.arrivals else self.start_ms
        return first + self.threshold_ms

    @property
    def base_missing(self) -> Tuple[int, ...]:
        return tuple(d for d in self.devices if d not in self.arrivals)

    def decodable(self) -> bool:
        if not self.base_missing:
            return True
        if not self.coded_devices:
            return False
        n = len(self.devices)
        failed = [i for i, d in enumerate(self.devices) if d not in self.arrivals]
        failed += [n + g for g, d in enumerate(self.coded_devices) if d not in self.arrivals]
        return is_decodable(n, self.groups, failed)

    @property
    def used(self) -> Tuple[int, ...]:
        """Devices whose partials the merge consumes."""
        if not self.base_missing:
            return self.devices
        return tuple(d for d in self.devices + self.coded_devices if d in self.arrivals)

    def _complete(self, at_ms: float):
        self.completed_ms = at_ms
        self.missing = self.base_missing

    def offer(self, device: int, at_ms: float) -> bool:
        """Record an arrival; returns True once the stage is complete."""
        if not self.done and at_ms > self.deadline:
            self.expire(self.deadline)
        if self.done:
            if device not in self.late:
                self.late.append(device)
            return True
        if device in self.arrivals:
            return False
        self.arrivals[device] = at_ms
        if not self.base_missing:
            self._complete(at_ms)
        elif self.policy is Policy.DECODE_ASAP and self.decodable():
            self._complete(at_ms)
        return self.done

    def expire(self, now_ms: float):
        """
        Deadline reached: decode if possible.

        Raises:
            StageTimeout: the received partials cannot be decoded
        """
        if self.done:
            return
        if self.decodable():
            self._complete(now_ms)
            return
        missing = list(self.base_missing) + [d for d in self.coded_devices if d not in self.arrivals]
        raise StageTimeout(self.stage, missing, now_ms)


@dataclass(frozen=True)
class StageOutcome:
    completed_ms: float
    used: Tuple[int, ...]
    missing: Tuple[int, ...]
    late: Tuple[int, ...]
    arrivals: Dict[int, float]


def collect_stage(arrivals: Mapping[int, float], devices: Sequence[int],
                  coded_devices: Sequence[int] = (), groups: Sequence[Sequence[int]] = (),
                  policy: Policy = Policy.DECODE_ASAP, threshold_ms: float = DEFAULT_THRESHOLD_MS,
                  start_ms: float = 0.0, stage: int = 0) -> StageOutcome:
    """
    Replay arrival times (inf = never) through a StageCollector.

    Raises:
        StageTimeout
    """
    collector = StageCollector(devices, coded_devices, groups, policy, threshold_ms, start_ms, stage)
    for device, at in sorted(arrivals.items(), key=lambda item: (item[1], item[0])):
        if not np.isfinite(at):
            continue
        collector.offer(device, at)
    collector.expire(collector.deadline)
    return StageOutcome(
        completed_ms=collector.completed_ms,
        used=collector.used,
        missing=collector.missing,
        late=tuple(collector.late),
        arrivals={d: t for d, t in collector.arrivals.items()},
    )


# --- Simulation ---

class _Simulation:
    def __init__(self, alloc: AllocationFile, model: ModelSpec, weights, x: np.ndarray,
                 latency: LatencyModel, failures: FailureModel, cfg: CoordinatorConfig,
                 requests: int, catalog: Sequence[AllocationFile], metrics: Optional[RunMetrics]):
        self.env = simpy.Environment()
        self.model = model
        self.weights = weights
        self.x = np.asarray(x, dtype=weights.dtype.numpy)
        self.cfg = cfg
        self.requests = requests
        self.catalog = list(catalog)
        self.failures = failures.with_seed(cfg.seed)
        self.metrics = metrics or RunMetrics()
        self.transport = SimTransport(self.env, latency, self.failures, cfg.seed)
        self.alloc = alloc
        self.programs: Dict[str, List[StageProgram]] = {alloc.name: build_programs(alloc, model, weights)}
        for other in self.catalog:
            if other.name not in self.programs:
                self.programs[other.name] = build_programs(other, model, weights)
        self.pending: Dict[Tuple[int, int], StageProgram] = {}
        self.open_stages: Dict[Tuple[int, int], StageRecord] = {}
        self.observed: Set[int] = set()
        self.report = RunReport(allocation=alloc.name, policy=cfg.policy, seed=cfg.seed)
        self.expected = reference_forward(model, weights, self.x)
        self.tol = tolerance(weights.dtype.numpy)

        devices: Set[int] = set()
        for progs in self.programs.values():
            for p in progs:
                devices.update(p.devices)
        self.devices = sorted(devices)
        for device in self.devices:
            self.env.process(self._worker(device))

    def _worker(self, device: int):
        while True:
            delivery = yield self.transport.recv(device)
            msg = delivery.message
            if msg.type is not MessageType.INPUT_BLOCK:
                continue
            program = self.pending.get((msg.request_id, msg.layer_id))
            if program is None or device not in program.devices:
                continue
            if self.failures.drops(device, msg.request_id, program.stage.index):
                logger.debug("Device %d drops request %d", device, msg.request_id)
                continue
            partial = program.compute(device, msg.matrix())
            yield self.env.timeout(program.flops(device) * self.cfg.ns_per_flop / 1e6)
            reply = Message(program.reply_type(device), msg.request_id, msg.layer_id, device,
                            encode_matrix(partial))
            self.transport.send(reply, COORDINATOR, stage=program.stage.index)

    def _late(self, msg: Message):
        record = self.open_stages.get((msg.request_id, msg.layer_id))
        if record is not None and msg.device_id not in record.late:
            record.late.append(msg.device_id)
            self.metrics.late_partials.inc()
            logger.debug("Late partial from device %d for request %d layer %d",
                         msg.device_id, msg.request_id, msg.layer_id)

    def _stage(self, request: int, program: StageProgram, x: np.ndarray, record: RequestRecord):
        env, stage = self.env, program.stage
        srec = StageRecord(stage=stage.index, start_ms=env.now)
        record.stages.append(srec)
        key = (request, program.layer_id)
        self.open_stages[key] = srec
        self.pending[key] = program

        staged = program.prepare(x)
        for device in program.devices:
            payload = encode_matrix(program.input_for(device, staged))
            msg = Message(MessageType.INPUT_BLOCK, request, program.layer_id, device, payload)
            self.transport.send(msg, device, stage=stage.index, broadcast=program.broadcast)

        collector = StageCollector(stage.devices, stage.coded_devices, stage.groups,
                                   self.cfg.policy, self.cfg.threshold_ms, env.now, stage.index)
        partials: Dict[int, np.ndarray] = {}
        inbox = self.transport.inbox(COORDINATOR)
        try:
            while not collector.done:
                get = inbox.get()
                timer = env.timeout(max(collector.deadline - env.now, 0.0))
                yield get | timer
                if not get.triggered:
                    get.cancel()
                    collector.expire(env.now)
                    continue
                msg = get.value.message
                if (msg.request_id, msg.layer_id) != key:
                    self._late(msg)
                    continue
                if msg.device_id in partials or msg.device_id not in program.devices:
                    continue
                partials[msg.device_id] = msg.matrix()
                collector.offer(msg.device_id, env.now)
        finally:
            srec.arrivals = dict(collector.arrivals)
            srec.completed_ms = collector.completed_ms
            srec.missing = list(collector.missing if collector.done else collector.base_missing)

        stats = DecodeStats()
        output, recovered = program.finish({d: partials[d] for d in collector.used}, stats)
        srec.decoded = recovered
        srec.subtractions = stats.subtractions
        if recovered:
            logger.debug("Request %d stage %d decoded devices %s", request, stage.index, recovered)
        return output

    def _coordinator(self):
        env, cfg = self.env, self.cfg
        suspected: Set[int] = set()
        detect_since: Optional[float] = None
        self.metrics.active_devices.set(self.alloc.device_count)

        for request in range(self.requests):
            if self.catalog and detect_since is not None and env.now - detect_since >= cfg.detection_ms:
                self._switch(request, suspected)
                suspected, detect_since = set(), None

            record = RequestRecord(request, self.alloc.name, env.now, env.now, "ok")
            value = self.x
            try:
                for program in self.programs[self.alloc.name]:
                    value = yield from self._stage(request, program, value, record)
            except StageTimeout as e:
                record.status = "timeout"
                suspected.update(e.missing)
                self.observed.update(e.missing)
                if detect_since is None:
                    detect_since = env.now
                logger.debug("Request %d lost: %s", request, e)
            record.end_ms = env.now

            if record.completed and cfg.check_outputs:
                err = rel_error(np.ravel(value), self.expected)
                record.max_rel_error = err
                record.output_ok = err <= self.tol
                if not record.output_ok:
                    logger.error("Request %d output deviates from the reference (rel error %.3g)",
                                 request, err)
            for srec in record.stages:
                self.observed.update(srec.missing)
            self.report.requests.append(record)
            self.metrics.observe_request(record)

    def _switch(self, request: int, suspected: Set[int]):
        known = set(self.devices)
        alive = known - suspected
        new = fallback_select(self.catalog, alive)
        if new.name == self.alloc.name:
            return
        event = FallbackEvent(self.env.now, request, self.alloc.name, new.name, sorted(suspected))
        logger.info("Switching from %s to %s at %.1f ms (suspected devices %s)",
                    self.alloc.name, new.name, self.env.now, sorted(suspected))
        self.transport.broadcast(Message(MessageType.FALLBACK_SWITCH, request, 0, COORDINATOR),
                                 sorted(new.required_devices))
        self.report.fallbacks.append(event)
        self.metrics.fallbacks.inc()
        self.metrics.active_devices.set(new.device_count)
        self.alloc = new

    def run(self) -> RunReport:
        done = self.env.process(self._coordinator())
        self.env.run(until=done)
        # drain whatever is still in flight so late partials get recorded
        self.env.run()
        for delivery in self.transport.pending(COORDINATOR):
            self._late(delivery.message)
        self.report.failures_observed = sorted(self.observed)
        return self.report


def run_inference(alloc: AllocationFile, weights, x: np.ndarray, latency: LatencyModel,
                  failures: Optional[FailureModel] = None, cfg: Optional[CoordinatorConfig] = None,
                  requests: int = 1, model: Optional[ModelSpec] = None,
                  catalog: Sequence[AllocationFile] = (),
                  metrics: Optional[RunMetrics] = None) -> RunReport:
    """
    Execute ``requests`` sequential single-batch inferences on the virtual clock.

    Args:
        alloc: validated allocation (its model is loaded when ``model`` is None)
        weights: base weight store; coded blocks are encoded from it
        x: model input, reused for every request
        latency: link latency model
        failures: device failure schedules
        cfg: completion policy, threshold, seed and simulation constants
        requests: number of requests (>= 1)
        catalog: fallback allocations, most devices first; enables failure detection
        metrics: registry to fill (a fresh one otherwise)

    Raises:
        AllocationInvalid: the allocation does not fit the model or the weights
    """
    if requests < 1:
        raise ValueError(f"need at least one request, got {requests}")
    cfg = cfg or CoordinatorConfig()
    model = model or load_model(alloc.model_path())
    sim = _Simulation(alloc, model, weights, x, latency, failures or FailureModel(), cfg,
                      requests, catalog, metrics)
    report = sim.run()
    logger.info("Run of %s finished: %d requests, %d timeouts, %d decode events",
                alloc.name, len(report.requests), report.timeouts, report.decode_events)
    return report
