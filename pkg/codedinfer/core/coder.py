"""
Coded weight blocks and subtraction decoding.

A coded device owns the elementwise sum of the weight blocks of the base
devices in its group, so its partial equals the sum of theirs. One missing
partial in a group is recovered as coded - sum(received). Several coded
groups are decoded by peeling: repeatedly resolve any group with exactly one
unknown member.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Collection, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.special import comb

from codedinfer.core.config import DEFAULT_PATTERN_CAP
from codedinfer.core.errors import (
    ExplosionGuard,
    NothingMissing,
    ShapeMismatch,
    TooManyMissing,
    UnknownDevice,
    UnsuitableMethod,
)
from codedinfer.core.splitter import Block, DeviceTask, PartitionPlan, extract_device_task, suitability

logger = logging.getLogger(__name__)

Group = FrozenSet[int]


def _pad_rows(a: np.ndarray, rows: int) -> np.ndarray:
    a = np.asarray(a)
    if a.shape[0] == rows:
        return a
    if a.shape[0] > rows:
        raise ShapeMismatch(f"block with {a.shape[0]} rows exceeds the coded block's {rows}")
    pad = [(0, rows - a.shape[0])] + [(0, 0)] * (a.ndim - 1)
    return np.pad(a, pad)


@dataclass(frozen=True)
class CodedDevice:
    """One extra device: its group, and a task that execute_task runs unchanged."""
    index: int
    covers: Group
    task: DeviceTask

    @property
    def weight(self) -> np.ndarray:
        return self.task.weight

    @property
    def bias(self) -> Optional[np.ndarray]:
        return self.task.bias


@dataclass(frozen=True)
class CodedPlan:
    """A suitable partition plan augmented with coded devices."""
    base: PartitionPlan
    groups: Tuple[Group, ...]
    coded: Tuple[CodedDevice, ...]
    block_rows: int

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def hardware_cost(self) -> float:
        return hardware_cost(self.n, len(self.groups))

    def recovery_map(self) -> Dict[int, List[int]]:
        """Base device -> coded devices whose group contains it."""
        return {d: [g for g, grp in enumerate(self.groups) if d in grp] for d in range(self.n)}

    def coded_partial_shape(self) -> Tuple[int, int]:
        shape = self.base.partial_shape(0)
        return (self.block_rows, shape[1])

    def store_into(self, weights) -> None:
        """Record the coded blocks in a weight store under (layer id, group)."""
        for dev in self.coded:
            weights.coded[(self.base.layer_id, dev.index)] = dev.weight
            if dev.bias is not None:
                weights.coded_biases[(self.base.layer_id, dev.index)] = dev.bias

    def matches_store(self, weights) -> bool:
        """True when every coded block stored for this layer agrees with this plan."""
        stored = {g: w for (layer, g), w in weights.coded.items() if layer == self.base.layer_id}
        if not stored:
            return True
        if set(stored) != {dev.index for dev in self.coded}:
            return False
        return all(
            stored[dev.index].shape == dev.weight.shape
            and np.allclose(stored[dev.index], dev.weight, rtol=1e-6, atol=1e-6)
            for dev in self.coded
        )


def _check_groups(n: int, groups: Iterable[Collection[int]]) -> Tuple[Group, ...]:
    checked = []
    for g in groups:
        grp = frozenset(int(d) for d in g)
        if not grp:
            raise ValueError("coded groups must be nonempty")
        bad = sorted(d for d in grp if not 0 <= d < n)
        if bad:
            raise UnknownDevice(f"group members {bad} are not base devices 0..{n - 1}")
        checked.append(grp)
    if not checked:
        raise ValueError("need at least one coded group")
    if len(checked) > 255:
        raise ValueError("at most 255 coded groups per stage")
    return tuple(checked)


def encode(plan: PartitionPlan, weights, groups: Optional[Sequence[Collection[int]]] = None) -> CodedPlan:
    """
    Build coded devices for ``plan``; one group over all devices by default.

    Shorter blocks of a remainder-imbalanced plan are zero-padded to the
    largest block before summing. Activation and pooling move to the merge.

    Raises:
        UnsuitableMethod: the split has no shared factor to code over
    """
    info = suitability(plan.method)
    if not info.suitable_for_cdc:
        raise UnsuitableMethod(plan.method, info.row)
    groups_t = _check_groups(plan.n, groups if groups is not None else [range(plan.n)])
    base = plan.deferred()

    tasks = [extract_device_task(base, weights, d) for d in range(base.n)]
    rows = max(t.weight.shape[0] for t in tasks)
    width = tasks[0].weight.shape[1]
    if any(t.weight.shape[1] != width for t in tasks):
        raise ShapeMismatch("coded group blocks disagree in width", layer_id=plan.layer_id)

    coded = []
    for g, grp in enumerate(groups_t):
        members = [tasks[d] for d in sorted(grp)]
        weight = np.sum([_pad_rows(t.weight, rows) for t in members], axis=0)
        exact = np.sum([_pad_rows(t.weight, rows).astype(np.float64) for t in members], axis=0)
        if not np.allclose(weight, exact, rtol=1e-5, atol=1e-6):
            raise ShapeMismatch(f"coded block {g} does not equal the sum of its group",
                                layer_id=plan.layer_id)
        bias = None
        if members[0].bias is not None:
            bias = np.sum([_pad_rows(t.bias.reshape(-1, 1), rows)[:, 0] for t in members], axis=0)
        template = members[0]
        coded.append(CodedDevice(
            index=g,
            covers=grp,
            task=DeviceTask(
                device=base.n + g,
                layer_id=template.layer_id,
                method=template.method,
                weight=np.ascontiguousarray(weight.astype(template.weight.dtype, copy=False)),
                bias=bias,
                selector=template.selector,
                produces=template.produces,
                block=Block(base.n + g, 0, rows),
                geometry=template.geometry,
                out_height=template.out_height,
                out_width=template.out_width,
                apply_activation=False,
                activation=template.activation,
            ),
        ))

    result = CodedPlan(base=base, groups=groups_t, coded=tuple(coded), block_rows=rows)
    logger.info("Encoded layer %d (%s, n=%d): %d coded device(s), hardware cost %.3f",
                plan.layer_id, plan.method.value, plan.n, len(coded), result.hardware_cost)
    return result


@dataclass
class DecodeStats:
    """Element operations spent on decoding (no GEMM is ever re-run)."""
    subtractions: int = 0
    additions: int = 0


def decode_single(coded_partial: np.ndarray, received: Mapping[int, np.ndarray],
                  missing: Union[int, Collection[int]],
                  out_shape: Optional[Tuple[int, ...]] = None,
                  stats: Optional[DecodeStats] = None) -> np.ndarray:
    """
    Recover one missing pre-activation partial as coded - sum(received).

    Args:
        coded_partial: output of the coded device
        received: partials of the other group members, by device id
        missing: the missing device id (a collection must hold exactly one)
        out_shape: strip row padding down to this shape
        stats: accumulates the element operations spent

    Raises:
        TooManyMissing: more than one device is missing
        NothingMissing: nothing is missing; merge directly
    """
    if isinstance(missing, (int, np.integer)):
        missing_ids = [int(missing)]
    else:
        missing_ids = sorted(set(missing))
    if not missing_ids or (len(missing_ids) == 1 and missing_ids[0] in received):
        raise NothingMissing("every partial arrived; merge them directly")
    if len(missing_ids) > 1:
        raise TooManyMissing(f"devices {missing_ids} are missing; one coded partial recovers one")

    coded_partial = np.asarray(coded_partial)
    if coded_partial.ndim == 1:
        coded_partial = coded_partial.reshape(-1, 1)
    rows = coded_partial.shape[0]
    parts = [_pad_rows(p if np.ndim(p) > 1 else np.reshape(p, (-1, 1)), rows) for p in received.values()]
    for p in parts:
        if p.shape != coded_partial.shape:
            raise ShapeMismatch(f"received partial {p.shape} does not match coded {coded_partial.shape}")

    if parts:
        total = parts[0] if len(parts) == 1 else np.sum(parts, axis=0)
        out = coded_partial - total
    else:
        out = coded_partial.copy()
    if stats is not None:
        stats.subtractions += coded_partial.size
        stats.additions += max(len(parts) - 1, 0) * coded_partial.size
    if out_shape is not None:
        out = out[: out_shape[0]].reshape(out_shape)
    return out


def _peel(n: int, groups: Sequence[Group], known: Set[int], coded_present: Collection[int],
          recover: Optional[Callable[[int, int], None]] = None) -> Set[int]:
    """Resolve groups with one unknown member until stuck; returns the unrecovered devices."""
    known = set(known)
    active = [g for g in range(len(groups)) if g in coded_present]
    for _ in range(len(groups) * n + 1):
        progressed = False
        for g in active:
            unknown = groups[g] - known
            if len(unknown) == 1:
                (device,) = unknown
                if recover is not None:
                    recover(g, device)
                known.add(device)
                progressed = True
        if not progressed or len(known) >= n:
            break
    return set(range(n)) - known


@dataclass(frozen=True)
class Undecodable:
    """Peeling got stuck; ``missing`` lists the devices that stay unknown."""
    missing: Tuple[int, ...]
    recovered: Dict[int, np.ndarray] = field(default_factory=dict, compare=False)


def peel_decode(plan: CodedPlan, received: Mapping[int, np.ndarray],
                received_coded: Mapping[int, np.ndarray],
                stats: Optional[DecodeStats] = None) -> Union[Dict[int, np.ndarray], Undecodable]:
    """
    Recover missing base partials from coded partials, keyed by coded group index.

    Returns the complete device -> partial map, or Undecodable when some
    devices cannot be resolved.
    """
    values: Dict[int, np.ndarray] = dict(received)

    def recover(g: int, device: int):
        others = {d: values[d] for d in plan.groups[g] if d != device}
        values[device] = decode_single(
            received_coded[g], others, device,
            out_shape=plan.base.partial_shape(device), stats=stats,
        )
        logger.debug("Recovered device %d of layer %d from coded group %d",
                     device, plan.base.layer_id, g)

    unrecovered = _peel(plan.n, plan.groups, set(received), set(received_coded), recover)
    if unrecovered:
        return Undecodable(missing=tuple(sorted(unrecovered)),
                           recovered={d: v for d, v in values.items() if d not in received})
    return values


def is_decodable(n: int, groups: Sequence[Collection[int]], failed: Iterable[int]) -> bool:
    """Structural check over base devices 0..n-1 and coded devices n..n+G-1."""
    groups_t = tuple(frozenset(g) for g in groups)
    failed = set(failed)
    present = {d for d in range(n) if d not in failed}
    coded_present = {g for g in range(len(groups_t)) if n + g not in failed}
    return not _peel(n, groups_t, present, coded_present)


@dataclass(frozen=True)
class DecodabilityRow:
    failures: int
    total: int
    recoverable: int

    @property
    def fraction(self) -> float:
        return self.recoverable / self.total if self.total else 1.0

    def to_dict(self) -> Dict[str, float]:
        return {
            "failures": self.failures,
            "total": self.total,
            "recoverable": self.recoverable,
            "fraction": self.fraction,
        }


@dataclass(frozen=True)
class DecodabilityReport:
    n: int
    groups: Tuple[Tuple[int, ...], ...]
    rows: Tuple[DecodabilityRow, ...]

    def fraction(self, failures: int) -> float:
        return self.rows[failures].fraction

    def to_dict(self) -> Dict[str, object]:
        return {
            "n": self.n,
            "groups": [list(g) for g in self.groups],
            "hardware_cost": hardware_cost(self.n, len(self.groups)),
            "rows": [r.to_dict() for r in self.rows],
        }


def decodability(n: int, groups: Sequence[Collection[int]], max_failures: int,
                 cap: int = DEFAULT_PATTERN_CAP) -> DecodabilityReport:
    """
    Enumerate every failure pattern over base and coded devices up to ``max_failures``.

    Raises:
        ExplosionGuard: the patterns with 0..max_failures failures, together, exceed ``cap``
    """
    groups_t = _check_groups(n, groups)
    total_devices = n + len(groups_t)
    if not 0 <= max_failures <= total_devices:
        raise ValueError(f"max_failures must be in 0..{total_devices}, got {max_failures}")
    patterns = sum(int(comb(total_devices, f, exact=True)) for f in range(max_failures + 1))
    if patterns > cap:
        raise ExplosionGuard(patterns, cap)

    rows = []
    for f in range(max_failures + 1):
        total = recoverable = 0
        for failed in itertools.combinations(range(total_devices), f):
            total += 1
            recoverable += is_decodable(n, groups_t, failed)
        rows.append(DecodabilityRow(f, total, recoverable))
    return DecodabilityReport(
        n=n,
        groups=tuple(tuple(sorted(g)) for g in groups_t),
        rows=tuple(rows),
    )


def hardware_cost(n: int, groups: int = 1) -> float:
    """Devices used relative to the uncoded split, (n + groups) / n."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return (n + groups) / n


def default_groups(n: int, tolerance: int = 1) -> List[List[int]]:
    """
    Coded groups for tolerating one or two failures.

    One failure uses a single group over every device; two failures use two
    overlapping groups, the first and the last ceil(n/2)+1 devices.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if tolerance == 1:
        return [list(range(n))]
    if tolerance == 2:
        size = min(n, math.ceil(n / 2) + 1)
        return [list(range(size)), list(range(n - size, n))]
    raise ValueError(f"supported tolerances are 1 and 2, got {tolerance}")
