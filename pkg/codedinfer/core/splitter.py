"""
Model-parallel splitting of one layer into per-device matrix tasks.

Every partial a device returns is a 2-D matrix in GEMM layout:
(rows, 1) for fc layers and (channels, positions) for conv layers, with
positions running row-major over the output tile. Row/channel splits
concatenate rows, spatial tiles concatenate columns, and input/filter
splits sum full-size partials.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from codedinfer.core.errors import (
    IncompatibleMethod,
    MissingPartial,
    ShapeMismatch,
    TooManyDevices,
    UnknownDevice,
)
from codedinfer.core.matrix import (
    activate,
    cols_to_tensor,
    gemm,
    im2col,
    im2col_padded,
    pool2d,
    tensor_to_cols,
    unroll_filters,
)
from codedinfer.core.types import (
    ActivationKind,
    ActivationPlacement,
    ConvGeometry,
    LayerKind,
    LayerSpec,
    MergeKind,
    SplitMethod,
)

logger = logging.getLogger(__name__)


class InputSelector(Enum):
    ALL = "all"
    ROW_RANGE = "row_range"
    SPATIAL_HALO = "spatial_halo"
    DEPTH_RANGE = "depth_range"


class Produces(Enum):
    OUTPUT_ROWS = "output_rows"
    PARTIAL_SUM = "partial_sum"
    OUTPUT_CHANNELS = "output_channels"
    SPATIAL_TILE = "spatial_tile"


@dataclass(frozen=True)
class Suitability:
    """One row of the robustness table: what a method divides and whether it can be coded."""
    method: SplitMethod
    suitable_for_cdc: bool
    divides_input: bool
    divides_weight: bool
    divides_output: bool

    @property
    def row(self) -> str:
        mark = lambda flag: "yes" if flag else "no"  # noqa: E731
        return (
            f"{self.method.value}: divides input={mark(self.divides_input)} "
            f"weight={mark(self.divides_weight)} output={mark(self.divides_output)}, "
            f"suitable={mark(self.suitable_for_cdc)}"
        )

    def to_dict(self) -> Dict[str, object]:
        return {
            "method": self.method.value,
            "suitable_for_cdc": self.suitable_for_cdc,
            "divides": {
                "input": self.divides_input,
                "weight": self.divides_weight,
                "output": self.divides_output,
            },
        }


SUITABILITY: Dict[SplitMethod, Suitability] = {
    SplitMethod.FC_OUTPUT: Suitability(SplitMethod.FC_OUTPUT, True, False, True, True),
    SplitMethod.FC_INPUT: Suitability(SplitMethod.FC_INPUT, False, True, True, False),
    SplitMethod.CONV_CHANNEL: Suitability(SplitMethod.CONV_CHANNEL, True, False, True, True),
    SplitMethod.CONV_SPATIAL: Suitability(SplitMethod.CONV_SPATIAL, False, True, False, True),
    SplitMethod.CONV_FILTER: Suitability(SplitMethod.CONV_FILTER, False, True, True, True),
}

_MERGE_KIND = {
    SplitMethod.FC_OUTPUT: MergeKind.CONCAT_ROWS,
    SplitMethod.FC_INPUT: MergeKind.SUM_PARTIALS,
    SplitMethod.CONV_CHANNEL: MergeKind.CONCAT_CHANNELS,
    SplitMethod.CONV_SPATIAL: MergeKind.CONCAT_SPATIAL,
    SplitMethod.CONV_FILTER: MergeKind.SUM_PARTIALS,
}

_SELECTOR = {
    SplitMethod.FC_OUTPUT: InputSelector.ALL,
    SplitMethod.FC_INPUT: InputSelector.ROW_RANGE,
    SplitMethod.CONV_CHANNEL: InputSelector.ALL,
    SplitMethod.CONV_SPATIAL: InputSelector.SPATIAL_HALO,
    SplitMethod.CONV_FILTER: InputSelector.DEPTH_RANGE,
}

_PRODUCES = {
    SplitMethod.FC_OUTPUT: Produces.OUTPUT_ROWS,
    SplitMethod.FC_INPUT: Produces.PARTIAL_SUM,
    SplitMethod.CONV_CHANNEL: Produces.OUTPUT_CHANNELS,
    SplitMethod.CONV_SPATIAL: Produces.SPATIAL_TILE,
    SplitMethod.CONV_FILTER: Produces.PARTIAL_SUM,
}


def suitability(method: SplitMethod) -> Suitability:
    return SUITABILITY[method]


@dataclass(frozen=True)
class MergeSpec:
    kind: MergeKind
    activation: ActivationPlacement

    def __post_init__(self):
        if self.kind is MergeKind.SUM_PARTIALS and self.activation is not ActivationPlacement.AT_MERGE:
            raise ValueError("sum merges must apply activation after aggregation")


@dataclass(frozen=True)
class Block:
    """
    Range one device owns along the split axis.

    For spatial splits ``start:stop`` are output rows; ``in_start:in_stop`` are
    the input rows (halo included) and ``pad_top``/``pad_bottom`` the zero rows
    that stand in for padding outside the input.
    """
    device: int
    start: int
    stop: int
    in_start: int = 0
    in_stop: int = 0
    pad_top: int = 0
    pad_bottom: int = 0

    @property
    def size(self) -> int:
        return self.stop - self.start


def balanced_ranges(extent: int, n: int) -> List[Tuple[int, int]]:
    """Contiguous ranges whose sizes differ by at most one; the first ``extent % n`` get the extra."""
    base, extra = divmod(extent, n)
    ranges, start = [], 0
    for i in range(n):
        stop = start + base + (1 if i < extra else 0)
        ranges.append((start, stop))
        start = stop
    return ranges


def _halo_block(device: int, r0: int, r1: int, geom: ConvGeometry) -> Block:
    lo = r0 * geom.stride - geom.padding
    hi = (r1 - 1) * geom.stride + geom.size - geom.padding
    total = hi - lo
    pad_top = min(max(-lo, 0), total)
    pad_bottom = min(max(hi - geom.height, 0), total)
    in_start = min(max(lo, 0), geom.height)
    in_stop = in_start + (total - pad_top - pad_bottom)
    return Block(device, r0, r1, in_start, in_stop, pad_top, pad_bottom)


@dataclass(frozen=True)
class PartitionPlan:
    """Which block of a layer each device owns and how partials merge back."""
    layer: LayerSpec
    method: SplitMethod
    n: int
    blocks: Tuple[Block, ...]
    merge: MergeSpec
    post: Tuple[LayerSpec, ...] = ()
    pool_per_device: bool = False

    @property
    def layer_id(self) -> int:
        return self.layer.id

    @property
    def suitable_for_cdc(self) -> bool:
        return SUITABILITY[self.method].suitable_for_cdc

    def block(self, device: int) -> Block:
        if not 0 <= device < self.n:
            raise UnknownDevice(f"device {device} is not part of the {self.n}-device plan")
        return self.blocks[device]

    def deferred(self) -> "PartitionPlan":
        """Same split with activation and pooling moved to the merge point."""
        return replace(
            self,
            merge=MergeSpec(self.merge.kind, ActivationPlacement.AT_MERGE),
            pool_per_device=False,
        )

    @property
    def conv_positions(self) -> Tuple[int, int]:
        """(height, width) of the merged GEMM output before merge-side pooling."""
        g = self.layer.conv
        if self.pool_per_device:
            shape = self.post[-1].output_shape
            return shape[0], shape[1]
        return g.out_height, g.out_width

    def partial_shape(self, device: int) -> Tuple[int, int]:
        block = self.block(device)
        if self.layer.kind is LayerKind.FC:
            m = self.layer.fc.outputs
            return (block.size, 1) if self.method is SplitMethod.FC_OUTPUT else (m, 1)
        g = self.layer.conv
        h, w = self.conv_positions
        if self.method is SplitMethod.CONV_CHANNEL:
            return (block.size, h * w)
        if self.method is SplitMethod.CONV_SPATIAL:
            return (g.filters, block.size * g.out_width)
        return (g.filters, h * w)

    @property
    def output_shape(self) -> Tuple[int, ...]:
        if self.post:
            return self.post[-1].output_shape
        return self.layer.output_shape


def plan_split(layer: LayerSpec, method: SplitMethod, n: int,
               post: Sequence[LayerSpec] = ()) -> PartitionPlan:
    """
    Partition ``layer`` over ``n`` devices.

    Args:
        layer: fc or conv layer to split
        method: distribution method; must match the layer kind
        n: number of devices
        post: pooling layers fused into this layer's stage

    Raises:
        IncompatibleMethod: method does not apply to the layer kind
        TooManyDevices: n exceeds the extent of the split axis
    """
    if not layer.weighted or method.layer_kind is not layer.kind:
        raise IncompatibleMethod(f"{method.value} cannot split {layer.kind.value} layer {layer.id}")
    if n < 1:
        raise ValueError(f"need at least one device, got {n}")
    for pool in post:
        if pool.kind is not LayerKind.POOL:
            raise IncompatibleMethod(f"only pooling layers can be fused after layer {layer.id}")

    if method is SplitMethod.FC_OUTPUT:
        extent = layer.fc.outputs
    elif method is SplitMethod.FC_INPUT:
        extent = layer.fc.inputs
    elif method is SplitMethod.CONV_CHANNEL:
        extent = layer.conv.filters
    elif method is SplitMethod.CONV_SPATIAL:
        extent = layer.conv.out_height
    else:
        extent = layer.conv.channels
    if n > extent:
        raise TooManyDevices(f"{n} devices but {method.value} axis of layer {layer.id} has {extent}")

    ranges = balanced_ranges(extent, n)
    if method is SplitMethod.CONV_SPATIAL:
        blocks = tuple(_halo_block(i, r0, r1, layer.conv) for i, (r0, r1) in enumerate(ranges))
    else:
        blocks = tuple(Block(i, r0, r1) for i, (r0, r1) in enumerate(ranges))

    kind = _MERGE_KIND[method]
    placement = (ActivationPlacement.AT_MERGE if kind is MergeKind.SUM_PARTIALS
                 else ActivationPlacement.PER_DEVICE)
    return PartitionPlan(
        layer=layer,
        method=method,
        n=n,
        blocks=blocks,
        merge=MergeSpec(kind, placement),
        post=tuple(post),
        pool_per_device=bool(post) and method is SplitMethod.CONV_CHANNEL,
    )


@dataclass(frozen=True)
class DeviceTask:
    """Everything one device needs to compute its partial."""
    device: int
    layer_id: int
    method: SplitMethod
    weight: np.ndarray
    bias: Optional[np.ndarray]
    selector: InputSelector
    produces: Produces
    block: Block
    geometry: Optional[ConvGeometry] = None
    out_height: int = 1
    out_width: int = 1
    apply_activation: bool = False
    activation: ActivationKind = ActivationKind.IDENTITY
    post: Tuple[LayerSpec, ...] = ()

    @property
    def columns(self) -> int:
        return self.out_height * self.out_width

    @property
    def flops(self) -> int:
        return 2 * self.weight.shape[0] * self.weight.shape[1] * self.columns


def extract_device_task(plan: PartitionPlan, weights, device: int) -> DeviceTask:
    """
    Slice the weight block and input selector for one device.

    Conv weights are unrolled to K x F*F*C. Biases travel with row and channel
    blocks; sum merges keep the bias at the merge point.

    Raises:
        UnknownDevice: device is not in ``0..plan.n-1``
    """
    block = plan.block(device)
    layer = plan.layer
    w = weights.weight(layer.id)
    b = weights.bias(layer.id)
    method = plan.method
    sl = slice(block.start, block.stop)

    geometry = None
    out_h = out_w = 1
    if method is SplitMethod.FC_OUTPUT:
        weight, bias = w[sl, :], (b[sl] if b is not None else None)
    elif method is SplitMethod.FC_INPUT:
        weight, bias = w[:, sl], None
    else:
        g = layer.conv
        out_h, out_w = g.out_height, g.out_width
        if method is SplitMethod.CONV_CHANNEL:
            weight, bias = unroll_filters(w[sl]), (b[sl] if b is not None else None)
            geometry = g
        elif method is SplitMethod.CONV_SPATIAL:
            weight, bias = unroll_filters(w), b
            geometry = g.with_input(block.in_stop - block.in_start)
            out_h = block.size
        else:
            weight, bias = unroll_filters(w[:, :, :, sl]), None
            geometry = g.with_input(g.height, channels=block.size)

    per_device = plan.merge.activation is ActivationPlacement.PER_DEVICE
    return DeviceTask(
        device=device,
        layer_id=layer.id,
        method=method,
        weight=np.ascontiguousarray(weight),
        bias=None if bias is None else np.ascontiguousarray(bias),
        selector=_SELECTOR[method],
        produces=_PRODUCES[method],
        block=block,
        geometry=geometry,
        out_height=out_h,
        out_width=out_w,
        apply_activation=per_device,
        activation=layer.activation,
        post=plan.post if plan.pool_per_device else (),
    )


def select_input(task: DeviceTask, layer_input: np.ndarray) -> np.ndarray:
    """The part of the full layer input a device receives."""
    x = np.asarray(layer_input)
    b = task.block
    if task.selector is InputSelector.ALL:
        return x
    if task.selector is InputSelector.ROW_RANGE:
        return x.reshape(-1)[b.start:b.stop]
    if task.selector is InputSelector.SPATIAL_HALO:
        return x[b.in_start:b.in_stop]
    return x[:, :, b.start:b.stop]


def _device_input(task: DeviceTask, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    b = task.block
    if task.geometry is None:
        k = task.weight.shape[1]
        if x.size != k:
            if task.selector is InputSelector.ROW_RANGE and x.size >= b.stop:
                x = select_input(task, x)
            else:
                raise ShapeMismatch(f"device {task.device}: expected {k} inputs, got {x.shape}",
                                    layer_id=task.layer_id)
        return x.reshape(-1, 1)

    g = task.geometry
    if x.ndim != 3:
        raise ShapeMismatch(f"device {task.device}: expected an (H, W, C) input, got {x.shape}",
                            layer_id=task.layer_id)
    if x.shape != g.input_shape and task.selector is not InputSelector.ALL:
        x = select_input(task, x)
    if x.shape != g.input_shape:
        raise ShapeMismatch(f"device {task.device}: input {x.shape} != expected {g.input_shape}",
                            layer_id=task.layer_id)
    return x


def execute_task(task: DeviceTask, layer_input: np.ndarray) -> np.ndarray:
    """
    Compute one device's partial.

    ``layer_input`` may be the whole layer input or the part chosen by
    ``select_input``.

    Raises:
        ShapeMismatch: input does not satisfy the task's selector
    """
    x = _device_input(task, layer_input)
    if task.geometry is None:
        out = gemm(task.weight, x)
    elif task.selector is InputSelector.SPATIAL_HALO:
        b, p = task.block, task.geometry.padding
        xp = np.pad(x, ((b.pad_top, b.pad_bottom), (p, p), (0, 0)))
        out = gemm(task.weight, im2col_padded(xp, task.geometry.size, task.geometry.stride))
    else:
        out = gemm(task.weight, im2col(x, task.geometry))

    if task.bias is not None and task.bias.size:
        out = out + task.bias.astype(out.dtype, copy=False)[:, None]
    if task.apply_activation:
        out = activate(out, task.activation)
    if task.post:
        tensor = cols_to_tensor(out, task.out_height, task.out_width)
        for pool in task.post:
            tensor = activate(pool2d(tensor, pool.pool.window, pool.pool.stride, pool.pool.mode),
                              pool.activation)
        out = tensor_to_cols(tensor)
    return out


PartialsArg = Union[Mapping[int, np.ndarray], Sequence[Optional[np.ndarray]]]


def _ordered_partials(plan: PartitionPlan, partials: PartialsArg) -> List[np.ndarray]:
    if isinstance(partials, Mapping):
        by_device = {d: p for d, p in partials.items() if p is not None}
    else:
        by_device = {d: p for d, p in enumerate(partials) if p is not None}
    missing = [d for d in range(plan.n) if d not in by_device]
    if missing:
        raise MissingPartial(missing)
    ordered = []
    for d in range(plan.n):
        part = np.asarray(by_device[d])
        expected = plan.partial_shape(d)
        if part.shape != expected:
            if part.ndim == 1 and expected[1] == 1 and part.shape[0] == expected[0]:
                part = part.reshape(expected)
            else:
                raise ShapeMismatch(f"device {d}: partial {part.shape} != expected {expected}",
                                    layer_id=plan.layer_id)
        ordered.append(part)
    return ordered


def merge(plan: PartitionPlan, partials: PartialsArg,
          bias: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Combine per-device partials into the layer (stage) output.

    Returns an (m,) vector for fc layers and an (H, W, C) tensor for conv
    stages, equal to the undistributed output. ``bias`` is only used by sum
    merges; concat merges received biased partials.

    Raises:
        MissingPartial: lists the absent device ids
        ShapeMismatch: a partial has the wrong shape
    """
    parts = _ordered_partials(plan, partials)
    kind = plan.merge.kind
    if kind in (MergeKind.CONCAT_ROWS, MergeKind.CONCAT_CHANNELS):
        out = np.vstack(parts)
    elif kind is MergeKind.CONCAT_SPATIAL:
        out = np.hstack(parts)
    else:
        out = np.sum(parts, axis=0)
        if bias is not None and np.size(bias):
            out = out + np.asarray(bias).astype(out.dtype, copy=False)[:, None]

    if plan.merge.activation is ActivationPlacement.AT_MERGE:
        out = activate(out, plan.layer.activation)
    if plan.layer.kind is LayerKind.FC:
        return out[:, 0]

    h, w = plan.conv_positions
    tensor = cols_to_tensor(out, h, w)
    if not plan.pool_per_device:
        for pool in plan.post:
            tensor = activate(pool2d(tensor, pool.pool.window, pool.pool.stride, pool.pool.mode),
                              pool.activation)
    return tensor
