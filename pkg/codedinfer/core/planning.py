"""
Derived allocations: coding an allocation offline and resizing a split stage.
"""

import logging
from dataclasses import dataclass, replace
from typing import Collection, List, Optional, Tuple

from codedinfer.core.allocation import AllocationFile, RosterDevice, Stage, validate_allocation
from codedinfer.core.coder import CodedPlan, default_groups, encode
from codedinfer.core.errors import AllocationInvalid, UnsuitableMethod
from codedinfer.core.splitter import suitability
from codedinfer.core.weights import WeightStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageCost:
    stage: int
    layer_id: int
    method: str
    n: int
    groups: int
    hardware_cost: float

    def to_dict(self):
        return {
            "stage": self.stage,
            "layer_id": self.layer_id,
            "method": self.method,
            "n": self.n,
            "groups": self.groups,
            "hardware_cost": self.hardware_cost,
        }


def _next_ids(alloc: AllocationFile, count: int) -> List[int]:
    start = max(d.id for d in alloc.roster) + 1
    return list(range(start, start + count))


def code_allocation(alloc: AllocationFile, model, weights: WeightStore, code: bool = False,
                    tolerance: int = 1, stages: Optional[Collection[int]] = None
                    ) -> Tuple[AllocationFile, WeightStore, List[StageCost]]:
    """
    Add coded devices and store their summed weight blocks.

    With ``code`` every split stage (or only those in ``stages``) without a
    coded entry gets ``default_groups(n, tolerance)``; stages that already
    carry groups keep them. New coded devices get fresh roster ids.

    Raises:
        UnsuitableMethod: coding requested on an unsuitable split
        AllocationInvalid
    """
    validate_allocation(alloc, model)
    weights.validate(model)

    out = WeightStore(weights.dtype, dict(weights.weights), dict(weights.biases))
    new_stages: List[Stage] = []
    roster = list(alloc.roster)
    costs: List[StageCost] = []
    for stage in alloc.stages:
        wanted = code and stage.is_split and not stage.is_coded and (
            stages is None or stage.index in stages)
        if wanted:
            info = suitability(stage.method)
            if not info.suitable_for_cdc:
                raise UnsuitableMethod(stage.method, info.row)
            groups = tuple(tuple(g) for g in default_groups(stage.n, tolerance))
            ids = _next_ids(alloc.with_stages(new_stages, roster), len(groups))
            roster += [RosterDevice(i) for i in ids]
            stage = replace(stage, groups=groups, coded_devices=tuple(ids))
        new_stages.append(stage)

        if stage.is_coded:
            coded: CodedPlan = encode(stage.plan(model), weights, stage.groups)
            coded.store_into(out)
            costs.append(StageCost(stage.index, coded.base.layer_id, stage.method.value,
                                   stage.n, len(stage.groups), coded.hardware_cost))

    result = alloc.with_stages(new_stages, roster)
    validate_allocation(result, model)
    logger.info("Coded %d of %d stages of %s", len(costs), len(result.stages), result.name)
    return result, out, costs


def resize_stage(alloc: AllocationFile, stage_index: int, n: int, coded: int = 0,
                 name: Optional[str] = None) -> AllocationFile:
    """
    Copy of ``alloc`` whose stage runs on ``n`` base devices plus ``coded`` single-group coded devices.

    Base devices keep the stage's existing ids first; extra ids come after the
    highest roster id. Coded ids are stable across ``n`` so the same devices
    draw the same latency streams in paired runs.
    """
    try:
        stage = alloc.stages[stage_index]
    except IndexError:
        raise AllocationInvalid(f"{alloc.name} has no stage {stage_index}")
    if not stage.is_split:
        raise AllocationInvalid(f"{alloc.name} stage {stage_index} runs whole layers")
    if n < 2:
        raise ValueError(f"splitting requires n >= 2, got {n}")
    if coded not in (0, 1):
        raise ValueError("resized stages carry at most one coded device")
    if coded and not suitability(stage.method).suitable_for_cdc:
        info = suitability(stage.method)
        raise UnsuitableMethod(stage.method, info.row)

    others = {d for s in alloc.stages if s.index != stage_index for d in s.all_devices}
    top = max(d.id for d in alloc.roster)
    # top + 1 is reserved for the coded device whether or not it is used
    coded_ids = (top + 1,) if coded else ()
    base = list(stage.devices[:n])
    candidate = top + 2
    while len(base) < n:
        if candidate not in others:
            base.append(candidate)
        candidate += 1

    groups = (tuple(range(n)),) if coded else ()
    new_stage = replace(stage, devices=tuple(base), groups=groups, coded_devices=coded_ids)
    stages = [new_stage if s.index == stage_index else s for s in alloc.stages]

    known = {d.id: d for d in alloc.roster}
    used = sorted({d for s in stages for d in s.all_devices})
    roster = [known.get(d, RosterDevice(d)) for d in used]
    resized = alloc.with_stages(stages, roster)
    return replace(resized, name=name or f"{alloc.name}-n{n}" + ("-coded" if coded else ""))


def sweep_stage(alloc: AllocationFile) -> int:
    """Index of the first split stage, the one a device sweep resizes."""
    for stage in alloc.stages:
        if stage.is_split:
            return stage.index
    raise AllocationInvalid(f"{alloc.name} has no split stage to sweep")
