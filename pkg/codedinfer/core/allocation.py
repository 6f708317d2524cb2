"""
Task allocation files and fallback selection.

An allocation maps the model's fused layer groups onto devices:

    {"name": "...", "model": "model.json",
     "stages": [{"layers": [0, 1], "method": "conv_channel", "devices": [1, 2],
                 "coded": {"groups": [[0, 1]], "devices": [6]}}],
     "roster": [{"id": 1, "addr": "10.0.0.1:7001", "link": "det:5"}]}

``model`` is a descriptor path relative to the allocation file. Coded group
members are indices into the stage's ``devices`` list.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from codedinfer.core.errors import (
    AllocationInvalid,
    IoError,
    NoFeasibleAllocation,
    ParseError,
    TooManyDevices,
)
from codedinfer.core.splitter import PartitionPlan, plan_split, suitability
from codedinfer.core.types import LayerKind, SplitMethod

logger = logging.getLogger(__name__)

WHOLE = "whole"

MethodName = Literal["fc_output", "fc_input", "conv_channel", "conv_spatial", "conv_filter", "whole"]


class CodedDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    groups: List[List[int]] = Field(min_length=1)
    devices: List[int] = Field(min_length=1)


class StageDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layers: List[int] = Field(min_length=1)
    method: MethodName = WHOLE
    devices: List[int] = Field(min_length=1)
    coded: Optional[CodedDoc] = None


class RosterDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int = Field(ge=0)
    addr: str = ""
    link: Optional[str] = None


class AllocationDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Optional[str] = None
    model: str
    stages: List[StageDoc] = Field(min_length=1)
    roster: List[RosterDoc] = Field(min_length=1)


@dataclass(frozen=True)
class Stage:
    """One fused layer group and the devices that run it."""
    index: int
    layers: Tuple[int, ...]
    method: Optional[SplitMethod]
    devices: Tuple[int, ...]
    groups: Tuple[Tuple[int, ...], ...] = ()
    coded_devices: Tuple[int, ...] = ()

    @property
    def is_split(self) -> bool:
        return self.method is not None

    @property
    def is_coded(self) -> bool:
        return bool(self.coded_devices)

    @property
    def n(self) -> int:
        return len(self.devices)

    @property
    def all_devices(self) -> Tuple[int, ...]:
        return self.devices + self.coded_devices

    def plan(self, model) -> PartitionPlan:
        if self.method is None:
            raise AllocationInvalid(f"stage {self.index} runs whole layers and has no partition plan")
        layer = model.layer(self.layers[0])
        post = [model.layer(i) for i in self.layers[1:]]
        return plan_split(layer, self.method, self.n, post)

    def to_dict(self) -> Dict[str, Any]:
        entry: Dict[str, Any] = {
            "layers": list(self.layers),
            "method": self.method.value if self.method else WHOLE,
            "devices": list(self.devices),
        }
        if self.is_coded:
            entry["coded"] = {
                "groups": [list(g) for g in self.groups],
                "devices": list(self.coded_devices),
            }
        return entry


@dataclass(frozen=True)
class RosterDevice:
    id: int
    addr: str = ""
    link: Optional[str] = None


@dataclass(frozen=True)
class AllocationFile:
    name: str
    model: str
    stages: Tuple[Stage, ...]
    roster: Tuple[RosterDevice, ...]
    source: Optional[Path] = field(default=None, compare=False)

    @property
    def required_devices(self) -> FrozenSet[int]:
        return frozenset(d for s in self.stages for d in s.all_devices)

    @property
    def device_count(self) -> int:
        return len(self.required_devices)

    def roster_entry(self, device: int) -> RosterDevice:
        for entry in self.roster:
            if entry.id == device:
                return entry
        raise AllocationInvalid(f"device {device} is not in the roster of {self.name!r}")

    def link_overrides(self) -> Dict[int, str]:
        return {d.id: d.link for d in self.roster if d.link}

    def model_path(self) -> Path:
        base = self.source.parent if self.source is not None else Path(".")
        return base / self.model

    def with_stages(self, stages: Sequence[Stage], roster: Sequence[RosterDevice]) -> "AllocationFile":
        return replace(self, stages=tuple(stages), roster=tuple(roster))

    def to_dict(self) -> Dict[str, Any]:
        roster = []
        for d in self.roster:
            entry: Dict[str, Any] = {"id": d.id, "addr": d.addr}
            if d.link:
                entry["link"] = d.link
            roster.append(entry)
        return {
            "name": self.name,
            "model": self.model,
            "stages": [s.to_dict() for s in self.stages],
            "roster": roster,
        }


def allocation_from_dict(document: Dict[str, Any], source: Optional[Path] = None) -> AllocationFile:
    try:
        doc = AllocationDoc.model_validate(document)
    except ValidationError as e:
        raise ParseError(f"invalid allocation file: {e}")

    stages = []
    for i, s in enumerate(doc.stages):
        groups: Tuple[Tuple[int, ...], ...] = ()
        coded: Tuple[int, ...] = ()
        if s.coded is not None:
            groups = tuple(tuple(g) for g in s.coded.groups)
            coded = tuple(s.coded.devices)
        stages.append(Stage(
            index=i,
            layers=tuple(s.layers),
            method=None if s.method == WHOLE else SplitMethod(s.method),
            devices=tuple(s.devices),
            groups=groups,
            coded_devices=coded,
        ))
    name = doc.name or (source.stem if source is not None else "allocation")
    roster = tuple(RosterDevice(r.id, r.addr, r.link) for r in doc.roster)
    return AllocationFile(name=name, model=doc.model, stages=tuple(stages), roster=roster, source=source)


def load_allocation(path: Union[str, Path]) -> AllocationFile:
    """
    Parse an allocation file (no model checks; see ``validate_allocation``).

    Raises:
        ParseError: unreadable file, bad JSON or schema violation
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read allocation {path}: {e}")
    except json.JSONDecodeError as e:
        raise ParseError(f"allocation {path} is not valid JSON: {e}")
    if not isinstance(document, dict):
        raise ParseError(f"allocation {path} must be a JSON object")
    return allocation_from_dict(document, source=path)


def save_allocation(alloc: AllocationFile, path: Union[str, Path]):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(alloc.to_dict(), f, indent=2)
            f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write allocation {path}: {e}")


def validate_allocation(alloc: AllocationFile, model) -> AllocationFile:
    """
    Check an allocation against its model.

    Every layer must be covered exactly once, in order; split stages hold one
    weighted layer plus fused pooling; coding only on suitable methods; every
    device must be in the roster.

    Raises:
        AllocationInvalid
    """
    roster_ids = [d.id for d in alloc.roster]
    if len(set(roster_ids)) != len(roster_ids):
        raise AllocationInvalid(f"{alloc.name}: duplicate roster ids")
    covered = [layer_id for s in alloc.stages for layer_id in s.layers]
    expected = [layer.id for layer in model.layers]
    if covered != expected:
        raise AllocationInvalid(
            f"{alloc.name}: stages cover layers {covered}, model {model.name!r} has {expected}"
        )

    for stage in alloc.stages:
        where = f"{alloc.name} stage {stage.index}"
        if len(set(stage.all_devices)) != len(stage.all_devices):
            raise AllocationInvalid(f"{where}: device ids must be unique within a stage")
        unknown = sorted(set(stage.all_devices) - set(roster_ids))
        if unknown:
            raise AllocationInvalid(f"{where}: devices {unknown} are not in the roster")

        if not stage.is_split:
            if stage.n != 1 or stage.is_coded:
                raise AllocationInvalid(f"{where}: whole-layer stages run on exactly one uncoded device")
            continue

        head = model.layer(stage.layers[0])
        if not head.weighted or any(model.layer(i).kind is not LayerKind.POOL for i in stage.layers[1:]):
            raise AllocationInvalid(f"{where}: a split stage is one fc/conv layer plus optional pooling")
        if stage.method.layer_kind is not head.kind:
            raise AllocationInvalid(f"{where}: {stage.method.value} cannot split a {head.kind.value} layer")
        try:
            stage.plan(model)
        except TooManyDevices as e:
            raise AllocationInvalid(f"{where}: {e}")

        if stage.is_coded:
            info = suitability(stage.method)
            if not info.suitable_for_cdc:
                raise AllocationInvalid(f"{where}: coded entries need a suitable method ({info.row})")
            if len(stage.groups) != len(stage.coded_devices):
                raise AllocationInvalid(f"{where}: one coded device per group is required")
            for grp in stage.groups:
                if not grp or any(not 0 <= i < stage.n for i in grp):
                    raise AllocationInvalid(f"{where}: group {list(grp)} must index devices 0..{stage.n - 1}")
    return alloc


def fallback_select(catalog: Sequence[AllocationFile], alive) -> AllocationFile:
    """
    First allocation in ``catalog`` whose required devices are all alive.

    The catalog is expected in descending device count.

    Raises:
        NoFeasibleAllocation
    """
    alive = frozenset(alive)
    for alloc in catalog:
        if alloc.required_devices <= alive:
            logger.info("Fallback selected %s (%d devices)", alloc.name, alloc.device_count)
            return alloc
    raise NoFeasibleAllocation(f"no allocation runs on alive devices {sorted(alive)}")


def load_catalog(paths: Sequence[Union[str, Path]]) -> List[AllocationFile]:
    """Load fallback allocations, most devices first."""
    allocs = [load_allocation(p) for p in paths]
    return sorted(allocs, key=lambda a: -a.device_count)
