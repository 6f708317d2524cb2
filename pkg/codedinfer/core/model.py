"""
Model descriptions and the single-device reference executor.

A model is a JSON descriptor listing fc/conv/pool layers in order. The
reference executor runs the whole model on one device and is the oracle that
every distributed run is compared against.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from codedinfer.core.errors import InvalidGeometry, ParseError, ShapeMismatch
from codedinfer.core.matrix import activate, affine_activate, conv2d, gemm, pool2d
from codedinfer.core.types import (
    ActivationKind,
    ConvGeometry,
    DType,
    FcParams,
    LayerKind,
    LayerSpec,
    PoolMode,
    PoolParams,
    Shape,
)

logger = logging.getLogger(__name__)


# --- Descriptor schema ---

class _LayerDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int = Field(ge=0)
    activation: ActivationKind = ActivationKind.IDENTITY
    bias: bool = True


class FcLayerDoc(_LayerDoc):
    kind: Literal["fc"]
    inputs: int = Field(ge=1)
    outputs: int = Field(ge=1)


class ConvLayerDoc(_LayerDoc):
    kind: Literal["conv"]
    input: Optional[Tuple[int, int, int]] = None
    filters: int = Field(ge=1)
    size: int = Field(ge=1)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)


class PoolLayerDoc(_LayerDoc):
    kind: Literal["pool"]
    input: Optional[Tuple[int, int, int]] = None
    window: int = Field(ge=1)
    stride: Optional[int] = Field(default=None, ge=1)
    mode: PoolMode = PoolMode.MAX
    bias: bool = False


LayerDoc = Annotated[Union[FcLayerDoc, ConvLayerDoc, PoolLayerDoc], Field(discriminator="kind")]


class ModelDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    layers: List[LayerDoc] = Field(min_length=1)


@dataclass(frozen=True)
class ModelSpec:
    """Validated sequential model with derived shapes."""
    name: str
    layers: Tuple[LayerSpec, ...]

    @property
    def input_shape(self) -> Shape:
        return self.layers[0].input_shape

    @property
    def output_shape(self) -> Shape:
        return self.layers[-1].output_shape

    def layer(self, layer_id: int) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(f"model {self.name!r} has no layer {layer_id}")

    def index_of(self, layer_id: int) -> int:
        for i, layer in enumerate(self.layers):
            if layer.id == layer_id:
                return i
        raise KeyError(f"model {self.name!r} has no layer {layer_id}")

    def weighted_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.weighted]

    def fused_groups(self) -> List[List[int]]:
        """Layer ids grouped so that pooling rides with its preceding conv/fc layer."""
        groups: List[List[int]] = []
        for layer in self.layers:
            if layer.kind is LayerKind.POOL and groups:
                groups[-1].append(layer.id)
            else:
                groups.append([layer.id])
        return groups

    def to_dict(self) -> Dict[str, Any]:
        layers = []
        for layer in self.layers:
            entry: Dict[str, Any] = {"id": layer.id, "kind": layer.kind.value}
            if layer.kind is LayerKind.FC:
                entry.update(inputs=layer.fc.inputs, outputs=layer.fc.outputs)
            elif layer.kind is LayerKind.CONV:
                g = layer.conv
                entry.update(input=list(g.input_shape), filters=g.filters, size=g.size,
                             stride=g.stride, padding=g.padding)
            else:
                entry.update(window=layer.pool.window, stride=layer.pool.stride,
                             mode=layer.pool.mode.value)
            entry.update(activation=layer.activation.value, bias=layer.has_bias)
            layers.append(entry)
        return {"name": self.name, "layers": layers}


def _size(shape: Shape) -> int:
    return int(np.prod(shape))


def _build_layer(doc, previous: Optional[Shape]) -> LayerSpec:
    if isinstance(doc, FcLayerDoc):
        if previous is not None and _size(previous) != doc.inputs:
            raise ShapeMismatch(
                f"layer {doc.id}: fc expects {doc.inputs} inputs but receives "
                f"{'x'.join(map(str, previous))} = {_size(previous)}",
                layer_id=doc.id,
            )
        return LayerSpec(
            id=doc.id, kind=LayerKind.FC, input_shape=(doc.inputs,),
            fc=FcParams(doc.inputs, doc.outputs),
            activation=doc.activation, has_bias=doc.bias,
        )

    declared = tuple(doc.input) if doc.input is not None else None
    if declared is None:
        if previous is None or len(previous) != 3:
            raise ShapeMismatch(f"layer {doc.id}: {doc.kind} needs an explicit (H, W, C) input",
                                layer_id=doc.id)
        declared = previous
    elif previous is not None and _size(previous) != _size(declared):
        raise ShapeMismatch(
            f"layer {doc.id}: declared input {declared} does not match previous output {previous}",
            layer_id=doc.id,
        )
    if min(declared) < 1:
        raise ShapeMismatch(f"layer {doc.id}: input dims must be >= 1", layer_id=doc.id)

    try:
        if isinstance(doc, ConvLayerDoc):
            geom = ConvGeometry(*declared, size=doc.size, stride=doc.stride,
                                padding=doc.padding, filters=doc.filters)
            layer = LayerSpec(id=doc.id, kind=LayerKind.CONV, input_shape=declared, conv=geom,
                              activation=doc.activation, has_bias=doc.bias)
        else:
            pool = PoolParams(doc.window, doc.stride or doc.window, doc.mode)
            if doc.window > declared[0] or doc.window > declared[1]:
                raise ShapeMismatch(f"layer {doc.id}: pool window {doc.window} exceeds input",
                                    layer_id=doc.id)
            layer = LayerSpec(id=doc.id, kind=LayerKind.POOL, input_shape=declared, pool=pool,
                              activation=doc.activation, has_bias=False)
        layer.output_shape  # validates geometry
    except InvalidGeometry as e:
        raise ShapeMismatch(f"layer {doc.id}: {e}", layer_id=doc.id)
    return layer


def model_from_dict(document: Dict[str, Any]) -> ModelSpec:
    try:
        doc = ModelDoc.model_validate(document)
    except ValidationError as e:
        raise ParseError(f"invalid model descriptor: {e}")

    seen = set()
    layers: List[LayerSpec] = []
    previous: Optional[Shape] = None
    for layer_doc in doc.layers:
        if layer_doc.id in seen:
            raise ParseError(f"duplicate layer id {layer_doc.id}")
        seen.add(layer_doc.id)
        layer = _build_layer(layer_doc, previous)
        layers.append(layer)
        previous = layer.output_shape
    return ModelSpec(name=doc.name, layers=tuple(layers))


def load_model(descriptor: Union[str, Path, Dict[str, Any]]) -> ModelSpec:
    """
    Load and validate a model descriptor.

    Args:
        descriptor: path to a JSON file, a JSON string, or an already-parsed dict

    Raises:
        ParseError: malformed JSON or schema violation
        ShapeMismatch: adjacent layer shapes disagree (names the layer id)
    """
    if isinstance(descriptor, dict):
        return model_from_dict(descriptor)
    text = str(descriptor)
    if isinstance(descriptor, Path) or not text.lstrip().startswith("{"):
        try:
            text = Path(descriptor).read_text(encoding="utf-8")
        except OSError as e:
            raise ParseError(f"cannot read model descriptor {descriptor}: {e}")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"model descriptor is not valid JSON: {e}")
    if not isinstance(document, dict):
        raise ParseError("model descriptor must be a JSON object")
    model = model_from_dict(document)
    logger.debug("Loaded model %s with %d layers", model.name, len(model.layers))
    return model


# --- Execution ---

def coerce_input(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Reshape a layer input to the layer's native layout, checking its size."""
    x = np.asarray(x)
    if layer.kind is LayerKind.FC:
        if x.size != layer.fc.inputs:
            raise ShapeMismatch(f"layer {layer.id}: expected {layer.fc.inputs} inputs, got {x.shape}",
                                layer_id=layer.id)
        return x.reshape(layer.fc.inputs, 1)
    if x.shape == layer.input_shape:
        return x
    if x.ndim == 1 and x.size == _size(layer.input_shape):
        return x.reshape(layer.input_shape)
    raise ShapeMismatch(f"layer {layer.id}: expected input {layer.input_shape}, got {x.shape}",
                        layer_id=layer.id)


def layer_forward(layer: LayerSpec, weights, x: np.ndarray) -> np.ndarray:
    """Run one layer on one device. fc returns an (m,) vector, conv/pool an (H, W, C) tensor."""
    x = coerce_input(layer, x)
    if layer.kind is LayerKind.FC:
        out = gemm(weights.weight(layer.id), x)
        return affine_activate(out, weights.bias(layer.id), layer.activation)[:, 0]
    if layer.kind is LayerKind.CONV:
        out = conv2d(x, weights.weight(layer.id), layer.conv)
        bias = weights.bias(layer.id)
        if bias is not None:
            out = out + bias.astype(out.dtype, copy=False)
        return activate(out, layer.activation)
    out = pool2d(x, layer.pool.window, layer.pool.stride, layer.pool.mode)
    return activate(out, layer.activation)


def reference_activations(model: ModelSpec, weights, x: np.ndarray) -> List[np.ndarray]:
    """Output of every layer in order, computed on a single device."""
    outputs = []
    for layer in model.layers:
        x = layer_forward(layer, weights, x)
        outputs.append(x)
    return outputs


def reference_forward(model: ModelSpec, weights, x: np.ndarray) -> np.ndarray:
    """
    Undistributed forward pass a^l = sigma(W^l a^(l-1) + b^l), flattened to a vector.

    Raises:
        ShapeMismatch: if ``x`` does not fit the first layer
    """
    return np.ravel(reference_activations(model, weights, x)[-1])


def init_weights(model: ModelSpec, seed: int = 0, dtype: DType = DType.F32):
    """Deterministic He-normal weights and small biases for every weighted layer."""
    from codedinfer.core.weights import WeightStore

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xC0DE,)))
    store = WeightStore(dtype=dtype)
    for layer in model.weighted_layers():
        if layer.kind is LayerKind.FC:
            fan_in = layer.fc.inputs
            shape: Shape = (layer.fc.outputs, layer.fc.inputs)
            outputs = layer.fc.outputs
        else:
            g = layer.conv
            fan_in = g.size * g.size * g.channels
            shape = (g.filters, g.size, g.size, g.channels)
            outputs = g.filters
        store.weights[layer.id] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype.numpy)
        if layer.has_bias:
            store.biases[layer.id] = (rng.standard_normal(outputs) * 0.01).astype(dtype.numpy)
    return store
