"""
Binary weight store.

File layout (little-endian):
    magic "CDCW" | version u16 | dtype u8 | record count u32
    per record: id u32 | dtype u8 | rank u8 | dims u32 x rank | raw data | CRC32

Record ids encode what the tensor is: plain layer ids for weights, BIAS_FLAG for
biases and CODED_FLAG for the summed blocks of coded devices.
"""

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np

from codedinfer.core.errors import ChecksumError, FormatVersionError, IoError, ShapeMismatch
from codedinfer.core.types import DType, LayerKind

logger = logging.getLogger(__name__)

MAGIC = b"CDCW"
VERSION = 1
BIAS_FLAG = 1 << 30
CODED_FLAG = 1 << 31
MAX_LAYER_ID = (1 << 22) - 1

_HEADER = struct.Struct("<4sHBI")
_RECORD = struct.Struct("<IBB")
_CRC = struct.Struct("<I")


@dataclass
class WeightStore:
    """Per-layer weights and biases, plus coded blocks keyed by (layer id, group)."""
    dtype: DType = DType.F32
    weights: Dict[int, np.ndarray] = field(default_factory=dict)
    biases: Dict[int, np.ndarray] = field(default_factory=dict)
    coded: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    coded_biases: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    def weight(self, layer_id: int) -> np.ndarray:
        try:
            return self.weights[layer_id]
        except KeyError:
            raise ShapeMismatch(f"no weights stored for layer {layer_id}", layer_id=layer_id)

    def bias(self, layer_id: int) -> Optional[np.ndarray]:
        return self.biases.get(layer_id)

    def validate(self, model) -> "WeightStore":
        """Check that every weighted layer has an entry of the right shape."""
        for layer in model.weighted_layers():
            w = self.weight(layer.id)
            if layer.kind is LayerKind.FC:
                expected = (layer.fc.outputs, layer.fc.inputs)
                outputs = layer.fc.outputs
            else:
                g = layer.conv
                expected = (g.filters, g.size, g.size, g.channels)
                outputs = g.filters
            if w.shape != expected:
                raise ShapeMismatch(
                    f"layer {layer.id}: stored weight {w.shape} != expected {expected}",
                    layer_id=layer.id,
                )
            b = self.bias(layer.id)
            if b is not None and b.shape != (outputs,):
                raise ShapeMismatch(f"layer {layer.id}: bias {b.shape} != ({outputs},)",
                                    layer_id=layer.id)
        return self

    def astype(self, dtype: DType) -> "WeightStore":
        conv = lambda d: {k: v.astype(dtype.numpy) for k, v in d.items()}  # noqa: E731
        return WeightStore(dtype, conv(self.weights), conv(self.biases),
                           conv(self.coded), conv(self.coded_biases))

    def equals(self, other: "WeightStore") -> bool:
        """Bit-exact comparison including element width."""
        mine, theirs = list(self.records()), list(other.records())
        if self.dtype is not other.dtype or len(mine) != len(theirs):
            return False
        return all(
            ia == ib and a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for (ia, a), (ib, b) in zip(mine, theirs)
        )

    def records(self) -> Iterator[Tuple[int, np.ndarray]]:
        """All tensors with their record ids, in ascending id order."""
        items = []
        items += [(layer_id, w) for layer_id, w in self.weights.items()]
        items += [(BIAS_FLAG | layer_id, b) for layer_id, b in self.biases.items()]
        items += [(coded_record_id(*key), w) for key, w in self.coded.items()]
        items += [(BIAS_FLAG | coded_record_id(*key), b) for key, b in self.coded_biases.items()]
        return iter(sorted(items, key=lambda item: item[0]))


def coded_record_id(layer_id: int, group: int) -> int:
    if not 0 <= layer_id <= MAX_LAYER_ID or not 0 <= group < 256:
        raise ValueError(f"coded block ({layer_id}, {group}) is outside the record id space")
    return CODED_FLAG | (layer_id << 8) | group


def _encode_record(record_id: int, array: np.ndarray) -> bytes:
    dtype = DType.of(array)
    body = _RECORD.pack(record_id, dtype.code, array.ndim)
    body += struct.pack(f"<{array.ndim}I", *array.shape)
    body += np.ascontiguousarray(array, dtype=dtype.numpy.newbyteorder("<")).tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def dumps_weights(store: WeightStore) -> bytes:
    records = list(store.records())
    widths = {DType.of(array) for _, array in records}
    if len(widths) > 1:
        raise FormatVersionError("weight store mixes element widths")
    dtype = widths.pop() if widths else store.dtype
    chunks = [_HEADER.pack(MAGIC, VERSION, dtype.code, len(records))]
    chunks += [_encode_record(record_id, array) for record_id, array in records]
    return b"".join(chunks)


def _take(buf: memoryview, offset: int, size: int) -> memoryview:
    if offset + size > len(buf):
        raise ChecksumError(f"weight store truncated at byte {offset} (need {size} more)")
    return buf[offset:offset + size]


def loads_weights(data: bytes) -> WeightStore:
    buf = memoryview(data)
    if len(buf) < _HEADER.size:
        raise ChecksumError("weight store truncated inside the header")
    magic, version, dtype_code, count = _HEADER.unpack(buf[:_HEADER.size])
    if magic != MAGIC:
        raise FormatVersionError(f"not a weight store (magic {bytes(magic)!r})")
    if version != VERSION:
        raise FormatVersionError(f"unsupported weight store version {version}")
    try:
        store = WeightStore(DType.from_code(dtype_code))
    except ValueError as e:
        raise FormatVersionError(f"weight store header: {e}")

    offset = _HEADER.size
    for _ in range(count):
        start = offset
        record_id, dtype_code, rank = _RECORD.unpack(_take(buf, offset, _RECORD.size))
        offset += _RECORD.size
        dims = struct.unpack(f"<{rank}I", _take(buf, offset, 4 * rank))
        offset += 4 * rank
        try:
            dtype = DType.from_code(dtype_code)
        except ValueError as e:
            raise ChecksumError(f"record {record_id}: {e}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.numpy.itemsize
        raw = _take(buf, offset, nbytes)
        offset += nbytes
        (crc,) = _CRC.unpack(_take(buf, offset, _CRC.size))
        if zlib.crc32(buf[start:offset]) != crc:
            raise ChecksumError(f"record {record_id & ~(BIAS_FLAG | CODED_FLAG)}: CRC mismatch")
        offset += _CRC.size
        if dtype is not store.dtype:
            raise FormatVersionError(f"record {record_id}: element width differs from the store header")

        array = np.frombuffer(raw, dtype=dtype.numpy.newbyteorder("<")).astype(dtype.numpy).reshape(dims)
        is_bias = bool(record_id & BIAS_FLAG)
        if record_id & CODED_FLAG:
            key = ((record_id & ~(CODED_FLAG | BIAS_FLAG)) >> 8, record_id & 0xFF)
            (store.coded_biases if is_bias else store.coded)[key] = array
        else:
            layer_id = record_id & ~BIAS_FLAG
            (store.biases if is_bias else store.weights)[layer_id] = array

    if offset != len(buf):
        raise ChecksumError(f"{len(buf) - offset} trailing bytes after the last record")
    return store


def save_weights(store: WeightStore, path: Union[str, Path]):
    """
    Write a weight store to ``path``.

    Raises:
        IoError: if the file cannot be written
    """
    if not str(path):
        raise IoError("empty output path")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(dumps_weights(store))
    except OSError as e:
        raise IoError(f"cannot write weight store {path}: {e}")
    logger.debug("Saved %d weight records to %s", len(list(store.records())), path)


def load_weights(path: Union[str, Path]) -> WeightStore:
    """
    Read a weight store written by ``save_weights``; the result equals the saved store bit for bit.

    Raises:
        IoError, FormatVersionError, ChecksumError
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read weight store {path}: {e}")
    return loads_weights(data)
