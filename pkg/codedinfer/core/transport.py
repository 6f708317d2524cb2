"""
Coordinator/worker messaging.

Frames are little-endian:

    magic "CDC1" | version u16 | type u8 | request u64 | layer u32 | device u32
    | payload_len u64 | payload | CRC32 over everything before it

Two transports carry them: ``SimTransport`` delivers on a simpy virtual
clock with sampled link delays and injected failures; ``TcpTransport`` speaks
the frame format over asyncio streams.
"""

import asyncio
import logging
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np
import simpy

from codedinfer.core.errors import ChecksumError, ConnectionClosed, FormatVersionError
from codedinfer.core.latency import FailureModel, LatencyModel, Purpose, stream
from codedinfer.core.types import DType

logger = logging.getLogger(__name__)

MAGIC = b"CDC1"
VERSION = 1
COORDINATOR = -1
MAX_PAYLOAD = 1 << 31

_HEADER = struct.Struct("<4sHBQIIQ")
_CRC = struct.Struct("<I")
_MATRIX = struct.Struct("<IIB")
FRAME_OVERHEAD = _HEADER.size + _CRC.size


class MessageType(IntEnum):
    TASK_ASSIGN = 0
    INPUT_BLOCK = 1
    PARTIAL_OUTPUT = 2
    CODED_OUTPUT = 3
    HEARTBEAT = 4
    FALLBACK_SWITCH = 5


@dataclass(frozen=True)
class Message:
    type: MessageType
    request_id: int
    layer_id: int
    device_id: int
    payload: bytes = b""

    @property
    def key(self) -> Tuple[int, int, int, int]:
        return (int(self.type), self.request_id, self.layer_id, self.device_id)

    def matrix(self) -> np.ndarray:
        return decode_matrix(self.payload)


# --- Payload codec ---

def encode_matrix(m: np.ndarray) -> bytes:
    """rows u32 | cols u32 | dtype u8 | raw little-endian data. Vectors travel as columns."""
    m = np.asarray(m)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    elif m.ndim != 2:
        m = m.reshape(m.shape[0], int(np.prod(m.shape[1:])))
    dtype = DType.of(m)
    data = np.ascontiguousarray(m, dtype=dtype.numpy.newbyteorder("<")).tobytes()
    return _MATRIX.pack(m.shape[0], m.shape[1], dtype.code) + data


def decode_matrix(payload: bytes) -> np.ndarray:
    if len(payload) < _MATRIX.size:
        raise ChecksumError("matrix payload shorter than its header")
    rows, cols, code = _MATRIX.unpack_from(payload)
    try:
        dtype = DType.from_code(code)
    except ValueError as e:
        raise FormatVersionError(str(e))
    expected = _MATRIX.size + rows * cols * dtype.numpy.itemsize
    if len(payload) != expected:
        raise ChecksumError(f"matrix payload is {len(payload)} bytes, header says {expected}")
    data = np.frombuffer(payload, dtype=dtype.numpy.newbyteorder("<"), offset=_MATRIX.size)
    return data.astype(dtype.numpy).reshape(rows, cols)


# --- Frame codec ---

def encode_frame(msg: Message) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, int(msg.type), msg.request_id, msg.layer_id,
                          msg.device_id & 0xFFFFFFFF, len(msg.payload))
    body = header + msg.payload
    return body + _CRC.pack(zlib.crc32(body))


def _parse_header(header: bytes) -> Tuple[int, int, int, int, int]:
    magic, version, msg_type, request_id, layer_id, device_id, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FormatVersionError(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise FormatVersionError(f"unsupported frame version {version}")
    if length > MAX_PAYLOAD:
        raise ChecksumError(f"frame payload length {length} is implausible")
    return msg_type, request_id, layer_id, device_id, length


def _build(msg_type: int, request_id: int, layer_id: int, device_id: int, payload: bytes) -> Message:
    try:
        kind = MessageType(msg_type)
    except ValueError:
        raise FormatVersionError(f"unknown message type {msg_type}")
    if device_id == 0xFFFFFFFF:
        device_id = COORDINATOR
    return Message(kind, request_id, layer_id, device_id, payload)


def decode_frame(data: bytes) -> Message:
    """
    Parse exactly one frame.

    Raises:
        FormatVersionError: wrong magic, version or message type
        ChecksumError: CRC mismatch, truncation or trailing bytes
    """
    if len(data) < FRAME_OVERHEAD:
        raise ChecksumError("frame truncated")
    msg_type, request_id, layer_id, device_id, length = _parse_header(data[:_HEADER.size])
    end = _HEADER.size + length
    if len(data) != end + _CRC.size:
        raise ChecksumError(f"frame is {len(data)} bytes, header says {end + _CRC.size}")
    (crc,) = _CRC.unpack_from(data, end)
    if zlib.crc32(data[:end]) != crc:
        raise ChecksumError("frame CRC mismatch")
    return _build(msg_type, request_id, layer_id, device_id, bytes(data[_HEADER.size:end]))


async def read_frame(reader: asyncio.StreamReader) -> Message:
    try:
        header = await reader.readexactly(_HEADER.size)
        msg_type, request_id, layer_id, device_id, length = _parse_header(header)
        rest = await reader.readexactly(length + _CRC.size)
    except asyncio.IncompleteReadError as e:
        raise ConnectionClosed(f"peer closed the stream after {len(e.partial)} bytes of a frame")
    (crc,) = _CRC.unpack_from(rest, length)
    if zlib.crc32(header + rest[:length]) != crc:
        raise ChecksumError("frame CRC mismatch")
    return _build(msg_type, request_id, layer_id, device_id, rest[:length])


# --- Simulated transport ---

@dataclass(frozen=True)
class Delivery:
    message: Message
    sent_ms: float
    received_ms: float


class SimTransport:
    """
    Virtual-clock delivery between the coordinator and devices.

    Inputs and replies pay a link latency sample plus the payload term;
    broadcasts pay the payload term only. A message is lost when its sender
    is down at send time or its receiver is down at delivery time, and is
    delivered at most once per (type, request, layer, device).
    """

    def __init__(self, env: simpy.Environment, latency: LatencyModel,
                 failures: Optional[FailureModel] = None, seed: int = 0, keep_log: bool = False):
        self.env = env
        self.latency = latency
        self.failures = failures or FailureModel()
        self.seed = seed
        self.keep_log = keep_log
        self.log: List[Delivery] = []
        self.lost = 0
        self._inboxes: Dict[int, simpy.Store] = {}
        self._seen: Set[Tuple[int, Tuple[int, int, int, int]]] = set()

    def inbox(self, node: int) -> simpy.Store:
        if node not in self._inboxes:
            self._inboxes[node] = simpy.Store(self.env)
        return self._inboxes[node]

    def send(self, msg: Message, dst: int, stage: int = 0, broadcast: bool = False) -> Optional[float]:
        """Schedule delivery; returns the delivery time, or None if the sender is down."""
        now = self.env.now
        src = msg.device_id if dst == COORDINATOR else COORDINATOR
        if src != COORDINATOR and self.failures.is_down(src, now):
            self.lost += 1
            return None
        link = dst if src == COORDINATOR else src
        nbytes = FRAME_OVERHEAD + len(msg.payload)
        if broadcast:
            delay = self.latency.payload_ms(nbytes)
        else:
            purpose = Purpose.INPUT_LINK if src == COORDINATOR else Purpose.REPLY_LINK
            rng = stream(self.seed, link, msg.request_id, stage, purpose)
            delay = self.latency.sample(link, nbytes, rng)
        self.env.process(self._deliver(msg, dst, now, delay))
        return now + delay

    def broadcast(self, msg: Message, targets: Iterable[int], stage: int = 0):
        for dst in targets:
            self.send(Message(msg.type, msg.request_id, msg.layer_id, dst, msg.payload),
                      dst, stage=stage, broadcast=True)

    def _deliver(self, msg: Message, dst: int, sent: float, delay: float):
        yield self.env.timeout(delay)
        if dst != COORDINATOR and self.failures.is_down(dst, self.env.now):
            self.lost += 1
            return
        key = (dst, msg.key)
        if key in self._seen:
            return
        self._seen.add(key)
        delivery = Delivery(msg, sent, self.env.now)
        if self.keep_log:
            self.log.append(delivery)
        self.inbox(dst).put(delivery)

    def recv(self, node: int):
        """simpy event yielding the next Delivery for ``node``."""
        return self.inbox(node).get()

    def pending(self, node: int) -> List[Delivery]:
        """Deliveries queued for ``node`` and not yet received."""
        return list(self.inbox(node).items)


# --- TCP transport ---

class TcpTransport:
    """Frame transport over one asyncio stream pair; sends are serialized by a lock."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer
        self._lock = asyncio.Lock()

    @classmethod
    async def connect(cls, host: str, port: int) -> "TcpTransport":
        reader, writer = await asyncio.open_connection(host, port)
        return cls(reader, writer)

    async def send(self, msg: Message):
        async with self._lock:
            try:
                self.writer.write(encode_frame(msg))
                await self.writer.drain()
            except (ConnectionResetError, BrokenPipeError) as e:
                raise ConnectionClosed(f"peer went away: {e}")

    async def recv(self) -> Message:
        return await read_frame(self.reader)

    async def close(self):
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionResetError, BrokenPipeError):
            pass


class TcpWorker:
    """One device serving input blocks for the stages it belongs to."""

    def __init__(self, device: int, programs, crash: bool = False):
        self.device = device
        self.programs = {p.layer_id: p for p in programs if device in p.devices}
        self.crash = crash
        self.server: Optional[asyncio.AbstractServer] = None
        self.port = 0

    async def start(self, host: str = "127.0.0.1") -> int:
        self.server = await asyncio.start_server(self._handle, host, 0)
        self.port = self.server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self):
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        transport = TcpTransport(reader, writer)
        try:
            while True:
                msg = await transport.recv()
                if msg.type is MessageType.HEARTBEAT:
                    await transport.send(Message(MessageType.HEARTBEAT, msg.request_id, 0, self.device))
                elif msg.type is MessageType.INPUT_BLOCK:
                    if self.crash:
                        logger.debug("Device %d crashes on request %d", self.device, msg.request_id)
                        break
                    program = self.programs[msg.layer_id]
                    partial = program.compute(self.device, msg.matrix())
                    await transport.send(Message(program.reply_type(self.device), msg.request_id,
                                                 msg.layer_id, self.device, encode_matrix(partial)))
        except ConnectionClosed:
            pass
        finally:
            await transport.close()


@dataclass
class TcpRunResult:
    output: np.ndarray
    rel_error: float
    decoded: List[int]
    unreachable: List[int]


async def tcp_inference(alloc, model, weights, x: np.ndarray, crash: Iterable[int] = (),
                        host: str = "127.0.0.1", timeout_s: float = 10.0) -> TcpRunResult:
    """
    Run one request over loopback TCP workers and check it against the reference.

    Devices in ``crash`` drop their connection when their input arrives;
    coded stages recover their partials by decoding.
    """
    from codedinfer.core.matrix import rel_error
    from codedinfer.core.model import reference_forward
    from codedinfer.core.runtime import build_programs

    programs = build_programs(alloc, model, weights)
    crash = set(crash)
    workers = {d: TcpWorker(d, programs, crash=d in crash) for d in sorted(alloc.required_devices)}
    links: Dict[int, TcpTransport] = {}
    decoded: List[int] = []
    unreachable: Set[int] = set()
    try:
        for device, worker in workers.items():
            port = await worker.start(host)
            links[device] = await TcpTransport.connect(host, port)
            await links[device].send(Message(MessageType.HEARTBEAT, 0, 0, COORDINATOR))
            await asyncio.wait_for(links[device].recv(), timeout_s)

        value = np.asarray(x, dtype=weights.dtype.numpy)
        for program in programs:
            staged = program.prepare(value)

            async def exchange(device: int):
                link = links[device]
                await link.send(Message(MessageType.INPUT_BLOCK, 0, program.layer_id, device,
                                        encode_matrix(program.input_for(device, staged))))
                reply = await asyncio.wait_for(link.recv(), timeout_s)
                return device, reply.matrix()

            results = await asyncio.gather(*(exchange(d) for d in program.devices),
                                           return_exceptions=True)
            partials = {}
            for device, result in zip(program.devices, results):
                if isinstance(result, BaseException):
                    if not isinstance(result, (ConnectionClosed, asyncio.TimeoutError)):
                        raise result
                    unreachable.add(device)
                    continue
                partials[result[0]] = result[1]
            value, recovered = program.finish(partials)
            decoded.extend(recovered)
    finally:
        for link in links.values():
            await link.close()
        for worker in workers.values():
            await worker.stop()

    output = np.ravel(value)
    expected = reference_forward(model, weights, x)
    return TcpRunResult(output, rel_error(output, expected), decoded, sorted(unreachable))


def run_tcp_inference(alloc, model, weights, x: np.ndarray, crash: Iterable[int] = (),
                      host: str = "127.0.0.1", timeout_s: float = 10.0) -> TcpRunResult:
    return asyncio.run(tcp_inference(alloc, model, weights, x, crash, host, timeout_s))
