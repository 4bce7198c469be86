"""Binary wire protocol between the S-worker and R-workers, and shard assignment.

Frame: ``magic(4) | version u8 | msg_type u8 | payload_len u32`` then the
payload; everything little-endian.

QKV_BATCH payload::

    layer u16 | step u32 | count u32 | head_start u16 | head_count u16
    count x { seq_id u64 | position u32 | q[w] | k[w] | v[w] }

O_BATCH payload::

    layer u16 | step u32 | count u32 | head_start u16 | head_count u16 | compute_ns u64
    count x { seq_id u64 | o[w] }

``w`` is ``head_count * head_dim`` elements of float32 (or float16 when the
connection negotiated half precision); the record size follows from the
payload length. ``position`` is the number of tokens already cached for the
sequence; 0 registers a new sequence. DROP_SEQ is ``count u32`` then the ids.
HELLO, CONFIG and SHUTDOWN carry UTF-8 JSON; ERROR is ``code u16`` and text.
"""

from __future__ import annotations

import enum
import json
import socket
import struct
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from splitdecode.core import ConfigError, ModelSpec

MAGIC = b"SDKV"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
QKV_PREFIX = struct.Struct("<HIIHH")
O_PREFIX = struct.Struct("<HIIHHQ")
MAX_PAYLOAD = 1 << 28

PRECISIONS = {"single": np.dtype("<f4"), "half": np.dtype("<f2")}


class MsgType(enum.IntEnum):
    HELLO = 1
    CONFIG = 2
    QKV_BATCH = 3
    O_BATCH = 4
    DROP_SEQ = 5
    SHUTDOWN = 6
    ERROR = 7


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    UNSUPPORTED_VERSION = 2
    UNKNOWN_TYPE = 3
    UNKNOWN_SEQUENCE = 4
    CAPACITY_EXCEEDED = 5
    NOT_CONFIGURED = 6
    INTERNAL = 7


class ProtocolError(Exception):
    """Decoding failure. Non-fatal errors consumed exactly one frame."""

    fatal = True
    code = ErrorCode.MALFORMED


class BadMagic(ProtocolError):
    pass


class FrameTooLarge(ProtocolError):
    pass


class IncompleteFrame(ProtocolError):
    """More bytes are needed; not an error on a stream."""

    fatal = False


class UnsupportedVersion(ProtocolError):
    fatal = False
    code = ErrorCode.UNSUPPORTED_VERSION


class UnknownMessageType(ProtocolError):
    fatal = False
    code = ErrorCode.UNKNOWN_TYPE


class MalformedPayload(ProtocolError):
    fatal = False


def _wire_dtype(precision: str) -> np.dtype:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ConfigError(f"unknown wire precision {precision!r}") from None


def _rows(a, n: int) -> np.ndarray:
    # an empty batch carries no width on the wire, so it has none here either
    a = np.asarray(a)
    return a.reshape(n, -1) if n else a.reshape(0, 0)


def _arrays_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass
class Hello:
    info: dict = field(default_factory=dict)
    msg_type = MsgType.HELLO


@dataclass
class Config:
    model: ModelSpec
    head_start: int = 0
    head_count: int | None = None
    storage: str = "single"
    wire_precision: str = "single"
    capacity: int | None = None
    msg_type = MsgType.CONFIG

    def __post_init__(self) -> None:
        if self.head_count is None:
            self.head_count = self.model.num_heads - self.head_start


@dataclass(eq=False)
class QkvBatch:
    layer: int
    step: int
    head_start: int
    head_count: int
    seq_ids: np.ndarray
    positions: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    msg_type = MsgType.QKV_BATCH

    def __post_init__(self) -> None:
        self.seq_ids = np.asarray(self.seq_ids, dtype=np.uint64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.uint32).reshape(-1)
        n = len(self.seq_ids)
        self.q, self.k, self.v = (_rows(a, n) for a in (self.q, self.k, self.v))

    @property
    def count(self) -> int:
        return len(self.seq_ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QkvBatch):
            return NotImplemented
        return ((self.layer, self.step, self.head_start, self.head_count)
                == (other.layer, other.step, other.head_start, other.head_count)
                and all(_arrays_equal(a, b) for a, b in zip(
                    (self.seq_ids, self.positions, self.q, self.k, self.v),
                    (other.seq_ids, other.positions, other.q, other.k, other.v))))


@dataclass(eq=False)
class OBatch:
    layer: int
    step: int
    head_start: int
    head_count: int
    seq_ids: np.ndarray
    o: np.ndarray
    compute_ns: int = 0
    msg_type = MsgType.O_BATCH

    def __post_init__(self) -> None:
        self.seq_ids = np.asarray(self.seq_ids, dtype=np.uint64).reshape(-1)
        self.o = _rows(self.o, len(self.seq_ids))

    @property
    def count(self) -> int:
        return len(self.seq_ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OBatch):
            return NotImplemented
        return ((self.layer, self.step, self.head_start, self.head_count, self.compute_ns)
                == (other.layer, other.step, other.head_start, other.head_count, other.compute_ns)
                and _arrays_equal(self.seq_ids, other.seq_ids) and _arrays_equal(self.o, other.o))


@dataclass(eq=False)
class DropSeq:
    seq_ids: np.ndarray
    msg_type = MsgType.DROP_SEQ

    def __post_init__(self) -> None:
        self.seq_ids = np.asarray(self.seq_ids, dtype=np.uint64).reshape(-1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DropSeq):
            return NotImplemented
        return _arrays_equal(self.seq_ids, other.seq_ids)


@dataclass
class Shutdown:
    stats: dict | None = None
    msg_type = MsgType.SHUTDOWN


@dataclass
class Error:
    code: int
    message: str = ""
    msg_type = MsgType.ERROR


Message = Union[Hello, Config, QkvBatch, OBatch, DropSeq, Shutdown, Error]


def _qkv_dtype(width: int, elem: np.dtype) -> np.dtype:
    return np.dtype([("seq", "<u8"), ("pos", "<u4"), ("q", elem, (width,)),
                     ("k", elem, (width,)), ("v", elem, (width,))])


def _o_dtype(width: int, elem: np.dtype) -> np.dtype:
    return np.dtype([("seq", "<u8"), ("o", elem, (width,))])


def _json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def encode_payload(msg: Message, precision: str = "single") -> bytes:
    elem = _wire_dtype(precision)
    if isinstance(msg, Hello):
        return _json(msg.info)
    if isinstance(msg, Config):
        return _json({"model": msg.model.to_dict(), "head_start": msg.head_start,
                      "head_count": msg.head_count, "storage": msg.storage,
                      "wire_precision": msg.wire_precision, "capacity": msg.capacity})
    if isinstance(msg, QkvBatch):
        width = msg.q.shape[1]
        rec = np.empty(msg.count, dtype=_qkv_dtype(width, elem))
        rec["seq"], rec["pos"] = msg.seq_ids, msg.positions
        rec["q"], rec["k"], rec["v"] = msg.q, msg.k, msg.v
        prefix = QKV_PREFIX.pack(msg.layer, msg.step, msg.count, msg.head_start, msg.head_count)
        return prefix + rec.tobytes()
    if isinstance(msg, OBatch):
        rec = np.empty(msg.count, dtype=_o_dtype(msg.o.shape[1], elem))
        rec["seq"], rec["o"] = msg.seq_ids, msg.o
        prefix = O_PREFIX.pack(msg.layer, msg.step, msg.count, msg.head_start, msg.head_count,
                               msg.compute_ns)
        return prefix + rec.tobytes()
    if isinstance(msg, DropSeq):
        return struct.pack("<I", len(msg.seq_ids)) + msg.seq_ids.astype("<u8").tobytes()
    if isinstance(msg, Shutdown):
        return b"" if msg.stats is None else _json(msg.stats)
    if isinstance(msg, Error):
        return struct.pack("<H", msg.code) + msg.message.encode()
    raise TypeError(f"not a wire message: {msg!r}")


def encode(msg: Message, precision: str = "single", version: int = VERSION) -> bytes:
    payload = encode_payload(msg, precision)
    return HEADER.pack(MAGIC, version, int(msg.msg_type), len(payload)) + payload


def _records(payload: bytes, prefix_size: int, count: int, make_dtype, n_vectors: int,
             fixed: int, elem: np.dtype, head_count: int) -> np.ndarray:
    body = len(payload) - prefix_size
    if count == 0:
        if body:
            raise MalformedPayload(f"{body} trailing bytes after empty batch")
        return np.empty(0, dtype=make_dtype(0, elem))
    if body % count:
        raise MalformedPayload(f"payload body {body} not divisible by count {count}")
    vec_bytes = body // count - fixed
    if vec_bytes <= 0 or vec_bytes % (n_vectors * elem.itemsize):
        raise MalformedPayload(f"record size {body // count} inconsistent with layout")
    width = vec_bytes // (n_vectors * elem.itemsize)
    if head_count == 0 or width % head_count:
        raise MalformedPayload(f"vector width {width} not a multiple of head_count {head_count}")
    return np.frombuffer(payload, dtype=make_dtype(width, elem), offset=prefix_size)


def _load_json(payload: bytes) -> Any:
    try:
        return json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"bad JSON payload: {exc}") from None


def decode_payload(msg_type: int, payload: bytes, precision: str = "single") -> Message:
    elem = _wire_dtype(precision)
    if msg_type == MsgType.HELLO:
        info = _load_json(payload)
        if not isinstance(info, dict):
            raise MalformedPayload("HELLO payload must be a JSON object")
        return Hello(info)
    if msg_type == MsgType.CONFIG:
        data = _load_json(payload)
        try:
            return Config(ModelSpec.from_dict(data["model"]), int(data["head_start"]),
                          int(data["head_count"]), str(data["storage"]),
                          str(data["wire_precision"]),
                          None if data["capacity"] is None else int(data["capacity"]))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedPayload(f"bad CONFIG payload: {exc}") from None
    if msg_type == MsgType.QKV_BATCH:
        if len(payload) < QKV_PREFIX.size:
            raise MalformedPayload("short QKV_BATCH payload")
        layer, step, count, hs, hc = QKV_PREFIX.unpack_from(payload)
        rec = _records(payload, QKV_PREFIX.size, count, _qkv_dtype, 3, 12, elem, hc)
        return QkvBatch(layer, step, hs, hc, rec["seq"].copy(), rec["pos"].copy(),
                        rec["q"].copy(), rec["k"].copy(), rec["v"].copy())
    if msg_type == MsgType.O_BATCH:
        if len(payload) < O_PREFIX.size:
            raise MalformedPayload("short O_BATCH payload")
        layer, step, count, hs, hc, ns = O_PREFIX.unpack_from(payload)
        rec = _records(payload, O_PREFIX.size, count, _o_dtype, 1, 8, elem, hc)
        return OBatch(layer, step, hs, hc, rec["seq"].copy(), rec["o"].copy(), ns)
    if msg_type == MsgType.DROP_SEQ:
        if len(payload) < 4:
            raise MalformedPayload("short DROP_SEQ payload")
        (count,) = struct.unpack_from("<I", payload)
        if len(payload) != 4 + 8 * count:
            raise MalformedPayload("DROP_SEQ length does not match count")
        return DropSeq(np.frombuffer(payload, dtype="<u8", offset=4).copy())
    if msg_type == MsgType.SHUTDOWN:
        if not payload:
            return Shutdown()
        stats = _load_json(payload)
        if not isinstance(stats, dict):
            raise MalformedPayload("SHUTDOWN stats must be a JSON object")
        return Shutdown(stats)
    if msg_type == MsgType.ERROR:
        if len(payload) < 2:
            raise MalformedPayload("short ERROR payload")
        (code,) = struct.unpack_from("<H", payload)
        try:
            return Error(code, payload[2:].decode())
        except UnicodeDecodeError:
            raise MalformedPayload("ERROR text is not UTF-8") from None
    raise UnknownMessageType(f"unknown message type {msg_type}")


def parse_header(buf: bytes | bytearray) -> tuple[int, int, int] | None:
    """``(version, msg_type, payload_len)``, or None when fewer than 10 bytes are present."""
    if len(buf) < HEADER.size:
        if not MAGIC.startswith(bytes(buf[:4])):
            raise BadMagic(f"bad magic {bytes(buf[:4])!r}")
        return None
    magic, version, msg_type, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return version, msg_type, length


def decode(frame: bytes, precision: str = "single") -> Message:
    """Decode exactly one complete frame."""
    header = parse_header(frame)
    if header is None or len(frame) < HEADER.size + header[2]:
        raise IncompleteFrame("needs more bytes")
    version, msg_type, length = header
    if len(frame) > HEADER.size + length:
        raise MalformedPayload("trailing bytes after frame")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} unsupported; supported version is {VERSION}")
    return decode_payload(msg_type, bytes(frame[HEADER.size:]), precision)


class FrameReader:
    """Incremental decoder over a byte stream.

    ``next_message`` returns None until a whole frame is buffered. A non-fatal
    ProtocolError drops only the offending frame; fatal ones leave the stream
    unusable.
    """

    def __init__(self, precision: str = "single") -> None:
        self.precision = precision
        self.buffer = bytearray()

    def feed(self, data: bytes) -> None:
        self.buffer += data

    def next_message(self) -> Message | None:
        header = parse_header(self.buffer)
        if header is None or len(self.buffer) < HEADER.size + header[2]:
            return None
        end = HEADER.size + header[2]
        frame = bytes(self.buffer[:end])
        del self.buffer[:end]
        return decode(frame, self.precision)

    def messages(self) -> list[Message]:
        out = []
        while (msg := self.next_message()) is not None:
            out.append(msg)
        return out


class Connection:
    """One ordered, framed TCP stream."""

    def __init__(self, sock: socket.socket, precision: str = "single") -> None:
        self.sock = sock
        self.reader = FrameReader(precision)
        self.bytes_sent = 0
        self.bytes_received = 0

    @property
    def precision(self) -> str:
        return self.reader.precision

    @precision.setter
    def precision(self, value: str) -> None:
        _wire_dtype(value)
        self.reader.precision = value

    @classmethod
    def connect(cls, address: str, timeout: float | None = 30.0) -> Connection:
        host, port = parse_address(address)
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def send(self, msg: Message) -> None:
        data = encode(msg, self.precision)
        self.sock.sendall(data)
        self.bytes_sent += len(data)

    def send_raw(self, data: bytes) -> None:
        self.sock.sendall(data)
        self.bytes_sent += len(data)

    def recv(self) -> Message | None:
        """Next message, or None when the peer closed the stream."""
        while True:
            msg = self.reader.next_message()
            if msg is not None:
                return msg
            chunk = self.sock.recv(1 << 16)
            if not chunk:
                return None
            self.bytes_received += len(chunk)
            self.reader.feed(chunk)

    def settimeout(self, timeout: float | None) -> None:
        self.sock.settimeout(timeout)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)  # wakes a reader blocked in recv
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"address must be host:port, got {address!r}")
    return host, int(port)


BY_SEQUENCE = "by-sequence"
BY_HEAD = "by-head"
HYBRID = "hybrid"


def split_heads(heads: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous ``(start, count)`` ranges whose counts differ by at most one."""
    if parts < 1 or parts > heads:
        raise ConfigError(f"cannot split {heads} heads into {parts} ranges")
    base, extra = divmod(heads, parts)
    out, start = [], 0
    for i in range(parts):
        n = base + (i < extra)
        out.append((start, n))
        start += n
    return out


@dataclass(frozen=True)
class ShardMap:
    """Routes each (sequence, head) pair to exactly one R-worker.

    Workers form ``groups`` head groups; group ``g`` owns head range
    ``ranges[g]`` and spreads sequences over its members by ``id % size``.
    by-sequence is one group, by-head is one worker per group.
    """

    mode: str
    workers: int
    heads: int
    groups: int
    ranges: tuple[tuple[int, int], ...]

    @property
    def group_size(self) -> int:
        return self.workers // self.groups

    def worker_for(self, seq: int, head: int) -> int:
        for g, (start, count) in enumerate(self.ranges):
            if start <= head < start + count:
                return g * self.group_size + seq % self.group_size
        raise IndexError(f"head {head} out of range")

    def targets(self, seq: int) -> list[tuple[int, int, int]]:
        """``(worker, head_start, head_count)`` for every shard holding ``seq``."""
        return [(g * self.group_size + seq % self.group_size, start, count)
                for g, (start, count) in enumerate(self.ranges)]

    def worker_heads(self, worker: int) -> tuple[int, int]:
        return self.ranges[worker // self.group_size]

    def assignment(self, sequences) -> dict[tuple[int, int], int]:
        return {(s, h): self.worker_for(s, h) for s in sequences for h in range(self.heads)}


def assign_shards(sequences, heads: int, workers: int, mode: str = BY_SEQUENCE,
                  groups: int | None = None) -> ShardMap:
    """Build a :class:`ShardMap`. ``sequences`` is only used for validation."""
    if workers < 1:
        raise ConfigError("need at least one worker")
    if mode == BY_SEQUENCE:
        groups = 1
    elif mode == BY_HEAD:
        groups = workers
    elif mode == HYBRID:
        if groups is None or groups < 1 or workers % groups:
            raise ConfigError(f"hybrid mode needs head groups dividing {workers} workers")
    else:
        raise ConfigError(f"unknown shard mode {mode!r}")
    if any(int(s) < 0 for s in sequences):
        raise ConfigError("sequence ids must be non-negative")
    return ShardMap(mode, workers, heads, groups, tuple(split_heads(heads, groups)))


def estimate_wire_bytes(spec: ModelSpec, batch: int, precision: str = "single") -> int:
    """Bytes per step per layer: Q, K, V out and O back for ``batch`` tokens."""
    per = {"single": 4, "half": 2}.get(precision)
    if per is None:
        raise ConfigError(f"unknown wire precision {precision!r}")
    return batch * 4 * spec.model_dim * per
