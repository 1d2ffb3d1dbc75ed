"""Protocol messages and their little-endian wire codec.

Layout::

    header   round:u32  sender:u8  kind:u8
    ids      count:u32  id:u32 * count
    tensors  rank:u8  dim:u32 * rank  value * prod(dims)     (repeated)

Values are float32 by default. Both ends of a session may instead agree on
float64 (``precision="f64"``); the byte layout is otherwise unchanged.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from ..encoders import Source

_HEADER = struct.Struct("<IBB")
_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")

WIRE_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CodecError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Kind(enum.IntEnum):
    BATCH_REQUEST = 0
    EMBEDDING_UPLOAD = 1
    GRADIENT_DOWNLOAD = 2


def wire_dtype(precision: str) -> np.dtype:
    try:
        return WIRE_DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown wire precision {precision!r}; use 'f32' or 'f64'") from None


@dataclass(eq=False)
class ProtocolMessage:
    round: int
    sender: Source
    batch_ids: list[int]

    kind: ClassVar[Kind]
    n_tensors: ClassVar[int] = 0

    @property
    def tensors(self) -> tuple[np.ndarray, ...]:
        return ()

    def payload_bytes(self, precision: str = "f32") -> int:
        """Bytes of tensor values on the wire (framing excluded)."""
        item = wire_dtype(precision).itemsize
        return sum(int(t.size) * item for t in self.tensors)

    @property
    def batch_size(self) -> int:
        return len(self.batch_ids)


@dataclass(eq=False)
class BatchRequest(ProtocolMessage):
    kind: ClassVar[Kind] = Kind.BATCH_REQUEST


@dataclass(eq=False)
class EmbeddingUpload(ProtocolMessage):
    z_inv: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    z_spec: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    kind: ClassVar[Kind] = Kind.EMBEDDING_UPLOAD
    n_tensors: ClassVar[int] = 2

    @property
    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.z_inv, self.z_spec)


@dataclass(eq=False)
class GradientDownload(ProtocolMessage):
    grad_inv: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    grad_spec: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    kind: ClassVar[Kind] = Kind.GRADIENT_DOWNLOAD
    n_tensors: ClassVar[int] = 2

    @property
    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.grad_inv, self.grad_spec)


_CLASSES = {cls.kind: cls for cls in (BatchRequest, EmbeddingUpload, GradientDownload)}


def serialize(m: ProtocolMessage, precision: str = "f32") -> bytes:
    dt = wire_dtype(precision)
    parts = [_HEADER.pack(m.round, int(m.sender), int(m.kind))]
    ids = np.asarray(m.batch_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() > 0xFFFFFFFF):
        raise ValueError("sample ids must fit in an unsigned 32-bit integer")
    parts.append(_U32.pack(len(ids)))
    parts.append(ids.astype("<u4").tobytes())
    for t in m.tensors:
        arr = np.asarray(t)
        if arr.ndim > 255:
            raise ValueError("tensor rank does not fit in one byte")
        parts.append(_U8.pack(arr.ndim))
        parts.append(np.asarray(arr.shape, dtype="<u4").tobytes())
        parts.append(arr.astype(dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CodecError(f"truncated buffer while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def tensor_spans(buf: bytes, precision: str = "f32") -> list[tuple[int, int, tuple[int, ...]]]:
    """(start offset, byte length, shape) of each tensor's values inside ``buf``."""
    spans: list[tuple[int, int, tuple[int, ...]]] = []
    deserialize(buf, precision, _spans=spans)
    return spans


def deserialize(buf: bytes, precision: str = "f32", _spans: list | None = None) -> ProtocolMessage:
    dt = wire_dtype(precision)
    r = _Reader(buf)
    rnd, sender, kind = _HEADER.unpack(r.take(_HEADER.size, "header"))
    try:
        sender = Source(sender)
    except ValueError:
        raise CodecError(f"unknown sender id {sender}", 4) from None
    try:
        cls = _CLASSES[Kind(kind)]
    except ValueError:
        raise CodecError(f"unknown message kind {kind}", 5) from None
    (count,) = _U32.unpack(r.take(4, "id count"))
    ids = np.frombuffer(r.take(4 * count, "ids"), dtype="<u4").astype(np.int64).tolist()
    tensors = []
    for _ in range(cls.n_tensors):
        (rank,) = _U8.unpack(r.take(1, "tensor rank"))
        shape = tuple(int(d) for d in np.frombuffer(r.take(4 * rank, "tensor dims"), dtype="<u4"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        start = r.pos
        data = np.frombuffer(r.take(n * dt.itemsize, "tensor values"), dtype=dt)
        if _spans is not None:
            _spans.append((start, n * dt.itemsize, shape))
        tensors.append(data.astype(np.float64).reshape(shape))
    if r.pos != len(r.buf):
        raise CodecError(f"{len(r.buf) - r.pos} unexpected trailing bytes", r.pos)
    return cls(rnd, sender, ids, *tensors)


def wire_round(arr: np.ndarray, precision: str = "f32") -> np.ndarray:
    """What ``arr`` looks like after a trip over the wire."""
    return np.asarray(arr).astype(wire_dtype(precision)).astype(np.float64)
