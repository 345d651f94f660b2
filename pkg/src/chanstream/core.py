"""Element schemas, element encoding and the wire frame format.

All multi-byte quantities are little-endian. A frame is a fixed 23-byte
header followed by ``payload_len`` payload bytes::

    magic u32 | kind u8 | stream_id u16 | producer_rank u32 | seq u64 | payload_len u32

HELLO payloads are ``role_flags u8 | declared_rank u32 | schema_digest u64``.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

from .errors import FramingError, SchemaError, SchemaViolationError

MAGIC = 0x4D535452
HEADER = struct.Struct("<IBHIQI")
HEADER_SIZE = HEADER.size
HELLO_PAYLOAD = struct.Struct("<BIQ")

MAX_ELEMENT_SIZE = 1 << 20
MAX_NAME_LENGTH = 64

ROLE_PRODUCER = 0x01
ROLE_CONSUMER = 0x02


class ScalarKind(enum.IntEnum):
    INT32 = 0
    INT64 = 1
    FLOAT32 = 2
    FLOAT64 = 3
    UINT8 = 4

    @property
    def width(self) -> int:
        return _WIDTHS[self]

    @property
    def code(self) -> str:
        return _CODES[self]

    @property
    def is_float(self) -> bool:
        return self in (ScalarKind.FLOAT32, ScalarKind.FLOAT64)


_WIDTHS = {
    ScalarKind.INT32: 4,
    ScalarKind.INT64: 8,
    ScalarKind.FLOAT32: 4,
    ScalarKind.FLOAT64: 8,
    ScalarKind.UINT8: 1,
}
_CODES = {
    ScalarKind.INT32: "i",
    ScalarKind.INT64: "q",
    ScalarKind.FLOAT32: "f",
    ScalarKind.FLOAT64: "d",
    ScalarKind.UINT8: "B",
}


class Field(NamedTuple):
    name: str
    kind: ScalarKind
    count: int = 1


class StreamSchema:
    """Ordered, flat, fixed-size record layout.

    Two schemas are compatible when their ``(kind, count)`` lists agree;
    field names are documentation only.
    """

    __slots__ = ("fields", "element_size", "_struct", "_slices", "_layout")

    def __init__(self, fields: Sequence[Field | tuple]):
        fields = tuple(Field(name, ScalarKind(kind), count) for name, kind, count in
                       (_as_triple(f) for f in fields))
        if not fields:
            raise SchemaError("a schema needs at least one field")
        names = [f.name for f in fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {names}")
        for f in fields:
            if not isinstance(f.name, str) or not f.name or len(f.name) > MAX_NAME_LENGTH:
                raise SchemaError(f"bad field name {f.name!r}")
            if not isinstance(f.count, int) or isinstance(f.count, bool) or f.count < 1:
                raise SchemaError(f"field {f.name!r}: count must be a positive integer")
        self.fields = fields
        self.element_size = sum(f.kind.width * f.count for f in fields)
        self._struct = struct.Struct("<" + "".join(f"{f.count}{f.kind.code}" for f in fields))
        bounds, pos = [], 0
        for f in fields:
            bounds.append((pos, pos + f.count))
            pos += f.count
        self._slices = tuple(bounds)
        self._layout = tuple((f.kind, f.count) for f in fields)

    @classmethod
    def contiguous(cls, count: int, kind: ScalarKind, name: str = "data") -> StreamSchema:
        return cls([Field(name, kind, count)])

    @property
    def layout(self) -> tuple[tuple[ScalarKind, int], ...]:
        return self._layout

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def compatible(self, other: StreamSchema) -> bool:
        return self._layout == other._layout

    def __eq__(self, other):
        if not isinstance(other, StreamSchema):
            return NotImplemented
        return self.fields == other.fields

    def __hash__(self):
        return hash(self.fields)

    def __repr__(self):
        inner = ", ".join(f"{f.name}:{f.kind.name}x{f.count}" for f in self.fields)
        return f"StreamSchema({inner})"


def _as_triple(f) -> tuple:
    if len(f) == 2:
        return (f[0], f[1], 1)
    return tuple(f)


def schema_digest(schema: StreamSchema) -> int:
    """64-bit digest of the ordered (kind, count) layout."""
    h = hashlib.blake2b(digest_size=8, person=b"chanstrm-schema")
    for kind, count in schema.layout:
        h.update(struct.pack("<BQ", int(kind), count))
    return int.from_bytes(h.digest(), "little")


def encode_element(schema: StreamSchema, values: Sequence) -> bytes:
    """Pack per-field value sequences into a fixed-size payload.

    ``values`` holds one entry per field; each entry is a sequence of exactly
    ``count`` scalars. A ``bytes`` object is accepted for UINT8 fields.
    """
    fields = schema.fields
    if len(values) != len(fields):
        raise SchemaViolationError(
            f"expected {len(fields)} fields, got {len(values)}")
    flat = []
    for f, v in zip(fields, values):
        try:
            n = len(v)
        except TypeError:
            raise SchemaViolationError(f"field {f.name!r}: expected a sequence of {f.count}") from None
        if n != f.count:
            raise SchemaViolationError(f"field {f.name!r}: expected {f.count} values, got {n}")
        flat.extend(v)
    try:
        return schema._struct.pack(*flat)
    except (struct.error, OverflowError, TypeError) as exc:
        raise SchemaViolationError(str(exc)) from None


def decode_element(schema: StreamSchema, payload: bytes) -> tuple[tuple, ...]:
    if len(payload) != schema.element_size:
        raise FramingError(
            f"payload is {len(payload)} bytes, schema expects {schema.element_size}")
    flat = schema._struct.unpack(payload)
    return tuple(flat[a:b] for a, b in schema._slices)


class Element:
    """One received stream element; decodes its payload on first access."""

    __slots__ = ("schema", "payload", "producer_rank", "seq", "_values")

    def __init__(self, schema: StreamSchema, payload: bytes, producer_rank: int = 0, seq: int = 0):
        if len(payload) != schema.element_size:
            raise FramingError(
                f"payload is {len(payload)} bytes, schema expects {schema.element_size}")
        self.schema = schema
        self.payload = payload
        self.producer_rank = producer_rank
        self.seq = seq
        self._values = None

    @property
    def values(self) -> tuple[tuple, ...]:
        if self._values is None:
            flat = self.schema._struct.unpack(self.payload)
            self._values = tuple(flat[a:b] for a, b in self.schema._slices)
        return self._values

    def __getitem__(self, name: str) -> tuple:
        for i, f in enumerate(self.schema.fields):
            if f.name == name:
                return self.values[i]
        raise KeyError(name)

    def as_dict(self) -> dict[str, tuple]:
        return dict(zip(self.schema.names, self.values))

    def __repr__(self):
        return f"Element(producer={self.producer_rank}, seq={self.seq}, {self.as_dict()})"


class FrameKind(enum.IntEnum):
    HELLO = 0
    DATA = 1
    TERM = 2


class Frame(NamedTuple):
    kind: FrameKind
    stream_id: int
    producer_rank: int
    seq: int
    payload: bytes = b""

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def to_bytes(self) -> bytes:
        return encode_frame(self.kind, self.stream_id, self.producer_rank, self.seq, self.payload)


@dataclass(frozen=True, slots=True)
class Hello:
    role_flags: int
    declared_rank: int
    digest: int

    @property
    def is_producer(self) -> bool:
        return bool(self.role_flags & ROLE_PRODUCER)

    @property
    def is_consumer(self) -> bool:
        return bool(self.role_flags & ROLE_CONSUMER)

    def to_payload(self) -> bytes:
        return HELLO_PAYLOAD.pack(self.role_flags, self.declared_rank, self.digest)

    @classmethod
    def from_payload(cls, payload: bytes) -> Hello:
        if len(payload) != HELLO_PAYLOAD.size:
            raise FramingError(f"HELLO payload must be {HELLO_PAYLOAD.size} bytes, got {len(payload)}")
        return cls(*HELLO_PAYLOAD.unpack(payload))


def encode_frame(kind: int, stream_id: int, producer_rank: int, seq: int, payload: bytes = b"") -> bytes:
    try:
        header = HEADER.pack(MAGIC, kind, stream_id, producer_rank, seq, len(payload))
    except struct.error as exc:
        raise FramingError(f"frame field out of range: {exc}") from None
    return header + payload


def hello_frame(tag: int, sender_rank: int, hello: Hello) -> bytes:
    return encode_frame(FrameKind.HELLO, tag, sender_rank, 0, hello.to_payload())


def _check_header(magic: int, kind: int, length: int) -> None:
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic:#010x}")
    if kind > 2:
        raise FramingError(f"unknown frame kind {kind}")
    if kind == FrameKind.TERM and length != 0:
        raise FramingError("TERM frame with non-empty payload")
    if kind == FrameKind.HELLO and length != HELLO_PAYLOAD.size:
        raise FramingError(f"HELLO frame with {length}-byte payload")


def parse_frame(data: bytes) -> Frame:
    """Parse exactly one frame occupying all of ``data``."""
    if len(data) < HEADER_SIZE:
        raise FramingError(f"short header: {len(data)} bytes")
    magic, kind, sid, rank, seq, length = HEADER.unpack_from(data, 0)
    _check_header(magic, kind, length)
    if len(data) != HEADER_SIZE + length:
        raise FramingError(
            f"frame declares {length} payload bytes, buffer holds {len(data) - HEADER_SIZE}")
    return Frame(_KINDS[kind], sid, rank, seq, bytes(data[HEADER_SIZE:]))


class FrameDecoder:
    """Incremental decoder for a byte stream of concatenated frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[Frame]:
        buf = self._buf
        buf += data
        pos = 0
        n = len(buf)
        unpack = HEADER.unpack_from
        frames = []
        while n - pos >= HEADER_SIZE:
            magic, kind, sid, rank, seq, length = unpack(buf, pos)
            _check_header(magic, kind, length)
            end = pos + HEADER_SIZE + length
            if end > n:
                break
            frames.append(Frame(_KINDS[kind], sid, rank, seq, bytes(buf[pos + HEADER_SIZE:end])))
            pos = end
        del buf[:pos]
        return iter(frames)

    @property
    def pending(self) -> int:
        return len(self._buf)

    def take_remainder(self) -> bytes:
        rest = bytes(self._buf)
        self._buf.clear()
        return rest


_KINDS = (FrameKind.HELLO, FrameKind.DATA, FrameKind.TERM)
