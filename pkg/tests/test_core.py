import itertools
import struct
import subprocess
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanstream.core import (
    HEADER_SIZE,
    Element,
    Field,
    Frame,
    FrameDecoder,
    FrameKind,
    Hello,
    ScalarKind,
    StreamSchema,
    decode_element,
    encode_element,
    encode_frame,
    parse_frame,
    schema_digest,
)
from chanstream.errors import FramingError, SchemaError, SchemaViolationError

K = ScalarKind


def test_scalar_widths():
    assert [k.width for k in K] == [4, 8, 4, 8, 1]


def test_schema_element_size_and_validation():
    s = StreamSchema([Field("a", K.INT32, 3), Field("b", K.FLOAT64), Field("c", K.UINT8, 5)])
    assert s.element_size == 12 + 8 + 5
    with pytest.raises(SchemaError):
        StreamSchema([])
    with pytest.raises(SchemaError):
        StreamSchema([Field("a", K.INT32), Field("a", K.INT64)])
    with pytest.raises(SchemaError):
        StreamSchema([Field("a", K.INT32, 0)])


def test_digest_identity_and_names():
    assert schema_digest(StreamSchema.contiguous(10, K.INT32)) == schema_digest(StreamSchema.contiguous(10, K.INT32))
    assert schema_digest(StreamSchema.contiguous(10, K.INT32)) != schema_digest(StreamSchema.contiguous(9, K.INT32))
    a = StreamSchema([Field("x", K.FLOAT64), Field("y", K.INT64, 2)])
    b = StreamSchema([Field("p", K.FLOAT64), Field("q", K.INT64, 2)])
    assert a.compatible(b) and schema_digest(a) == schema_digest(b)


def _small_schemas():
    one = [(k, c) for k in K for c in range(1, 5)]
    for n in (1, 2):
        for layout in itertools.product(one, repeat=n):
            yield StreamSchema([Field(f"f{i}", k, c) for i, (k, c) in enumerate(layout)])


def test_digest_exhaustive_small_schemas():
    # every schema with <= 2 fields and counts <= 4: digests collide only for equal layouts
    by_digest = {}
    for s in _small_schemas():
        by_digest.setdefault(schema_digest(s), set()).add(s.layout)
    assert len(by_digest) == 20 + 20 * 20
    assert all(len(layouts) == 1 for layouts in by_digest.values())


def test_digest_stable_across_processes():
    code = ("from chanstream.core import *; "
            "print(schema_digest(StreamSchema([Field('a', ScalarKind.INT32, 10), Field('b', ScalarKind.FLOAT64)])))")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    here = schema_digest(StreamSchema([Field("a", K.INT32, 10), Field("b", K.FLOAT64)]))
    assert int(out) == here


def test_encode_contiguous_ints():
    s = StreamSchema.contiguous(10, K.INT32)
    payload = encode_element(s, [list(range(10))])
    assert len(payload) == 40
    assert payload == struct.pack("<10i", *range(10))
    assert decode_element(s, payload) == (tuple(range(10)),)


def test_encode_zero_float():
    assert encode_element(StreamSchema.contiguous(1, K.FLOAT64), [[0.0]]) == bytes(8)


def test_decode_truncated():
    s = StreamSchema.contiguous(10, K.INT32)
    with pytest.raises(FramingError):
        decode_element(s, bytes(39))


@pytest.mark.parametrize("values", [
    [[1, 2]],                       # wrong count
    [[1, 2, 3], [4]],               # wrong arity
    [[1, 2, "x"]],                  # wrong kind
    [[1, 2, 2 ** 40]],              # out of range
])
def test_encode_violations(values):
    with pytest.raises(SchemaViolationError):
        encode_element(StreamSchema.contiguous(3, K.INT32), values)


def test_element_view():
    s = StreamSchema([Field("x", K.FLOAT64), Field("ids", K.INT64, 2)])
    el = Element(s, encode_element(s, [[1.5], [3, 4]]), producer_rank=2, seq=7)
    assert el["x"] == (1.5,) and el["ids"] == (3, 4)
    assert el.as_dict() == {"x": (1.5,), "ids": (3, 4)}
    with pytest.raises(FramingError):
        Element(s, b"\x00")


# -- property tests ------------------------------------------------------------

INT_RANGES = {K.INT32: (-2 ** 31, 2 ** 31 - 1), K.INT64: (-2 ** 63, 2 ** 63 - 1), K.UINT8: (0, 255)}


def _scalar(kind):
    if kind in INT_RANGES:
        return st.integers(*INT_RANGES[kind])
    if kind is K.FLOAT32:
        return st.floats(width=32, allow_nan=False)
    return st.floats(allow_nan=False)


@st.composite
def schema_and_values(draw):
    layout = draw(st.lists(st.tuples(st.sampled_from(list(K)), st.integers(1, 6)), min_size=1, max_size=6))
    schema = StreamSchema([Field(f"f{i}", k, c) for i, (k, c) in enumerate(layout)])
    values = [draw(st.lists(_scalar(k), min_size=c, max_size=c)) for k, c in layout]
    return schema, values


@settings(max_examples=1000, deadline=None)
@given(schema_and_values())
def test_roundtrip_values(sv):
    schema, values = sv
    payload = encode_element(schema, values)
    assert len(payload) == schema.element_size
    assert decode_element(schema, payload) == tuple(tuple(v) for v in values)


def _is_f32_signalling_nan(b: bytes) -> bool:
    (bits,) = struct.unpack("<I", b)
    return (bits & 0x7F800000) == 0x7F800000 and (bits & 0x007FFFFF) and not bits & 0x00400000


@st.composite
def schema_and_payload(draw):
    schema, _ = draw(schema_and_values())
    raw = bytearray(draw(st.binary(min_size=schema.element_size, max_size=schema.element_size)))
    off = 0
    for kind, count in schema.layout:
        for _ in range(count):
            if kind is K.FLOAT32 and _is_f32_signalling_nan(bytes(raw[off:off + 4])):
                raw[off + 2] |= 0x40  # quiet it: a float32 sNaN does not survive conversion to double
            off += kind.width
    return schema, bytes(raw)


@settings(max_examples=1000, deadline=None)
@given(schema_and_payload())
def test_roundtrip_payload(sp):
    schema, payload = sp
    assert encode_element(schema, decode_element(schema, payload)) == payload


@settings(max_examples=300, deadline=None)
@given(kind=st.sampled_from(list(FrameKind)), stream_id=st.integers(0, 2 ** 16 - 1),
       rank=st.integers(0, 2 ** 32 - 1), seq=st.integers(0, 2 ** 64 - 1),
       length=st.integers(0, 64 * 1024), fill=st.integers(0, 255))
def test_frame_roundtrip(kind, stream_id, rank, seq, length, fill):
    if kind is FrameKind.TERM:
        payload = b""
    elif kind is FrameKind.HELLO:
        payload = Hello(fill & 3, rank, seq).to_payload()
    else:
        payload = bytes([fill]) * length
    data = encode_frame(kind, stream_id, rank, seq, payload)
    assert len(data) == HEADER_SIZE + len(payload)
    assert parse_frame(data) == Frame(kind, stream_id, rank, seq, payload)


@pytest.mark.parametrize("length", [0, 1, 40, 65535, 65536])
def test_frame_roundtrip_boundaries(length):
    data = encode_frame(FrameKind.DATA, 3, 1, 9, bytes(length))
    assert parse_frame(data).payload_len == length


def test_frame_errors():
    good = encode_frame(FrameKind.DATA, 0, 0, 0, b"abcd")
    with pytest.raises(FramingError):
        parse_frame(good[:10])
    with pytest.raises(FramingError):
        parse_frame(b"\x00" + good[1:])
    with pytest.raises(FramingError):
        parse_frame(encode_frame(FrameKind.TERM, 0, 0, 0, b"x"))


def test_decoder_reassembles_split_stream():
    frames = [encode_frame(FrameKind.DATA, 1, 2, i, bytes([i]) * (i % 7)) for i in range(50)]
    blob = b"".join(frames)
    dec = FrameDecoder()
    got = []
    for i in range(0, len(blob), 13):
        got.extend(dec.feed(blob[i:i + 13]))
    assert [f.seq for f in got] == list(range(50))
    assert dec.pending == 0
