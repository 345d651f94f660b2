"""Channels and streams over a :mod:`~chanstream.transport`.

The public surface mirrors the six library calls of the streaming model:
:func:`create_channel`, :func:`free_channel`, :func:`attach`, :func:`send`,
:func:`terminate` and :func:`operate`. Each also exists as a method on the
returned objects.

A consumer may receive elements of one stream from many producers; the
stream ends for it only after every producer's TERM frame arrived.
"""

from __future__ import annotations

import enum
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Mapping, NamedTuple, Sequence

from .core import (
    HEADER,
    MAGIC,
    MAX_ELEMENT_SIZE,
    ROLE_CONSUMER,
    ROLE_PRODUCER,
    Element,
    FrameKind,
    Hello,
    StreamSchema,
    encode_element,
    encode_frame,
    hello_frame,
    schema_digest,
)
from .errors import (
    AlreadyFreedError,
    AlreadyTerminatedError,
    ChannelCreationError,
    InUseError,
    InvalidChannelError,
    ProtocolError,
    RoutingError,
    SchemaError,
    SchemaMismatchError,
    StreamError,
    StreamTerminatedError,
)
from .harness import RankMetrics
from .transport import EOF, Completion, Link, Transport, materialize, rendezvous

MAX_STREAMS = 1 << 16
BACKGROUND_POLL = 0.005
PUMP_BATCH = 256


class Role(NamedTuple):
    is_producer: bool = False
    is_consumer: bool = False

    @property
    def flags(self) -> int:
        return (ROLE_PRODUCER if self.is_producer else 0) | (ROLE_CONSUMER if self.is_consumer else 0)

    @classmethod
    def from_flags(cls, flags: int) -> Role:
        return cls(bool(flags & ROLE_PRODUCER), bool(flags & ROLE_CONSUMER))

    @property
    def is_bystander(self) -> bool:
        return not (self.is_producer or self.is_consumer)

    def __str__(self):
        if self.is_bystander:
            return "bystander"
        return "+".join(n for n, on in (("producer", self.is_producer), ("consumer", self.is_consumer)) if on)


PRODUCER = Role(True, False)
CONSUMER = Role(False, True)
BOTH = Role(True, True)
BYSTANDER = Role(False, False)


class Status(enum.Enum):
    PROGRESSED = "progressed"
    IDLE = "idle"
    TERMINATED = "terminated"


@dataclass
class OperationSet:
    """Consumer callbacks. ``process`` receives one :class:`Element`."""

    process: Callable[[Element], Any] | None = None
    init: Callable[[], Any] | None = None
    term: Callable[[], Any] | None = None
    background: Callable[[], Any] | None = None


class RoutingPolicy:
    """Picks the destination consumer for each element a producer sends."""

    def choose(self, values: Sequence, send_index: int, producer_rank: int, consumer_size: int) -> int:
        raise NotImplementedError


class RoundRobin(RoutingPolicy):
    def choose(self, values, send_index, producer_rank, consumer_size):
        return send_index % consumer_size


def stable_hash(key) -> int:
    """Process-independent hash (Python's ``hash`` is salted per process)."""
    if isinstance(key, str):
        key = key.encode()
    elif isinstance(key, int):
        key = key.to_bytes(16, "little", signed=True)
    elif isinstance(key, (tuple, list)):
        key = repr(tuple(key)).encode()
    return zlib.crc32(key)


class KeyHash(RoutingPolicy):
    """Route by a key extracted from the element values."""

    def __init__(self, key: Callable[[Sequence], Any]):
        self.key = key

    def choose(self, values, send_index, producer_rank, consumer_size):
        return stable_hash(self.key(values)) % consumer_size


class Fixed(RoutingPolicy):
    """Fixed partition: a producer->consumer map, or a callable on the values."""

    def __init__(self, partition: Mapping[int, int] | Callable[[Sequence], int]):
        self.partition = partition

    def choose(self, values, send_index, producer_rank, consumer_size):
        if callable(self.partition):
            return self.partition(values)
        try:
            return self.partition[producer_rank]
        except KeyError:
            raise RoutingError(f"partition map has no entry for producer {producer_rank}") from None


class TerminationLedger:
    """Counts distinct producers that signalled the end of one stream."""

    def __init__(self, expected: int):
        self.expected = expected
        self.seen: set[int] = set()

    @property
    def count(self) -> int:
        return len(self.seen)

    @property
    def complete(self) -> bool:
        return len(self.seen) == self.expected

    def add(self, producer_rank: int) -> bool:
        if producer_rank in self.seen:
            raise ProtocolError(f"producer {producer_rank} terminated the stream twice")
        if not 0 <= producer_rank < self.expected:
            raise ProtocolError(f"TERM from unknown producer {producer_rank}")
        self.seen.add(producer_rank)
        return self.complete


class Endpoint:
    """One participant: its transport plus per-run bookkeeping."""

    def __init__(self, transport: Transport, metrics: RankMetrics | None = None):
        self.transport = transport
        self.metrics = metrics
        self._next_tag = 0

    @property
    def rank(self) -> int:
        return self.transport.rank

    @property
    def size(self) -> int:
        return self.transport.size


class Channel:
    """Persistent producer-group/consumer-group connection."""

    def __init__(self, endpoint: Endpoint, role: Role, tag: int, roles: dict[int, Role],
                 links: dict[int, Link], mailbox):
        self.endpoint = endpoint
        self.role = role
        self.tag = tag
        self.roles = roles
        self.producer_group = [r for r in sorted(roles) if roles[r].is_producer]
        self.consumer_group = [r for r in sorted(roles) if roles[r].is_consumer]
        me = endpoint.rank
        self.producer_rank = self.producer_group.index(me) if role.is_producer else -1
        self.consumer_rank = self.consumer_group.index(me) if role.is_consumer else -1
        self._links = links
        self._mailbox = mailbox
        self._consumer_links = [links[r] for r in self.consumer_group] if role.is_producer else []
        self._producer_index = {r: i for i, r in enumerate(self.producer_group)}
        self.streams: list[Stream] = []
        self._inbound: dict[int, deque] = {}
        self._hellos: dict[tuple[int, int], Hello] = {}
        self._term_seen: set[tuple[int, int]] = set()
        self._closed_peers: set[int] = set()
        self.freed = False

    @property
    def producer_size(self) -> int:
        return len(self.producer_group)

    @property
    def consumer_size(self) -> int:
        return len(self.consumer_group)

    @property
    def links(self) -> dict[int, Link]:
        return dict(self._links)

    def _check_open(self):
        if self.freed:
            raise InvalidChannelError("channel has been freed")

    def _inbound_for(self, sid: int) -> deque:
        q = self._inbound.get(sid)
        if q is None:
            q = self._inbound[sid] = deque()
        return q

    def _pump(self, block: bool) -> bool:
        """Move whatever the mailbox holds (at least one item when blocking) into the stash."""
        mb = self._mailbox
        batch = mb.take_ready(PUMP_BATCH)
        if not batch:
            got = mb.get_any(block)
            if got is None:
                return False
            batch = [got]
        links = self._links
        for src, raw in batch:
            if src not in links:
                continue
            frame = materialize(raw)
            if frame is EOF:
                self._peer_closed(src)
                continue
            kind = frame.kind
            if kind is FrameKind.HELLO:
                self._hellos[(frame.stream_id, src)] = Hello.from_payload(frame.payload)
                continue
            self._inbound_for(frame.stream_id).append((src, frame))
            if kind is FrameKind.TERM:
                self._term_seen.add((frame.stream_id, src))
        return True

    def _peer_closed(self, src: int) -> None:
        self._closed_peers.add(src)
        if self.role.is_consumer and src in self._producer_index:
            for s in self.streams:
                if (s.stream_id, src) not in self._term_seen:
                    raise ProtocolError(
                        f"producer rank {src} closed its link before terminating stream {s.stream_id}")

    def attach(self, schema: StreamSchema, ops: OperationSet | None = None,
               routing: RoutingPolicy | None = None) -> Stream:
        """Collective over the channel's producers and consumers: every member
        attaches its streams in the same order, and schema digests are checked
        against every peer before returning."""
        self._check_open()
        if schema.element_size > MAX_ELEMENT_SIZE:
            raise SchemaError(f"element size {schema.element_size} exceeds {MAX_ELEMENT_SIZE} bytes")
        if self.role.is_consumer:
            if ops is None or ops.process is None:
                raise StreamError("consumers must attach an OperationSet with a process callback")
        elif ops is not None:
            raise StreamError("pure producers attach without operations")
        sid = len(self.streams)
        if sid >= MAX_STREAMS:
            raise StreamError("too many streams on one channel")
        digest = schema_digest(schema)
        me = self.endpoint.rank
        hello = hello_frame(sid, me, Hello(self.role.flags, me, digest))
        stream = Stream(self, sid, schema, digest, ops, routing or RoundRobin())
        self.streams.append(stream)
        for link in self._links.values():
            link.send_bytes(hello)
        mismatch = None
        for peer in sorted(self._links):
            key = (sid, peer)
            while key not in self._hellos:
                if peer in self._closed_peers:
                    raise ProtocolError(f"rank {peer} left the channel during attach")
                self._pump(block=True)
            theirs = self._hellos.pop(key)
            if theirs.digest != digest and mismatch is None:
                mismatch = SchemaMismatchError(digest, theirs.digest, peer)
        if mismatch is not None:
            stream._failed = True
            raise mismatch
        return stream

    def free(self) -> None:
        if self.freed:
            raise AlreadyFreedError("channel already freed")
        for s in self.streams:
            if s._failed:
                continue
            if self.role.is_producer and not s._local_terminated:
                raise InUseError(f"stream {s.stream_id} has not been terminated by this producer")
            if self.role.is_consumer and not s._global_terminated:
                raise InUseError(f"stream {s.stream_id} is still open on this consumer")
        for link in self._links.values():
            link.close()
        self.endpoint.transport.release(self.tag)
        self.freed = True

    def __repr__(self):
        return (f"Channel(tag={self.tag}, role={self.role}, producer {self.producer_rank}/{self.producer_size}, "
                f"consumer {self.consumer_rank}/{self.consumer_size})")


class Stream:
    def __init__(self, channel: Channel, stream_id: int, schema: StreamSchema, digest: int,
                 ops: OperationSet | None, routing: RoutingPolicy):
        self.channel = channel
        self.stream_id = stream_id
        self.schema = schema
        self.digest = digest
        self.ops = ops
        self.routing = routing
        self._failed = False
        # producer side
        self.elements_sent = 0
        self._seq = [0] * channel.consumer_size
        self._local_terminated = False
        # consumer side
        self.elements_processed = 0
        self.ledger = TerminationLedger(channel.producer_size)
        self._expected = [0] * channel.producer_size
        self._initialized = False
        self._global_terminated = False

    @property
    def state(self) -> str:
        if self._global_terminated:
            return "terminated-global"
        if self._local_terminated:
            return "terminated-local"
        return "open"

    def send(self, values: Sequence, mode: str = "block") -> Completion:
        ch = self.channel
        if not ch.role.is_producer:
            raise StreamError("only producers may send")
        if self._local_terminated:
            raise StreamTerminatedError(f"stream {self.stream_id} already terminated by this producer")
        ch._check_open()
        n = ch.consumer_size
        idx = self.routing.choose(values, self.elements_sent, ch.producer_rank, n)
        if not 0 <= idx < n:
            raise RoutingError(f"routing chose consumer {idx}, channel has {n}")
        payload = encode_element(self.schema, values)
        seq = self._seq[idx]
        data = HEADER.pack(MAGIC, 1, self.stream_id, ch.producer_rank, seq, len(payload)) + payload
        completion = ch._consumer_links[idx].send_bytes(data, mode == "block")
        self._seq[idx] = seq + 1
        self.elements_sent += 1
        m = ch.endpoint.metrics
        if m is not None:
            m.elements_sent += 1
        return completion

    def isend(self, values: Sequence) -> Completion:
        return self.send(values, "nonblock")

    def terminate(self) -> None:
        ch = self.channel
        if not ch.role.is_producer:
            raise StreamError("only producers may terminate a stream")
        if self._local_terminated:
            raise AlreadyTerminatedError(f"stream {self.stream_id} already terminated")
        ch._check_open()
        for idx, link in enumerate(ch._consumer_links):
            link.send_bytes(encode_frame(FrameKind.TERM, self.stream_id, ch.producer_rank, self._seq[idx]))
        self._local_terminated = True

    def operate(self, mode: str = "block") -> Status:
        ch = self.channel
        if not ch.role.is_consumer:
            raise StreamError("only consumers may operate on a stream")
        if self._global_terminated:
            return Status.TERMINATED
        ch._check_open()
        if not self._initialized:
            self._initialized = True
            if self.ops.init is not None:
                self.ops.init()
        if mode == "step":
            return self._step(wait=False)
        if mode != "block":
            raise ValueError(f"unknown operate mode {mode!r}")
        bg = self.ops.background
        while True:
            status = self._step(wait=bg is None)
            if status is Status.TERMINATED:
                return status
            if status is Status.IDLE:
                ch._mailbox.wait(BACKGROUND_POLL)

    def _step(self, wait: bool) -> Status:
        ch = self.channel
        q = ch._inbound_for(self.stream_id)
        ops = self.ops
        while True:
            if q:
                src, frame = q.popleft()
                prank = self._check_origin(src, frame)
                expected = self._expected[prank]
                if frame.kind is FrameKind.DATA:
                    if frame.seq != expected:
                        raise ProtocolError(
                            f"stream {self.stream_id}: producer {prank} sent seq {frame.seq}, expected {expected}")
                    self._expected[prank] = expected + 1
                    ops.process(Element(self.schema, frame.payload, prank, frame.seq))
                    self.elements_processed += 1
                    m = ch.endpoint.metrics
                    if m is not None:
                        m.elements_processed += 1
                    return Status.PROGRESSED
                if frame.kind is FrameKind.TERM:
                    if frame.seq != expected:
                        raise ProtocolError(
                            f"stream {self.stream_id}: producer {prank} terminated after {frame.seq} "
                            f"elements but {expected} arrived")
                    if self.ledger.add(prank):
                        self._global_terminated = True
                        if ops.term is not None:
                            ops.term()
                        return Status.TERMINATED
                continue
            if not ch._pump(block=wait):
                if ops.background is not None:
                    ops.background()
                return Status.IDLE

    def _check_origin(self, src: int, frame) -> int:
        prank = self.channel._producer_index.get(src)
        if prank is None or prank != frame.producer_rank:
            raise ProtocolError(
                f"frame claims producer {frame.producer_rank} but arrived from rank {src}")
        return prank

    def __repr__(self):
        return f"Stream(id={self.stream_id}, {self.schema}, {self.state})"


def create_channel(endpoint: Endpoint, role: Role, expected_roles: Mapping[int, Role] | None = None,
                   timeout: float | None = None) -> Channel | None:
    """Collective: every roster member calls this once per channel, in the same order.

    Producers and consumers get a :class:`Channel`; bystanders get None.
    """
    tag = endpoint._next_tag
    endpoint._next_tag += 1
    rv = rendezvous(endpoint.transport, tag, role.flags, timeout=timeout)
    roles = {r: Role.from_flags(h.role_flags) for r, h in rv.hellos.items()}
    try:
        if expected_roles is not None:
            for r, want in expected_roles.items():
                if roles.get(r) != Role(*want):
                    raise ProtocolError(f"rank {r} declared role {roles.get(r)} but {Role(*want)} was expected")
        if not any(r.is_producer for r in roles.values()):
            raise ChannelCreationError("channel has no producers")
        if not any(r.is_consumer for r in roles.values()):
            raise ChannelCreationError("channel has no consumers")
    except Exception:
        for link in rv.links.values():
            link.close()
        endpoint.transport.release(tag)
        raise
    keep = {}
    for peer, link in rv.links.items():
        other = roles[peer]
        if (role.is_producer and other.is_consumer) or (role.is_consumer and other.is_producer):
            keep[peer] = link
        else:
            link.close()
    if role.is_bystander:
        endpoint.transport.release(tag)
        return None
    return Channel(endpoint, role, tag, roles, keep, rv.mailbox)


def free_channel(channel: Channel) -> None:
    channel.free()


def attach(channel: Channel, schema: StreamSchema, ops: OperationSet | None = None,
           routing: RoutingPolicy | None = None) -> Stream:
    if channel is None:
        raise InvalidChannelError("bystanders hold no channel")
    return channel.attach(schema, ops, routing)


def send(stream: Stream, values: Sequence, mode: str = "block") -> Completion:
    return stream.send(values, mode)


def terminate(stream: Stream) -> None:
    stream.terminate()


def operate(stream: Stream, mode: str = "block") -> Status:
    return stream.operate(mode)
