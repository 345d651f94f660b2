"""Persistent point-to-point links between numbered endpoints.

Two interchangeable implementations share one contract:

* :class:`LoopbackTransport` -- endpoints living in one OS process,
  connected through a :class:`LoopbackNetwork`. Frames still travel as
  serialized bytes, so the wire format is exercised without sockets.
* :class:`SocketTransport` -- TCP on ``host:port`` addresses.

Every rendezvous is identified by a small integer *tag* (one per channel).
All links opened under one tag at an endpoint deliver into a shared
:class:`Mailbox`, which lets a consumer wait on "any producer" while still
keeping per-link FIFO order.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any

from .core import (
    Frame,
    FrameDecoder,
    FrameKind,
    Hello,
    hello_frame,
    parse_frame,
)
from .errors import (
    AbortedError,
    FramingError,
    LinkClosedError,
    ProtocolError,
    TransportConnectionError,
)

log = logging.getLogger(__name__)

DEFAULT_CAPACITY = 1024
DEFAULT_TIMEOUT = 10.0


class _Eof:
    __slots__ = ()

    def __repr__(self):
        return "EOF"


EOF = _Eof()


class Mailbox:
    """Per-source bounded FIFOs plus a global arrival order.

    Items are raw frame bytes, parsed :class:`Frame` objects, ``EOF`` or an
    exception raised by a reader thread.

    Each source has a single writer (its loopback peer or its socket reader
    thread) and the mailbox has a single reader (the owning endpoint). Under
    those rules appends and pops on ``deque`` need no lock; the conditions
    are only touched when one side has to sleep. A waiter registers itself
    before re-checking, and the other side checks for waiters after it acts,
    so no wakeup is lost.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self.capacity = capacity
        self._data_ready = threading.Condition(threading.Lock())
        self._room_ready = threading.Condition(threading.Lock())
        self._readers_waiting = 0
        self._writers_waiting = 0
        self._queues: dict[int, deque] = {}
        self._order: deque[int] = deque()
        self._skips: dict[int, int] = {}
        self._rejected: set[int] = set()
        self._unbounded: set[int] = set()
        self._error: BaseException | None = None

    def _queue(self, src: int) -> deque:
        q = self._queues.get(src)
        if q is None:
            q = self._queues.setdefault(src, deque())
        return q

    def set_unbounded(self, src: int) -> None:
        self._unbounded.add(src)

    def _check_put(self, src: int) -> None:
        if self._error is not None:
            raise AbortedError(str(self._error)) from self._error
        if src in self._rejected:
            raise LinkClosedError(f"receiver closed its link from rank {src}")

    def _wait_for_room(self, src: int, q: deque, need: int = 1) -> None:
        with self._room_ready:
            self._writers_waiting += 1
            try:
                while len(q) + need > self.capacity:
                    self._check_put(src)
                    self._room_ready.wait(0.5)
            finally:
                self._writers_waiting -= 1

    def _wake_readers(self) -> None:
        with self._data_ready:
            self._data_ready.notify_all()

    def _wake_writers(self) -> None:
        with self._room_ready:
            self._room_ready.notify_all()

    def put(self, src: int, item: Any, block: bool = True, force: bool = False) -> bool:
        """Append ``item`` from ``src``; returns False only when non-blocking and full."""
        if self._error is not None:
            raise AbortedError(str(self._error)) from self._error
        if src in self._rejected:
            if force:
                return True
            raise LinkClosedError(f"receiver closed its link from rank {src}")
        q = self._queues.get(src) or self._queue(src)
        if not force and len(q) >= self.capacity and src not in self._unbounded:
            if not block:
                return False
            self._wait_for_room(src, q)
        q.append(item)
        self._order.append(src)
        if self._readers_waiting:
            self._wake_readers()
        return True

    def put_many(self, src: int, items: list) -> None:
        """Blocking bulk append used by socket reader threads."""
        q = self._queue(src)
        i, n = 0, len(items)
        while i < n:
            if self._error is not None:
                raise AbortedError(str(self._error))
            if src in self._rejected:
                return
            room = self.capacity - len(q)
            if room <= 0:
                try:
                    self._wait_for_room(src, q)
                except LinkClosedError:
                    return
                continue
            chunk = items[i:i + room]
            q.extend(chunk)
            self._order.extend([src] * len(chunk))
            i += len(chunk)
            if self._readers_waiting:
                self._wake_readers()

    def _pop(self, q: deque):
        item = q.popleft()
        if self._writers_waiting:
            self._wake_writers()
        return item

    def _sleep(self, deadline: float | None) -> bool:
        """Wait for an arrival; False once ``deadline`` has passed."""
        with self._data_ready:
            self._readers_waiting += 1
            try:
                if self._order or self._error is not None:
                    return True
                if deadline is None:
                    self._data_ready.wait()
                    return True
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._data_ready.wait(left)
                return True
            finally:
                self._readers_waiting -= 1

    def get_any(self, block: bool = True, timeout: float | None = None):
        """Next ``(src, item)`` in arrival order, or None if nothing arrived."""
        deadline = None if timeout is None else time.monotonic() + timeout
        order, skips, rejected = self._order, self._skips, self._rejected
        while True:
            if self._error is not None:
                raise AbortedError(str(self._error)) from self._error
            while order:
                src = order.popleft()
                if skips:
                    skip = skips.get(src)
                    if skip:
                        skips[src] = skip - 1
                        continue
                item = self._pop(self._queues[src])
                if rejected and src in rejected:
                    continue
                return src, item
            if not block or not self._sleep(deadline):
                return None

    def take_ready(self, limit: int) -> list:
        """Up to ``limit`` queued ``(src, item)`` pairs in arrival order, without waiting."""
        out = []
        order, skips, rejected, queues = self._order, self._skips, self._rejected, self._queues
        while order and len(out) < limit:
            src = order.popleft()
            if skips:
                skip = skips.get(src)
                if skip:
                    skips[src] = skip - 1
                    continue
            item = queues[src].popleft()
            if rejected and src in rejected:
                continue
            out.append((src, item))
        if out and self._writers_waiting:
            self._wake_writers()
        return out

    def get_from(self, src: int, block: bool = True, timeout: float | None = None):
        """Next item from one source, or None."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if self._error is not None:
                raise AbortedError(str(self._error)) from self._error
            q = self._queues.get(src)
            if q:
                self._skips[src] = self._skips.get(src, 0) + 1
                return self._pop(q)
            if not block:
                return None
            with self._data_ready:
                self._readers_waiting += 1
                try:
                    if self._queues.get(src) or self._error is not None:
                        continue
                    if deadline is None:
                        self._data_ready.wait()
                        continue
                    left = deadline - time.monotonic()
                    if left <= 0:
                        return None
                    self._data_ready.wait(left)
                finally:
                    self._readers_waiting -= 1

    def wait(self, timeout: float) -> bool:
        """Block until something is queued or ``timeout`` elapses."""
        if self._order or self._error is not None:
            return True
        self._sleep(time.monotonic() + timeout)
        return bool(self._order)

    def reject(self, src: int) -> None:
        """Refuse further items from ``src``; anything still queued is dropped when reached."""
        self._rejected.add(src)
        self._wake_writers()

    def abort(self, exc: BaseException) -> None:
        self._error = exc
        self._wake_readers()
        self._wake_writers()

    def __len__(self):
        return sum(len(q) for q in list(self._queues.values()))


def materialize(item) -> Frame | _Eof:
    if type(item) is bytes:
        return parse_frame(item)
    if isinstance(item, BaseException):
        raise item
    return item


class Completion:
    """Handle for a non-blocking send; resolves once the link accepted the frame."""

    __slots__ = ("_link", "_resolved")

    def __init__(self, link: Link | None = None, resolved: bool = False):
        self._link = link
        self._resolved = resolved

    def done(self) -> bool:
        if not self._resolved:
            self._link._drain(block=False)
        return self._resolved

    def wait(self) -> None:
        while not self._resolved:
            self._link._drain(block=True)

    def __repr__(self):
        return f"Completion(resolved={self._resolved})"


DONE = Completion(resolved=True)


class Link:
    """One end of a reliable, ordered, bidirectional frame pipe."""

    def __init__(self, local: int, remote: int, inbox: Mailbox):
        self.local = local
        self.remote = remote
        self.inbox = inbox
        self.state = "open"
        self._pending: deque = deque()

    def _offer(self, data: bytes, block: bool) -> bool:
        raise NotImplementedError

    def _finish(self) -> None:
        raise NotImplementedError

    def _drain(self, block: bool) -> None:
        pending = self._pending
        while pending:
            data, completion = pending[0]
            if not self._offer(data, block):
                return
            pending.popleft()
            completion._resolved = True

    def send_bytes(self, data: bytes, block: bool = True) -> Completion:
        if self.state != "open":
            raise LinkClosedError(f"link {self.local}->{self.remote} is {self.state}")
        if self._pending:
            self._drain(block)
        if not self._pending and self._offer(data, block):
            return DONE
        c = Completion(self)
        self._pending.append((data, c))
        return c

    def send_frame(self, frame: Frame, block: bool = True) -> Completion:
        return self.send_bytes(frame.to_bytes(), block)

    def recv_frame(self, mode: str = "block", timeout: float | None = None) -> Frame | None:
        """Next frame from the peer.

        ``poll`` returns None immediately when nothing is buffered; ``block``
        waits (up to ``timeout``). Raises :class:`LinkClosedError` once the
        peer closed and every earlier frame was consumed.
        """
        if self.state == "closed":
            raise LinkClosedError(f"link {self.local}->{self.remote} is closed")
        item = self.inbox.get_from(self.remote, block=(mode == "block"), timeout=timeout)
        if item is None:
            return None
        try:
            frame = materialize(item)
        except FramingError:
            self._close_now()
            raise
        if frame is EOF:
            self._close_now()
            raise LinkClosedError(f"peer {self.remote} closed the link")
        return frame

    def flush(self) -> None:
        self._drain(block=True)

    def close(self) -> None:
        """Deliver every queued frame, then signal end-of-link to the peer."""
        if self.state == "closed":
            return
        if self.state == "open":
            self._drain(block=True)
        self._close_now()

    def _close_now(self) -> None:
        if self.state == "closed":
            return
        self.state = "closed"
        self.inbox.reject(self.remote)
        self._finish()

    def __repr__(self):
        return f"{type(self).__name__}({self.local}->{self.remote}, {self.state})"


class LoopbackLink(Link):
    def __init__(self, local: int, remote: int, inbox: Mailbox, peer_inbox: Mailbox):
        super().__init__(local, remote, inbox)
        self._peer_inbox = peer_inbox

    def _offer(self, data, block):
        return self._peer_inbox.put(self.local, data, block)

    def _finish(self):
        try:
            self._peer_inbox.put(self.local, EOF, force=True)
        except AbortedError:
            pass


class Transport:
    """Per-endpoint factory for links; subclasses provide connect/accept."""

    def __init__(self, rank: int, roster: list[str], timeout: float = DEFAULT_TIMEOUT,
                 capacity: int = DEFAULT_CAPACITY):
        if not 0 <= rank < len(roster):
            raise ValueError(f"rank {rank} outside roster of {len(roster)}")
        self.rank = rank
        self.roster = list(roster)
        self.timeout = timeout
        self.capacity = capacity
        self._lock = threading.Lock()
        self._mailboxes: dict[int, Mailbox] = {}
        self._error: BaseException | None = None

    @property
    def size(self) -> int:
        return len(self.roster)

    def mailbox(self, tag: int) -> Mailbox:
        with self._lock:
            mb = self._mailboxes.get(tag)
            if mb is None:
                mb = self._mailboxes[tag] = Mailbox(self.capacity)
                if self._error is not None:
                    mb.abort(self._error)
            return mb

    def release(self, tag: int) -> None:
        with self._lock:
            self._mailboxes.pop(tag, None)

    def self_link(self, tag: int) -> Link:
        mb = self.mailbox(tag)
        mb.set_unbounded(self.rank)
        return LoopbackLink(self.rank, self.rank, mb, mb)

    def connect(self, tag: int, peer: int, deadline: float) -> Link:
        raise NotImplementedError

    def accept(self, tag: int, peer: int, deadline: float) -> Link:
        raise NotImplementedError

    def abort(self, exc: BaseException) -> None:
        with self._lock:
            self._error = exc
            boxes = list(self._mailboxes.values())
        for mb in boxes:
            mb.abort(exc)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackNetwork:
    """Registry that lets in-process endpoints find each other by address."""

    def __init__(self):
        self._lock = threading.Condition()
        self._bound: dict[str, LoopbackTransport] = {}

    def bind(self, address: str, transport: LoopbackTransport) -> None:
        with self._lock:
            if address in self._bound:
                raise ProtocolError(f"address {address!r} already bound")
            self._bound[address] = transport
            self._lock.notify_all()

    def unbind(self, address: str) -> None:
        with self._lock:
            self._bound.pop(address, None)

    def lookup(self, address: str, deadline: float) -> LoopbackTransport:
        with self._lock:
            while address not in self._bound:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TransportConnectionError(f"nobody bound {address!r} before timeout")
                self._lock.wait(left)
            return self._bound[address]

    def transport(self, rank: int, roster: list[str], **kw) -> LoopbackTransport:
        return LoopbackTransport(self, rank, roster, **kw)

    def abort(self, exc: BaseException) -> None:
        with self._lock:
            peers = list(self._bound.values())
        for t in peers:
            t.abort(exc)


class LoopbackTransport(Transport):
    def __init__(self, network: LoopbackNetwork, rank: int, roster: list[str], **kw):
        super().__init__(rank, roster, **kw)
        self.network = network
        network.bind(self.roster[rank], self)

    def _link(self, tag: int, peer: int, deadline: float) -> Link:
        other = self.network.lookup(self.roster[peer], deadline)
        return LoopbackLink(self.rank, peer, self.mailbox(tag), other.mailbox(tag))

    connect = accept = _link

    def close(self):
        self.network.unbind(self.roster[self.rank])


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address {address!r} is not host:port")
    return host, int(port)


class SocketLink(Link):
    """TCP-backed link: a writer thread drains a bounded outbox, a reader
    thread parses frames into the shared mailbox."""

    def __init__(self, local: int, remote: int, inbox: Mailbox, sock: socket.socket,
                 leftover: bytes = b"", capacity: int = DEFAULT_CAPACITY):
        super().__init__(local, remote, inbox)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._capacity = capacity
        self._cond = threading.Condition()
        self._out: deque = deque()
        self._eof_queued = False
        self._write_error: BaseException | None = None
        self._refs = 2
        self._decoder = FrameDecoder()
        self._leftover = leftover
        name = f"link-{local}-{remote}"
        self._writer = threading.Thread(target=self._write_loop, name=name + "-w", daemon=True)
        self._reader = threading.Thread(target=self._read_loop, name=name + "-r", daemon=True)
        self._writer.start()
        self._reader.start()

    def _offer(self, data, block):
        with self._cond:
            while True:
                if self._write_error is not None:
                    raise LinkClosedError(f"link to {self.remote} broke: {self._write_error}")
                if len(self._out) < self._capacity:
                    self._out.append(data)
                    if len(self._out) == 1:
                        self._cond.notify_all()
                    return True
                if not block:
                    return False
                self._cond.wait()

    def _finish(self):
        with self._cond:
            self._eof_queued = True
            self._cond.notify_all()
        if threading.current_thread() is not self._writer:
            # frames queued before close must reach the kernel before we return
            self._writer.join()

    def _release(self):
        with self._cond:
            self._refs -= 1
            last = self._refs == 0
        if last:
            try:
                self._sock.close()
            except OSError:
                pass

    def _write_loop(self):
        sock = self._sock
        try:
            while True:
                with self._cond:
                    while not self._out and not self._eof_queued:
                        self._cond.wait()
                    batch = list(self._out)
                    self._out.clear()
                    eof = self._eof_queued
                    self._cond.notify_all()
                if batch:
                    sock.sendall(b"".join(batch))
                if eof and not self._out:
                    with self._cond:
                        if self._out:
                            continue
                    sock.shutdown(socket.SHUT_WR)
                    break
        except OSError as exc:
            with self._cond:
                self._write_error = exc
                self._out.clear()
                self._cond.notify_all()
        finally:
            self._release()

    def _read_loop(self):
        inbox, src = self.inbox, self.remote
        decoder = self._decoder
        try:
            chunk = self._leftover
            while True:
                if chunk:
                    try:
                        frames = list(decoder.feed(chunk))
                    except FramingError as exc:
                        inbox.put(src, exc, force=True)
                        break
                    if frames:
                        inbox.put_many(src, frames)
                try:
                    chunk = self._sock.recv(1 << 18)
                except OSError:
                    chunk = b""
                if not chunk:
                    if decoder.pending:
                        inbox.put(src, FramingError("connection ended mid-frame"), force=True)
                    break
            inbox.put(src, EOF, force=True)
        except AbortedError:
            pass
        finally:
            self._release()


class SocketTransport(Transport):
    """TCP transport; binds its own roster address immediately."""

    def __init__(self, rank: int, roster: list[str], **kw):
        super().__init__(rank, roster, **kw)
        host, port = parse_address(self.roster[rank])
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((host, port))
        except OSError as exc:
            self._listener.close()
            raise TransportConnectionError(f"cannot bind {self.roster[rank]}: {exc}") from exc
        self._listener.listen(128)
        self._accepted = threading.Condition()
        self._pending: dict[tuple[int, int], Any] = {}
        self._closed = False
        self._acceptor = threading.Thread(target=self._accept_loop, name=f"accept-{rank}", daemon=True)
        self._acceptor.start()

    def _accept_loop(self):
        while True:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._handshake, args=(conn,), daemon=True).start()

    def _handshake(self, conn: socket.socket):
        decoder = FrameDecoder()
        conn.settimeout(self.timeout)
        try:
            frames: list[Frame] = []
            while not frames:
                data = conn.recv(4096)
                if not data:
                    raise FramingError("connection closed before HELLO")
                frames = list(decoder.feed(data))
            frame = frames[0]
            if frame.kind != FrameKind.HELLO:
                raise ProtocolError(f"first frame was {frame.kind.name}, not HELLO")
            hello = Hello.from_payload(frame.payload)
        except (OSError, FramingError, ProtocolError) as exc:
            log.warning("rank %d dropped inbound connection: %s", self.rank, exc)
            conn.close()
            return
        key = (frame.stream_id, hello.declared_rank)
        with self._accepted:
            if key in self._pending:
                self._pending[key] = ProtocolError(
                    f"duplicate HELLO for rank {hello.declared_rank} on tag {frame.stream_id}")
                conn.close()
            else:
                rest = b"".join(f.to_bytes() for f in frames[1:]) + decoder.take_remainder()
                self._pending[key] = (conn, frame, rest)
            self._accepted.notify_all()

    def connect(self, tag, peer, deadline):
        addr = parse_address(self.roster[peer])
        last = None
        while True:
            if self._error is not None:
                raise AbortedError(str(self._error))
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.settimeout(max(0.05, min(1.0, deadline - time.monotonic())))
            try:
                sock.connect(addr)
                break
            except OSError as exc:
                sock.close()
                last = exc
            if time.monotonic() >= deadline:
                raise TransportConnectionError(
                    f"rank {self.rank} could not reach rank {peer} at {self.roster[peer]}: {last}")
            time.sleep(0.02)
        return SocketLink(self.rank, peer, self.mailbox(tag), sock, capacity=self.capacity)

    def accept(self, tag, peer, deadline):
        key = (tag, peer)
        with self._accepted:
            while key not in self._pending:
                if self._error is not None:
                    raise AbortedError(str(self._error))
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TransportConnectionError(
                        f"rank {self.rank} timed out waiting for rank {peer} (tag {tag})")
                self._accepted.wait(min(left, 0.5))
            entry = self._pending[key]
        if isinstance(entry, Exception):
            raise entry
        conn, frame, leftover = entry
        mb = self.mailbox(tag)
        mb.put(peer, frame, force=True)
        return SocketLink(self.rank, peer, mb, conn, leftover, capacity=self.capacity)

    def release(self, tag):
        super().release(tag)
        with self._accepted:
            for key in [k for k in self._pending if k[0] == tag]:
                del self._pending[key]

    def abort(self, exc):
        super().abort(exc)
        with self._accepted:
            self._accepted.notify_all()

    def close(self):
        if not self._closed:
            self._closed = True
            try:
                self._listener.close()
            except OSError:
                pass


@dataclass
class Rendezvous:
    """Outcome of wiring one endpoint to every roster member under a tag."""

    tag: int
    mailbox: Mailbox
    links: dict[int, Link]
    hellos: dict[int, Hello] = field(default_factory=dict)


def rendezvous(transport: Transport, tag: int, role_flags: int, *, digest: int = 0,
               timeout: float | None = None) -> Rendezvous:
    """Open a link to every other roster member and exchange HELLOs.

    In each pair the lower rank listens and the higher rank connects. The
    connector speaks first; the listener answers. A self-link is always
    included so members holding both roles can talk to themselves.
    """
    timeout = transport.timeout if timeout is None else timeout
    deadline = time.monotonic() + timeout
    me = transport.rank
    mine = Hello(role_flags, me, digest)
    hello_bytes = hello_frame(tag, me, mine)
    links: dict[int, Link] = {me: transport.self_link(tag)}
    hellos: dict[int, Hello] = {me: mine}
    try:
        lower = range(me)
        higher = range(me + 1, transport.size)
        for peer in lower:
            link = transport.connect(tag, peer, deadline)
            links[peer] = link
            link.send_bytes(hello_bytes)
        for peer in higher:
            link = transport.accept(tag, peer, deadline)
            links[peer] = link
            hellos[peer] = _expect_hello(link, peer, deadline)
            link.send_bytes(hello_bytes)
        for peer in lower:
            hellos[peer] = _expect_hello(links[peer], peer, deadline)
    except BaseException:
        for link in links.values():
            try:
                link._close_now()
            except Exception:
                pass
        transport.release(tag)
        raise
    return Rendezvous(tag, transport.mailbox(tag), links, hellos)


def _expect_hello(link: Link, peer: int, deadline: float) -> Hello:
    left = deadline - time.monotonic()
    try:
        frame = link.recv_frame("block", timeout=max(left, 0.0))
    except LinkClosedError as exc:
        raise TransportConnectionError(f"rank {peer} hung up during rendezvous") from exc
    if frame is None:
        raise TransportConnectionError(f"no HELLO from rank {peer} before timeout")
    if frame.kind != FrameKind.HELLO:
        raise ProtocolError(f"expected HELLO from rank {peer}, got {frame.kind.name}")
    hello = Hello.from_payload(frame.payload)
    if hello.declared_rank != peer:
        raise ProtocolError(
            f"rank {peer} link carried HELLO declaring rank {hello.declared_rank}")
    return hello
