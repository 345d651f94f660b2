"""Run several ranks as threads of the current process.

Used by the in-process launcher mode, by the test-suite and by the scripts.
With ``kind="sockets"`` every rank still lives in this process but talks
over real TCP connections on localhost.
"""

from __future__ import annotations

import socket
import threading
import traceback
from typing import Any, Callable, Sequence

from .errors import AbortedError, StreamError
from .harness import RankMetrics
from .runtime import Endpoint
from .transport import DEFAULT_TIMEOUT, LoopbackNetwork, SocketTransport, Transport


class RankFailure(StreamError):
    """One or more ranks raised; ``errors`` maps rank -> exception."""

    def __init__(self, errors: dict[int, BaseException], tracebacks: dict[int, str] | None = None):
        self.errors = errors
        self.tracebacks = tracebacks or {}
        first = min(errors)
        super().__init__(
            f"rank(s) {sorted(errors)} failed; rank {first}: {type(errors[first]).__name__}: {errors[first]}")


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks, ports = [], []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
            ports.append(s.getsockname()[1])
    finally:
        for s in socks:
            s.close()
    return ports


def socket_roster(n: int, host: str = "127.0.0.1") -> list[str]:
    return [f"{host}:{p}" for p in free_ports(n, host)]


def make_transports(kind: str, n: int, timeout: float = DEFAULT_TIMEOUT, **kw) -> list[Transport]:
    if kind == "loopback":
        net = LoopbackNetwork()
        roster = [f"loop:{i}" for i in range(n)]
        return [net.transport(i, roster, timeout=timeout, **kw) for i in range(n)]
    if kind == "sockets":
        roster = socket_roster(n)
        return [SocketTransport(i, roster, timeout=timeout, **kw) for i in range(n)]
    raise ValueError(f"unknown transport kind {kind!r}")


def run_threads(bodies: Sequence[Callable[[Endpoint], Any]], kind: str = "loopback",
                timeout: float = DEFAULT_TIMEOUT, join_timeout: float | None = 300.0,
                metrics: Sequence[RankMetrics | None] | None = None,
                transports: Sequence[Transport] | None = None) -> list[Any]:
    """Run ``bodies[r](endpoint_r)`` concurrently and return their results.

    If any rank raises, every other rank is woken with :class:`AbortedError`
    and a :class:`RankFailure` describing the original errors is raised.
    """
    n = len(bodies)
    transports = list(transports) if transports is not None else make_transports(kind, n, timeout)
    results: list[Any] = [None] * n
    errors: dict[int, BaseException] = {}
    tbs: dict[int, str] = {}
    lock = threading.Lock()

    def abort_all(exc):
        for t in transports:
            t.abort(exc)

    def runner(rank):
        ep = Endpoint(transports[rank], metrics[rank] if metrics else None)
        try:
            results[rank] = bodies[rank](ep)
        except BaseException as exc:
            with lock:
                errors[rank] = exc
                tbs[rank] = traceback.format_exc()
            if not isinstance(exc, AbortedError):
                abort_all(AbortedError(f"rank {rank} failed: {exc!r}"))

    threads = [threading.Thread(target=runner, args=(r,), name=f"rank-{r}", daemon=True) for r in range(n)]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join(join_timeout)
            if t.is_alive():
                abort_all(AbortedError("join timeout"))
                t.join(5.0)
                with lock:
                    errors.setdefault(int(t.name.split("-")[1]), TimeoutError("rank did not finish in time"))
    finally:
        for t in transports:
            t.close()
    if errors:
        primary = {r: e for r, e in errors.items() if not isinstance(e, AbortedError)} or errors
        raise RankFailure(primary, tbs)
    return results
