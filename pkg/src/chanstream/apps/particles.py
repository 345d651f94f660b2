"""Particle tracking: a synthetic particle mover streams high-energy
particles to I/O ranks that assemble per-particle trajectory files.

A particle whose kinetic energy per unit mass exceeds the threshold is sent
at that step and at every later step. The sink buffers records and appends
them to ``particle_<id>.csv`` (``step,x,y,z,u,v,w,q``) every ``flush_every``
steps, when idle for ``flush_seconds``, and at termination.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import Field, ScalarKind, StreamSchema
from ..runtime import CONSUMER, PRODUCER, Fixed, OperationSet, create_channel
from .base import AppRole, RankContext

F64, I64 = ScalarKind.FLOAT64, ScalarKind.INT64
PARTICLE_SCHEMA = StreamSchema(
    [Field(n, F64) for n in ("x", "y", "z", "u", "v", "w", "q")]
    + [Field("id", I64), Field("step", I64)]
)


@dataclass
class ParticleState:
    pos: np.ndarray  # (n, 3)
    vel: np.ndarray  # (n, 3)
    q: np.ndarray
    ids: np.ndarray
    step: int = 0

    @property
    def n(self) -> int:
        return len(self.ids)


def init_particles(n: int, seed: int, producer_index: int = 0, vth: float = 1.0):
    """Particles and the RNG that drives them; ids are globally unique per producer block."""
    rng = np.random.default_rng([seed, producer_index])
    state = ParticleState(
        pos=rng.uniform(0.0, 1.0, size=(n, 3)),
        vel=rng.normal(0.0, vth, size=(n, 3)),
        q=np.where(rng.random(n) < 0.5, -1.0, 1.0),
        ids=np.arange(producer_index * n, (producer_index + 1) * n, dtype=np.int64),
    )
    return state, rng


def step_particles(state: ParticleState, rng: np.random.Generator, kick: float = 0.1) -> ParticleState:
    """Random bounded velocity kick, then a drift by the new velocity."""
    if state.n:
        state.vel += rng.uniform(-kick, kick, size=state.vel.shape)
        state.pos += state.vel
    state.step += 1
    return state


def energy(u: float, v: float, w: float) -> float:
    return 0.5 * (u * u + v * v + w * w)


def energies(vel: np.ndarray) -> np.ndarray:
    u, v, w = vel[:, 0], vel[:, 1], vel[:, 2]
    return 0.5 * (u * u + v * v + w * w)


def record_values(state: ParticleState, i: int) -> tuple:
    (x, y, z), (u, v, w) = state.pos[i].tolist(), state.vel[i].tolist()
    return ((x,), (y,), (z,), (u,), (v,), (w,), (float(state.q[i]),), (int(state.ids[i]),), (state.step,))


def producer_body(state: ParticleState, rng, stream, threshold: float, steps: int,
                  kick: float = 0.1) -> int:
    tracked = np.zeros(state.n, dtype=bool)
    sent = 0
    for _ in range(steps):
        step_particles(state, rng, kick)
        tracked |= energies(state.vel) > threshold
        for i in np.flatnonzero(tracked):
            stream.send(record_values(state, i))
            sent += 1
    stream.terminate()
    return sent


def format_row(step: int, vals) -> str:
    return f"{step}," + ",".join(repr(float(v)) for v in vals) + "\n"


class TrajectorySink:
    """Per-id trajectory buffer flushed to append-only CSV files."""

    def __init__(self, out_dir: Path, flush_every: int, flush_seconds: float = 1.0):
        if flush_every < 1:
            raise ValueError("flush_every must be positive")
        self.out_dir = Path(out_dir)
        self.flush_every = flush_every
        self.flush_seconds = flush_seconds
        self.buffer: dict[int, list[str]] = {}
        self.last_step: dict[int, int] = {}
        self._started: set[int] = set()
        self._bucket = 0
        self._last_flush = time.monotonic()
        self.flushes = 0
        self.records = 0

    def process(self, element):
        x, y, z, u, v, w, q, (pid,), (step,) = element.values
        prev = self.last_step.get(pid)
        if prev is not None and step <= prev:
            raise ValueError(f"particle {pid}: step {step} arrived after step {prev}")
        self.last_step[pid] = step
        self.buffer.setdefault(pid, []).append(
            format_row(step, (x[0], y[0], z[0], u[0], v[0], w[0], q[0])))
        self.records += 1
        bucket = step // self.flush_every
        if bucket > self._bucket:
            self._bucket = bucket
            self.flush()

    def background(self):
        if self.buffer and time.monotonic() - self._last_flush >= self.flush_seconds:
            self.flush()

    def flush(self):
        for pid, rows in self.buffer.items():
            mode = "a" if pid in self._started else "w"
            self._started.add(pid)
            with open(self.out_dir / f"particle_{pid}.csv", mode) as fh:
                fh.writelines(rows)
        self.buffer.clear()
        self._last_flush = time.monotonic()
        self.flushes += 1

    def ops(self) -> OperationSet:
        return OperationSet(process=self.process, term=self.flush, background=self.background)


def sink_body(channel, flush_every: int, out_dir: Path, flush_seconds: float = 1.0) -> TrajectorySink:
    sink = TrajectorySink(out_dir, flush_every, flush_seconds)
    channel.attach(PARTICLE_SCHEMA, sink.ops()).operate()
    return sink


def mover_main(ctx: RankContext):
    p = ctx.params
    ch = create_channel(ctx.endpoint, PRODUCER, ctx.roles(mover=PRODUCER, sink=CONSUMER))
    n_cons = ch.consumer_size
    stream = ch.attach(PARTICLE_SCHEMA, routing=Fixed(lambda v: v[7][0] % n_cons))
    state, rng = init_particles(int(p.get("particles_per_producer", 64)), int(p.get("seed", 0)),
                                ctx.index, float(p.get("vth", 1.0)))
    threshold = float(p.get("threshold", 2.0))
    ctx.extra["sent"] = producer_body(state, rng, stream, threshold, int(p.get("steps", 100)),
                                      float(p.get("kick", 0.1)))
    ch.free()
    return ctx.extra


def sink_main(ctx: RankContext):
    p = ctx.params
    ch = create_channel(ctx.endpoint, CONSUMER, ctx.roles(mover=PRODUCER, sink=CONSUMER))
    sink = sink_body(ch, int(p.get("flush_every", 10)), ctx.out_dir(),
                     float(p.get("flush_seconds", 1.0)))
    ch.free()
    ctx.extra.update(records=sink.records, particles=len(sink.last_step), flushes=sink.flushes,
                     ids=sorted(sink.last_step))
    return ctx.extra


ROLES = [
    AppRole("particles.mover", PRODUCER, mover_main),
    AppRole("particles.sink", CONSUMER, sink_main),
]
