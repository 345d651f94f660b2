"""Serial reference computations, written independently of the streaming code."""

from __future__ import annotations

import csv
from collections import Counter
from pathlib import Path

import numpy as np

from chanstream.apps.particles import init_particles, step_particles


# -- word count -----------------------------------------------------------------

def oracle_tokens(data: bytes) -> list[str]:
    out, cur = [], bytearray()
    for b in data + b" ":
        if 65 <= b <= 90 or 97 <= b <= 122:
            cur.append(b | 0x20)
        elif cur:
            out.append(cur[:32].decode("ascii"))
            cur = bytearray()
    return out


def oracle_counts(files) -> Counter:
    c = Counter()
    for f in files:
        c.update(oracle_tokens(Path(f).read_bytes()))
    return c


def oracle_table(files) -> bytes:
    c = oracle_counts(files)
    rows = sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))
    return "".join(f"{k}\t{v}\n" for k, v in rows).encode()


# -- particles -----------------------------------------------------------------

def oracle_trajectories(n: int, steps: int, threshold: float, seed: int, producers: int,
                        kick: float = 0.1, vth: float = 1.0):
    """Replay the mover serially; returns ({id: file text}, {id: first tracked step})."""
    files: dict[int, list[str]] = {}
    first: dict[int, int] = {}
    for p in range(producers):
        state, rng = init_particles(n, seed, p, vth)
        for _ in range(steps):
            step_particles(state, rng, kick)
            for i in range(state.n):
                pid = int(state.ids[i])
                u, v, w = (float(x) for x in state.vel[i])
                if pid not in first and (u * u + v * v + w * w) / 2 > threshold:
                    first[pid] = state.step
                if pid in first:
                    x, y, z = (float(c) for c in state.pos[i])
                    row = [state.step, x, y, z, u, v, w, float(state.q[i])]
                    files.setdefault(pid, []).append(
                        str(row[0]) + "," + ",".join(repr(c) for c in row[1:]) + "\n")
    return {pid: "".join(rows) for pid, rows in files.items()}, first


def first_crossings(n, steps, threshold, seed, producers, kick=0.1, vth=1.0) -> list[int]:
    """Steps at which particles first exceed ``threshold`` (vectorised, for picking thresholds)."""
    out = []
    for p in range(producers):
        state, rng = init_particles(n, seed, p, vth)
        seen = np.zeros(n, dtype=bool)
        for _ in range(steps):
            step_particles(state, rng, kick)
            hit = (0.5 * (state.vel ** 2).sum(axis=1) > threshold) & ~seen
            out.extend([state.step] * int(hit.sum()))
            seen |= hit
    return out


# -- event filter --------------------------------------------------------------

def oracle_signal_indices(files, classifier_weights=None, threshold=None) -> set[int]:
    """Indices of events whose score is >= 0, scanning files in order."""
    keep, index = set(), 0
    for f in files:
        with open(f, newline="") as fh:
            for row in csv.reader(fh):
                if not row:
                    continue
                attrs = [float(x) for x in row[1:]]
                if classifier_weights is not None:
                    s = classifier_weights[0]
                    for w, a in zip(classifier_weights[1:], attrs):
                        s += w * a
                else:
                    idx, cutoff = threshold
                    s = attrs[idx] - cutoff
                if s >= 0:
                    keep.add(index)
                index += 1
    return keep
