"""Streaming word count: map ranks -> first-level reducers -> final reducer.

Map ranks tokenize their share of the input files and stream one
``(token, 1)`` element per token, routed by key so every occurrence of a
token meets the same first-level reducer. First-level reducers accumulate
counts in a dict and, once all maps terminated, forward one element per
distinct token to the final reducer, which writes ``wordcount.tsv``.
"""

from __future__ import annotations

import re
import time
from pathlib import Path
from typing import Iterable

import numpy as np

from ..core import Field, ScalarKind, StreamSchema
from ..runtime import CONSUMER, PRODUCER, BOTH, KeyHash, OperationSet, Role, create_channel
from .base import AppRole, RankContext

KEY_BYTES = 32
KV_SCHEMA = StreamSchema([Field("key", ScalarKind.UINT8, KEY_BYTES), Field("count", ScalarKind.INT64, 1)])
OUTPUT_NAME = "wordcount.tsv"

_WORD = re.compile(rb"[A-Za-z]+")


def tokenize(text: bytes | str) -> list[str]:
    """Lowercase ASCII-alphabetic tokens, capped at 32 bytes.

    Every other byte, including any part of a multi-byte UTF-8 sequence,
    separates tokens.
    """
    if isinstance(text, str):
        text = text.encode("utf-8", "surrogateescape")
    return [w[:KEY_BYTES].lower().decode("ascii") for w in _WORD.findall(text)]


def pad_key(token: str) -> bytes:
    key = token.encode("ascii")
    return key + b"\0" * (KEY_BYTES - len(key))


def unpad_key(raw) -> str:
    return bytes(raw).rstrip(b"\0").decode("ascii")


def key_of(values) -> bytes:
    return bytes(values[0])


def format_table(counts: dict[str, int]) -> str:
    rows = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return "".join(f"{tok}\t{n}\n" for tok, n in rows)


def write_corpus(out_dir: Path | str, n_files: int, tokens_per_file: int, seed: int = 0,
                 vocabulary: int = 5000) -> list[Path]:
    """Seeded synthetic text corpus with a Zipf-like word distribution.

    Besides plain words it mixes in capitals, digits, punctuation, words
    longer than the 32-byte key and non-ASCII UTF-8, so every tokenizer rule
    is exercised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    lengths = rng.integers(1, 12, size=vocabulary)
    lengths[rng.choice(vocabulary, size=max(1, vocabulary // 200), replace=False)] = 40
    words = ["".join(rng.choice(letters, size=n)) for n in lengths]
    weights = 1.0 / np.arange(1, vocabulary + 1)
    weights /= weights.sum()
    seps = [" ", " ", " ", "\n", ", ", ". ", "; ", " -- ", " 42 ", "'", " caf\u00e9 ", "\t", "_"]
    paths = []
    for i in range(n_files):
        picks = rng.choice(vocabulary, size=tokens_per_file, p=weights)
        caps = rng.random(tokens_per_file) < 0.1
        sep_idx = rng.integers(0, len(seps), size=tokens_per_file)
        parts = []
        for w, c, j in zip(picks.tolist(), caps.tolist(), sep_idx.tolist()):
            parts.append(words[w].capitalize() if c else words[w])
            parts.append(seps[j])
        path = out_dir / f"text_{i:04d}.txt"
        path.write_text("".join(parts), encoding="utf-8")
        paths.append(path)
    return paths


def input_files(root: Path | str | None) -> list[Path]:
    if root is None:
        return []
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(p for p in root.rglob("*") if p.is_file())


def map_stage(files: Iterable[Path], stream, ctx: RankContext | None = None) -> int:
    """Send one (token, 1) element per token, then terminate."""
    sent = 0
    one = (1,)
    for path in files:
        data = Path(path).read_bytes()
        for tok in tokenize(data):
            stream.send((pad_key(tok), one))
            sent += 1
    if ctx is not None:
        ctx.extra["last_send"] = time.time()
        ctx.extra["tokens_sent"] = sent
    stream.terminate()
    return sent


class Reducer:
    """Accumulates counts; optionally forwards them downstream at termination."""

    def __init__(self, out_stream=None, out_path: Path | None = None, ctx: RankContext | None = None):
        self.table: dict[str, int] = {}
        self.out_stream = out_stream
        self.out_path = out_path
        self.ctx = ctx
        self.received = 0

    def process(self, element):
        if self.received == 0 and self.ctx is not None:
            self.ctx.extra["first_process"] = time.time()
        self.received += 1
        key, (count,) = element.values
        tok = unpad_key(key)
        self.table[tok] = self.table.get(tok, 0) + count

    def term(self):
        if self.out_stream is not None:
            for tok, n in self.table.items():
                self.out_stream.send((pad_key(tok), (n,)))
            self.out_stream.terminate()
        if self.out_path is not None:
            tmp = self.out_path.with_suffix(".tmp")
            tmp.write_text(format_table(self.table))
            tmp.replace(self.out_path)
        if self.ctx is not None:
            self.ctx.extra["distinct_keys"] = len(self.table)
            self.ctx.extra["elements_received"] = self.received

    def ops(self) -> OperationSet:
        return OperationSet(process=self.process, term=self.term)


def reduce_stage(in_channel, out_stream=None, out_path: Path | None = None,
                 ctx: RankContext | None = None) -> Reducer:
    """Attach to ``in_channel`` as a consumer and accumulate until every producer terminated."""
    reducer = Reducer(out_stream, out_path, ctx)
    in_channel.attach(KV_SCHEMA, reducer.ops()).operate()
    return reducer


def _channels(ctx: RankContext, role1: Role, role2: Role):
    ch1 = create_channel(ctx.endpoint, role1, ctx.roles(map=PRODUCER, reduce1=CONSUMER))
    ch2 = create_channel(ctx.endpoint, role2, ctx.roles(reduce1=PRODUCER, reduce2=CONSUMER))
    return ch1, ch2


def map_body(ctx: RankContext):
    ch1, _ = _channels(ctx, PRODUCER, Role())
    stream = ch1.attach(KV_SCHEMA, routing=KeyHash(key_of))
    files = ctx.params.get("files")
    if files is None:
        n = len(ctx.ranks("wordcount.map"))
        files = input_files(ctx.input_path)[ctx.index::n]
    map_stage(files, stream, ctx)
    ch1.free()
    return ctx.extra


def reduce1_body(ctx: RankContext):
    ch1, ch2 = _channels(ctx, CONSUMER, PRODUCER)
    downstream = ch2.attach(KV_SCHEMA, routing=KeyHash(key_of))
    reduce_stage(ch1, out_stream=downstream, ctx=ctx)
    ch1.free()
    ch2.free()
    return ctx.extra


def reduce2_body(ctx: RankContext):
    _, ch2 = _channels(ctx, Role(), CONSUMER)
    reduce_stage(ch2, out_path=ctx.out_dir() / OUTPUT_NAME, ctx=ctx)
    ch2.free()
    return ctx.extra


ROLES = [
    AppRole("wordcount.map", PRODUCER, map_body),
    AppRole("wordcount.reduce1", BOTH, reduce1_body),
    AppRole("wordcount.reduce2", CONSUMER, reduce2_body),
]
