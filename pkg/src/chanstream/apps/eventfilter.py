"""Online event filtering: sensor ranks stream collision events read in small
batches; classifier ranks keep signal events and drop background.

Input lines are ``label,a1,...,a28``. Saved lines add a trailing global
``event_index``. The label is carried through but never looked at by the
classifier.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from ..core import Field, ScalarKind, StreamSchema
from ..errors import ConfigError, StreamError
from ..runtime import CONSUMER, PRODUCER, OperationSet, RoundRobin, create_channel
from .base import AppRole, RankContext

N_ATTRS = 28
EVENT_SCHEMA = StreamSchema([
    Field("label", ScalarKind.FLOAT64, 1),
    Field("attributes", ScalarKind.FLOAT64, N_ATTRS),
    Field("event_index", ScalarKind.INT64, 1),
])


class EventParseError(StreamError, ValueError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class EventRecord:
    label: float
    attributes: tuple[float, ...]
    event_index: int

    def values(self) -> tuple:
        return ((self.label,), self.attributes, (self.event_index,))

    def csv_line(self) -> str:
        return ",".join(repr(x) for x in (self.label, *self.attributes)) + f",{self.event_index}\n"


def parse_events(lines: Iterable[str], start_index: int = 0, first_line: int = 1) -> Iterator[EventRecord]:
    """Parse ``label,28 attributes`` lines; blank lines are skipped."""
    index = start_index
    for line_no, line in enumerate(lines, first_line):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != N_ATTRS + 1:
            raise EventParseError(line_no, f"expected {N_ATTRS + 1} fields, got {len(parts)}")
        try:
            nums = [float(p) for p in parts]
        except ValueError as exc:
            raise EventParseError(line_no, str(exc)) from None
        yield EventRecord(nums[0], tuple(nums[1:]), index)
        index += 1


def count_events(path: Path) -> int:
    with open(path) as fh:
        return sum(1 for line in fh if line.strip())


def plan_files(files: Sequence[Path]) -> list[tuple[Path, int]]:
    """Each file with the global index of its first event."""
    plan, offset = [], 0
    for f in files:
        plan.append((Path(f), offset))
        offset += count_events(f)
    return plan


def input_files(root) -> list[Path]:
    if root is None:
        return []
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(p for p in root.iterdir() if p.suffix == ".csv")


@dataclass(frozen=True)
class Classifier:
    kind: str  # "threshold" or "linear"
    index: int = 0
    cutoff: float = 0.0
    weights: tuple[float, ...] = ()  # bias first, then 28 attribute weights

    def __post_init__(self):
        if self.kind == "threshold":
            if not 0 <= self.index < N_ATTRS:
                raise ConfigError("classifier.index", f"attribute index {self.index} out of range 0..{N_ATTRS - 1}")
        elif self.kind == "linear":
            if len(self.weights) != N_ATTRS + 1:
                raise ConfigError("classifier.weights", f"need {N_ATTRS + 1} weights (bias first), got {len(self.weights)}")
        else:
            raise ConfigError("classifier.kind", f"unknown classifier kind {self.kind!r}")

    @classmethod
    def threshold(cls, index: int, cutoff: float) -> Classifier:
        return cls("threshold", index=index, cutoff=cutoff)

    @classmethod
    def linear(cls, bias: float, weights: Sequence[float]) -> Classifier:
        return cls("linear", weights=(float(bias), *map(float, weights)))

    @classmethod
    def from_config(cls, doc: dict) -> Classifier:
        if not isinstance(doc, dict) or "kind" not in doc:
            raise ConfigError("classifier", "expected a mapping with a 'kind'")
        kind = doc["kind"]
        if kind == "threshold":
            return cls.threshold(int(doc.get("index", 0)), float(doc.get("cutoff", 0.0)))
        if kind == "linear":
            return cls("linear", weights=tuple(float(w) for w in doc.get("weights", ())))
        return cls(kind)

    def to_config(self) -> dict:
        if self.kind == "threshold":
            return {"kind": "threshold", "index": self.index, "cutoff": self.cutoff}
        return {"kind": "linear", "weights": list(self.weights)}


def score(classifier: Classifier, attributes: Sequence[float]) -> float:
    if len(attributes) != N_ATTRS:
        raise ValueError(f"expected {N_ATTRS} attributes, got {len(attributes)}")
    if classifier.kind == "threshold":
        return attributes[classifier.index] - classifier.cutoff
    w = classifier.weights
    s = w[0]
    for wj, a in zip(w[1:], attributes):
        s += wj * a
    return s


def is_signal(classifier: Classifier, attributes: Sequence[float]) -> bool:
    return score(classifier, attributes) >= 0.0


class GaussianMixture:
    """Two unit-covariance Gaussian components in 28 dimensions."""

    def __init__(self, seed: int, separation: float = 2.0, signal_fraction: float = 0.5):
        rng = np.random.default_rng(seed)
        direction = rng.normal(size=N_ATTRS)
        direction /= np.linalg.norm(direction)
        center = rng.normal(scale=0.5, size=N_ATTRS)
        self.seed = seed
        self.signal_fraction = signal_fraction
        self.mu_signal = center + 0.5 * separation * direction
        self.mu_background = center - 0.5 * separation * direction

    def sample(self, n: int, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, 1 if seed is None else seed + 2])
        labels = (rng.random(n) < self.signal_fraction).astype(float)
        means = np.where(labels[:, None] > 0, self.mu_signal, self.mu_background)
        return labels, means + rng.normal(size=(n, N_ATTRS))

    def matching_classifier(self) -> Classifier:
        """Bayes boundary for equal priors: halfway between the means."""
        w = self.mu_signal - self.mu_background
        bias = -float(w @ (0.5 * (self.mu_signal + self.mu_background)))
        return Classifier.linear(bias, w.tolist())

    def write(self, path: Path, n: int, seed: int | None = None) -> None:
        labels, attrs = self.sample(n, seed)
        with open(path, "w") as fh:
            for lab, row in zip(labels.tolist(), attrs.tolist()):
                fh.write(",".join(repr(x) for x in (lab, *row)) + "\n")


def write_dataset(out_dir: Path, n_events: int, n_files: int, seed: int, **kw) -> GaussianMixture:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen = GaussianMixture(seed, **kw)
    per = [n_events // n_files + (1 if i < n_events % n_files else 0) for i in range(n_files)]
    for i, n in enumerate(per):
        gen.write(out_dir / f"events_{i:03d}.csv", n, seed=i)
    return gen


def sensor_body(plan: Sequence[tuple[Path, int]], batch_size: int, stream) -> dict:
    """Stream events file by file, reading ``batch_size`` lines at a time."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    cycles = sent = 0
    for path, start in plan:
        index, line_no = start, 1
        with open(path) as fh:
            while True:
                lines = list(itertools.islice(fh, batch_size))
                if not lines:
                    break
                cycles += 1
                for rec in parse_events(lines, index, line_no):
                    stream.send(rec.values())
                    sent += 1
                    index += 1
                line_no += len(lines)
    stream.terminate()
    return {"read_cycles": cycles, "sent": sent}


class EventFilter:
    def __init__(self, classifier: Classifier, out_path: Path, save_every: int = 1000):
        self.classifier = classifier
        self.out_path = Path(out_path)
        self.save_every = save_every
        self.pending: list[str] = []
        self.saved = self.discarded = self.saves = 0

    def init(self):
        self.out_path.write_text("")

    def process(self, element):
        (label,), attrs, (index,) = element.values
        if score(self.classifier, attrs) >= 0.0:
            self.pending.append(EventRecord(label, attrs, index).csv_line())
            if len(self.pending) >= self.save_every:
                self.save()
        else:
            self.discarded += 1

    def save(self):
        if self.pending:
            with open(self.out_path, "a") as fh:
                fh.writelines(self.pending)
            self.saved += len(self.pending)
            self.saves += 1
            self.pending.clear()

    def ops(self) -> OperationSet:
        return OperationSet(process=self.process, init=self.init, term=self.save)


def classifier_body(channel, classifier: Classifier, out_path: Path, save_every: int = 1000) -> EventFilter:
    filt = EventFilter(classifier, out_path, save_every)
    channel.attach(EVENT_SCHEMA, filt.ops()).operate()
    return filt


def read_saved(paths: Iterable[Path]) -> dict[int, str]:
    """Saved events keyed by event_index (for comparisons)."""
    out = {}
    for p in paths:
        for line in Path(p).read_text().splitlines():
            out[int(line.rsplit(",", 1)[1])] = line
    return out


def sensor_main(ctx: RankContext):
    ch = create_channel(ctx.endpoint, PRODUCER, ctx.roles(sensor=PRODUCER, classifier=CONSUMER))
    stream = ch.attach(EVENT_SCHEMA, routing=RoundRobin())
    files = ctx.params.get("files")
    files = [Path(f) for f in files] if files is not None else input_files(ctx.input_path)
    n = len(ctx.ranks("eventfilter.sensor"))
    plan = plan_files(files)[ctx.index::n]
    ctx.extra.update(sensor_body(plan, int(ctx.params.get("batch_size", 100)), stream))
    ch.free()
    return ctx.extra


def classifier_main(ctx: RankContext):
    ch = create_channel(ctx.endpoint, CONSUMER, ctx.roles(sensor=PRODUCER, classifier=CONSUMER))
    clf = Classifier.from_config(ctx.params.get("classifier", {"kind": "threshold", "index": 0, "cutoff": -math.inf}))
    out = ctx.out_dir() / f"signals_{ctx.index:03d}.csv"
    filt = classifier_body(ch, clf, out, int(ctx.params.get("save_every", 1000)))
    ch.free()
    ctx.extra.update(saved=filt.saved, discarded=filt.discarded, saves=filt.saves)
    return ctx.extra


ROLES = [
    AppRole("eventfilter.sensor", PRODUCER, sensor_main),
    AppRole("eventfilter.classifier", CONSUMER, classifier_main),
]
