"""Per-rank counters and the processing-rate metric.

The processing rate of a run is the number of elements processed by the
consumer ranks divided by their mean wall time. Because the mean hides
stragglers, the report also carries the same total divided by the slowest
consumer's wall time.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import MetricsError

CSV_COLUMNS = ("rank", "role", "elements_sent", "elements_processed", "wall_seconds", "rate_per_second")


@dataclass
class RankMetrics:
    rank: int
    role: str = "bystander"
    elements_sent: int = 0
    elements_processed: int = 0
    wall_seconds: float = 0.0
    _started: float | None = field(default=None, repr=False, compare=False)

    def record(self, event: str, n: int = 1) -> None:
        if event == "sent":
            self.elements_sent += n
        elif event == "processed":
            self.elements_processed += n
        elif event == "start":
            self._started = time.perf_counter()
        elif event == "stop":
            if self._started is None:
                raise MetricsError(f"rank {self.rank}: stop recorded before start")
            self.wall_seconds = time.perf_counter() - self._started
        else:
            raise MetricsError(f"unknown metrics event {event!r}")

    @property
    def is_consumer(self) -> bool:
        return "consumer" in self.role

    @property
    def rate_per_second(self) -> float:
        if self.wall_seconds <= 0:
            return 0.0
        if self.is_consumer:
            return self.elements_processed / self.wall_seconds
        return self.elements_sent / self.wall_seconds


@dataclass
class RunReport:
    ranks: list[RankMetrics]
    total_sent: int
    total_processed: int
    mean_consumer_seconds: float
    max_consumer_seconds: float
    rate_mean_time: float
    rate_max_time: float
    missing: list[int]

    @property
    def complete(self) -> bool:
        return not self.missing


def aggregate(metrics: Iterable[RankMetrics], expected_ranks: Iterable[int] | None = None) -> RunReport:
    ranks = sorted(metrics, key=lambda m: m.rank)
    present = {m.rank for m in ranks}
    missing = sorted(set(expected_ranks) - present) if expected_ranks is not None else []
    consumers = [m for m in ranks if m.is_consumer] or ranks
    processed = sum(m.elements_processed for m in consumers)
    if consumers:
        mean_t = sum(m.wall_seconds for m in consumers) / len(consumers)
        max_t = max(m.wall_seconds for m in consumers)
    else:
        mean_t = max_t = 0.0
    return RunReport(
        ranks=ranks,
        total_sent=sum(m.elements_sent for m in ranks),
        total_processed=processed,
        mean_consumer_seconds=mean_t,
        max_consumer_seconds=max_t,
        rate_mean_time=processed / mean_t if mean_t > 0 else 0.0,
        rate_max_time=processed / max_t if max_t > 0 else 0.0,
        missing=missing,
    )


def metrics_csv(metrics: Iterable[RankMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for m in sorted(metrics, key=lambda m: m.rank):
        w.writerow([m.rank, m.role, m.elements_sent, m.elements_processed,
                    repr(m.wall_seconds), repr(m.rate_per_second)])
    return buf.getvalue()


def write_metrics(metrics: Iterable[RankMetrics], path: str | Path) -> None:
    Path(path).write_text(metrics_csv(metrics))


def read_metrics(path: str | Path) -> list[RankMetrics]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RankMetrics(int(r["rank"]), r["role"], int(r["elements_sent"]),
                        int(r["elements_processed"]), float(r["wall_seconds"])) for r in rows]


def format_report(report: RunReport) -> str:
    lines = [f"{'rank':>4}  {'role':<18} {'sent':>10} {'processed':>10} {'wall_s':>9} {'rate/s':>12}"]
    for m in report.ranks:
        lines.append(f"{m.rank:>4}  {m.role:<18} {m.elements_sent:>10} {m.elements_processed:>10} "
                     f"{m.wall_seconds:>9.3f} {m.rate_per_second:>12.1f}")
    lines.append(f"processed by consumers: {report.total_processed}   sent: {report.total_sent}")
    lines.append(f"aggregate rate (mean consumer time): {report.rate_mean_time:,.1f}/s")
    lines.append(f"aggregate rate (max consumer time):  {report.rate_max_time:,.1f}/s")
    if report.missing:
        lines.append(f"INCOMPLETE RUN: no metrics from ranks {report.missing}")
    return "\n".join(lines)
