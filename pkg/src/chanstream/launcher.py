"""MPMD-style launcher.

A run configuration is a YAML (or JSON) document::

    mode: inprocess            # or: sockets
    host: 127.0.0.1
    base_port: 47000           # rank r listens on base_port + r
    timeout: 10                # rendezvous timeout, seconds
    paths: {input: corpus/, output: out/}
    groups:
      - app: wordcount.map
        role: producer         # "producer", "consumer", "producer+consumer", or a list
        count: 4
        params: {}

Global ranks are assigned densely in group declaration order.
"""

from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .apps import APPS, RankContext
from .errors import AbortedError, ConfigError
from .harness import RankMetrics, RunReport, aggregate, format_report, write_metrics
from .runtime import Endpoint, Role
from .transport import DEFAULT_TIMEOUT, LoopbackNetwork, SocketTransport, Transport

MODES = ("inprocess", "sockets")


@dataclass
class GroupConfig:
    app: str
    role: Role
    count: int
    params: dict[str, Any] = field(default_factory=dict)
    port: int | None = None


@dataclass
class RunConfig:
    groups: list[GroupConfig]
    mode: str = "inprocess"
    host: str = "127.0.0.1"
    base_port: int = 47000
    timeout: float = DEFAULT_TIMEOUT
    input_path: Path | None = None
    output_path: Path | None = None
    source: Path | None = None

    @property
    def size(self) -> int:
        return sum(g.count for g in self.groups)

    @property
    def rank_groups(self) -> list[int]:
        """Group index of every global rank."""
        return [i for i, g in enumerate(self.groups) for _ in range(g.count)]

    @property
    def layout(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for rank, gi in enumerate(self.rank_groups):
            out.setdefault(self.groups[gi].app, []).append(rank)
        return out

    @property
    def ports(self) -> list[int]:
        ports, rank = [], 0
        for g in self.groups:
            base = self.base_port + rank if g.port is None else g.port
            ports.extend(base + k for k in range(g.count))
            rank += g.count
        return ports

    @property
    def roster(self) -> list[str]:
        return [f"{self.host}:{p}" for p in self.ports]

    def group_of(self, rank: int) -> GroupConfig:
        return self.groups[self.rank_groups[rank]]


def _parse_role(value, path: str) -> Role:
    if isinstance(value, dict):
        return Role(bool(value.get("producer")), bool(value.get("consumer")))
    if isinstance(value, str):
        value = [v.strip() for v in value.replace("+", ",").split(",") if v.strip()]
    if not isinstance(value, (list, tuple)):
        raise ConfigError(path, f"cannot read role flags from {value!r}")
    unknown = set(value) - {"producer", "consumer", "none", "bystander"}
    if unknown:
        raise ConfigError(path, f"unknown role flag(s) {sorted(unknown)}")
    return Role("producer" in value, "consumer" in value)


def _resolve(base: Path | None, value) -> Path | None:
    if value is None:
        return None
    p = Path(value).expanduser()
    if not p.is_absolute() and base is not None:
        p = base / p
    return p


def parse_config(text: str, base_dir: Path | str | None = None) -> RunConfig:
    """Parse and validate a run configuration document."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"not a valid document: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("", "top level must be a mapping")
    base_dir = Path(base_dir) if base_dir is not None else None

    mode = doc.get("mode", "inprocess")
    if mode not in MODES:
        raise ConfigError("mode", f"must be one of {MODES}, got {mode!r}")
    raw_groups = doc.get("groups")
    if not isinstance(raw_groups, list) or not raw_groups:
        raise ConfigError("groups", "must be a non-empty list")

    groups = []
    for i, g in enumerate(raw_groups):
        path = f"groups[{i}]"
        if not isinstance(g, dict):
            raise ConfigError(path, "must be a mapping")
        app = g.get("app")
        if app not in APPS:
            raise ConfigError(f"{path}.app", f"unknown app {app!r}; known: {sorted(APPS)}")
        count = g.get("count", 1)
        if not isinstance(count, int) or isinstance(count, bool) or count < 1:
            raise ConfigError(f"{path}.count", f"must be a positive integer, got {count!r}")
        role = _parse_role(g["role"], f"{path}.role") if "role" in g else APPS[app].role
        if role != APPS[app].role:
            raise ConfigError(f"{path}.role", f"{app} runs as {APPS[app].role}, config says {role}")
        params = g.get("params") or {}
        if not isinstance(params, dict):
            raise ConfigError(f"{path}.params", "must be a mapping")
        port = g.get("port")
        if port is not None and (not isinstance(port, int) or isinstance(port, bool)):
            raise ConfigError(f"{path}.port", f"must be an integer, got {port!r}")
        groups.append(GroupConfig(app, role, count, dict(params), port))

    families = {APPS[g.app].family for g in groups}
    if len(families) > 1:
        raise ConfigError("groups", f"groups mix applications {sorted(families)}")
    if not any(g.role.is_producer for g in groups):
        raise ConfigError("groups", "no producer group")
    if not any(g.role.is_consumer for g in groups):
        raise ConfigError("groups", "no consumer group")
    if sum(g.count for g in groups) < 2:
        raise ConfigError("groups", "a run needs at least two ranks")
    family = families.pop()
    missing = sorted(r.name for r in APPS.values() if r.family == family and r.name not in {g.app for g in groups})
    if missing:
        raise ConfigError("groups", f"{family} also needs group(s) for {missing}")

    paths = doc.get("paths") or {}
    if not isinstance(paths, dict):
        raise ConfigError("paths", "must be a mapping")
    base_port = doc.get("base_port", 47000)
    if not isinstance(base_port, int) or isinstance(base_port, bool):
        raise ConfigError("base_port", f"must be an integer, got {base_port!r}")
    timeout = doc.get("timeout", DEFAULT_TIMEOUT)
    if not isinstance(timeout, (int, float)) or timeout <= 0:
        raise ConfigError("timeout", "must be a positive number")

    cfg = RunConfig(groups=groups, mode=mode, host=str(doc.get("host", "127.0.0.1")),
                    base_port=base_port, timeout=float(timeout),
                    input_path=_resolve(base_dir, paths.get("input")),
                    output_path=_resolve(base_dir, paths.get("output")))
    _check_ports(cfg)
    return cfg


def _check_ports(cfg: RunConfig) -> None:
    owner: dict[int, int] = {}
    rank = 0
    for i, g in enumerate(cfg.groups):
        for _ in range(g.count):
            port = cfg.ports[rank]
            field_path = f"groups[{i}].port" if g.port is not None else "base_port"
            if not 1 <= port <= 65535:
                raise ConfigError(field_path, f"rank {rank} would use invalid port {port}")
            if port in owner:
                raise ConfigError(field_path, f"port {port} of rank {rank} collides with rank {owner[port]}")
            owner[port] = rank
            rank += 1


def load_config(path: Path | str) -> RunConfig:
    path = Path(path).resolve()
    cfg = parse_config(path.read_text(), base_dir=path.parent)
    cfg.source = path
    return cfg


def dump_config(cfg: RunConfig) -> str:
    doc = {
        "mode": cfg.mode, "host": cfg.host, "base_port": cfg.base_port, "timeout": cfg.timeout,
        "paths": {k: str(v) for k, v in (("input", cfg.input_path), ("output", cfg.output_path)) if v is not None},
        "groups": [
            {"app": g.app, "role": str(g.role), "count": g.count, "params": g.params,
             **({"port": g.port} if g.port is not None else {})}
            for g in cfg.groups
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False)


@dataclass
class RankOutcome:
    rank: int
    app: str
    ok: bool
    metrics: RankMetrics | None = None
    extra: dict[str, Any] = field(default_factory=dict)
    error: str | None = None

    def to_json(self) -> dict:
        m = self.metrics
        return {
            "rank": self.rank, "app": self.app, "ok": self.ok, "error": self.error, "extra": self.extra,
            "metrics": None if m is None else {
                "role": m.role, "elements_sent": m.elements_sent,
                "elements_processed": m.elements_processed, "wall_seconds": m.wall_seconds},
        }

    @classmethod
    def from_json(cls, d: dict) -> RankOutcome:
        m = d.get("metrics")
        metrics = None if m is None else RankMetrics(d["rank"], m["role"], m["elements_sent"],
                                                     m["elements_processed"], m["wall_seconds"])
        return cls(d["rank"], d["app"], d["ok"], metrics, d.get("extra") or {}, d.get("error"))


@dataclass
class ExitReport:
    outcomes: list[RankOutcome]
    report: RunReport
    mode: str
    metrics_path: Path | None = None

    @property
    def ok(self) -> bool:
        return all(o.ok for o in self.outcomes) and self.report.complete

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 1

    def failures(self) -> list[RankOutcome]:
        return [o for o in self.outcomes if not o.ok]

    def extras(self, app: str | None = None) -> list[dict]:
        return [o.extra for o in self.outcomes if app is None or o.app == app]

    def format(self) -> str:
        lines = [f"mode: {self.mode}", format_report(self.report)]
        for o in self.failures():
            lines.append(f"rank {o.rank} ({o.app}) FAILED: {o.error}")
        lines.append("exit: " + ("ok" if self.ok else "FAILED"))
        return "\n".join(lines)


def run_rank(cfg: RunConfig, rank: int, transport: Transport) -> RankOutcome:
    """Run one rank's application body to completion on ``transport``."""
    group = cfg.group_of(rank)
    metrics = RankMetrics(rank, str(group.role))
    ctx = RankContext(Endpoint(transport, metrics), group.app, cfg.layout, dict(group.params),
                      cfg.input_path, cfg.output_path)
    metrics.record("start")
    try:
        APPS[group.app].body(ctx)
    except BaseException as exc:
        metrics.record("stop")
        return RankOutcome(rank, group.app, False, metrics, ctx.extra, f"{type(exc).__name__}: {exc}")
    metrics.record("stop")
    return RankOutcome(rank, group.app, True, metrics, ctx.extra)


def _launch_inprocess(cfg: RunConfig) -> list[RankOutcome]:
    net = LoopbackNetwork()
    roster = [f"loop:{r}" for r in range(cfg.size)]
    transports = [net.transport(r, roster, timeout=cfg.timeout) for r in range(cfg.size)]
    outcomes: list[RankOutcome | None] = [None] * cfg.size

    def runner(rank):
        out = run_rank(cfg, rank, transports[rank])
        outcomes[rank] = out
        if not out.ok and not (out.error or "").startswith(AbortedError.__name__):
            net.abort(AbortedError(f"rank {rank} failed"))

    threads = [threading.Thread(target=runner, args=(r,), name=f"rank-{r}", daemon=True)
               for r in range(cfg.size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for t in transports:
        t.close()
    return outcomes


def _child_env() -> dict:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


def _launch_sockets(cfg: RunConfig, grace: float | None = None,
                    kill_after: dict[int, float] | None = None) -> list[RankOutcome]:
    """Spawn one process per rank. Once a rank fails, the rest get ``grace``
    seconds (default: rendezvous timeout + 2 s) to fail on their own before
    being killed. ``kill_after`` maps rank -> delay and exists for failure tests."""
    if grace is None:
        grace = cfg.timeout + 2.0
    with tempfile.TemporaryDirectory(prefix="chanstream-run-") as tmp:
        tmp = Path(tmp)
        if cfg.source is not None:
            cfg_path = cfg.source
        else:
            cfg_path = tmp / "run.yaml"
            cfg_path.write_text(dump_config(cfg))
        procs = {}
        for rank in range(cfg.size):
            cmd = [sys.executable, "-m", "chanstream", "self", "--rank", str(rank),
                   "--config", str(cfg_path), "--report-dir", str(tmp)]
            procs[rank] = subprocess.Popen(cmd, env=_child_env(), stdout=subprocess.PIPE,
                                           stderr=subprocess.STDOUT, text=True)
        outputs = {r: [] for r in procs}
        readers = []
        for r, p in procs.items():
            t = threading.Thread(target=lambda p=p, r=r: outputs[r].extend(p.stdout), daemon=True)
            t.start()
            readers.append(t)

        start = time.monotonic()
        failed_at = None
        first_failed: int | None = None
        killed: set[int] = set()
        stopped: set[int] = set()
        while True:
            codes = {r: p.poll() for r, p in procs.items()}
            now = time.monotonic()
            for r, delay in (kill_after or {}).items():
                if r not in killed and codes[r] is None and now - start >= delay:
                    procs[r].send_signal(signal.SIGKILL)
                    killed.add(r)
            if all(c is not None for c in codes.values()):
                break
            if failed_at is None:
                bad = [r for r, c in codes.items() if c not in (None, 0)]
                if bad:
                    failed_at, first_failed = now, bad[0]
            if failed_at is not None and now - failed_at > grace:
                for r, p in procs.items():
                    if p.poll() is None:
                        p.kill()
                        stopped.add(r)
            time.sleep(0.02)
        for t in readers:
            t.join(1.0)

        outcomes = []
        for rank, p in procs.items():
            report = tmp / f"rank_{rank}.json"
            app = cfg.group_of(rank).app
            if report.exists():
                out = RankOutcome.from_json(json.loads(report.read_text()))
            else:
                out = RankOutcome(rank, app, False, None, {}, None)
            if p.returncode != 0:
                out.ok = False
                if rank in stopped:
                    out.error = f"stopped by the launcher after rank {first_failed} failed"
                elif out.error is None:
                    how = f"killed by signal {-p.returncode}" if p.returncode < 0 else f"exit code {p.returncode}"
                    tail = "".join(outputs[rank][-5:]).strip()
                    out.error = f"process {how}" + (f": {tail}" if tail else "")
            outcomes.append(out)
        return outcomes


def launch(cfg: RunConfig, mode: str | None = None, **kw) -> ExitReport:
    """Start every rank, wait for all of them and collect the exit report.

    Writes ``metrics.csv`` into the output directory when one is configured.
    """
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ConfigError("mode", f"must be one of {MODES}, got {mode!r}")
    if cfg.output_path is not None:
        cfg.output_path.mkdir(parents=True, exist_ok=True)
    outcomes = _launch_inprocess(cfg) if mode == "inprocess" else _launch_sockets(cfg, **kw)
    metrics = [o.metrics for o in outcomes if o.metrics is not None]
    report = aggregate(metrics, range(cfg.size))
    metrics_path = None
    if cfg.output_path is not None:
        metrics_path = cfg.output_path / "metrics.csv"
        write_metrics(metrics, metrics_path)
    return ExitReport(outcomes, report, mode, metrics_path)


def run_self(config_path: Path | str, rank: int, report_dir: Path | str | None = None) -> int:
    """Body of a spawned rank process in sockets mode."""
    cfg = load_config(config_path)
    report_dir = Path(report_dir) if report_dir else (cfg.output_path or Path(".")) / ".ranks"
    report_dir.mkdir(parents=True, exist_ok=True)
    try:
        transport = SocketTransport(rank, cfg.roster, timeout=cfg.timeout)
    except Exception as exc:
        out = RankOutcome(rank, cfg.group_of(rank).app, False, None, {}, f"{type(exc).__name__}: {exc}")
    else:
        with transport:
            out = run_rank(cfg, rank, transport)
    tmp = report_dir / f"rank_{rank}.json.tmp"
    tmp.write_text(json.dumps(out.to_json()))
    tmp.replace(report_dir / f"rank_{rank}.json")
    if not out.ok:
        print(f"rank {rank} failed: {out.error}", file=sys.stderr)
    return 0 if out.ok else 1
