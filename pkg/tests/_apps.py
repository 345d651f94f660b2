"""Config builders and runners for the application tests."""

from __future__ import annotations

import random
import socket
from pathlib import Path

import yaml

from chanstream.apps import APPS, RankContext
from chanstream.harness import RankMetrics
from chanstream.launcher import launch, parse_config
from chanstream.local import run_threads


def free_base_port(n: int, attempts: int = 50) -> int:
    """A base port such that base..base+n-1 are currently bindable."""
    rng = random.Random()
    for _ in range(attempts):
        base = rng.randrange(20000, 60000 - n)
        socks = []
        try:
            for p in range(base, base + n):
                s = socket.socket()
                socks.append(s)
                s.bind(("127.0.0.1", p))
            return base
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
    raise RuntimeError("no free port range found")


def make_config(groups: list[dict], input_path=None, output_path=None, mode="inprocess", timeout=10):
    size = sum(g.get("count", 1) for g in groups)
    doc = {"mode": mode, "base_port": free_base_port(size), "timeout": timeout,
           "paths": {k: str(v) for k, v in (("input", input_path), ("output", output_path)) if v is not None},
           "groups": groups}
    return parse_config(yaml.safe_dump(doc))


def wordcount_config(corpus, out, maps=4, l1=2, **kw):
    return make_config([{"app": "wordcount.map", "count": maps},
                        {"app": "wordcount.reduce1", "count": l1},
                        {"app": "wordcount.reduce2", "count": 1}], corpus, out, **kw)


def particles_config(out, producers=2, sinks=2, *, n=64, steps=200, threshold, seed, flush_every, **kw):
    params = {"particles_per_producer": n, "steps": steps, "threshold": threshold, "seed": seed}
    return make_config([{"app": "particles.mover", "count": producers, "params": params},
                        {"app": "particles.sink", "count": sinks, "params": {"flush_every": flush_every}}],
                       None, out, **kw)


def eventfilter_config(events_dir, out, classifier, sensors=2, classifiers=2, batch_size=100, save_every=500, **kw):
    return make_config([{"app": "eventfilter.sensor", "count": sensors, "params": {"batch_size": batch_size}},
                        {"app": "eventfilter.classifier", "count": classifiers,
                         "params": {"classifier": classifier.to_config(), "save_every": save_every}}],
                       events_dir, out, **kw)


def run_ok(cfg, mode=None):
    result = launch(cfg, mode)
    assert result.ok, result.format()
    return result


def run_app_threads(cfg, with_metrics: bool = True) -> list[RankMetrics | None]:
    """Run a config's ranks as threads without the launcher (for overhead checks)."""
    metrics = [RankMetrics(r, str(cfg.group_of(r).role)) if with_metrics else None for r in range(cfg.size)]

    def body(rank):
        g = cfg.group_of(rank)

        def run(ep):
            APPS[g.app].body(RankContext(ep, g.app, cfg.layout, dict(g.params), cfg.input_path, cfg.output_path))
        return run

    for m in metrics:
        if m is not None:
            m.record("start")
    run_threads([body(r) for r in range(cfg.size)], "loopback", metrics=metrics)
    for m in metrics:
        if m is not None:
            m.record("stop")
    return metrics


def read_dir(path: Path, pattern: str) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(Path(path).glob(pattern))}
