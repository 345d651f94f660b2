"""Word-count processing rate against the number of map ranks.

Runs the three-level word count on one corpus for each map count and prints
the aggregate rate (processed elements over mean consumer wall time). On a
single core the threads share one interpreter, so expect a flat curve; use
``--mode sockets`` to run each rank as its own process.
"""

import argparse
import tempfile
from pathlib import Path

import yaml

from chanstream.apps.wordcount import write_corpus
from chanstream.launcher import launch, parse_config


def run(corpus: Path, out: Path, maps: int, l1: int, mode: str, base_port: int):
    doc = {"mode": mode, "base_port": base_port, "timeout": 30,
           "paths": {"input": str(corpus), "output": str(out)},
           "groups": [{"app": "wordcount.map", "count": maps},
                      {"app": "wordcount.reduce1", "count": l1},
                      {"app": "wordcount.reduce2", "count": 1}]}
    result = launch(parse_config(yaml.safe_dump(doc)))
    if not result.ok:
        raise SystemExit(result.format())
    return result.report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", help="existing corpus directory (default: generate one)")
    ap.add_argument("--maps", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--l1", type=int, default=2)
    ap.add_argument("--mode", choices=["inprocess", "sockets"], default="inprocess")
    ap.add_argument("--base-port", type=int, default=47000)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        corpus = Path(args.corpus) if args.corpus else tmp / "corpus"
        if not args.corpus:
            write_corpus(corpus, 120, 1000, seed=2024)
        base = None
        print(f"{'maps':>5} {'rate (mean time)':>18} {'rate (max time)':>17} {'speedup':>8}")
        for maps in args.maps:
            rep = run(corpus, tmp / f"out_{maps}", maps, args.l1, args.mode, args.base_port)
            base = base or rep.rate_mean_time
            print(f"{maps:>5} {rep.rate_mean_time:>18,.0f} {rep.rate_max_time:>17,.0f} "
                  f"{rep.rate_mean_time / base:>8.2f}")


if __name__ == "__main__":
    main()
