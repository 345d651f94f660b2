import socket
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from chanstream.errors import ConfigError
from chanstream.launcher import dump_config, launch, load_config, parse_config

from _apps import free_base_port, wordcount_config

WC = """
mode: inprocess
base_port: 41000
paths: {input: corpus, output: out}
groups:
  - {app: wordcount.map, role: producer, count: 4}
  - {app: wordcount.reduce1, role: producer+consumer, count: 2}
  - {app: wordcount.reduce2, role: [consumer], count: 1}
"""


def test_wordcount_topology_has_seven_ranks(tmp_path):
    cfg = parse_config(WC, tmp_path)
    assert cfg.size == 7
    assert cfg.layout == {"wordcount.map": [0, 1, 2, 3], "wordcount.reduce1": [4, 5], "wordcount.reduce2": [6]}
    assert cfg.ports == list(range(41000, 41007))
    assert cfg.input_path == tmp_path / "corpus"
    assert parse_config(WC, tmp_path) == cfg  # rank assignment is a pure function of the text


def test_eventfilter_roster():
    cfg = parse_config("""
groups:
  - {app: eventfilter.sensor, count: 2}
  - {app: eventfilter.classifier, count: 4}
""")
    assert cfg.roster == [f"127.0.0.1:{47000 + r}" for r in range(6)]


def test_dump_round_trip(tmp_path):
    cfg = parse_config(WC, tmp_path)
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("doc,path", [
    ("groups: [{app: eventfilter.sensor, count: 2}]", "groups"),
    ("groups: [{app: nosuch.app}, {app: eventfilter.classifier}]", "groups[0].app"),
    ("groups: [{app: eventfilter.sensor}, {app: eventfilter.classifier, count: 0}]", "groups[1].count"),
    ("groups: [{app: eventfilter.sensor, role: consumer}, {app: eventfilter.classifier}]", "groups[0].role"),
    ("groups: [{app: eventfilter.sensor, port: 5000}, {app: eventfilter.classifier, port: 5000}]", "groups[1].port"),
    ("base_port: 65535\ngroups: [{app: eventfilter.sensor}, {app: eventfilter.classifier}]", "base_port"),
    ("mode: mpi\ngroups: [{app: eventfilter.sensor}, {app: eventfilter.classifier}]", "mode"),
    ("groups: [{app: wordcount.map}, {app: wordcount.reduce2}]", "groups"),
    ("groups: [{app: wordcount.map}, {app: eventfilter.classifier}]", "groups"),
    ("timeout: -1\ngroups: [{app: eventfilter.sensor}, {app: eventfilter.classifier}]", "timeout"),
    ("[1, 2]", ""),
])
def test_config_errors_carry_field_path(doc, path):
    with pytest.raises(ConfigError) as info:
        parse_config(doc)
    assert info.value.path == path


def _tiny_corpus(root: Path) -> Path:
    src = root / "tiny"
    src.mkdir()
    (src / "a.txt").write_text("the cat and the hat\n")
    (src / "b.txt").write_text("The Hat, the BAT; a cat!\n")
    (src / "c.txt").write_text("")
    return src


def test_inprocess_and_sockets_runs_agree(tmp_path):
    src = _tiny_corpus(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    ra = launch(wordcount_config(src, out_a, maps=2, l1=2))
    rb = launch(wordcount_config(src, out_b, maps=2, l1=2), "sockets")
    assert ra.exit_code == 0 and rb.exit_code == 0, rb.format()
    table = (out_a / "wordcount.tsv").read_text()
    assert table == "the\t4\ncat\t2\nhat\t2\na\t1\nand\t1\nbat\t1\n"
    assert (out_b / "wordcount.tsv").read_text() == table
    header = (out_b / "metrics.csv").read_text().splitlines()[0]
    assert header == "rank,role,elements_sent,elements_processed,wall_seconds,rate_per_second"


def test_killed_rank_fails_the_run(corpus, tmp_path):
    cfg = wordcount_config(corpus, tmp_path, maps=2, l1=2)
    res = launch(cfg, "sockets", kill_after={2: 1.5})
    assert res.exit_code != 0
    (killed,) = [o for o in res.failures() if "signal" in (o.error or "")]
    assert killed.rank == 2
    assert "rank 2 (wordcount.reduce1) FAILED" in res.format()


def test_rendezvous_timeout_is_launch_failure(tmp_path):
    src = _tiny_corpus(tmp_path)
    cfg = wordcount_config(src, tmp_path / "out", maps=1, l1=1, timeout=1)
    squatter = socket.socket()
    squatter.bind(("127.0.0.1", cfg.ports[1]))
    squatter.listen(1)
    try:
        res = launch(cfg, "sockets")
    finally:
        squatter.close()
    assert res.exit_code != 0
    errors = {o.rank: o.error for o in res.failures()}
    assert "cannot bind" in errors[1]
    assert any("TransportConnectionError" in (e or "") for r, e in errors.items() if r != 1)


def _write(tmp_path, cfg):
    path = tmp_path / "run.yaml"
    path.write_text(dump_config(cfg))
    return path


def test_cli_run_and_exit_codes(tmp_path):
    src = _tiny_corpus(tmp_path)
    path = _write(tmp_path, wordcount_config(src, tmp_path / "out", maps=1, l1=1))
    proc = subprocess.run([sys.executable, "-m", "chanstream", "run", "--config", str(path)],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "aggregate rate (mean consumer time)" in proc.stdout
    assert load_config(path).size == 3

    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"groups": [{"app": "eventfilter.sensor", "count": 0}]}))
    proc = subprocess.run([sys.executable, "-m", "chanstream", "run", "--config", str(bad)],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 2 and "groups[0].count" in proc.stderr


def test_free_base_port_helper():
    base = free_base_port(4)
    assert 20000 <= base < 60000
