import pytest

from chanstream.errors import MetricsError
from chanstream.harness import RankMetrics, aggregate, format_report, metrics_csv, read_metrics, write_metrics


def test_record_counts():
    m = RankMetrics(0, "producer")
    for _ in range(100):
        m.record("sent")
    m.record("processed", 5)
    assert m.elements_sent == 100 and m.elements_processed == 5
    with pytest.raises(MetricsError):
        m.record("bogus")


def test_stop_before_start():
    with pytest.raises(MetricsError):
        RankMetrics(0).record("stop")


def test_empty_run_has_zero_rate():
    m = RankMetrics(3, "consumer")
    m.record("start")
    m.record("stop")
    assert m.wall_seconds >= 0 and m.rate_per_second == 0.0


def test_aggregate_arithmetic():
    ms = [RankMetrics(0, "producer", elements_sent=1000, wall_seconds=0.5),
          RankMetrics(1, "consumer", elements_processed=500, wall_seconds=1.0),
          RankMetrics(2, "consumer", elements_processed=500, wall_seconds=1.0)]
    rep = aggregate(ms, range(3))
    assert rep.rate_mean_time == 1000.0 and rep.rate_max_time == 1000.0
    assert rep.total_sent == 1000 and rep.total_processed == 1000 and rep.complete


def test_mean_and_max_differ_under_imbalance():
    ms = [RankMetrics(0, "consumer", elements_processed=300, wall_seconds=1.0),
          RankMetrics(1, "consumer", elements_processed=300, wall_seconds=3.0)]
    rep = aggregate(ms)
    assert rep.rate_mean_time == 300.0 and rep.rate_max_time == 200.0


def test_single_rank_aggregate_is_its_rate():
    m = RankMetrics(0, "consumer", elements_processed=123, wall_seconds=0.25)
    assert aggregate([m]).rate_mean_time == m.rate_per_second == 492.0


def test_missing_rank_marks_incomplete():
    rep = aggregate([RankMetrics(0, "consumer", 0, 1, 1.0)], range(3))
    assert rep.missing == [1, 2] and not rep.complete
    assert "INCOMPLETE" in format_report(rep)


def test_csv_regenerates_report(tmp_path):
    ms = [RankMetrics(r, "consumer" if r % 2 else "producer", r * 7, r * 11, 0.1 * (r + 1) / 3) for r in range(5)]
    path = tmp_path / "metrics.csv"
    write_metrics(ms, path)
    back = read_metrics(path)
    assert back == ms
    assert aggregate(back) == aggregate(ms)
    assert metrics_csv(back) == path.read_text()
    header = path.read_text().splitlines()[0]
    assert header == "rank,role,elements_sent,elements_processed,wall_seconds,rate_per_second"
