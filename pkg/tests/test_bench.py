"""Benchmark harness: row shapes, CSV schemas, CLI plumbing.

Runs are sized for correctness checking, not measurement.
"""

import csv
import io

import pytest

from minimpi import bench, cli
from minimpi.errors import ArgError


def _csv_rows(kind, rows):
    buf = io.StringIO()
    bench.emit_csv(kind, rows, file=buf)
    return list(csv.reader(io.StringIO(buf.getvalue())))


# --- schemas stay frozen: downstream scripts key on these headers ----------

def test_csv_headers():
    assert bench._SCHEMAS["msgrate"] == (
        "mode", "threads", "window", "iters", "rep", "messages", "seconds",
        "rate")
    assert bench._SCHEMAS["p2p"] == (
        "pattern", "placement", "size", "rep", "metric")
    assert bench._SCHEMAS["progress-demo"] == (
        "progress", "busy_seconds", "rep", "epoch_seconds")


@pytest.mark.parametrize("mode", bench.MSGRATE_MODES)
def test_msgrate_modes(mode):
    rows = bench.run_msgrate(2, mode, window=4, iters=3, reps=2)
    assert len(rows) == 2
    for rep, row in enumerate(rows):
        assert row["rep"] == rep
        assert row["messages"] == 2 * 4 * 3
        assert row["seconds"] > 0
        assert row["rate"] == row["messages"] / row["seconds"]
    header, *data = _csv_rows("msgrate", rows)
    assert header == list(bench._SCHEMAS["msgrate"])
    assert len(data) == 2 and data[0][0] == mode


@pytest.mark.parametrize("placement", ["threadcomm", "instances"])
def test_p2p_latency(placement):
    rows = bench.run_p2p("latency", placement, [8], reps=2, rounds=4)
    assert [r["rep"] for r in rows] == [0, 1]
    for row in rows:
        assert row["size"] == 8 and row["metric"] > 0   # microseconds


def test_p2p_bandwidth_rows():
    rows = bench.run_p2p("bandwidth", "instances", [8, 4096], reps=1,
                         rounds=2, window=4)
    assert [(r["size"], r["rep"]) for r in rows] == [(8, 0), (4096, 0)]
    for row in rows:
        assert row["metric"] > 0                        # MB/s


def test_p2p_size_zero_bandwidth_is_zero():
    rows = bench.run_p2p("bandwidth", "instances", [0], reps=1, rounds=2,
                         window=4)
    assert rows[0]["metric"] == 0.0


def test_progress_demo_idle_target():
    rows = bench.run_progress_demo(0.0, "none", reps=2)
    assert [r["rep"] for r in rows] == [0, 1]
    for row in rows:
        assert row["progress"] == "none"
        assert 0 < row["epoch_seconds"] < 2.0


def test_validation():
    with pytest.raises(ArgError):
        bench.run_msgrate(2, "turbo")
    with pytest.raises(ArgError):
        bench.run_msgrate(0, "global")
    with pytest.raises(ArgError):
        bench.run_p2p("jitter", "instances", [8])
    with pytest.raises(ArgError):
        bench.run_p2p("latency", "sockets", [8])
    with pytest.raises(ArgError):
        bench.run_p2p("latency", "instances", [-1])
    with pytest.raises(ArgError):
        bench.run_progress_demo(-0.5, "none")
    with pytest.raises(ArgError):
        bench.run_progress_demo(1.0, "maybe")


def test_summary_reports_median(capsys):
    rows = [{"pattern": "latency", "placement": "instances", "size": 8,
             "rep": r, "metric": m} for r, m in enumerate([9.0, 5.0, 7.0])]
    meds = bench.summarize("p2p", rows)
    assert meds == {8: 7.0}
    err = capsys.readouterr().err
    assert "median=7" in err and "usec" in err


def test_bench_cli_msgrate(capsys):
    rc = cli.bench_main(["msgrate", "--mode", "pervci", "--threads", "2",
                         "--window", "4", "--iters", "2", "--reps", "1"])
    assert rc == 0
    out, err = capsys.readouterr()
    lines = out.strip().splitlines()
    assert lines[0] == "mode,threads,window,iters,rep,messages,seconds,rate"
    assert len(lines) == 2 and lines[1].startswith("pervci,2,4,2,0,16,")
    assert "msgs/s" in err


def test_bench_cli_error_exit(capsys):
    rc = cli.bench_main(["msgrate", "--mode", "global", "--threads", "0"])
    assert rc == 1
    assert "ERR_ARG" in capsys.readouterr().err
