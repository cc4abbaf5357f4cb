"""Benchmark and demo harness.

Three scenarios, each runnable from the minimpi-bench CLI or directly
through run_msgrate / run_p2p / run_progress_demo:

* msgrate: T threads per rank blast 8-byte messages pairwise under one
  of three channel regimes (global lock, per-VCI locks, per-thread
  stream communicators).
* p2p: ping-pong latency or windowed bandwidth across a size sweep, on
  either a 2-thread threadcomm (one process) or two in-process ranks.
* progress-demo: passive-target reads against a busy target, with and
  without a progress thread, timing the access epoch.

Every payload is checksummed inside the timed region, identically in
every configuration, so performance runs double as correctness runs
(orderings between configurations are unaffected by the constant
overhead).  Rows go to stdout as CSV with a fixed per-scenario header;
a human summary (median/min/max over repetitions) goes to stderr.
"""

import csv
import itertools
import statistics
import struct
import sys
import threading
import time
import zlib

from . import offload  # noqa: F401  (device demo parity; keeps import light)
from . import onesided, p2p
from .comm import barrier, comm_free, stream_comm_create, threadcomm_init
from .datatype import BYTE
from .errors import ArgError, TransportError
from .progress import waitall
from .runtime import init
from .stream import LOCK_GLOBAL, LOCK_PER_VCI, free_stream

MSGRATE_MODES = ("global", "pervci", "stream")
DEFAULT_WINDOW = 64
_ACK_OFF = 1 << 20

_group_counter = itertools.count()


def _fresh_group(label):
    return "bench-%s-%d" % (label, next(_group_counter))


def _median_summary(label, values, unit, file=None):
    # resolve the stream per call so redirection works
    file = sys.stderr if file is None else file
    med = statistics.median(values)
    print("%s: median=%.6g min=%.6g max=%.6g %s (n=%d)"
          % (label, med, min(values), max(values), unit, len(values)),
          file=file)
    return med


def _run_pair(group, body0, body1, **init_kw):
    """Host two in-proc ranks on threads; re-raise the first failure."""
    out = [None, None]
    errs = []

    def runner(rank, body):
        try:
            inst = init(transport="inproc", rank=rank, ranks=2, group=group,
                        **init_kw)
            try:
                out[rank] = body(inst)
            finally:
                inst.finalize()
        except BaseException as exc:   # propagate to the caller thread
            errs.append(exc)

    threads = [threading.Thread(target=runner, args=(r, b), daemon=True)
               for r, b in ((0, body0), (1, body1))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errs:
        raise errs[0]
    return out


# ---------------------------------------------------------------------------
# msgrate


def _sender_worker(comm, tag, window, iters, peer):
    crc = 0
    seq = 0
    for _ in range(iters):
        reqs = []
        for _ in range(window):
            payload = struct.pack("<Q", seq)
            seq += 1
            crc = zlib.crc32(payload, crc)
            reqs.append(p2p.isend(comm, payload, 8, BYTE, peer, tag))
        waitall(reqs)
    ack = bytearray(4)
    p2p.recv(comm, ack, 4, BYTE, peer, tag + _ACK_OFF)
    if struct.unpack("<I", bytes(ack))[0] != crc & 0xFFFFFFFF:
        raise TransportError("msgrate checksum mismatch on tag %d" % tag)


def _receiver_worker(comm, tag, window, iters, peer):
    crc = 0
    bufs = [bytearray(8) for _ in range(window)]
    for _ in range(iters):
        reqs = [p2p.irecv(comm, b, 8, BYTE, peer, tag) for b in bufs]
        waitall(reqs)
        for b in bufs:
            crc = zlib.crc32(b, crc)
    p2p.send(comm, struct.pack("<I", crc & 0xFFFFFFFF), 4, BYTE, peer,
             tag + _ACK_OFF)


def _msgrate_channels(inst, mode, threads):
    """Per-thread (comm, tag) channels plus teardown leftovers."""
    world = inst.world
    if mode == "global":
        return [(world, i) for i in range(threads)], [], []
    if mode == "pervci":
        comms = [world.dup() for _ in range(threads)]
        return [(c, 0) for c in comms], comms, []
    streams = [inst.stream_create() for _ in range(threads)]
    comms = [stream_comm_create(world, s) for s in streams]
    return [(c, 0) for c in comms], comms, streams


def _msgrate_rank(inst, mode, threads, window, iters, sender):
    channels, comms, streams = _msgrate_channels(inst, mode, threads)
    body = _sender_worker if sender else _receiver_worker
    peer = 1 if sender else 0
    workers = [threading.Thread(target=body,
                                args=(comm, tag, window, iters, peer),
                                daemon=True)
               for comm, tag in channels]
    barrier(inst.world)
    t0 = time.perf_counter()
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    elapsed = time.perf_counter() - t0
    barrier(inst.world)
    for c in comms:
        comm_free(c)
    for s in streams:
        free_stream(s)
    return elapsed


def run_msgrate(threads, mode, window=DEFAULT_WINDOW, iters=50, reps=5):
    """Returns rows [{mode, threads, window, iters, rep, messages,
    seconds, rate}]; rate is aggregate messages/second."""
    if mode not in MSGRATE_MODES:
        raise ArgError("mode must be one of %s, got %r"
                       % ("/".join(MSGRATE_MODES), mode))
    for name, val in (("threads", threads), ("window", window),
                      ("iters", iters), ("reps", reps)):
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            raise ArgError("%s must be a positive int, got %r" % (name, val))
    lock_mode = LOCK_GLOBAL if mode == "global" else LOCK_PER_VCI
    rows = []
    for rep in range(reps):
        group = _fresh_group("msgrate")
        elapsed = _run_pair(
            group,
            lambda inst: _msgrate_rank(inst, mode, threads, window, iters,
                                       sender=True),
            lambda inst: _msgrate_rank(inst, mode, threads, window, iters,
                                       sender=False),
            lock_mode=lock_mode)[0]
        messages = threads * window * iters
        rows.append({"mode": mode, "threads": threads, "window": window,
                     "iters": iters, "rep": rep, "messages": messages,
                     "seconds": elapsed, "rate": messages / elapsed})
    return rows


# ---------------------------------------------------------------------------
# p2p latency / bandwidth


def _pattern(size):
    return bytes((i * 31 + 7) & 0xFF for i in range(size))


def _latency_initiator(comm, peer, size, rounds):
    data = _pattern(size)
    echo = bytearray(size)
    t0 = time.perf_counter()
    for _ in range(rounds):
        p2p.send(comm, data, size, BYTE, peer, 1)
        p2p.recv(comm, echo, size, BYTE, peer, 2)
    elapsed = time.perf_counter() - t0
    if bytes(echo) != data:
        raise TransportError("latency echo corrupted at %d bytes" % size)
    return elapsed / rounds / 2.0


def _latency_echo(comm, peer, size, rounds):
    data = _pattern(size)
    buf = bytearray(size)
    for _ in range(rounds):
        p2p.recv(comm, buf, size, BYTE, peer, 1)
        p2p.send(comm, buf, size, BYTE, peer, 2)
    if bytes(buf) != data:
        raise TransportError("latency payload corrupted at %d bytes" % size)


def _bw_sender(comm, peer, size, window):
    data = _pattern(size)
    crc = zlib.crc32(data) & 0xFFFFFFFF
    t0 = time.perf_counter()
    reqs = [p2p.isend(comm, data, size, BYTE, peer, 3)
            for _ in range(window)]
    waitall(reqs)
    ack = bytearray(4)
    p2p.recv(comm, ack, 4, BYTE, peer, 4)
    elapsed = time.perf_counter() - t0
    if struct.unpack("<I", bytes(ack))[0] != crc:
        raise TransportError("bandwidth checksum mismatch at %d bytes"
                             % size)
    return elapsed


def _bw_receiver(comm, peer, size, window):
    bufs = [bytearray(size) for _ in range(window)]
    reqs = [p2p.irecv(comm, b, size, BYTE, peer, 3) for b in bufs]
    waitall(reqs)
    crc = zlib.crc32(_pattern(size)) & 0xFFFFFFFF
    for b in bufs:
        if (zlib.crc32(b) & 0xFFFFFFFF) != crc:
            raise TransportError("bandwidth payload corrupted at %d bytes"
                                 % size)
    p2p.send(comm, struct.pack("<I", crc), 4, BYTE, peer, 4)


def _p2p_threadcomm(pattern, size, rounds, window, group):
    """Both endpoints are threads of one threadcomm in one instance."""
    inst = init(transport="inproc", rank=0, ranks=1, group=group)
    try:
        tc = threadcomm_init(inst.world, 2)
        result = {}
        errs = []

        def endpoint():
            try:
                r = tc.start()
                if pattern == "latency":
                    if r == 0:
                        result["value"] = _latency_initiator(tc, 1, size,
                                                             rounds)
                    else:
                        _latency_echo(tc, 0, size, rounds)
                else:
                    if r == 0:
                        result["value"] = _bw_sender(tc, 1, size, window)
                    else:
                        _bw_receiver(tc, 0, size, window)
                tc.finish()
            except BaseException as exc:
                errs.append(exc)

        ts = [threading.Thread(target=endpoint, daemon=True)
              for _ in range(2)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        if errs:
            raise errs[0]
        tc.free()
        return result["value"]
    finally:
        inst.finalize()


def _p2p_instances(pattern, size, rounds, window, group):
    if pattern == "latency":
        return _run_pair(
            group,
            lambda inst: _latency_initiator(inst.world, 1, size, rounds),
            lambda inst: _latency_echo(inst.world, 0, size, rounds))[0]
    return _run_pair(
        group,
        lambda inst: _bw_sender(inst.world, 1, size, window),
        lambda inst: _bw_receiver(inst.world, 0, size, window))[0]


def run_p2p(pattern, placement, sizes, reps=5, rounds=100,
            window=DEFAULT_WINDOW):
    """Returns rows [{pattern, placement, size, rep, metric}].

    metric is one-way latency in microseconds, or bandwidth in MB/s
    (window*size bytes over the measured interval).
    """
    if pattern not in ("latency", "bandwidth"):
        raise ArgError("pattern must be latency or bandwidth, got %r"
                       % (pattern,))
    if placement not in ("threadcomm", "instances"):
        raise ArgError("placement must be threadcomm or instances, got %r"
                       % (placement,))
    sizes = list(sizes)
    for s in sizes:
        if not isinstance(s, int) or isinstance(s, bool) or s < 0:
            raise ArgError("sizes must be nonnegative ints, got %r" % (s,))
    rows = []
    for size in sizes:
        for rep in range(reps):
            group = _fresh_group("p2p")
            if placement == "threadcomm":
                raw = _p2p_threadcomm(pattern, size, rounds, window, group)
            else:
                raw = _p2p_instances(pattern, size, rounds, window, group)
            if pattern == "latency":
                metric = raw * 1e6
            else:
                metric = (window * size) / raw / 1e6 if raw > 0 else 0.0
            rows.append({"pattern": pattern, "placement": placement,
                         "size": size, "rep": rep, "metric": metric})
    return rows


# ---------------------------------------------------------------------------
# progress-demo


_DEMO_WINDOW_BYTES = 256 * 1024
_DEMO_GETS = 8
_DEMO_GET_BYTES = 32 * 1024


def _demo_origin(inst, busy_seconds, reps):
    world = inst.world
    win = onesided.win_create(world, bytes(_DEMO_WINDOW_BYTES))
    expect = _pattern(256) * (_DEMO_GET_BYTES // 256)
    epochs = []
    for rep in range(reps):
        barrier(world)
        bufs = [bytearray(_DEMO_GET_BYTES) for _ in range(_DEMO_GETS)]
        t0 = time.perf_counter()
        win.lock(1)
        for i, buf in enumerate(bufs):
            win.get(buf, _DEMO_GET_BYTES, BYTE, 1,
                    i * _DEMO_GET_BYTES, _DEMO_GET_BYTES, BYTE)
        win.unlock(1)
        epochs.append(time.perf_counter() - t0)
        for buf in bufs:
            if bytes(buf) != expect:
                raise TransportError("one-sided read returned wrong bytes")
        p2p.send(world, b"done", 4, BYTE, 1, 9)
    win.free()
    return epochs


def _demo_target(inst, busy_seconds, reps, progress_mode):
    world = inst.world
    exposed = _pattern(256) * (_DEMO_WINDOW_BYTES // 256)
    win = onesided.win_create(world, exposed)
    if progress_mode == "thread":
        inst.start_progress_thread()
    done = bytearray(4)
    for rep in range(reps):
        barrier(world)
        if busy_seconds > 0:
            time.sleep(busy_seconds)   # busy phase: no progress calls
        # a blocking recv drives progress, so in "none" mode the reads
        # queued during the busy phase are serviced right here
        p2p.recv(world, done, 4, BYTE, 0, 9)
    if progress_mode == "thread":
        inst.stop_progress_thread()
    win.free()


def run_progress_demo(busy_seconds, progress, reps=5):
    """Returns rows [{progress, busy_seconds, rep, epoch_seconds}]."""
    if progress not in ("none", "thread"):
        raise ArgError("progress must be none or thread, got %r"
                       % (progress,))
    if not isinstance(busy_seconds, (int, float)) \
            or isinstance(busy_seconds, bool) or busy_seconds < 0:
        raise ArgError("busy-seconds must be nonnegative, got %r"
                       % (busy_seconds,))
    group = _fresh_group("demo")
    epochs = _run_pair(
        group,
        lambda inst: _demo_origin(inst, busy_seconds, reps),
        lambda inst: _demo_target(inst, busy_seconds, reps, progress))[0]
    return [{"progress": progress, "busy_seconds": busy_seconds, "rep": r,
             "epoch_seconds": e} for r, e in enumerate(epochs)]


# ---------------------------------------------------------------------------
# reporting


_SCHEMAS = {
    "msgrate": ("mode", "threads", "window", "iters", "rep", "messages",
                "seconds", "rate"),
    "p2p": ("pattern", "placement", "size", "rep", "metric"),
    "progress-demo": ("progress", "busy_seconds", "rep", "epoch_seconds"),
}


def emit_csv(kind, rows, file=None):
    file = sys.stdout if file is None else file
    cols = _SCHEMAS[kind]
    w = csv.writer(file)
    w.writerow(cols)
    for row in rows:
        w.writerow([row[c] for c in cols])


def summarize(kind, rows, file=None):
    file = sys.stderr if file is None else file
    if kind == "msgrate":
        r = rows[0]
        label = "msgrate mode=%s T=%d W=%d N=%d" % (
            r["mode"], r["threads"], r["window"], r["iters"])
        return _median_summary(label, [x["rate"] for x in rows], "msgs/s",
                               file)
    if kind == "p2p":
        meds = {}
        unit = "usec" if rows[0]["pattern"] == "latency" else "MB/s"
        for size in sorted({r["size"] for r in rows}):
            vals = [r["metric"] for r in rows if r["size"] == size]
            label = "p2p %s %s size=%d" % (rows[0]["pattern"],
                                           rows[0]["placement"], size)
            meds[size] = _median_summary(label, vals, unit, file)
        return meds
    r = rows[0]
    label = "progress-demo progress=%s busy=%gs" % (r["progress"],
                                                    r["busy_seconds"])
    return _median_summary(label, [x["epoch_seconds"] for x in rows], "s",
                           file)
