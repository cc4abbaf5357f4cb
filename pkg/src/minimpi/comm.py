"""Communicators.

Four kinds share one wire protocol and differ only in how operations are
routed onto virtual communication interfaces:

* conventional     -- classic ranked communicator, implicit shared VCIs
* stream_single    -- each rank optionally drives one serial stream whose
                      private VCI carries all of that rank's traffic
* stream_multiplex -- each rank exposes several streams; every operation
                      names an explicit (src_idx, dst_idx) stream pair
* threadcomm       -- ranks are threads; each local thread slot owns a
                      private VCI, and same-process peers exchange through
                      inbox cells instead of the wire

Every communicator owns two context ids: an even one for point-to-point
traffic and the next odd one for internal collective traffic, so user
messages can never match against barrier or reduction chatter.
"""

import bisect
import struct
import threading

from . import p2p
from .datatype import BYTE, FLOAT64, INT64, pack, unpack
from .errors import (ArgError, ExhaustedError, PendingError, StateError,
                     TransportError)
from .progress import wait, waitall
from .stream import DEVICE_QUEUE, NULL_STREAM, Stream
from .transport import ANY

CONVENTIONAL = "conventional"
STREAM_SINGLE = "stream_single"
STREAM_MULTIPLEX = "stream_multiplex"
THREADCOMM = "threadcomm"

SUM = "sum"

# Internal tag lanes.  These live on the odd collective context of each
# communicator, so they can never collide with user point-to-point tags.
_TAG_BARRIER = 1 << 28
_TAG_REDUCE = (1 << 28) + 256
_TAG_BCAST = (1 << 28) + 257
_TAG_XCHG = (1 << 28) + 512


def _check_rank(name, value, size):
    if not isinstance(value, int) or isinstance(value, bool) \
            or not 0 <= value < size:
        raise ArgError("%s %r out of range for size-%d communicator"
                       % (name, value, size))


def _check_source(value, size):
    if value == ANY:
        return
    _check_rank("source", value, size)


class Communicator:
    """Conventional communicator; base class for the other kinds.

    Routing contract used by the p2p layer:

    ``_send_route(dest, src_idx, dst_idx, coll)`` returns
    ``(vci, ctx, src_logical, dst_logical, to_proc, sidx, didx,
    local_vci)`` where local_vci is non-None only when the destination is
    a thread on this same process.

    ``_recv_route(source, src_idx, dst_idx, coll)`` returns
    ``(vci, ctx, pattern_src, pattern_sidx, pattern_didx)``.
    """

    kind = CONVENTIONAL

    def __init__(self, instance, context_id, rank, size):
        self.instance = instance
        self.context_id = context_id
        self.coll_context_id = context_id + 1
        self._rank = rank
        self.size = size
        self.freed = False
        self.live = set()          # outstanding requests scoped to this comm
        self.local_streams = []
        self._device_queue = None

    def __repr__(self):
        return "<%s kind=%s ctx=%d rank=%d/%d>" % (
            type(self).__name__, self.kind, self.context_id, self._rank,
            self.size)

    @property
    def rank(self):
        return self._rank

    def _check_live(self):
        if self.freed:
            raise StateError("communicator already freed")

    # ---- routing -------------------------------------------------------

    def _vci_for_frame(self, frame):
        return self.instance.pool.implicit_for(frame.context_id)

    def _send_route(self, dest, src_idx, dst_idx, coll):
        if src_idx is not None:
            raise ArgError(
                "stream_send needs a stream-multiplex communicator")
        self._check_live()
        _check_rank("dest", dest, self.size)
        ctx = self.coll_context_id if coll else self.context_id
        return (self.instance.pool.implicit_for(ctx), ctx, self._rank, dest,
                dest, -1, -1, None)

    def _recv_route(self, source, src_idx, dst_idx, coll):
        if src_idx is not None:
            raise ArgError(
                "stream_recv needs a stream-multiplex communicator")
        self._check_live()
        _check_source(source, self.size)
        ctx = self.coll_context_id if coll else self.context_id
        return (self.instance.pool.implicit_for(ctx), ctx, source, ANY, -1)

    # ---- point-to-point surface ----------------------------------------

    # p2p's public entries handle the device-queue redirect, so user
    # traffic enqueues no matter which surface it came through

    def send(self, buf, count, dtype, dest, tag):
        return p2p.send(self, buf, count, dtype, dest, tag)

    def recv(self, buf, count, dtype, source=ANY, tag=ANY):
        return p2p.recv(self, buf, count, dtype, source, tag)

    def isend(self, buf, count, dtype, dest, tag):
        return p2p.isend(self, buf, count, dtype, dest, tag)

    def irecv(self, buf, count, dtype, source=ANY, tag=ANY):
        return p2p.irecv(self, buf, count, dtype, source, tag)

    def stream_send(self, buf, count, dtype, dest, tag, src_idx, dst_idx):
        return p2p.stream_send(self, buf, count, dtype, dest, tag,
                               src_idx, dst_idx)

    def stream_recv(self, buf, count, dtype, source, tag, src_idx, dst_idx):
        return p2p.stream_recv(self, buf, count, dtype, source, tag,
                               src_idx, dst_idx)

    def stream_isend(self, buf, count, dtype, dest, tag, src_idx, dst_idx):
        return p2p.stream_isend(self, buf, count, dtype, dest, tag,
                                src_idx, dst_idx)

    def stream_irecv(self, buf, count, dtype, source, tag, src_idx, dst_idx):
        return p2p.stream_irecv(self, buf, count, dtype, source, tag,
                                src_idx, dst_idx)

    # ---- collectives ----------------------------------------------------

    def barrier(self):
        return barrier(self)

    def allreduce(self, sendbuf, recvbuf, count, dtype, op=SUM):
        return allreduce(self, sendbuf, recvbuf, count, dtype, op)

    # ---- lifecycle -------------------------------------------------------

    def dup(self):
        self._check_live()
        if self.kind != CONVENTIONAL:
            raise ArgError("comm_dup requires a conventional communicator")
        ctx = _agree_context(self)
        child = Communicator(self.instance, ctx, self._rank, self.size)
        self.instance.contexts[ctx] = child
        self.instance.contexts[ctx + 1] = child
        barrier(self)
        return child

    def free(self):
        self._check_live()
        if self.context_id == 0:
            raise ArgError("cannot free the world communicator")
        if self.live:
            raise PendingError("communicator has %d outstanding operations"
                               % len(self.live))
        self.freed = True
        self.instance.contexts.pop(self.context_id, None)
        self.instance.contexts.pop(self.coll_context_id, None)
        for s in self.local_streams:
            s.attach_count -= 1
        self.local_streams = []

    def get_stream(self, idx):
        self._check_live()
        if not isinstance(idx, int) or isinstance(idx, bool):
            raise ArgError("stream index must be an int, got %r" % (idx,))
        if idx != 0:
            raise ArgError("communicator exposes a single stream slot, "
                           "index %d is invalid" % idx)
        return NULL_STREAM

    def is_threadcomm(self):
        return self.kind == THREADCOMM


class StreamSingleComm(Communicator):
    """Communicator where each rank optionally drives one stream.

    ``attached[r]`` records whether rank r bound a stream at creation.
    Frames stamp dst_stream_idx = 0 toward attached ranks and -1 toward
    unattached ones, so a fully NULL-stream creation behaves exactly like
    a dup of the parent.
    """

    kind = STREAM_SINGLE

    def __init__(self, instance, context_id, rank, size, local_stream,
                 attached):
        super().__init__(instance, context_id, rank, size)
        self.local_stream = local_stream
        self.attached = attached

    def _local_vci(self, ctx):
        if self.local_stream is not None:
            return self.local_stream.vci
        return self.instance.pool.implicit_for(ctx)

    def _vci_for_frame(self, frame):
        if self.local_stream is not None:
            return self.local_stream.vci
        return self.instance.pool.implicit_for(frame.context_id)

    def _send_route(self, dest, src_idx, dst_idx, coll):
        if src_idx is not None:
            raise ArgError(
                "stream_send needs a stream-multiplex communicator")
        self._check_live()
        _check_rank("dest", dest, self.size)
        ctx = self.coll_context_id if coll else self.context_id
        sidx = 0 if self.local_stream is not None else -1
        didx = 0 if self.attached[dest] else -1
        return (self._local_vci(ctx), ctx, self._rank, dest, dest,
                sidx, didx, None)

    def _recv_route(self, source, src_idx, dst_idx, coll):
        if src_idx is not None:
            raise ArgError(
                "stream_recv needs a stream-multiplex communicator")
        self._check_live()
        _check_source(source, self.size)
        ctx = self.coll_context_id if coll else self.context_id
        didx = 0 if self.local_stream is not None else -1
        return (self._local_vci(ctx), ctx, source, ANY, didx)

    def get_stream(self, idx):
        self._check_live()
        if not isinstance(idx, int) or isinstance(idx, bool) or idx != 0:
            raise ArgError("single-stream communicator exposes only "
                           "index 0, got %r" % (idx,))
        if self.local_stream is None:
            return NULL_STREAM
        return self.local_stream


class MultiplexComm(Communicator):
    """Communicator with several streams per rank and explicit addressing."""

    kind = STREAM_MULTIPLEX

    def __init__(self, instance, context_id, rank, size, streams, counts):
        super().__init__(instance, context_id, rank, size)
        self.local_streams = list(streams)
        self.remote_counts = counts

    def _vci_for_frame(self, frame):
        idx = frame.dst_stream_idx
        if not 0 <= idx < len(self.local_streams):
            raise TransportError(
                "protocol violation: dst stream index %d out of range "
                "for context %d" % (idx, frame.context_id))
        return self.local_streams[idx].vci

    def _send_route(self, dest, src_idx, dst_idx, coll):
        self._check_live()
        if coll:
            raise ArgError("collectives are not defined on stream-multiplex "
                           "communicators")
        if src_idx is None:
            raise ArgError("plain send/recv is invalid on a stream-multiplex "
                           "communicator; use the stream_ variants")
        _check_rank("dest", dest, self.size)
        if not 0 <= src_idx < len(self.local_streams):
            raise ArgError("src_idx %d out of range (%d local streams)"
                           % (src_idx, len(self.local_streams)))
        if not 0 <= dst_idx < self.remote_counts[dest]:
            raise ArgError("dst_idx %d out of range (rank %d has %d streams)"
                           % (dst_idx, dest, self.remote_counts[dest]))
        return (self.local_streams[src_idx].vci, self.context_id, self._rank,
                dest, dest, src_idx, dst_idx, None)

    def _recv_route(self, source, src_idx, dst_idx, coll):
        self._check_live()
        if coll:
            raise ArgError("collectives are not defined on stream-multiplex "
                           "communicators")
        if src_idx is None:
            raise ArgError("plain send/recv is invalid on a stream-multiplex "
                           "communicator; use the stream_ variants")
        _check_source(source, self.size)
        if dst_idx is None or not 0 <= dst_idx < len(self.local_streams):
            raise ArgError("dst_idx %r out of range (%d local streams)"
                           % (dst_idx, len(self.local_streams)))
        if source != ANY and src_idx != ANY \
                and not 0 <= src_idx < self.remote_counts[source]:
            raise ArgError("src_idx %d out of range (rank %d has %d streams)"
                           % (src_idx, source, self.remote_counts[source]))
        return (self.local_streams[dst_idx].vci, self.context_id, source,
                src_idx, dst_idx)

    def get_stream(self, idx):
        self._check_live()
        if not isinstance(idx, int) or isinstance(idx, bool) \
                or not 0 <= idx < len(self.local_streams):
            raise ArgError("stream index %r out of range (%d local streams)"
                           % (idx, len(self.local_streams)))
        return self.local_streams[idx]


class ThreadComm(Communicator):
    """Communicator whose ranks are threads.

    Each participating process contributes counts[p] thread slots; global
    thread rank = starts[p] + local slot, slots assigned in arrival order
    at start().  Each slot owns a private lock-free VCI.  start/finish
    bracket an activation cycle; finish is a barrier across the local
    threads and the last one out resets the cycle.
    """

    kind = THREADCOMM

    def __init__(self, instance, context_id, parent, counts):
        total = sum(counts)
        super().__init__(instance, context_id, parent.rank, total)
        self.proc_rank = parent.rank
        self.nprocs = parent.size
        self.counts = list(counts)
        starts = [0]
        for c in counts[:-1]:
            starts.append(starts[-1] + c)
        self.starts = starts
        self.base = starts[parent.rank]
        self.nlocal = counts[parent.rank]
        self.activation_count = 0
        self.active = False
        self._cond = threading.Condition()
        self._arrived = 0
        self._finishing = 0
        self._gen = 0
        self._thread_slots = {}
        self._finished = set()
        self.slot_vcis = []
        try:
            for _ in range(self.nlocal):
                self.slot_vcis.append(instance.pool.alloc())
        except ExhaustedError:
            for v in self.slot_vcis:
                instance.pool.release(v)
            raise

    @property
    def rank(self):
        return self._thread_rank()

    def _thread_rank(self):
        # lock-free: slot table only mutates while active is False, and
        # the threads that could race are all parked in start/finish then
        if not self.active:
            raise StateError(
                "threadcomm is not active (call start() on every local "
                "thread first)")
        slot = self._thread_slots.get(threading.get_ident())
        if slot is None:
            raise StateError(
                "calling thread never joined this threadcomm cycle")
        return self.base + slot

    def start(self):
        """Join the current activation cycle; blocks until all local
        threads have arrived.  Returns this thread's global rank."""
        with self._cond:
            self._check_live()
            ident = threading.get_ident()
            if ident in self._thread_slots:
                raise StateError("thread already started on this threadcomm")
            if self._arrived >= self.nlocal:
                raise StateError(
                    "threadcomm already has %d started threads"
                    % self.nlocal)
            slot = self._arrived
            self._thread_slots[ident] = slot
            self._arrived += 1
            if self._arrived == self.nlocal:
                self.active = True
                self.activation_count += 1
                self._cond.notify_all()
            else:
                while not self.active:
                    self._cond.wait()
        return self.base + slot

    def finish(self):
        """Leave the cycle; blocks until all local threads have finished.
        The last one out deactivates the communicator and resets slots."""
        with self._cond:
            if not self.active:
                raise StateError("threadcomm is not active")
            ident = threading.get_ident()
            if ident not in self._thread_slots:
                raise StateError(
                    "calling thread never started on this threadcomm")
            if ident in self._finished:
                raise StateError("thread already finished this cycle")
            self._finished.add(ident)
            self._finishing += 1
            if self._finishing == self.nlocal:
                self.active = False
                self._arrived = 0
                self._finishing = 0
                self._thread_slots.clear()
                self._finished.clear()
                self._gen += 1
                self._cond.notify_all()
            else:
                gen = self._gen
                while self._gen == gen:
                    self._cond.wait()

    def free(self):
        if self.active:
            raise StateError("threadcomm is still active; every local "
                             "thread must finish() first")
        super().free()
        for v in self.slot_vcis:
            self.instance.pool.release(v)
        self.slot_vcis = []

    def _vci_for_frame(self, frame):
        idx = frame.dst_stream_idx
        if not 0 <= idx < self.nlocal:
            raise TransportError(
                "protocol violation: thread slot %d out of range "
                "for context %d" % (idx, frame.context_id))
        return self.slot_vcis[idx]

    def _send_route(self, dest, src_idx, dst_idx, coll):
        if src_idx is not None:
            raise ArgError(
                "stream_send needs a stream-multiplex communicator")
        self._check_live()
        me = self._thread_rank()
        _check_rank("dest", dest, self.size)
        proc = bisect.bisect_right(self.starts, dest) - 1
        slot = dest - self.starts[proc]
        myslot = me - self.base
        ctx = self.coll_context_id if coll else self.context_id
        svci = self.slot_vcis[myslot]
        if proc == self.proc_rank:
            return (svci, ctx, me, dest, proc, myslot, slot,
                    self.slot_vcis[slot])
        return (svci, ctx, me, dest, proc, myslot, slot, None)

    def _recv_route(self, source, src_idx, dst_idx, coll):
        if src_idx is not None:
            raise ArgError(
                "stream_recv needs a stream-multiplex communicator")
        self._check_live()
        me = self._thread_rank()
        myslot = me - self.base
        if source == ANY:
            pat_src, pat_sidx = ANY, ANY
        else:
            _check_rank("source", source, self.size)
            proc = bisect.bisect_right(self.starts, source) - 1
            pat_src, pat_sidx = source, source - self.starts[proc]
        ctx = self.coll_context_id if coll else self.context_id
        return (self.slot_vcis[myslot], ctx, pat_src, pat_sidx, myslot)


# ---- internal creation collectives --------------------------------------


def _allgather_i64(comm, values):
    """Collect one fixed-width tuple of int64s from every rank of comm,
    over its collective context.  Returns a list indexed by rank."""
    values = tuple(values)
    n = len(values)
    size = comm.size
    me = comm.rank
    out = [None] * size
    out[me] = values
    if size == 1:
        return out
    payload = struct.pack("<%dq" % n, *values)
    bufs = {}
    reqs = []
    for peer in range(size):
        if peer == me:
            continue
        b = bytearray(8 * n)
        bufs[peer] = b
        reqs.append(p2p.irecv(comm, b, n, INT64, peer, _TAG_XCHG, coll=True))
    for peer in range(size):
        if peer == me:
            continue
        reqs.append(p2p.isend(comm, payload, n, INT64, peer, _TAG_XCHG,
                              coll=True))
    waitall(reqs)
    for peer, b in bufs.items():
        out[peer] = struct.unpack("<%dq" % n, bytes(b))
    return out


def _agree_context(parent):
    """Pick the pt2pt context id for a new communicator: every rank
    proposes its next free id, everyone adopts the max.  Keeps context
    spaces aligned even when ranks created different comms locally."""
    inst = parent.instance
    rows = _allgather_i64(parent, (inst.next_context_id,))
    agreed = max(r[0] for r in rows)
    inst.next_context_id = agreed + 2
    return agreed


# ---- collectives ----------------------------------------------------------


def barrier(comm):
    """Dissemination barrier on comm's collective context."""
    comm._check_live()
    if comm.kind == STREAM_MULTIPLEX:
        raise ArgError("collectives are not defined on stream-multiplex "
                       "communicators")
    size = comm.size
    if size <= 1:
        return
    rank = comm.rank
    sink = bytearray(0)
    k = 1
    rnd = 0
    while k < size:
        dst = (rank + k) % size
        src = (rank - k) % size
        req = p2p.isend(comm, b"", 0, BYTE, dst, _TAG_BARRIER + rnd,
                        coll=True)
        p2p.recv(comm, sink, 0, BYTE, src, _TAG_BARRIER + rnd, coll=True)
        wait(req)
        k <<= 1
        rnd += 1


def allreduce(comm, sendbuf, recvbuf, count, dtype, op=SUM):
    """Elementwise reduction to every rank: linear gather onto rank 0
    followed by a linear broadcast.  SUM over INT64/FLOAT64 only."""
    comm._check_live()
    if comm.kind == STREAM_MULTIPLEX:
        raise ArgError("collectives are not defined on stream-multiplex "
                       "communicators")
    if op != SUM:
        raise ArgError("unsupported reduction op %r (only SUM)" % (op,))
    if dtype is not INT64 and dtype is not FLOAT64:
        raise ArgError("allreduce supports INT64 and FLOAT64, got %s"
                       % (dtype,))
    p2p._check_count(count)
    if count == 0:
        return
    fmt = "<%d%s" % (count, "q" if dtype is INT64 else "d")
    mine = pack(dtype, sendbuf, count)
    size = comm.size
    rank = comm.rank
    if size == 1:
        unpack(dtype, mine, recvbuf, count)
        return
    if rank == 0:
        acc = list(struct.unpack(fmt, mine))
        tmp = bytearray(count * 8)
        for src in range(1, size):
            p2p.recv(comm, tmp, count, dtype, src, _TAG_REDUCE, coll=True)
            for i, v in enumerate(struct.unpack(fmt, bytes(tmp))):
                acc[i] += v
        out = struct.pack(fmt, *acc)
        for dst in range(1, size):
            p2p.send(comm, out, count, dtype, dst, _TAG_BCAST, coll=True)
        unpack(dtype, out, recvbuf, count)
    else:
        p2p.send(comm, mine, count, dtype, 0, _TAG_REDUCE, coll=True)
        p2p.recv(comm, recvbuf, count, dtype, 0, _TAG_BCAST, coll=True)


# ---- creation / lifecycle functions ---------------------------------------


def comm_dup(comm):
    return comm.dup()


def comm_free(comm):
    return comm.free()


def comm_get_stream(comm, idx):
    return comm.get_stream(idx)


def comm_test_threadcomm(comm):
    if not isinstance(comm, Communicator):
        raise ArgError("expected a communicator, got %r" % (comm,))
    return comm.kind == THREADCOMM


def stream_comm_create(parent, stream):
    """Collective: derive a single-stream communicator from parent.

    Each rank passes its own stream or NULL_STREAM; attachment flags are
    exchanged so senders can stamp the right destination stream index.
    """
    parent._check_live()
    if parent.kind != CONVENTIONAL:
        raise ArgError("stream communicators derive from conventional ones")
    if stream is not NULL_STREAM:
        if not isinstance(stream, Stream):
            raise ArgError("expected a stream or NULL_STREAM, got %r"
                           % (stream,))
        if stream.freed:
            raise PendingError("stream is being freed")
    mine = 0 if stream is NULL_STREAM else 1
    flags = [bool(r[0]) for r in _allgather_i64(parent, (mine,))]
    ctx = _agree_context(parent)
    local = None if stream is NULL_STREAM else stream
    child = StreamSingleComm(parent.instance, ctx, parent.rank, parent.size,
                             local, flags)
    parent.instance.contexts[ctx] = child
    parent.instance.contexts[ctx + 1] = child
    if local is not None:
        local.attach_count += 1
        child.local_streams = [local]
        if local.kind == DEVICE_QUEUE:
            child._device_queue = local.device
    barrier(parent)
    return child


def stream_comm_create_multiplex(parent, streams):
    """Collective: derive a multiplex communicator where this rank exposes
    the given streams as slots 0..len(streams)-1.  Stream counts are
    exchanged so senders can validate destination indexes locally."""
    parent._check_live()
    if parent.kind != CONVENTIONAL:
        raise ArgError("stream communicators derive from conventional ones")
    streams = list(streams)
    if not streams:
        raise ArgError("multiplex creation needs at least one stream")
    for s in streams:
        if s is NULL_STREAM:
            raise ArgError("NULL_STREAM cannot back a multiplex slot")
        if not isinstance(s, Stream):
            raise ArgError("expected a stream, got %r" % (s,))
        if s.freed:
            raise PendingError("stream is being freed")
    counts = [r[0] for r in _allgather_i64(parent, (len(streams),))]
    ctx = _agree_context(parent)
    child = MultiplexComm(parent.instance, ctx, parent.rank, parent.size,
                          streams, counts)
    parent.instance.contexts[ctx] = child
    parent.instance.contexts[ctx + 1] = child
    for s in streams:
        s.attach_count += 1
    barrier(parent)
    return child


def threadcomm_init(parent, num_threads):
    """Collective: create a threadcomm where this process contributes
    num_threads thread slots.  The communicator starts inactive."""
    parent._check_live()
    if parent.kind != CONVENTIONAL:
        raise ArgError("threadcomms derive from conventional communicators")
    if not isinstance(num_threads, int) or isinstance(num_threads, bool) \
            or num_threads < 1:
        raise ArgError("num_threads must be a positive int, got %r"
                       % (num_threads,))
    counts = [r[0] for r in _allgather_i64(parent, (num_threads,))]
    ctx = _agree_context(parent)
    tc = ThreadComm(parent.instance, ctx, parent, counts)
    parent.instance.contexts[ctx] = tc
    parent.instance.contexts[ctx + 1] = tc
    barrier(parent)
    return tc


def threadcomm_start(tc):
    return tc.start()


def threadcomm_finish(tc):
    return tc.finish()


def threadcomm_free(tc):
    return tc.free()
